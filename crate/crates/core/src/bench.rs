//! Wall-clock and work-counter measurements of the attention kernels.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::attention::{multi_head_forward, AttentionMode, Mask, MeaConfig, MultiHeadSpec};
use crate::distilling::{DistillConfig, Distiller};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const WARMUPS: usize = 2;
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Maximum-entropy attention over distilled keys/values.
    Mea,
    /// Full softmax attention over undistilled keys/values.
    Dense,
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mea" => Ok(BenchMode::Mea),
            "dense" => Ok(BenchMode::Dense),
            other => Err(Error::Config(format!("unknown bench mode '{other}' (mea|dense)"))),
        }
    }
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMode::Mea => "mea",
            BenchMode::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "L")]
    pub l: usize,
    pub mode: BenchMode,
    /// Median seconds per forward.
    pub wall_time: f64,
    pub peak_bytes: usize,
    /// Query-key dot products of one forward.
    pub dot_product_rows: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub mode: BenchMode,
    pub records: Vec<BenchRecord>,
    /// Least-squares slope of `ln(wall_time)` against `ln(L)`.
    pub slope: Option<f64>,
}

impl ScalingReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("L,mode,wall_time,peak_bytes,dot_product_rows,error\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:e},{},{},{}\n",
                r.l,
                r.mode,
                r.wall_time,
                r.peak_bytes,
                r.dot_product_rows,
                r.error.as_deref().unwrap_or("")
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub d_model: usize,
    pub repeats: usize,
    pub mea: MeaConfig,
    pub distill: DistillConfig,
    /// Dense runs whose score matrices would exceed this are recorded as
    /// failures instead of being attempted.
    pub max_dense_bytes: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            d_model: 64,
            repeats: MIN_REPEATS,
            mea: MeaConfig::default(),
            distill: DistillConfig::default(),
            max_dense_bytes: 1 << 30,
            seed: 0,
        }
    }
}

/// Median of `repeats` timed calls after [`WARMUPS`] untimed ones.
pub fn median_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    for _ in 0..WARMUPS {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed().as_secs_f64());
        last = Some(out);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    Ok((median, last.expect("at least one repeat")))
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Prepared inputs of one benchmark length.
struct Case {
    x: Tensor,
    store: ParamStore,
    k: Distiller,
    v: Distiller,
}

fn forward_once(case: &Case, mode: BenchMode, heads: usize, mea: &MeaConfig) -> Result<u64> {
    let d = case.x.shape()[1];
    let (k, v, attn) = match mode {
        BenchMode::Mea => (
            case.k.apply(&case.store, &case.x)?,
            case.v.apply(&case.store, &case.x)?,
            AttentionMode::Mea(mea.clone()),
        ),
        BenchMode::Dense => {
            let split = split_heads(&case.x, heads)?;
            (split.clone(), split, AttentionMode::Dense)
        }
    };
    let spec = MultiHeadSpec {
        heads,
        mode: attn,
        mask: Mask::None,
    };
    debug_assert_eq!(d % heads, 0);
    let (_, tape) = multi_head_forward(&case.x, &k, &v, &spec)?;
    Ok(tape.dot_products())
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (l, d) = x.dims2("split_heads")?;
    let dh = d / heads;
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for h in 0..heads {
            out[(h * l + i) * dh..(h * l + i + 1) * dh].copy_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
        }
    }
    Tensor::new(&[heads, l, dh], out)
}

/// One attention forward per length; lengths must ascend and number at least 4.
pub fn bench_scaling(lengths: &[usize], mode: BenchMode, settings: &BenchSettings) -> Result<ScalingReport> {
    if lengths.len() < 4 {
        return Err(Error::Config(format!("at least 4 lengths are required, got {}", lengths.len())));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config("lengths must be positive and strictly ascending".into()));
    }
    let d = settings.d_model;
    settings.distill.validate(d)?;
    let heads = settings.distill.heads();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut records = Vec::new();
    for &l in lengths {
        let score_bytes = heads * l * l * std::mem::size_of::<f64>();
        if mode == BenchMode::Dense && score_bytes > settings.max_dense_bytes {
            records.push(BenchRecord {
                l,
                mode,
                wall_time: f64::NAN,
                peak_bytes: 0,
                dot_product_rows: 0,
                error: Some(format!("out of memory: {score_bytes} bytes of scores exceed the budget")),
            });
            continue;
        }
        let mut store = ParamStore::new();
        let k = Distiller::new("bench.k", d, settings.distill.clone())?;
        let v = Distiller::new("bench.v", d, settings.distill.clone())?;
        k.init(&mut store, &mut rng);
        v.init(&mut store, &mut rng);
        let case = Case {
            x: random(&[l, d], &mut rng),
            store,
            k,
            v,
        };
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let (wall_time, dots) = median_time(settings.repeats.max(MIN_REPEATS), || {
            forward_once(&case, mode, heads, &settings.mea)
        })?;
        records.push(BenchRecord {
            l,
            mode,
            wall_time,
            peak_bytes: alloc::peak_bytes().saturating_sub(base),
            dot_product_rows: dots,
            error: None,
        });
    }
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.error.is_none())
        .map(|r| (r.l as f64, r.wall_time))
        .collect();
    Ok(ScalingReport {
        mode,
        slope: loglog_slope(&pts),
        records,
    })
}
