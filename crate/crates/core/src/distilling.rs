//! Keys/values distilling: three Conv2d → ReLU → MaxPool2d stages that shrink
//! time by `l` and features by `h` per stage while multiplying channels (heads)
//! by `h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MeaConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const STAGES: usize = 3;
pub const KERNEL: (usize, usize) = (2, 2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Time pool factor per stage. `None` derives it from the input length
    /// with [`compute_l`].
    #[serde(default)]
    pub l: Option<usize>,
    /// Feature pool factor and channel multiplier per stage.
    pub h: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            l: None,
            h: 2,
            bias: true,
        }
    }
}

impl DistillConfig {
    pub fn heads(&self) -> usize {
        self.h.pow(STAGES as u32)
    }

    pub fn time_factor(&self, l_x: usize) -> usize {
        self.l.unwrap_or_else(|| compute_l(l_x))
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.h == 0 {
            return Err(Error::Config("distilling factor h must be at least 1".into()));
        }
        if self.l == Some(0) {
            return Err(Error::Config("distilling factor l must be at least 1".into()));
        }
        let div = self.heads();
        if d_model % div != 0 {
            return Err(Error::Config(format!(
                "d_model = {d_model} must be divisible by h^3 = {div}"
            )));
        }
        Ok(())
    }

    /// `(time, feature)` extents after each stage.
    pub fn stage_extents(&self, l_x: usize, d_model: usize) -> Vec<(usize, usize)> {
        let l = self.time_factor(l_x);
        let mut t = l_x;
        let mut f = d_model;
        (0..STAGES)
            .map(|_| {
                t = t.div_ceil(l);
                f /= self.h;
                (t, f)
            })
            .collect()
    }
}

/// `max(1, round(L_X^{1/6}))`.
pub fn compute_l(l_x: usize) -> usize {
    ((l_x.max(1) as f64).powf(1.0 / 6.0).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledKV {
    /// `[heads, L_K, d_head]`
    pub keys: Tensor,
    /// `[heads, L_V, d_head]`
    pub values: Tensor,
}

impl DistilledKV {
    pub fn heads(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_head(&self) -> usize {
        self.keys.shape()[2]
    }
}

/// One distilling pipeline (either the key or the value branch).
#[derive(Debug, Clone)]
pub struct Distiller {
    pub prefix: String,
    pub d_model: usize,
    pub cfg: DistillConfig,
}

impl Distiller {
    pub fn new(prefix: &str, d_model: usize, cfg: DistillConfig) -> Result<Self> {
        cfg.validate(d_model)?;
        Ok(Self {
            prefix: prefix.to_string(),
            d_model,
            cfg,
        })
    }

    fn name(&self, stage: usize, part: &str) -> String {
        format!("{}.s{stage}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let mut cin = 1;
        for s in 0..STAGES {
            let cout = cin * self.cfg.h;
            let fan = cin * KERNEL.0 * KERNEL.1;
            store.uniform(&self.name(s, "w"), &[cout, cin, KERNEL.0, KERNEL.1], (6.0 / fan as f64).sqrt(), rng);
            if self.cfg.bias {
                store.zeros(&self.name(s, "b"), &[cout]);
            }
            cin = cout;
        }
    }

    /// `[L_X, d_model]` to `[h³, ⌈…⌈L_X/l⌉…/l⌉, d_model/h³]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (l_x, d) = g.value(x).dims2("distill")?;
        if d != self.d_model {
            return Err(Error::shape("distill", format!("width {d}, expected {}", self.d_model)));
        }
        let l = self.cfg.time_factor(l_x);
        let h = self.cfg.h;
        let mut cur = g.split_heads(x, 1)?;
        for s in 0..STAGES {
            let padded = g.pad_edge_2d(cur, 0, KERNEL.0 - 1, 0, KERNEL.1 - 1)?;
            let w = g.param(store, &self.name(s, "w"))?;
            let b = if self.cfg.bias {
                Some(g.param(store, &self.name(s, "b"))?)
            } else {
                None
            };
            let conv = g.conv2d(padded, w, b)?;
            let act = g.relu(conv)?;
            let t = g.value(act).shape()[1];
            let extra = t.div_ceil(l) * l - t;
            let act = if extra > 0 {
                g.pad_edge_2d(act, 0, extra, 0, 0)?
            } else {
                act
            };
            cur = g.maxpool2d(act, l, h)?;
        }
        Ok(cur)
    }

    /// Gradient-free forward on a plain array.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Run the key and value pipelines stored under `{prefix}.k` / `{prefix}.v`.
pub fn distill_kv(x: &Tensor, cfg: &DistillConfig, store: &ParamStore, prefix: &str) -> Result<DistilledKV> {
    let (_, d) = x.dims2("distill_kv")?;
    let keys = Distiller::new(&format!("{prefix}.k"), d, cfg.clone())?.apply(store, x)?;
    let values = Distiller::new(&format!("{prefix}.v"), d, cfg.clone())?.apply(store, x)?;
    Ok(DistilledKV { keys, values })
}

/// Analytic per-head dot-product budget of MEA over distilled keys.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityPlan {
    /// `c·√L_Q·√L_X`, the exact-row term.
    pub exact_rows: f64,
    /// `U·L_Q`, the sampling pass.
    pub sampling: f64,
}

impl ComplexityPlan {
    pub fn total(&self) -> f64 {
        self.exact_rows + self.sampling
    }
}

pub fn complexity_plan(l_q: usize, l_x: usize, cfg: &DistillConfig, mea: &MeaConfig) -> Result<ComplexityPlan> {
    let l_k = cfg.stage_extents(l_x, cfg.heads()).last().map_or(l_x, |e| e.0);
    let u_keys = mea.key_budget(l_k)?;
    Ok(ComplexityPlan {
        exact_rows: mea.c * (l_q as f64).sqrt() * (l_x as f64).sqrt(),
        sampling: (u_keys * l_q) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_model: usize, cfg: &DistillConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for p in ["kv.k", "kv.v"] {
            Distiller::new(p, d_model, cfg.clone()).unwrap().init(&mut store, &mut rng);
        }
        store
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn compute_l_examples() {
        assert_eq!(compute_l(729), 3);
        assert_eq!(compute_l(64), 2);
        assert_eq!(compute_l(784), 3);
        assert_eq!(compute_l(1), 1);
        assert_eq!(compute_l(0), 1);
    }

    #[test]
    fn shape_law_on_perfect_sixth_power() {
        let cfg = DistillConfig { l: Some(3), h: 2, bias: true };
        let store = setup(512, &cfg, 1);
        let kv = distill_kv(&random(&[729, 512], 2), &cfg, &store, "kv").unwrap();
        assert_eq!(kv.keys.shape(), &[8, 27, 64]);
        assert_eq!(kv.values.shape(), &[8, 27, 64]);
    }

    #[test]
    fn padded_pipeline_length() {
        let cfg = DistillConfig { l: Some(3), h: 2, bias: true };
        assert_eq!(
            cfg.stage_extents(784, 64),
            vec![(262, 32), (88, 16), (30, 8)]
        );
        let store = setup(64, &cfg, 3);
        let kv = distill_kv(&random(&[784, 64], 4), &cfg, &store, "kv").unwrap();
        assert_eq!(kv.keys.shape(), &[8, 30, 8]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = DistillConfig { l: Some(2), h: 2, bias: true };
        let mut store = setup(16, &cfg, 5);
        store.zero_all();
        let kv = distill_kv(&random(&[20, 16], 6), &cfg, &store, "kv").unwrap();
        assert_eq!(kv.keys.shape(), &[8, 3, 2]);
        assert!(kv.keys.data().iter().chain(kv.values.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_width() {
        let err = Distiller::new("x", 20, DistillConfig::default()).unwrap_err();
        assert!(err.to_string().contains("h^3 = 8"), "{err}");
    }

    #[test]
    fn outputs_are_nonnegative_and_positively_homogeneous() {
        let cfg = DistillConfig { l: Some(2), h: 2, bias: false };
        let store = setup(16, &cfg, 7);
        let x = random(&[24, 16], 8);
        let kv = distill_kv(&x, &cfg, &store, "kv").unwrap();
        assert!(kv.keys.data().iter().all(|&v| v >= 0.0));
        let scaled = distill_kv(&x.map(|v| 2.5 * v), &cfg, &store, "kv").unwrap();
        assert!(scaled.keys.max_abs_diff(&kv.keys.map(|v| 2.5 * v)) < 1e-12);
    }

    /// Single-channel, single-stage reference built from scalar loops.
    #[test]
    fn first_stage_matches_scalar_reference() {
        let cfg = DistillConfig { l: Some(3), h: 1, bias: false };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let d = Distiller::new("p", 5, cfg.clone()).unwrap();
        d.init(&mut store, &mut rng);
        // make later stages identity: 1x1 effective kernel with weight 1 at the top-left tap
        for s in 1..STAGES {
            store.insert(&format!("p.s{s}.w"), Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        }
        store.insert("p.s1.w", Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let x = random(&[7, 5], 10);
        let w = store.get("p.s0.w").unwrap().data().to_vec();
        let (t, f) = (7usize, 5usize);
        let at = |i: usize, j: usize| x.at2(i.min(t - 1), j.min(f - 1));
        let conv: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                (0..f)
                    .map(|j| {
                        (w[0] * at(i, j) + w[1] * at(i, j + 1) + w[2] * at(i + 1, j) + w[3] * at(i + 1, j + 1))
                            .max(0.0)
                    })
                    .collect()
            })
            .collect();
        // pad time to 9, pool (3, 1)
        let pooled: Vec<Vec<f64>> = (0..3)
            .map(|bi| {
                (0..f)
                    .map(|j| (0..3).map(|di| conv[(bi * 3 + di).min(t - 1)][j]).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect();
        // stages 2 and 3 with identity kernels and l = 3 reduce time 3 -> 1 -> 1 by max
        let want: Vec<f64> = (0..f).map(|j| (0..3).map(|i| pooled[i][j]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let y = d.apply(&store, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5]);
        for j in 0..f {
            assert!((y.data()[j] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_examples() {
        let cfg = DistillConfig::default();
        let mea = MeaConfig::default();
        let p = complexity_plan(1024, 1024, &cfg, &mea).unwrap();
        assert!((p.exact_rows - 3072.0).abs() < 1e-9);
        let q = complexity_plan(2048, 2048, &cfg, &mea).unwrap();
        assert!((q.exact_rows / p.exact_rows - 2.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn stage_extents_follow_ceiling_rule(l_x in 1usize..32, l in 1usize..4, h in 1usize..3, seed in 0u64..100) {
                let d_model = 8 * h.pow(3);
                let cfg = DistillConfig { l: Some(l), h, bias: true };
                let store = setup(d_model, &cfg, seed);
                let kv = distill_kv(&random(&[l_x, d_model], seed), &cfg, &store, "kv").unwrap();
                let mut t = l_x;
                for _ in 0..STAGES { t = t.div_ceil(l); }
                prop_assert_eq!(kv.keys.shape(), &[h.pow(3), t, 8][..]);
                prop_assert!(kv.values.data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
