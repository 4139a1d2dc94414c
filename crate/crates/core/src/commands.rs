//! File-producing entry points behind the `infomax` binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::attention_stats;
use crate::bench::{bench_scaling, BenchMode, BenchSettings, ScalingReport};
use crate::checkpoint::Checkpoint;
use crate::data::{self, load_csv, prepare, synthetic, RawSeries, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Ablation, Model, ModelConfig};
use crate::par::Execution;
use crate::train::{self, fit, TrainReport, TrainState};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, or generates seeded synthetic data with `cfg.d_x` features.
pub fn load_series(path: Option<&Path>, cfg: &ModelConfig, seed: u64) -> Result<RawSeries> {
    match path {
        Some(p) => load_csv(p),
        None => synthetic(&SyntheticSpec {
            features: cfg.d_x,
            seed,
            ..SyntheticSpec::default()
        }),
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn with_seed(cfg: &ModelConfig, seed: u64, ablation: Option<Ablation>) -> Result<ModelConfig> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub data_rows: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test_mse: f64,
    pub test_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub manifest: Manifest,
    pub checkpoint: Checkpoint,
}

/// Train on the chronological train split, select by validation loss and
/// report test metrics. Writes the checkpoint, loss logs and a manifest.
pub fn cmd_train(
    cfg: &ModelConfig,
    raw: &RawSeries,
    seed: u64,
    ablation: Option<Ablation>,
    out: &Path,
    exec: Execution,
) -> Result<TrainOutcome> {
    let outcome = train_only(cfg, raw, seed, ablation, exec)?;
    ensure_dir(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write(out.join(LOSS_FILE), outcome.report.epoch_csv())?;
    write(out.join(STEPS_FILE), outcome.report.steps_csv())?;
    write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&outcome.manifest)?)?;
    Ok(outcome)
}

/// Training without touching the filesystem.
pub fn train_only(
    cfg: &ModelConfig,
    raw: &RawSeries,
    seed: u64,
    ablation: Option<Ablation>,
    exec: Execution,
) -> Result<TrainOutcome> {
    let cfg = with_seed(cfg, seed, ablation)?;
    let prepared = prepare(raw, &cfg)?;
    let model = Model::new(cfg.clone())?;
    let mut state = TrainState::new(model.init_params(seed), seed);
    let (best, report) = fit(&model, &mut state, &prepared.train, prepared.val.as_ref(), exec)?;
    let (test_mse, test_mae) = train::evaluate_dataset(&model, &best, &prepared.test, None, exec)?;
    let manifest = Manifest {
        seed,
        config_hash: cfg.hash(),
        data_rows: raw.len(),
        steps: state.step,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        test_mse,
        test_mae,
    };
    let checkpoint = Checkpoint::new(cfg, best, Some(prepared.stats), state.step, &state.rng);
    Ok(TrainOutcome {
        report,
        manifest,
        checkpoint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOutcome {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    pub decoder_passes: u64,
}

/// One-pass forecasts for every test window of `raw`. Writes
/// `predictions.csv` (one row per horizon step per window), `metrics.json`
/// and `metrics.csv`.
pub fn cmd_predict(
    checkpoint: &Checkpoint,
    raw: &RawSeries,
    horizon: Option<usize>,
    denormalize: bool,
    out: &Path,
    exec: Execution,
) -> Result<PredictOutcome> {
    let cfg = &checkpoint.config;
    if let Some(h) = horizon {
        if h != cfg.l_y {
            return Err(Error::Config(format!("horizon {h} differs from the checkpoint's L_y = {}", cfg.l_y)));
        }
    }
    if raw.width() != cfg.d_x {
        return Err(Error::Config(format!(
            "data has {} features, checkpoint expects d_x = {}",
            raw.width(),
            cfg.d_x
        )));
    }
    // windows are normalized with the statistics the model was trained with
    let prepared = match &checkpoint.stats {
        Some(stats) => data::prepare_with_stats(raw, cfg, stats)?,
        None => prepare(raw, cfg)?,
    };
    let model = Model::new(cfg.clone())?;
    let ds = &prepared.test;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let before = model.decoder_passes();
    let pairs = train::forecast_windows(&model, &checkpoint.params, ds, &idx, exec)?;
    let passes = model.decoder_passes() - before;
    if passes != idx.len() as u64 {
        return Err(Error::Contract(format!("{passes} decoder passes for {} windows", idx.len())));
    }
    let (mut preds, mut targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    if denormalize {
        preds = preds.iter().map(|p| ds.stats.denormalize(p)).collect::<Result<_>>()?;
        targets = targets.iter().map(|t| ds.stats.denormalize(t)).collect::<Result<_>>()?;
    }
    let (mse, mae) = data::evaluate(&preds, &targets)?;

    ensure_dir(out)?;
    let d_y = cfg.d_y;
    let mut csv = String::from("window,step");
    for j in 0..d_y {
        csv.push_str(&format!(",pred_{j}"));
    }
    for j in 0..d_y {
        csv.push_str(&format!(",true_{j}"));
    }
    csv.push('\n');
    for (w, (p, t)) in preds.iter().zip(&targets).enumerate() {
        for s in 0..cfg.l_y {
            csv.push_str(&format!("{w},{s}"));
            for v in p.row(s).iter().chain(t.row(s)) {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    write(out.join("predictions.csv"), csv)?;
    let metrics = json!({ "mse": mse, "mae": mae, "windows": idx.len() });
    write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write(out.join("metrics.csv"), format!("pred_len,mse,mae\n{},{mse},{mae}\n", cfg.l_y))?;
    Ok(PredictOutcome {
        mse,
        mae,
        windows: idx.len(),
        decoder_passes: passes,
    })
}

/// Scaling runs for each mode; writes `bench_<mode>.csv` and `bench.json`.
pub fn cmd_bench(
    lengths: &[usize],
    modes: &[BenchMode],
    settings: &BenchSettings,
    out: &Path,
) -> Result<Vec<ScalingReport>> {
    let reports = modes
        .iter()
        .map(|&m| bench_scaling(lengths, m, settings))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    for r in &reports {
        write(out.join(format!("bench_{}.csv", r.mode)), r.csv())?;
    }
    let summary: Vec<_> = reports
        .iter()
        .map(|r| json!({ "mode": r.mode, "slope": r.slope, "records": r.records }))
        .collect();
    write(out.join("bench.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(reports)
}

pub const HISTOGRAM_HEADER: &str = "layer,head,bin_lo,bin_hi,count";
pub const ENTROPY_HEADER: &str = "layer,head,row,entropy";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub l_q: usize,
    pub l_k: usize,
    pub stats: crate::attention::AttentionStats,
}

/// Softmax-score histograms and row entropies of every encoder layer and
/// head on one window. Writes `attn_hist.csv` and `attn_entropy.csv`.
pub fn cmd_attn_stats(
    cfg: &ModelConfig,
    checkpoint: Option<&Checkpoint>,
    raw: &RawSeries,
    window: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<HeadStats>> {
    let (cfg, params, prepared) = match checkpoint {
        Some(c) => {
            let stats = c.stats.as_ref().ok_or_else(|| Error::Input("checkpoint lacks normalization stats".into()))?;
            (c.config.clone(), c.params.clone(), data::prepare_with_stats(raw, &c.config, stats)?)
        }
        None => {
            let cfg = with_seed(cfg, seed, None)?;
            let model = Model::new(cfg.clone())?;
            let params = model.init_params(seed);
            let p = prepare(raw, &cfg)?;
            (cfg, params, p)
        }
    };
    let ds = &prepared.test;
    if window >= ds.len() {
        return Err(Error::Input(format!("window {window} out of range ({} test windows)", ds.len())));
    }
    let model = Model::new(cfg)?;
    let maps = model.encoder_scores(&params, &ds.sample(window))?;
    let mut result = Vec::new();
    let mut hist = format!("{HISTOGRAM_HEADER}\n");
    let mut ent = format!("{ENTROPY_HEADER}\n");
    for (layer, heads) in maps.iter().enumerate() {
        for (head, scores) in heads.iter().enumerate() {
            let (l_q, l_k) = scores.dims2("attn_stats")?;
            let stats = attention_stats(scores)?;
            for (b, c) in stats.histogram.iter().enumerate() {
                let (lo, hi) = crate::attention::AttentionStats::bin_edges(b);
                hist.push_str(&format!("{layer},{head},{lo},{hi},{c}\n"));
            }
            for (r, e) in stats.row_entropy.iter().enumerate() {
                ent.push_str(&format!("{layer},{head},{r},{e}\n"));
            }
            result.push(HeadStats {
                layer,
                head,
                l_q,
                l_k,
                stats,
            });
        }
    }
    ensure_dir(out)?;
    write(out.join("attn_hist.csv"), hist)?;
    write(out.join("attn_entropy.csv"), ent)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Sampling factor `c`.
    C,
    /// Sampled keys per query `U`.
    U,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c" => Ok(SweepParam::C),
            "U" | "u" => Ok(SweepParam::U),
            other => Err(Error::Config(format!("unknown sweep parameter '{other}' (c|U)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mse: f64,
    pub mae: f64,
}

pub fn sweep_config(cfg: &ModelConfig, param: SweepParam, value: f64) -> Result<ModelConfig> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::Config(format!("sweep values must be positive, got {value}")));
    }
    let mut c = cfg.clone();
    match param {
        SweepParam::C => c.mea.c = value,
        SweepParam::U => {
            if value.fract() != 0.0 {
                return Err(Error::Config(format!("U must be an integer, got {value}")));
            }
            c.mea.sample_keys = Some(value as usize);
        }
    }
    Ok(c)
}

/// Train and test once per value; writes `sweep.csv` with `value,mse,mae`.
pub fn cmd_sweep(
    cfg: &ModelConfig,
    raw: &RawSeries,
    param: SweepParam,
    values: &[f64],
    seed: u64,
    out: &Path,
    exec: Execution,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_config(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(values.len());
    for (c, &value) in configs.iter().zip(values) {
        let o = train_only(c, raw, seed, None, exec)?;
        log::info!("sweep {param:?}={value}: test mse {:.5}", o.manifest.test_mse);
        points.push(SweepPoint {
            value,
            mse: o.manifest.test_mse,
            mae: o.manifest.test_mae,
        });
    }
    ensure_dir(out)?;
    let mut csv = String::from("value,mse,mae\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.value, p.mse, p.mae));
    }
    write(out.join("sweep.csv"), csv)?;
    Ok(points)
}
