//! CSV ingestion, normalization, chronological splits and rolling windows.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::CalendarStamp;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Sample};
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<NaiveDateTime>,
    /// `[T, d_x]`
    pub values: Tensor,
    pub columns: Vec<String>,
    /// Cadence in seconds; 0 for a single-row series.
    pub step_secs: i64,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn stamps(&self) -> Vec<CalendarStamp> {
        self.timestamps.iter().map(CalendarStamp::from_datetime).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        let d = self.width();
        for (t, row) in self.timestamps.iter().zip(self.values.data().chunks(d)) {
            let mut rec = vec![t.format(TIMESTAMP_FORMAT).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M"))
        .ok()
}

/// Reads `date,f1,...,fd` with a header row. Rows must be evenly spaced.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, path)
}

pub fn parse_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<RawSeries> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 2 {
        return Err(parse_err(1, "expected a timestamp column and at least one feature".into()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let d = columns.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let fallback_line = i + 2;
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 1, rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| parse_err(line, format!("unparseable timestamp '{}'", &rec[0])))?;
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column '{}': '{field}' is not a number", columns[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column '{}': missing or non-finite value", columns[j])));
            }
            values.push(v);
        }
        timestamps.push(ts);
    }
    if timestamps.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let step_secs = validate_cadence(&timestamps)?;
    let t = timestamps.len();
    Ok(RawSeries {
        timestamps,
        values: Tensor::new(&[t, d], values)?,
        columns,
        step_secs,
    })
}

fn validate_cadence(ts: &[NaiveDateTime]) -> Result<i64> {
    if ts.len() < 2 {
        return Ok(0);
    }
    let step = (ts[1] - ts[0]).num_seconds();
    for w in ts.windows(2) {
        let found = (w[1] - w[0]).num_seconds();
        if found != step || found <= 0 {
            return Err(Error::Gap {
                timestamp: w[1].format(TIMESTAMP_FORMAT).to_string(),
                expected_secs: step.max(1),
                found_secs: found,
            });
        }
    }
    Ok(step)
}

/// Per-feature statistics of the training range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// When false only the mean is removed.
    pub scale: bool,
}

impl NormStats {
    fn divisor(&self, j: usize) -> f64 {
        if self.scale {
            self.std[j]
        } else {
            1.0
        }
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, d) = x.dims2("normalize")?;
        if d > self.mean.len() {
            return Err(Error::shape("normalize", format!("{d} columns, stats for {}", self.mean.len())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f(*v, self.mean[j], self.divisor(j));
            }
        }
        Ok(out)
    }
}

/// Centers (and by default scales) every feature with statistics of
/// `train` rows only.
pub fn normalize_zero_mean(values: &Tensor, train: Range<usize>, scale: bool) -> Result<(Tensor, NormStats)> {
    let (t, d) = values.dims2("normalize_zero_mean")?;
    if train.is_empty() || train.end > t {
        return Err(Error::Input(format!("training range {train:?} is empty or exceeds {t} rows")));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in train.clone() {
        for (m, v) in mean.iter_mut().zip(values.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for i in train {
        for ((s, v), m) in std.iter_mut().zip(values.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s < STD_FLOOR {
            log::warn!("feature {j} is constant over the training range; using std floor {STD_FLOOR}");
            *s = STD_FLOOR;
        }
    }
    let stats = NormStats { mean, std, scale };
    Ok((stats.normalize(values)?, stats))
}

/// Chronological `[train | val | test]` boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chronological_splits(len: usize, train_ratio: f64, val_ratio: f64) -> Splits {
    let a = ((len as f64) * train_ratio).round() as usize;
    let b = (((len as f64) * (train_ratio + val_ratio)).round() as usize).max(a);
    Splits {
        train: 0..a.min(len),
        val: a.min(len)..b.min(len),
        test: b.min(len)..len,
    }
}

/// Stride-1 windows over one split of a normalized series.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    values: Arc<Tensor>,
    stamps: Arc<Vec<CalendarStamp>>,
    range: Range<usize>,
    l_x: usize,
    l_y: usize,
    d_y: usize,
    pub stats: NormStats,
}

impl WindowedDataset {
    pub fn new(
        values: Arc<Tensor>,
        stamps: Arc<Vec<CalendarStamp>>,
        split: &'static str,
        range: Range<usize>,
        cfg: &ModelConfig,
        stats: NormStats,
    ) -> Result<Self> {
        let needed = cfg.l_x + cfg.l_y;
        if range.len() < needed {
            return Err(Error::EmptySplit {
                split,
                span: range.len(),
                needed,
            });
        }
        let (t, d) = values.dims2("window_dataset")?;
        if range.end > t || stamps.len() != t {
            return Err(Error::Input(format!("split {range:?} outside a series of {t} rows")));
        }
        if cfg.d_x != d {
            return Err(Error::Config(format!("data has {d} features, config d_x = {}", cfg.d_x)));
        }
        Ok(Self {
            values,
            stamps,
            range,
            l_x: cfg.l_x,
            l_y: cfg.l_y,
            d_y: cfg.d_y,
            stats,
        })
    }

    /// `span − L_x − L_y + 1`
    pub fn len(&self) -> usize {
        self.range.len() + 1 - self.l_x - self.l_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute row index where window `i` starts.
    pub fn start(&self, i: usize) -> usize {
        self.range.start + i
    }

    pub fn sample(&self, i: usize) -> Sample {
        assert!(i < self.len(), "window {i} out of range");
        let s = self.start(i);
        let input = self.values.slice_rows(s, s + self.l_x).expect("in range");
        let tgt = self.values.slice_rows(s + self.l_x, s + self.l_x + self.l_y).expect("in range");
        let target = select_columns(&tgt, self.d_y);
        Sample {
            input,
            input_stamps: self.stamps[s..s + self.l_x].to_vec(),
            future_stamps: self.stamps[s + self.l_x..s + self.l_x + self.l_y].to_vec(),
            target: Some(target),
        }
    }
}

/// Trailing `d_y` columns (the target is the last column in the usual layout).
fn select_columns(x: &Tensor, d_y: usize) -> Tensor {
    let (l, d) = x.dims2("select_columns").expect("matrix");
    if d_y == d {
        return x.clone();
    }
    let rows: Vec<Vec<f64>> = (0..l).map(|i| x.row(i)[d - d_y..].to_vec()).collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

/// Normalized train/val/test windows of one series.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: WindowedDataset,
    pub val: Option<WindowedDataset>,
    pub test: WindowedDataset,
    pub stats: NormStats,
}

pub fn prepare(raw: &RawSeries, cfg: &ModelConfig) -> Result<Prepared> {
    check_width(raw, cfg)?;
    let splits = chronological_splits(raw.len(), cfg.data.train_ratio, cfg.data.val_ratio);
    let (_, stats) = normalize_zero_mean(&raw.values, splits.train, cfg.data.scale)?;
    prepare_with_stats(raw, cfg, &stats)
}

/// Like [`prepare`] but with externally supplied statistics, e.g. from a
/// checkpoint.
pub fn prepare_with_stats(raw: &RawSeries, cfg: &ModelConfig, stats: &NormStats) -> Result<Prepared> {
    check_width(raw, cfg)?;
    let splits = chronological_splits(raw.len(), cfg.data.train_ratio, cfg.data.val_ratio);
    let values = Arc::new(stats.normalize(&raw.values)?);
    let stamps = Arc::new(raw.stamps());
    let make = |name, r: Range<usize>| {
        WindowedDataset::new(values.clone(), stamps.clone(), name, r, cfg, stats.clone())
    };
    let val = if splits.val.is_empty() {
        None
    } else {
        Some(make("val", splits.val.clone())?)
    };
    Ok(Prepared {
        train: make("train", splits.train)?,
        val,
        test: make("test", splits.test)?,
        stats: stats.clone(),
    })
}

fn check_width(raw: &RawSeries, cfg: &ModelConfig) -> Result<()> {
    if raw.width() != cfg.d_x {
        return Err(Error::Config(format!(
            "data has {} features, config d_x = {}",
            raw.width(),
            cfg.d_x
        )));
    }
    Ok(())
}

/// `MSE = 1/n Σ_i Σ_j (y − ŷ)²/d`, `MAE = 1/n Σ_i Σ_j |y − ŷ|/d` over all
/// entries of all windows.
pub fn evaluate(predictions: &[Tensor], targets: &[Tensor]) -> Result<(f64, f64)> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, t) in predictions.iter().zip(targets) {
        if p.shape() != t.shape() {
            return Err(Error::shape("evaluate", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        for (a, b) in p.data().iter().zip(t.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
        n += p.len();
    }
    if n == 0 {
        return Err(Error::shape("evaluate", "no entries"));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Forecasts every horizon step with the last observed input row.
pub fn repeat_last_baseline(ds: &WindowedDataset) -> Result<(f64, f64)> {
    let (mut preds, mut targets) = (Vec::with_capacity(ds.len()), Vec::with_capacity(ds.len()));
    for i in 0..ds.len() {
        let s = ds.sample(i);
        let target = s.target.expect("windows carry targets");
        let (l_y, d_y) = target.dims2("baseline")?;
        let last = s.input.row(s.input.shape()[0] - 1);
        let row = &last[last.len() - d_y..];
        preds.push(Tensor::new(&[l_y, d_y], row.repeat(l_y))?);
        targets.push(target);
    }
    evaluate(&preds, &targets)
}

/// Hourly `sin(2πt/24 + φ_k) + slope·t + N(0, σ²)` per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub len: usize,
    pub features: usize,
    pub period: f64,
    pub slope: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            len: 2000,
            features: 1,
            period: 24.0,
            slope: 1e-3,
            noise: 0.1,
            seed: 0,
        }
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> Result<RawSeries> {
    let normal = Normal::new(0.0, spec.noise)
        .map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let origin = NaiveDate::from_ymd_opt(2016, 7, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let d = spec.features;
    let mut values = Vec::with_capacity(spec.len * d);
    for t in 0..spec.len {
        for k in 0..d {
            let phase = 2.0 * std::f64::consts::PI * k as f64 / d as f64;
            let angle = 2.0 * std::f64::consts::PI * t as f64 / spec.period + phase;
            values.push(angle.sin() + spec.slope * t as f64 + normal.sample(&mut rng));
        }
    }
    Ok(RawSeries {
        timestamps: (0..spec.len).map(|t| origin + Duration::hours(t as i64)).collect(),
        values: Tensor::new(&[spec.len, d], values)?,
        columns: (0..d).map(|k| format!("f{k}")).collect(),
        step_secs: 3600,
    })
}
