//! The encoder-decoder forecaster.
//!
//! The raw input window is split into trend and seasonal parts. The encoder
//! sees only the embedded seasonal part. The decoder starts from the embedded
//! label window followed by zero placeholders, runs causally masked
//! self-attention, splits off a trend inside every layer, attends to the
//! encoder memory and re-injects the trend. The final projection of the last
//! `L_y` rows plus the time-mean of the input trend is the forecast.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, Mask, MeaConfig, MultiHeadSpec};
use crate::autograd::{Graph, Var};
use crate::decomposition::{series_decomp, series_decomp_var, DEFAULT_WINDOW};
use crate::distilling::{DistillConfig, Distiller};
use crate::embedding::{CalendarStamp, Embedding};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{self, Tensor};

/// Model variants for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Keys/values come from linear projections instead of distilling.
    NoDistill,
    /// Dense attention everywhere.
    NoMea,
    /// No decomposition at the input or inside the decoder.
    NoTsd,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "none" => Ok(Ablation::Full),
            "no-distill" => Ok(Ablation::NoDistill),
            "no-mea" => Ok(Ablation::NoMea),
            "no-tsd" => Ok(Ablation::NoTsd),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected no-tsd, no-mea or no-distill)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Evaluate at most this many validation windows per epoch.
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.5,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            max_steps: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_ratio: f64,
    pub val_ratio: f64,
    /// Divide by the training standard deviation as well as centering.
    pub scale: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.6,
            val_ratio: 0.2,
            scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "L_x")]
    pub l_x: usize,
    /// Label window length; `L_y` (or `2·L_y` with `label_double`) when absent.
    #[serde(rename = "L_label", default)]
    pub l_label: Option<usize>,
    #[serde(default)]
    pub label_double: bool,
    #[serde(rename = "L_y")]
    pub l_y: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_model: usize,
    /// Hidden width of the position-wise MLP; `4·d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(rename = "N")]
    pub encoder_layers: usize,
    #[serde(rename = "M")]
    pub decoder_layers: usize,
    #[serde(default)]
    pub mea: MeaConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "default_window")]
    pub decomp_window: usize,
    #[serde(default = "default_true")]
    pub fuse_bias: bool,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_x: 96,
            l_label: None,
            label_double: false,
            l_y: 48,
            d_x: 7,
            d_y: 7,
            d_model: 512,
            d_ff: None,
            encoder_layers: 3,
            decoder_layers: 2,
            mea: MeaConfig::default(),
            distill: DistillConfig::default(),
            decomp_window: DEFAULT_WINDOW,
            fuse_bias: true,
            ablation: Ablation::Full,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn heads(&self) -> usize {
        self.distill.heads()
    }

    pub fn label_len(&self) -> usize {
        match (self.l_label, self.label_double) {
            (Some(l), _) => l,
            (None, false) => self.l_y,
            (None, true) => 2 * self.l_y,
        }
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len() + self.l_y
    }

    pub fn uses_tsd(&self) -> bool {
        self.ablation != Ablation::NoTsd
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L_x", self.l_x),
            ("L_y", self.l_y),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("d_model", self.d_model),
            ("N", self.encoder_layers),
            ("train.batch_size", self.train.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.label_len() > self.l_x {
            return Err(Error::Config(format!(
                "L_label = {} exceeds L_x = {}",
                self.label_len(),
                self.l_x
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.uses_tsd() && self.d_y != self.d_x {
            return Err(Error::Config(format!(
                "d_y = {} differs from d_x = {}; the trend path needs matching widths",
                self.d_y, self.d_x
            )));
        }
        if self.d_y > self.d_x {
            return Err(Error::Config("d_y cannot exceed d_x".into()));
        }
        crate::tensor::check_window(self.decomp_window)?;
        self.mea.validate()?;
        self.distill.validate(self.d_model)?;
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) || !(t.lr_decay > 0.0) {
            return Err(Error::Config("train.learning_rate / train.lr_decay out of range".into()));
        }
        let d = &self.data;
        if !(d.train_ratio > 0.0 && d.val_ratio >= 0.0 && d.train_ratio + d.val_ratio < 1.0) {
            return Err(Error::Config("data split ratios must leave a non-empty test split".into()));
        }
        Ok(())
    }

    /// Stable content hash of the serialized configuration.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One forecasting instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[L_x, d_x]`
    pub input: Tensor,
    pub input_stamps: Vec<CalendarStamp>,
    /// Calendar stamps of the `L_y` forecast steps.
    pub future_stamps: Vec<CalendarStamp>,
    /// `[L_y, d_y]`; empty when only forecasting.
    pub target: Option<Tensor>,
}

/// Prediction plus per-window metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub prediction: Tensor,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
}

/// Random-sample salt for the attention layers of one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardCtx {
    pub salt: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KvSource {
    Distilled,
    Projected,
}

/// Zero placeholders appended to the label window:
/// `concat(input[L_x - L_label..], 0_{L_y})`.
pub fn decoder_scalars(input: &Tensor, l_label: usize, l_y: usize) -> Result<Tensor> {
    let (l_x, d) = input.dims2("decoder_scalars")?;
    if l_label > l_x {
        return Err(Error::Input(format!("label length {l_label} exceeds input length {l_x}")));
    }
    let mut data = input.data()[(l_x - l_label) * d..].to_vec();
    data.resize((l_label + l_y) * d, 0.0);
    Tensor::new(&[l_label + l_y, d], data)
}

/// Calendar stamps of the decoder input: label stamps then the future stamps.
pub fn decoder_stamps(sample: &Sample, l_label: usize, l_y: usize) -> Result<Vec<CalendarStamp>> {
    if sample.future_stamps.len() != l_y {
        return Err(Error::Input(format!(
            "{} future stamps supplied for a horizon of {l_y}",
            sample.future_stamps.len()
        )));
    }
    let n = sample.input_stamps.len();
    if l_label > n {
        return Err(Error::Input("fewer input stamps than the label length".into()));
    }
    let mut s = sample.input_stamps[n - l_label..].to_vec();
    s.extend_from_slice(&sample.future_stamps);
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    enc_emb: Embedding,
    dec_emb: Embedding,
    decoder_passes: Arc<AtomicU64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            enc_emb: Embedding::new("enc.emb", cfg.d_x, cfg.d_model, cfg.fuse_bias),
            dec_emb: Embedding::new("dec.emb", cfg.d_x, cfg.d_model, cfg.fuse_bias),
            cfg,
            decoder_passes: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Number of decoder forward evaluations since construction.
    pub fn decoder_passes(&self) -> u64 {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, ff) = (self.cfg.d_model, self.cfg.d_ff());
        self.enc_emb.init(&mut s, &mut rng);
        self.dec_emb.init(&mut s, &mut rng);
        let kv = self.enc_kv_source();
        for n in 0..self.cfg.encoder_layers {
            self.init_attention(&mut s, &format!("enc.{n}.attn"), kv, &mut rng);
            init_mlp(&mut s, &format!("enc.{n}.mlp"), d, ff, &mut rng);
        }
        for n in 0..self.cfg.decoder_layers {
            self.init_attention(&mut s, &format!("dec.{n}.self"), KvSource::Projected, &mut rng);
            self.init_attention(&mut s, &format!("dec.{n}.cross"), kv, &mut rng);
            init_mlp(&mut s, &format!("dec.{n}.mlp"), d, ff, &mut rng);
        }
        s.fan_in("proj.w", &[d, self.cfg.d_y], d, &mut rng);
        s.zeros("proj.b", &[self.cfg.d_y]);
        s
    }

    fn enc_kv_source(&self) -> KvSource {
        if self.cfg.ablation == Ablation::NoDistill {
            KvSource::Projected
        } else {
            KvSource::Distilled
        }
    }

    fn init_attention(&self, s: &mut ParamStore, prefix: &str, kv: KvSource, rng: &mut ChaCha8Rng) {
        let d = self.cfg.d_model;
        s.fan_in(&format!("{prefix}.wq"), &[d, d], d, rng);
        s.zeros(&format!("{prefix}.bq"), &[d]);
        match kv {
            KvSource::Projected => {
                for p in ["wk", "wv"] {
                    s.fan_in(&format!("{prefix}.{p}"), &[d, d], d, rng);
                }
                s.zeros(&format!("{prefix}.bk"), &[d]);
                s.zeros(&format!("{prefix}.bv"), &[d]);
            }
            KvSource::Distilled => {
                for p in ["k", "v"] {
                    Distiller::new(&format!("{prefix}.kv.{p}"), d, self.cfg.distill.clone())
                        .expect("validated config")
                        .init(s, rng);
                }
            }
        }
        s.fan_in(&format!("{prefix}.wo"), &[d, d], d, rng);
        s.zeros(&format!("{prefix}.bo"), &[d]);
    }

    fn attention_mode(&self, seed: u64) -> AttentionMode {
        match self.cfg.ablation {
            Ablation::NoMea => AttentionMode::Dense,
            _ => AttentionMode::Mea(self.cfg.mea.clone().with_seed(seed)),
        }
    }

    /// Query projection, key/value construction and output projection around
    /// one multi-head attention node.
    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        prefix: &str,
        x_q: Var,
        x_kv: Var,
        kv: KvSource,
        mask: Mask,
        seed: u64,
        capture: Option<&mut Vec<(Tensor, Tensor)>>,
    ) -> Result<Var> {
        let heads = self.cfg.heads();
        let p = |n: &str| format!("{prefix}.{n}");
        let (wq, bq) = (g.param(s, &p("wq"))?, g.param(s, &p("bq"))?);
        let q = g.linear(x_q, wq, Some(bq))?;
        let (k, v) = match kv {
            KvSource::Projected => {
                let (wk, bk) = (g.param(s, &p("wk"))?, g.param(s, &p("bk"))?);
                let (wv, bv) = (g.param(s, &p("wv"))?, g.param(s, &p("bv"))?);
                let k = g.linear(x_kv, wk, Some(bk))?;
                let v = g.linear(x_kv, wv, Some(bv))?;
                (g.split_heads(k, heads)?, g.split_heads(v, heads)?)
            }
            KvSource::Distilled => {
                let d = self.cfg.d_model;
                let kd = Distiller::new(&p("kv.k"), d, self.cfg.distill.clone())?;
                let vd = Distiller::new(&p("kv.v"), d, self.cfg.distill.clone())?;
                (kd.forward(g, s, x_kv)?, vd.forward(g, s, x_kv)?)
            }
        };
        if let Some(c) = capture {
            c.push((g.value(q).clone(), g.value(k).clone()));
        }
        let spec = MultiHeadSpec {
            heads,
            mode: self.attention_mode(seed),
            mask,
        };
        let att = g.attention(q, k, v, &spec)?;
        let (wo, bo) = (g.param(s, &p("wo"))?, g.param(s, &p("bo"))?);
        g.linear(att, wo, Some(bo))
    }

    fn layer_seed(&self, layer: u64, ctx: ForwardCtx) -> u64 {
        mix(mix(self.cfg.mea.seed, layer), ctx.salt)
    }

    /// Encoder over an already embedded sequence; returns the memory and, when
    /// requested, the `(queries, keys)` seen by every layer.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        ctx: ForwardCtx,
        mut capture: Option<&mut Vec<(Tensor, Tensor)>>,
    ) -> Result<Var> {
        let mut x = x;
        for n in 0..self.cfg.encoder_layers {
            let a = self.attention_block(
                g,
                s,
                &format!("enc.{n}.attn"),
                x,
                x,
                self.enc_kv_source(),
                Mask::None,
                self.layer_seed(n as u64, ctx),
                capture.as_deref_mut(),
            )?;
            x = g.add(x, a)?;
            let m = mlp(g, s, &format!("enc.{n}.mlp"), x)?;
            x = g.add(x, m)?;
        }
        Ok(x)
    }

    /// Causally masked self-attention sub-block of decoder layer `layer`.
    pub fn decoder_self_attention(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        layer: usize,
        x: Var,
        ctx: ForwardCtx,
    ) -> Result<Var> {
        self.attention_block(
            g,
            s,
            &format!("dec.{layer}.self"),
            x,
            x,
            KvSource::Projected,
            Mask::Causal,
            self.layer_seed(1000 + layer as u64, ctx),
            None,
        )
    }

    /// Decoder over the embedded decoder input; returns `[L_label + L_y, d_model]`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x_dei: Var,
        memory: Var,
        ctx: ForwardCtx,
    ) -> Result<Var> {
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = x_dei;
        for n in 0..self.cfg.decoder_layers {
            let sa = self.decoder_self_attention(g, s, n, x, ctx)?;
            let x1 = g.add(x, sa)?;
            let (trend, seasonal) = if self.cfg.uses_tsd() {
                let (t, se) = series_decomp_var(g, x1, self.cfg.decomp_window)?;
                (Some(t), se)
            } else {
                (None, x1)
            };
            let ca = self.attention_block(
                g,
                s,
                &format!("dec.{n}.cross"),
                seasonal,
                memory,
                self.enc_kv_source(),
                Mask::None,
                self.layer_seed(2000 + n as u64, ctx),
                None,
            )?;
            let xs1 = g.add(seasonal, ca)?;
            let m = mlp(g, s, &format!("dec.{n}.mlp"), xs1)?;
            x = g.add(xs1, m)?;
            if let Some(t) = trend {
                x = g.add(x, t)?;
            }
        }
        Ok(x)
    }

    /// Embedded decoder input `[L_label + L_y, d_model]`.
    pub fn build_decoder_input(&self, g: &mut Graph, s: &ParamStore, sample: &Sample) -> Result<Var> {
        let scalars = decoder_scalars(&sample.input, self.cfg.label_len(), self.cfg.l_y)?;
        let stamps = decoder_stamps(sample, self.cfg.label_len(), self.cfg.l_y)?;
        self.dec_emb.forward(g, s, &scalars, &stamps)
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        let (l, d) = sample.input.dims2("forecast")?;
        if l != self.cfg.l_x || d != self.cfg.d_x {
            return Err(Error::Config(format!(
                "input window is [{l}, {d}], model expects [{}, {}]",
                self.cfg.l_x, self.cfg.d_x
            )));
        }
        if sample.input_stamps.len() != l {
            return Err(Error::Input("one calendar stamp per input row is required".into()));
        }
        Ok(())
    }

    /// Full forward pass; returns the `[L_y, d_y]` forecast node.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, sample: &Sample, ctx: ForwardCtx) -> Result<Var> {
        self.check_sample(sample)?;
        let (seasonal, trend_mean) = if self.cfg.uses_tsd() {
            let pair = series_decomp(&sample.input, self.cfg.decomp_window)?;
            (pair.seasonal, Some(pair.trend.column_mean()?))
        } else {
            (sample.input.clone(), None)
        };
        let enc_in = self.enc_emb.forward(g, s, &seasonal, &sample.input_stamps)?;
        let memory = self.encoder_forward(g, s, enc_in, ctx, None)?;
        let x_dei = self.build_decoder_input(g, s, sample)?;
        let dec = self.decoder_forward(g, s, x_dei, memory, ctx)?;
        let total = self.cfg.decoder_len();
        let tail = g.slice_rows(dec, total - self.cfg.l_y, total)?;
        let (pw, pb) = (g.param(s, "proj.w")?, g.param(s, "proj.b")?);
        let y = g.linear(tail, pw, Some(pb))?;
        match trend_mean {
            Some(mean) => {
                let mean = g.constant(Tensor::new(&[self.cfg.d_y], mean[..self.cfg.d_y].to_vec())?)?;
                g.add_row_broadcast(y, mean)
            }
            None => Ok(y),
        }
    }

    /// Forecast without recording gradients of interest.
    pub fn predict(&self, s: &ParamStore, sample: &Sample, ctx: ForwardCtx) -> Result<ForecastResult> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, s, sample, ctx)?;
        let prediction = g.value(y).clone();
        let (mse, mae) = match &sample.target {
            Some(t) => {
                let (a, b) = crate::data::evaluate(std::slice::from_ref(&prediction), std::slice::from_ref(t))?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Ok(ForecastResult { prediction, mse, mae })
    }

    /// MSE loss node against the sample's target.
    pub fn loss(&self, g: &mut Graph, s: &ParamStore, sample: &Sample, ctx: ForwardCtx) -> Result<Var> {
        let target = sample
            .target
            .clone()
            .ok_or_else(|| Error::Input("sample has no target".into()))?;
        let y = self.forward(g, s, sample, ctx)?;
        let t = g.constant(target)?;
        mse_loss(g, y, t)
    }

    /// Per-layer, per-head scaled score maps `q_h k_hᵀ / √d_head` of the
    /// encoder self-attention.
    pub fn encoder_scores(&self, s: &ParamStore, sample: &Sample) -> Result<Vec<Vec<Tensor>>> {
        self.check_sample(sample)?;
        let seasonal = if self.cfg.uses_tsd() {
            series_decomp(&sample.input, self.cfg.decomp_window)?.seasonal
        } else {
            sample.input.clone()
        };
        let mut g = Graph::new();
        let enc_in = self.enc_emb.forward(&mut g, s, &seasonal, &sample.input_stamps)?;
        let mut captured = Vec::new();
        self.encoder_forward(&mut g, s, enc_in, ForwardCtx::default(), Some(&mut captured))?;
        captured
            .into_iter()
            .map(|(q, k)| {
                let (h, l_k, dh) = k.dims3("encoder_scores")?;
                let (l_q, _) = q.dims2("encoder_scores")?;
                let scale = 1.0 / (dh as f64).sqrt();
                (0..h)
                    .map(|head| {
                        let mut sc = vec![0.0; l_q * l_k];
                        for i in 0..l_q {
                            let qi = &q.row(i)[head * dh..(head + 1) * dh];
                            for j in 0..l_k {
                                let kj = &k.data()[(head * l_k + j) * dh..(head * l_k + j + 1) * dh];
                                sc[i * l_k + j] = tensor::dot(qi, kj) * scale;
                            }
                        }
                        Tensor::new(&[l_q, l_k], sc)
                    })
                    .collect()
            })
            .collect()
    }
}

fn init_mlp(s: &mut ParamStore, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) {
    s.fan_in(&format!("{prefix}.w1"), &[d, ff], d, rng);
    s.zeros(&format!("{prefix}.b1"), &[ff]);
    s.fan_in(&format!("{prefix}.w2"), &[ff, d], ff, rng);
    s.zeros(&format!("{prefix}.b2"), &[d]);
}

/// Two width-1 convolutions (position-wise linear maps) with ReLU between.
fn mlp(g: &mut Graph, s: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let (w1, b1) = (g.param(s, &format!("{prefix}.w1"))?, g.param(s, &format!("{prefix}.b1"))?);
    let (w2, b2) = (g.param(s, &format!("{prefix}.w2"))?, g.param(s, &format!("{prefix}.b2"))?);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h)?;
    g.linear(h, w2, Some(b2))
}

/// Mean over all `L_y·d_y` entries of the squared error.
pub fn mse_loss(g: &mut Graph, prediction: Var, target: Var) -> Result<Var> {
    g.mse(prediction, target)
}
