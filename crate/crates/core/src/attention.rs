//! Dense scaled dot-product attention and Maximum Entropy Attention (MEA).
//!
//! MEA ranks queries by the variance of their softmax distribution over a
//! small random sample of keys: a flat distribution has low variance and high
//! entropy. Only the `u = ⌈c·√L_Q⌉` lowest-variance queries get an exact
//! attention row; every other query receives the uniform-weight mean of the
//! visible values, which is the attention output of a maximum-entropy row.
//!
//! Cost per head is `u·L_K` dot products for the exact rows plus `U·L_Q` for
//! the sampling pass. Both are reported through [`AttentionTape::dot_products`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const DEFAULT_SAMPLING_FACTOR: f64 = 3.0;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mask {
    #[default]
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
}

impl Mask {
    fn visible(self, query: usize, keys: usize) -> usize {
        match self {
            Mask::None => keys,
            Mask::Causal => (query + 1).min(keys),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeaConfig {
    /// Sampling factor `c`.
    pub c: f64,
    /// Keys sampled per query for the variance pass (`U`). `None` means
    /// `⌈c·√L_K⌉` capped at `L_K`.
    #[serde(rename = "U", default)]
    pub sample_keys: Option<usize>,
    /// Overrides the number of exact queries `u`.
    #[serde(default)]
    pub top_u: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MeaConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_SAMPLING_FACTOR,
            sample_keys: None,
            top_u: None,
            seed: 0,
        }
    }
}

impl MeaConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of exact queries for `l_q` queries.
    pub fn query_budget(&self, l_q: usize) -> usize {
        match self.top_u {
            Some(u) => u.min(l_q),
            None => ((self.c * (l_q as f64).sqrt()).ceil() as usize).min(l_q),
        }
    }

    /// Number of sampled keys for `l_k` keys.
    pub fn key_budget(&self, l_k: usize) -> Result<usize> {
        match self.sample_keys {
            Some(0) => Err(Error::Config("U must be at least 1".into())),
            Some(u) if u > l_k => Err(Error::Config(format!(
                "U = {u} exceeds the {l_k} available keys"
            ))),
            Some(u) => Ok(u),
            None => Ok(((self.c * (l_k as f64).sqrt()).ceil() as usize).clamp(1, l_k)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("sampling factor c must be positive, got {}", self.c)));
        }
        Ok(())
    }
}

/// Outcome of the variance pass for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Population variance of each query's sampled probability row.
    pub variance_per_query: Vec<f64>,
    /// Queries that receive an exact attention row, ascending.
    pub selected: Vec<usize>,
    /// Key indices used by the variance pass, ascending.
    pub sampled_key_indices: Vec<usize>,
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (lq, d) = q.dims2("attention")?;
    let (lk, dk) = k.dims2("attention")?;
    let (lv, dv) = v.dims2("attention")?;
    if d != dk {
        return Err(Error::shape("attention", format!("query width {d} vs key width {dk}")));
    }
    if lk != lv {
        return Err(Error::shape("attention", format!("{lk} keys vs {lv} values")));
    }
    if lk == 0 {
        return Err(Error::Mask { query: 0 });
    }
    Ok((lq, lk, d, dv))
}

/// `softmax(Q Kᵀ / √d) V`; masked scores are set to `-inf` before the softmax.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Mask) -> Result<Tensor> {
    let (lq, lk, d, _) = check_qkv(q, k, v)?;
    let mut scores = tensor::matmul(q, &tensor::transpose(k)?)?;
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..lq {
        let vis = mask.visible(i, lk);
        for (j, s) in scores.data_mut()[i * lk..(i + 1) * lk].iter_mut().enumerate() {
            *s = if j < vis { *s * scale } else { f64::NEG_INFINITY };
        }
    }
    let weights = tensor::softmax(&scores)?;
    tensor::matmul(&weights, v)
}

/// Shannon entropy `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {x} is not a probability")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
}

fn sample_keys(l_k: usize, u_keys: usize, seed: u64, stream: u64) -> Vec<usize> {
    if u_keys >= l_k {
        return (0..l_k).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx = sample(&mut rng, l_k, u_keys).into_vec();
    idx.sort_unstable();
    idx
}

/// Variance pass over one head. `q` is `[L_Q, d]`, `k` is `[L_K, d]`.
fn score_head(
    q: &[f64],
    k: &[f64],
    l_q: usize,
    l_k: usize,
    d: usize,
    cfg: &MeaConfig,
    mask: Mask,
    stream: u64,
) -> Result<(SelectionResult, u64)> {
    let u_keys = cfg.key_budget(l_k)?;
    let sampled = sample_keys(l_k, u_keys, cfg.seed, stream);
    let scale = 1.0 / (d as f64).sqrt();
    let mut variance = Vec::with_capacity(l_q);
    let mut dots = 0u64;
    let mut row = Vec::with_capacity(sampled.len());
    for i in 0..l_q {
        let qi = &q[i * d..(i + 1) * d];
        let vis = mask.visible(i, l_k);
        row.clear();
        for &j in sampled.iter().take_while(|&&j| j < vis) {
            row.push(tensor::dot(qi, &k[j * d..(j + 1) * d]) * scale);
        }
        dots += row.len() as u64;
        if row.len() < 2 {
            variance.push(0.0);
            continue;
        }
        tensor::softmax_in_place(&mut row);
        variance.push(tensor::mean_var(&row).1);
    }
    let selected = select_queries(&variance, cfg, mask);
    Ok((
        SelectionResult {
            variance_per_query: variance,
            selected,
            sampled_key_indices: sampled,
        },
        dots,
    ))
}

/// Smallest variance first, lower index on ties.
///
/// Under a causal mask query `i` is ranked only against queries `0..=i` with a
/// prefix budget `min(u(i + 1), i + 1)`, so whether a position gets an exact
/// row never depends on later positions.
fn select_queries(variance: &[f64], cfg: &MeaConfig, mask: Mask) -> Vec<usize> {
    let before = |a: usize, b: usize| (variance[a], a) < (variance[b], b);
    match mask {
        Mask::None => {
            let u = cfg.query_budget(variance.len());
            let mut order: Vec<usize> = (0..variance.len()).collect();
            order.sort_by(|&a, &b| variance[a].total_cmp(&variance[b]).then(a.cmp(&b)));
            let mut chosen = order[..u].to_vec();
            chosen.sort_unstable();
            chosen
        }
        Mask::Causal => (0..variance.len())
            .filter(|&i| {
                let budget = cfg.query_budget(i + 1);
                let rank = (0..i).filter(|&k| before(k, i)).count();
                rank < budget
            })
            .collect(),
    }
}

/// Ranks queries by sampled-distribution variance. The key sample is shared
/// by all queries and fixed by `cfg.seed`.
pub fn variance_proxy(q: &Tensor, k: &Tensor, cfg: &MeaConfig, mask: Mask) -> Result<SelectionResult> {
    cfg.validate()?;
    let (l_q, d) = q.dims2("variance_proxy")?;
    let (l_k, dk) = k.dims2("variance_proxy")?;
    if d != dk {
        return Err(Error::shape("variance_proxy", format!("{d} vs {dk}")));
    }
    Ok(score_head(q.data(), k.data(), l_q, l_k, d, cfg, mask, 0)?.0)
}

/// Single-head MEA. Returns the output `[L_Q, d_v]` and the selection used.
pub fn mea_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &MeaConfig,
    mask: Mask,
) -> Result<(Tensor, SelectionResult)> {
    check_qkv(q, k, v)?;
    let spec = MultiHeadSpec {
        heads: 1,
        mode: AttentionMode::Mea(cfg.clone()),
        mask,
    };
    let (out, mut tape) = multi_head_forward(q, &k.clone().reshape(&prepend(k))?, &v.clone().reshape(&prepend(v))?, &spec)?;
    let sel = tape.heads.remove(0).selection;
    Ok((out, sel))
}

fn prepend(t: &Tensor) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionMode {
    Dense,
    Mea(MeaConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadSpec {
    pub heads: usize,
    pub mode: AttentionMode,
    pub mask: Mask,
}

/// Per-head state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTape {
    pub selection: SelectionResult,
    /// Probability rows of the selected queries over their visible keys,
    /// concatenated in `selection.selected` order.
    probs: Vec<f64>,
    offsets: Vec<usize>,
    selected_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct AttentionTape {
    pub heads: Vec<HeadTape>,
    mask: Mask,
    dot_products: u64,
}

impl AttentionTape {
    pub fn dot_products(&self) -> u64 {
        self.dot_products
    }

    pub fn mask(&self) -> Mask {
        self.mask
    }

    /// Gradients with respect to `q [L_Q, H·dh]`, `k [H, L_K, dh]` and
    /// `v [H, L_K, dv]`.
    pub fn backward(&self, q: &Tensor, k: &Tensor, v: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (l_q, qc) = q.dims2("attention")?;
        let (h, l_k, d) = k.dims3("attention")?;
        let (_, _, dv) = v.dims3("attention")?;
        let oc = h * dv;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut da = Vec::with_capacity(l_k);
        for (head, tape) in self.heads.iter().enumerate() {
            let kh = &kd[head * l_k * d..(head + 1) * l_k * d];
            let vh = &vd[head * l_k * dv..(head + 1) * l_k * dv];
            let gkh = &mut gk[head * l_k * d..(head + 1) * l_k * d];
            let gvh = &mut gv[head * l_k * dv..(head + 1) * l_k * dv];

            for (s, &i) in tape.selection.selected.iter().enumerate() {
                let p = &tape.probs[tape.offsets[s]..tape.offsets[s + 1]];
                let gi = &gd[i * oc + head * dv..i * oc + (head + 1) * dv];
                let qi = &qd[i * qc + head * d..i * qc + (head + 1) * d];
                da.clear();
                da.extend((0..p.len()).map(|j| tensor::dot(gi, &vh[j * dv..(j + 1) * dv])));
                let mean = tensor::dot(p, &da);
                let gqi = &mut gq[i * qc + head * d..i * qc + (head + 1) * d];
                for j in 0..p.len() {
                    let ds = p[j] * (da[j] - mean) * scale;
                    let kj = &kh[j * d..(j + 1) * d];
                    for c in 0..d {
                        gqi[c] += ds * kj[c];
                        gkh[j * d + c] += ds * qi[c];
                    }
                    for c in 0..dv {
                        gvh[j * dv + c] += p[j] * gi[c];
                    }
                }
            }

            // uniform rows: each visible value row receives g_i / visible_i
            let mut carry = vec![0.0; dv];
            let mut pending = vec![0.0; l_k * dv];
            for i in 0..l_q {
                if tape.selected_mask[i] {
                    continue;
                }
                let vis = self.mask.visible(i, l_k);
                let gi = &gd[i * oc + head * dv..i * oc + (head + 1) * dv];
                match self.mask {
                    Mask::None => {
                        for c in 0..dv {
                            carry[c] += gi[c] / vis as f64;
                        }
                    }
                    Mask::Causal => {
                        let last = vis - 1;
                        for c in 0..dv {
                            pending[last * dv + c] += gi[c] / vis as f64;
                        }
                    }
                }
            }
            match self.mask {
                Mask::None => {
                    for j in 0..l_k {
                        for c in 0..dv {
                            gvh[j * dv + c] += carry[c];
                        }
                    }
                }
                Mask::Causal => {
                    // key j collects pending weight from every query whose prefix ends at or after j
                    for j in (0..l_k).rev() {
                        for c in 0..dv {
                            carry[c] += pending[j * dv + c];
                            gvh[j * dv + c] += carry[c];
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::new(q.shape(), gq)?,
            Tensor::new(k.shape(), gk)?,
            Tensor::new(v.shape(), gv)?,
        ))
    }
}

/// Multi-head forward. `q` is `[L_Q, H·dh]` split into contiguous column
/// blocks, `k`/`v` are `[H, L_K, dh]` / `[H, L_K, dv]`.
pub fn multi_head_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &MultiHeadSpec,
) -> Result<(Tensor, AttentionTape)> {
    let (l_q, qc) = q.dims2("attention")?;
    let (h, l_k, d) = k.dims3("attention")?;
    let (hv, l_v, dv) = v.dims3("attention")?;
    if h != spec.heads || hv != h || qc != h * d {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?} for {} heads", q.shape(), k.shape(), v.shape(), spec.heads),
        ));
    }
    if l_v != l_k {
        return Err(Error::shape("attention", format!("{l_k} keys vs {l_v} values")));
    }
    if l_k == 0 {
        return Err(Error::Mask { query: 0 });
    }
    if let AttentionMode::Mea(cfg) = &spec.mode {
        cfg.validate()?;
    }
    let oc = h * dv;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l_q * oc];
    let mut heads = Vec::with_capacity(h);
    let mut dots = 0u64;
    let mut qh = vec![0.0; l_q * d];

    for head in 0..h {
        for i in 0..l_q {
            qh[i * d..(i + 1) * d].copy_from_slice(&q.data()[i * qc + head * d..i * qc + (head + 1) * d]);
        }
        let kh = &k.data()[head * l_k * d..(head + 1) * l_k * d];
        let vh = &v.data()[head * l_k * dv..(head + 1) * l_k * dv];

        let selection = match &spec.mode {
            AttentionMode::Dense => SelectionResult {
                variance_per_query: vec![0.0; l_q],
                selected: (0..l_q).collect(),
                sampled_key_indices: Vec::new(),
            },
            AttentionMode::Mea(cfg) => {
                let (sel, n) = score_head(&qh, kh, l_q, l_k, d, cfg, spec.mask, head as u64)?;
                dots += n;
                sel
            }
        };

        let mut selected_mask = vec![false; l_q];
        for &i in &selection.selected {
            selected_mask[i] = true;
        }
        let mut probs = Vec::new();
        let mut offsets = vec![0];
        for &i in &selection.selected {
            let vis = spec.mask.visible(i, l_k);
            let qi = &qh[i * d..(i + 1) * d];
            let start = probs.len();
            probs.extend((0..vis).map(|j| tensor::dot(qi, &kh[j * d..(j + 1) * d]) * scale));
            dots += vis as u64;
            tensor::softmax_in_place(&mut probs[start..]);
            let orow = &mut out[i * oc + head * dv..i * oc + (head + 1) * dv];
            for (j, p) in probs[start..].iter().enumerate() {
                for (o, x) in orow.iter_mut().zip(&vh[j * dv..(j + 1) * dv]) {
                    *o += p * x;
                }
            }
            offsets.push(probs.len());
        }

        if selection.selected.len() < l_q {
            write_uniform_rows(&mut out, vh, &selected_mask, spec.mask, l_q, l_k, dv, oc, head);
        }
        heads.push(HeadTape {
            selection,
            probs,
            offsets,
            selected_mask,
        });
    }
    Ok((
        Tensor::new(&[l_q, oc], out)?,
        AttentionTape {
            heads,
            mask: spec.mask,
            dot_products: dots,
        },
    ))
}

/// Mean of visible value rows for every non-selected query.
#[allow(clippy::too_many_arguments)]
fn write_uniform_rows(
    out: &mut [f64],
    vh: &[f64],
    selected: &[bool],
    mask: Mask,
    l_q: usize,
    l_k: usize,
    dv: usize,
    oc: usize,
    head: usize,
) {
    match mask {
        Mask::None => {
            let mut mean = vec![0.0; dv];
            for j in 0..l_k {
                for c in 0..dv {
                    mean[c] += vh[j * dv + c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= l_k as f64);
            for i in (0..l_q).filter(|&i| !selected[i]) {
                out[i * oc + head * dv..i * oc + (head + 1) * dv].copy_from_slice(&mean);
            }
        }
        Mask::Causal => {
            let mut running = vec![0.0; dv];
            let mut seen = 0;
            for i in 0..l_q {
                let vis = mask.visible(i, l_k);
                while seen < vis {
                    for c in 0..dv {
                        running[c] += vh[seen * dv + c];
                    }
                    seen += 1;
                }
                if !selected[i] {
                    for c in 0..dv {
                        out[i * oc + head * dv + c] = running[c] / vis as f64;
                    }
                }
            }
        }
    }
}

/// Softmax-score histogram and per-row entropy of one attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    /// Counts over `HISTOGRAM_BINS` equal bins on `[0, 1]`; the last bin is closed.
    pub histogram: Vec<u64>,
    pub row_entropy: Vec<f64>,
}

impl AttentionStats {
    pub fn bin_edges(bin: usize) -> (f64, f64) {
        let w = 1.0 / HISTOGRAM_BINS as f64;
        (bin as f64 * w, (bin + 1) as f64 * w)
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (b, c) in self.histogram.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(b);
            s.push_str(&format!("{lo},{hi},{c}\n"));
        }
        s
    }

    pub fn entropy_csv(&self) -> String {
        let mut s = String::from("row,entropy\n");
        for (r, e) in self.row_entropy.iter().enumerate() {
            s.push_str(&format!("{r},{e}\n"));
        }
        s
    }

    pub fn total(&self) -> u64 {
        self.histogram.iter().sum()
    }
}

pub fn histogram_bin(p: f64) -> usize {
    ((p * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Statistics of `softmax(scores)` taken row-wise over a `[L_Q, L_K]` score map.
pub fn attention_stats(scores: &Tensor) -> Result<AttentionStats> {
    let (l_q, _) = scores.dims2("attention_stats")?;
    scores.ensure_finite("attention_stats")?;
    let probs = tensor::softmax(scores)?;
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let mut row_entropy = Vec::with_capacity(l_q);
    for i in 0..l_q {
        let row = probs.row(i);
        for &p in row {
            histogram[histogram_bin(p)] += 1;
        }
        row_entropy.push(entropy(row)?);
    }
    Ok(AttentionStats {
        histogram,
        row_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Element-by-element evaluation of the kernel form
    /// `Σ_j k(q_i, k_j) / Σ_l k(q_i, k_l) · v_j` with `k = exp(q·k/√d)`.
    fn kernel_form_oracle(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
        let (lq, d) = q.dims2("o").unwrap();
        let (lk, _) = k.dims2("o").unwrap();
        let dv = v.shape()[1];
        let mut out = Tensor::zeros(&[lq, dv]);
        for i in 0..lq {
            let vis = if causal { (i + 1).min(lk) } else { lk };
            let mut den = 0.0;
            let mut num = vec![0.0; dv];
            for j in 0..vis {
                let mut s = 0.0;
                for c in 0..d {
                    s += q.at2(i, c) * k.at2(j, c);
                }
                let w = (s / (d as f64).sqrt()).exp();
                den += w;
                for c in 0..dv {
                    num[c] += w * v.at2(j, c);
                }
            }
            for c in 0..dv {
                out.data_mut()[i * dv + c] = num[c] / den;
            }
        }
        out
    }

    #[test]
    fn dense_single_key_returns_value_row() {
        let q = random(&[5, 3], 1);
        let k = random(&[1, 3], 2);
        let v = Tensor::new(&[1, 2], vec![0.7, -1.3]).unwrap();
        let out = dense_attention(&q, &k, &v, Mask::None).unwrap();
        for i in 0..5 {
            assert!((out.at2(i, 0) - 0.7).abs() < 1e-15);
            assert!((out.at2(i, 1) + 1.3).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_identical_keys_average_values() {
        let q = random(&[3, 2], 3);
        let k = Tensor::from_rows(&[vec![0.4, 0.1], vec![0.4, 0.1]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let out = dense_attention(&q, &k, &v, Mask::None).unwrap();
        for i in 0..3 {
            assert!((out.at2(i, 0) - 2.0).abs() < 1e-12);
            assert_eq!(out.at2(i, 1), 0.0);
        }
    }

    #[test]
    fn dense_matches_kernel_form() {
        let (q, k, v) = (random(&[4, 2], 4), random(&[4, 2], 5), random(&[4, 4], 6));
        for (mask, causal) in [(Mask::None, false), (Mask::Causal, true)] {
            let out = dense_attention(&q, &k, &v, mask).unwrap();
            assert!(out.max_abs_diff(&kernel_form_oracle(&q, &k, &v, causal)) < 1e-10);
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.5, 0.25, 0.25]).unwrap();
        assert!((h - (0.5 * 2f64.ln() + 0.5 * 4f64.ln())).abs() < 1e-12);
        assert!((h - 1.039721).abs() < 1e-6);
        assert!(matches!(entropy(&[0.5, 0.6]), Err(Error::InvalidDistribution(_))));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn orthogonal_queries_tie_and_select_lowest_indices() {
        let q = Tensor::from_rows(&vec![vec![1.0, 0.0]; 9]).unwrap();
        let k = Tensor::from_rows(&vec![vec![0.0, 1.0]; 16]).unwrap();
        let cfg = MeaConfig::default();
        let sel = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
        assert!(sel.variance_per_query.iter().all(|&v| v.abs() < 1e-30));
        assert_eq!(sel.selected, (0..9).collect::<Vec<_>>()); // u = ⌈3·3⌉ = 9
        let cfg = MeaConfig { c: 1.0, ..MeaConfig::default() };
        let sel = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
        assert_eq!(sel.selected, vec![0, 1, 2]);
    }

    #[test]
    fn one_hot_query_ranks_behind_flat_query() {
        // unit-norm keys along axes; query 0 aligns strongly with key 0, query 1 is orthogonal to all
        let l = 4;
        let d = 5;
        let mut kd = vec![0.0; l * d];
        for j in 0..l {
            kd[j * d + j] = 1.0;
        }
        let k = Tensor::new(&[l, d], kd).unwrap();
        let mut qd = vec![0.0; 2 * d];
        qd[0] = 400.0 * (d as f64).sqrt();
        qd[d + 4] = 1.0;
        let q = Tensor::new(&[2, d], qd).unwrap();
        let cfg = MeaConfig { top_u: Some(1), sample_keys: Some(l), ..MeaConfig::default() };
        let sel = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
        let lf = l as f64;
        assert!((sel.variance_per_query[0] - (lf - 1.0) / (lf * lf)).abs() < 1e-12);
        assert_eq!(sel.variance_per_query[1], 0.0);
        assert_eq!(sel.selected, vec![1]);
    }

    #[test]
    fn temperature_family_orders_variance_against_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let base: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let temps = [0.25, 0.5, 1.0, 2.0, 4.0];
        let mut last: Option<(f64, f64)> = None;
        for t in temps {
            let mut p: Vec<f64> = base.iter().map(|s| s / t).collect();
            tensor::softmax_in_place(&mut p);
            let var = tensor::mean_var(&p).1;
            let h = entropy(&p).unwrap();
            if let Some((pv, ph)) = last {
                assert!(var < pv && h > ph);
            }
            last = Some((var, h));
        }
    }

    #[test]
    fn key_budget_rules() {
        let cfg = MeaConfig { sample_keys: Some(20), ..MeaConfig::default() };
        assert!(matches!(cfg.key_budget(10), Err(Error::Config(_))));
        assert_eq!(MeaConfig::default().key_budget(100).unwrap(), 30);
        assert_eq!(MeaConfig::default().key_budget(4).unwrap(), 4);
        assert_eq!(MeaConfig::default().query_budget(1024), 96);
    }

    #[test]
    fn mea_full_budget_equals_dense() {
        let (q, k, v) = (random(&[12, 4], 1), random(&[12, 4], 2), random(&[12, 3], 3));
        let cfg = MeaConfig { top_u: Some(12), sample_keys: Some(12), ..MeaConfig::default() };
        for mask in [Mask::None, Mask::Causal] {
            let (out, _) = mea_attention(&q, &k, &v, &cfg, mask).unwrap();
            assert!(out.max_abs_diff(&dense_attention(&q, &k, &v, mask).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn mea_empty_budget_gives_value_means() {
        let (q, k, v) = (random(&[6, 4], 4), random(&[6, 4], 5), random(&[6, 3], 6));
        let cfg = MeaConfig { top_u: Some(0), ..MeaConfig::default() };
        let (out, sel) = mea_attention(&q, &k, &v, &cfg, Mask::None).unwrap();
        assert!(sel.selected.is_empty());
        let mean = v.column_mean().unwrap();
        for i in 0..6 {
            for c in 0..3 {
                assert!((out.at2(i, c) - mean[c]).abs() < 1e-12);
            }
        }
        let (out, _) = mea_attention(&q, &k, &v, &cfg, Mask::Causal).unwrap();
        for i in 0..6 {
            let prefix = v.slice_rows(0, i + 1).unwrap().column_mean().unwrap();
            for c in 0..3 {
                assert!((out.at2(i, c) - prefix[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mea_mixed_rows_follow_their_branch() {
        let (q, k, v) = (random(&[8, 4], 7), random(&[8, 4], 8), random(&[8, 2], 9));
        let cfg = MeaConfig { top_u: Some(3), sample_keys: Some(5), seed: 3, ..MeaConfig::default() };
        let (out, sel) = mea_attention(&q, &k, &v, &cfg, Mask::None).unwrap();
        assert_eq!(sel, variance_proxy(&q, &k, &cfg, Mask::None).unwrap());
        assert_eq!(sel.selected.len(), 3);
        let dense = dense_attention(&q, &k, &v, Mask::None).unwrap();
        let mean = v.column_mean().unwrap();
        for i in 0..8 {
            for c in 0..2 {
                let want = if sel.selected.contains(&i) { dense.at2(i, c) } else { mean[c] };
                assert!((out.at2(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (q, k) = (random(&[20, 4], 1), random(&[40, 4], 2));
        let cfg = MeaConfig { seed: 11, ..MeaConfig::default() };
        let a = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
        let b = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sampled_key_indices.len(), 19);
        let c = variance_proxy(&q, &k, &cfg.clone().with_seed(12), Mask::None).unwrap();
        assert_ne!(a.sampled_key_indices, c.sampled_key_indices);
    }

    #[test]
    fn causal_output_ignores_future_keys() {
        let (q, k, v) = (random(&[10, 4], 1), random(&[10, 4], 2), random(&[10, 3], 3));
        let cfg = MeaConfig { c: 1.0, sample_keys: Some(6), seed: 5, ..MeaConfig::default() };
        let (base, _) = mea_attention(&q, &k, &v, &cfg, Mask::Causal).unwrap();
        for j in 0..10 {
            let mut k2 = k.clone();
            let mut v2 = v.clone();
            let mut q2 = q.clone();
            for c in 0..4 {
                k2.data_mut()[j * 4 + c] += 3.0;
                q2.data_mut()[j * 4 + c] -= 2.0;
            }
            for c in 0..3 {
                v2.data_mut()[j * 3 + c] *= -5.0;
            }
            let (out, _) = mea_attention(&q2, &k2, &v2, &cfg, Mask::Causal).unwrap();
            for i in 0..j {
                for c in 0..3 {
                    assert_eq!(out.at2(i, c), base.at2(i, c), "row {i} moved after perturbing {j}");
                }
            }
        }
    }

    #[test]
    fn work_counter_matches_budget() {
        let l_q = 64;
        let l_k = 20;
        let (q, k, v) = (random(&[l_q, 4], 1), random(&[l_k, 4], 2), random(&[l_k, 4], 3));
        let cfg = MeaConfig::default();
        let spec = MultiHeadSpec { heads: 1, mode: AttentionMode::Mea(cfg.clone()), mask: Mask::None };
        let k3 = k.clone().reshape(&[1, l_k, 4]).unwrap();
        let v3 = v.clone().reshape(&[1, l_k, 4]).unwrap();
        let (_, tape) = multi_head_forward(&q, &k3, &v3, &spec).unwrap();
        let u = cfg.query_budget(l_q) as u64;
        let big_u = cfg.key_budget(l_k).unwrap() as u64;
        assert_eq!(tape.dot_products(), u * l_k as u64 + big_u * l_q as u64);
    }

    #[test]
    fn stats_of_uniform_and_one_hot_rows() {
        let s = attention_stats(&Tensor::zeros(&[3, 8])).unwrap();
        assert_eq!(s.histogram[histogram_bin(1.0 / 8.0)], 24);
        assert_eq!(s.total(), 24);
        assert!(s.row_entropy.iter().all(|h| (h - 8f64.ln()).abs() < 1e-12));

        let mut one_hot = Tensor::zeros(&[2, 4]);
        one_hot.data_mut()[1] = 1e3;
        one_hot.data_mut()[6] = 1e3;
        let s = attention_stats(&one_hot).unwrap();
        assert_eq!(s.histogram[0], 6);
        assert_eq!(s.histogram[HISTOGRAM_BINS - 1], 2);
        assert!(s.row_entropy.iter().all(|&h| h == 0.0));
        assert!(s.histogram_csv().starts_with("bin_lo,bin_hi,count\n"));
        assert!(s.entropy_csv().starts_with("row,entropy\n0,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn full_budget_mea_equals_dense(l in 1usize..24, d in 1usize..8, seed in 0u64..10_000) {
                let (q, k, v) = (random(&[l, d], seed), random(&[l, d], seed + 1), random(&[l, d], seed + 2));
                let cfg = MeaConfig { top_u: Some(l), sample_keys: Some(l), seed, ..MeaConfig::default() };
                let (out, _) = mea_attention(&q, &k, &v, &cfg, Mask::None).unwrap();
                prop_assert!(out.max_abs_diff(&dense_attention(&q, &k, &v, Mask::None).unwrap()) < 1e-6);
            }

            #[test]
            fn score_shift_leaves_selection_unchanged(seed in 0u64..10_000, shift in -5.0f64..5.0) {
                // appending a constant coordinate to every key adds the same offset to each score of a query
                let (l, d) = (16, 3);
                let q = random(&[l, d], seed);
                let k = random(&[l, d], seed + 1);
                let cfg = MeaConfig { c: 1.0, seed, ..MeaConfig::default() };
                let base = variance_proxy(&q, &k, &cfg, Mask::None).unwrap();
                let mut qa = Vec::new();
                let mut ka = Vec::new();
                for i in 0..l {
                    qa.extend_from_slice(q.row(i));
                    qa.push(shift);
                    ka.extend_from_slice(k.row(i));
                    ka.push(1.0);
                }
                // rescale so the 1/√d factor matches the original width
                let f = ((d + 1) as f64 / d as f64).sqrt();
                let qa = Tensor::new(&[l, d + 1], qa.iter().map(|x| x * f).collect()).unwrap();
                let ka = Tensor::new(&[l, d + 1], ka).unwrap();
                let moved = variance_proxy(&qa, &ka, &cfg, Mask::None).unwrap();
                for (a, b) in base.variance_per_query.iter().zip(&moved.variance_per_query) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                prop_assert_eq!(base.selected, moved.selected);
            }
        }
    }
}
