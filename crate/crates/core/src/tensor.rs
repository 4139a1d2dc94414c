//! Dense row-major arrays and the forward kernels every other module builds on.
//!
//! Everything here is a pure function over immutable inputs. The differentiable
//! versions live in [`crate::autograd`] and reuse these kernels for their
//! forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N-dimensional array of `f64` with row-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) && !data.is_empty() {
            return Err(Error::shape("Tensor::new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a 2-D array.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(op, format!("expected 3-D, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidValue {
                op,
                detail: format!("entry {i} is {}", self.data[i]),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..end` of a 2-D array.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        Self::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// Per-column mean over rows of a 2-D array.
    pub fn column_mean(&self) -> Result<Vec<f64>> {
        let (r, c) = self.dims2("column_mean")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(out)
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax(scores: &Tensor) -> Result<Tensor> {
    let last = *scores
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "empty shape"))?;
    if last == 0 {
        return Err(Error::shape("softmax", "last axis has length 0"));
    }
    if let Some(v) = scores.data().iter().find(|v| v.is_nan()) {
        return Err(Error::InvalidValue {
            op: "softmax",
            detail: format!("input contains {v}"),
        });
    }
    let mut out = scores.clone();
    for row in out.data_mut().chunks_mut(last) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Softmax of one slice. Entries equal to `-inf` receive zero mass.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a [n, k] @ b [k, m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("[{n},{k}] @ [{k2},{m}]")));
    }
    let mut out = vec![0.0; n * m];
    matmul_into(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(&[n, m], out)
}

/// `out += a [n,k] @ b [k,m]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Population mean and variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Edge-replication padding of a `[C, H, W]` array.
pub fn pad_edge_2d(
    x: &Tensor,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor> {
    let (c, h, w) = x.dims3("pad_edge_2d")?;
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for i in 0..ph {
            let si = i.saturating_sub(top).min(h - 1);
            for j in 0..pw {
                let sj = j.saturating_sub(left).min(w - 1);
                out[(ch * ph + i) * pw + j] = x.data()[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::new(&[c, ph, pw], out)
}

/// Valid (unpadded) 2-D cross-correlation.
///
/// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, kh, kw]`, `bias` has
/// `C_out` entries. Output is `[C_out, H - kh + 1, W - kw + 1]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let (cin, h, w) = input.dims3("conv2d")?;
    let (cout, wcin, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d", "weight must be [C_out, C_in, kh, kw]")),
    };
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    if kh > h || kw > w {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds input {h}x{w}"),
        ));
    }
    if bias.is_some_and(|b| b.len() != cout) {
        return Err(Error::shape("conv2d", "bias length differs from C_out"));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let b = bias.map_or(0.0, |b| b[co]);
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b);
        for ci in 0..cin {
            for di in 0..kh {
                for dj in 0..kw {
                    let wv = wt[((co * cin + ci) * kh + di) * kw + dj];
                    if wv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let src = &x[(ci * h + i + di) * w + dj..][..ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out)
}

/// Disjoint-window max pooling over the two trailing axes (stride = kernel).
///
/// Accepts `[H, W]` or `[C, H, W]`. Extents must be divisible by the kernel;
/// padding is the caller's job.
pub fn maxpool2d(input: &Tensor, kt: usize, kf: usize) -> Result<Tensor> {
    let (out, _) = maxpool2d_with_argmax(input, kt, kf)?;
    Ok(out)
}

pub(crate) fn maxpool2d_with_argmax(
    input: &Tensor,
    kt: usize,
    kf: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w, two_d) = match input.shape()[..] {
        [h, w] => (1, h, w, true),
        [c, h, w] => (c, h, w, false),
        _ => return Err(Error::shape("maxpool2d", "expected 2-D or 3-D input")),
    };
    if kt == 0 || kf == 0 || h % kt != 0 || w % kf != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("extents {h}x{w} not divisible by kernel {kt}x{kf}"),
        ));
    }
    let (oh, ow) = (h / kt, w / kf);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for di in 0..kt {
                    for dj in 0..kf {
                        let idx = (ch * h + i * kt + di) * w + j * kf + dj;
                        if x[idx] > best {
                            best = x[idx];
                            best_at = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    let shape = if two_d { vec![oh, ow] } else { vec![c, oh, ow] };
    Ok((Tensor::new(&shape, out)?, arg))
}

/// Centered moving average along time of an `[L, d]` array.
///
/// The first and last rows are replicated `(window - 1) / 2` times so the
/// output keeps length `L`.
pub fn avgpool1d_moving(input: &Tensor, window: usize) -> Result<Tensor> {
    check_window(window)?;
    let (l, d) = input.dims2("avgpool1d_moving")?;
    let half = window / 2;
    let x = input.data();
    let src = |m: usize| m.saturating_sub(half).min(l - 1);
    // Average the deviations from the centre value so that flat stretches
    // come out exactly flat.
    let inv = 1.0 / window as f64;
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for f in 0..d {
            let centre = x[t * d + f];
            let dev: f64 = (t..t + window).map(|m| x[src(m) * d + f] - centre).sum();
            out[t * d + f] = centre + dev * inv;
        }
    }
    Tensor::new(&[l, d], out)
}

pub(crate) fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "moving-average window must be odd and positive, got {window}"
        )));
    }
    Ok(())
}
