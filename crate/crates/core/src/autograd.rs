//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every value produced during one forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node after all of its consumers. A graph belongs to one thread for the
//! duration of one forward/backward pass.

use std::collections::BTreeMap;

use crate::attention::{AttentionTape, MultiHeadSpec};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Square(Var),
    Sum(Var),
    Mse(Var, Var),
    PadRowsEdge { x: Var, top: usize },
    UnfoldRows { x: Var, taps: usize },
    Gather { table: Var, index: Vec<usize> },
    Blend { inputs: [Var; 3], weights: Var, bias: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var> },
    PadEdge2d { x: Var, top: usize, left: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    MovingAvg { x: Var, window: usize },
    SliceRows { x: Var, start: usize },
    SplitHeads { x: Var },
    MergeHeads { x: Var },
    Attention { q: Var, k: Var, v: Var, tape: Box<AttentionTape> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    dot_products: u64,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of bound parameters keyed by name. Parameters that did not
    /// influence the output get a zero gradient.
    pub fn params(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            let g = match &self.grads[v.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(name).expect("bound param").shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Query-key dot products computed by attention nodes on this graph.
    pub fn dot_products(&self) -> u64 {
        self.dot_products
    }

    fn push(&mut self, op: &'static str, value: Tensor, node: Op, needs_grad: bool) -> Result<Var> {
        value.ensure_finite(op)?;
        self.nodes.push(Node {
            value,
            op: node,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Record a free variable that is not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push("variable", value, Op::Leaf, true)
    }

    /// Bind a named parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.push("param", value, Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let needs = self.needs(&[a, b]);
        self.push("add", out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let needs = self.needs(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * k);
        let needs = self.needs(&[a]);
        self.push("scale", out, Op::Scale(a, k), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), needs)
    }

    /// `x [r, c] + b [c]` with `b` repeated over rows.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("add_row_broadcast")?;
        let bias = self.value(b);
        if bias.len() != c {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{c} columns vs bias of {}", bias.len()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(&[r, c], data)?;
        let needs = self.needs(&[x, b]);
        self.push("add_row_broadcast", out, Op::AddRowBroadcast(x, b), needs)
    }

    /// `x @ w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::relu(self.value(a));
        let needs = self.needs(&[a]);
        self.push("relu", out, Op::Relu(a), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax(self.value(a))?;
        let needs = self.needs(&[a]);
        self.push("softmax", out, Op::SoftmaxRows(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        let needs = self.needs(&[a]);
        self.push("square", out, Op::Square(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(Error::shape("mse", "empty prediction"));
        }
        let n = p.len() as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let needs = self.needs(&[pred, target]);
        self.push("mse", Tensor::scalar(s), Op::Mse(pred, target), needs)
    }

    /// Replicate the first row `top` times and the last row `bottom` times.
    pub fn pad_rows_edge(&mut self, x: Var, top: usize, bottom: usize) -> Result<Var> {
        let (l, c) = self.value(x).dims2("pad_rows_edge")?;
        let xv = self.value(x).data();
        let total = l + top + bottom;
        let mut data = Vec::with_capacity(total * c);
        for m in 0..total {
            let s = m.saturating_sub(top).min(l - 1);
            data.extend_from_slice(&xv[s * c..(s + 1) * c]);
        }
        let out = Tensor::new(&[total, c], data)?;
        let needs = self.needs(&[x]);
        self.push("pad_rows_edge", out, Op::PadRowsEdge { x, top }, needs)
    }

    /// Sliding windows of `taps` consecutive rows flattened tap-major:
    /// `out[t, tap * c + ch] = x[t + tap, ch]`.
    pub fn unfold_rows(&mut self, x: Var, taps: usize) -> Result<Var> {
        let (l, c) = self.value(x).dims2("unfold_rows")?;
        if taps == 0 || taps > l {
            return Err(Error::shape("unfold_rows", format!("{taps} taps over {l} rows")));
        }
        let rows = l - taps + 1;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows * taps * c);
        for t in 0..rows {
            data.extend_from_slice(&xv[t * c..(t + taps) * c]);
        }
        let out = Tensor::new(&[rows, taps * c], data)?;
        let needs = self.needs(&[x]);
        self.push("unfold_rows", out, Op::UnfoldRows { x, taps }, needs)
    }

    pub fn gather_rows(&mut self, table: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[index.len(), c], data)?;
        let needs = self.needs(&[table]);
        self.push("gather_rows", out, Op::Gather { table, index }, needs)
    }

    /// `Σ_k weights[k] · inputs[k] + bias`, pointwise.
    pub fn blend(&mut self, inputs: [Var; 3], weights: Var, bias: Option<Var>) -> Result<Var> {
        self.same_shape("blend", inputs[0], inputs[1])?;
        self.same_shape("blend", inputs[0], inputs[2])?;
        let w = self.value(weights).data().to_vec();
        if w.len() != 3 {
            return Err(Error::shape("blend", "expected 3 blend weights"));
        }
        let b = match bias {
            Some(b) => self.value(b).data()[0],
            None => 0.0,
        };
        let shape = self.value(inputs[0]).shape().to_vec();
        let n = self.value(inputs[0]).len();
        let mut data = vec![b; n];
        for (k, &inp) in inputs.iter().enumerate() {
            for (o, x) in data.iter_mut().zip(self.value(inp).data()) {
                *o += w[k] * x;
            }
        }
        let out = Tensor::new(&shape, data)?;
        let mut deps = inputs.to_vec();
        deps.push(weights);
        deps.extend(bias);
        let needs = self.needs(&deps);
        self.push("blend", out, Op::Blend { inputs, weights, bias }, needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = tensor::conv2d(self.value(x), self.value(w), bias.as_deref())?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let needs = self.needs(&deps);
        self.push("conv2d", out, Op::Conv2d { x, w, b }, needs)
    }

    pub fn pad_edge_2d(
        &mut self,
        x: Var,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Var> {
        let out = tensor::pad_edge_2d(self.value(x), top, bottom, left, right)?;
        let needs = self.needs(&[x]);
        self.push("pad_edge_2d", out, Op::PadEdge2d { x, top, left }, needs)
    }

    pub fn maxpool2d(&mut self, x: Var, kt: usize, kf: usize) -> Result<Var> {
        let (out, argmax) = tensor::maxpool2d_with_argmax(self.value(x), kt, kf)?;
        let needs = self.needs(&[x]);
        self.push("maxpool2d", out, Op::MaxPool2d { x, argmax }, needs)
    }

    pub fn moving_average(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = tensor::avgpool1d_moving(self.value(x), window)?;
        let needs = self.needs(&[x]);
        self.push("moving_average", out, Op::MovingAvg { x, window }, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let needs = self.needs(&[x]);
        self.push("slice_rows", out, Op::SliceRows { x, start }, needs)
    }

    /// `[L, H·dh] -> [H, L, dh]` by contiguous column blocks.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (l, c) = self.value(x).dims2("split_heads")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape("split_heads", format!("{c} columns into {heads} heads")));
        }
        let dh = c / heads;
        let xv = self.value(x).data();
        let mut data = vec![0.0; l * c];
        for t in 0..l {
            for h in 0..heads {
                data[(h * l + t) * dh..(h * l + t + 1) * dh]
                    .copy_from_slice(&xv[t * c + h * dh..t * c + (h + 1) * dh]);
            }
        }
        let out = Tensor::new(&[heads, l, dh], data)?;
        let needs = self.needs(&[x]);
        self.push("split_heads", out, Op::SplitHeads { x }, needs)
    }

    /// `[H, L, dh] -> [L, H·dh]`, inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let (heads, l, dh) = self.value(x).dims3("merge_heads")?;
        let out = merge_heads_value(self.value(x).data(), heads, l, dh)?;
        let needs = self.needs(&[x]);
        self.push("merge_heads", out, Op::MergeHeads { x }, needs)
    }

    /// Multi-head attention node. `q` is `[L_Q, H·dh]`, `k`/`v` are
    /// `[H, L_K, dh]`; the output is `[L_Q, H·dh]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &MultiHeadSpec) -> Result<Var> {
        let (out, tape) =
            crate::attention::multi_head_forward(self.value(q), self.value(k), self.value(v), spec)?;
        self.dot_products += tape.dot_products();
        let needs = self.needs(&[q, k, v]);
        self.push(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                tape: Box::new(tape),
            },
            needs,
        )
    }

    /// Per-head selection recorded by an attention node.
    pub fn attention_tape(&self, v: Var) -> Option<&AttentionTape> {
        match &self.nodes[v.0].op {
            Op::Attention { tape, .. } => Some(tape),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.value(output).shape(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Scale(a, k) => acc(*a, g.map(|v| v * k)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2("matmul")?;
                let m = bv.shape()[1];
                if self.nodes[a.0].needs_grad {
                    // gA = gC @ B^T
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            ga[i * k + p] = tensor::dot(grow, &bv.data()[p * m..(p + 1) * m]);
                        }
                    }
                    acc(*a, Tensor::new(&[n, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    // gB = A^T @ gC
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += a_ip * gv;
                            }
                        }
                    }
                    acc(*b, Tensor::new(&[k, m], gb)?);
                }
            }
            Op::AddRowBroadcast(x, b) => {
                acc(*x, g.clone());
                let bshape = self.value(*b).shape().to_vec();
                let c = self.value(*b).len();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*b, Tensor::new(&bshape, gb)?);
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let data = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::new(xv.shape(), data)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in gd.chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let s = tensor::dot(gr, yr);
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                acc(*a, Tensor::new(y.shape(), gx)?);
            }
            Op::Square(a) => {
                let xv = self.value(*a);
                let data = gd.iter().zip(xv.data()).map(|(gv, x)| 2.0 * x * gv).collect();
                acc(*a, Tensor::new(xv.shape(), data)?);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), gd[0])),
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let k = 2.0 * gd[0] / pv.len() as f64;
                let d: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| k * (a - b)).collect();
                if self.nodes[t.0].needs_grad {
                    acc(*t, Tensor::new(tv.shape(), d.iter().map(|v| -v).collect())?);
                }
                acc(*p, Tensor::new(pv.shape(), d)?);
            }
            Op::PadRowsEdge { x, top } => {
                let (l, c) = self.value(*x).dims2("pad_rows_edge")?;
                let mut gx = vec![0.0; l * c];
                for (m, row) in gd.chunks(c).enumerate() {
                    let s = m.saturating_sub(*top).min(l - 1);
                    for (o, v) in gx[s * c..(s + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(&[l, c], gx)?);
            }
            Op::UnfoldRows { x, taps } => {
                let (l, c) = self.value(*x).dims2("unfold_rows")?;
                let mut gx = vec![0.0; l * c];
                let width = taps * c;
                for (t, row) in gd.chunks(width).enumerate() {
                    for (o, v) in gx[t * c..t * c + width].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::new(&[l, c], gx)?);
            }
            Op::Gather { table, index } => {
                let (r, c) = self.value(*table).dims2("gather_rows")?;
                let mut gt = vec![0.0; r * c];
                for (row, &i) in gd.chunks(c).zip(index) {
                    for (o, v) in gt[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*table, Tensor::new(&[r, c], gt)?);
            }
            Op::Blend {
                inputs,
                weights,
                bias,
            } => {
                let w = self.value(*weights).data().to_vec();
                let mut gw = vec![0.0; 3];
                for (k, &inp) in inputs.iter().enumerate() {
                    gw[k] = tensor::dot(gd, self.value(inp).data());
                    acc(inp, g.map(|v| v * w[k]));
                }
                acc(*weights, Tensor::new(self.value(*weights).shape(), gw)?);
                if let Some(b) = bias {
                    acc(*b, Tensor::new(self.value(*b).shape(), vec![gd.iter().sum()])?);
                }
            }
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), g)?;
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, Tensor::new(self.value(*b).shape(), gb)?);
                }
            }
            Op::PadEdge2d { x, top, left } => {
                let (c, h, w) = self.value(*x).dims3("pad_edge_2d")?;
                let (_, ph, pw) = g.dims3("pad_edge_2d")?;
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..ph {
                        let si = i.saturating_sub(*top).min(h - 1);
                        for j in 0..pw {
                            let sj = j.saturating_sub(*left).min(w - 1);
                            gx[(ch * h + si) * w + sj] += gd[(ch * ph + i) * pw + j];
                        }
                    }
                }
                acc(*x, Tensor::new(&[c, h, w], gx)?);
            }
            Op::MaxPool2d { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for (gv, &at) in gd.iter().zip(argmax) {
                    gx[at] += gv;
                }
                acc(*x, Tensor::new(xv.shape(), gx)?);
            }
            Op::MovingAvg { x, window } => {
                acc(*x, moving_average_backward(self.value(*x), *window, g)?);
            }
            Op::SliceRows { x, start } => {
                let (l, c) = self.value(*x).dims2("slice_rows")?;
                let mut gx = vec![0.0; l * c];
                gx[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*x, Tensor::new(&[l, c], gx)?);
            }
            Op::SplitHeads { x } => {
                let (heads, l, dh) = g.dims3("split_heads")?;
                acc(*x, merge_heads_value(gd, heads, l, dh)?);
            }
            Op::MergeHeads { x } => {
                let (heads, l, dh) = self.value(*x).dims3("merge_heads")?;
                let c = heads * dh;
                let mut gx = vec![0.0; heads * l * dh];
                for t in 0..l {
                    for h in 0..heads {
                        gx[(h * l + t) * dh..(h * l + t + 1) * dh]
                            .copy_from_slice(&gd[t * c + h * dh..t * c + (h + 1) * dh]);
                    }
                }
                acc(*x, Tensor::new(&[heads, l, dh], gx)?);
            }
            Op::Attention { q, k, v, tape } => {
                let (gq, gk, gv) = tape.backward(self.value(*q), self.value(*k), self.value(*v), g)?;
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
        Ok(())
    }
}

fn merge_heads_value(data: &[f64], heads: usize, l: usize, dh: usize) -> Result<Tensor> {
    let c = heads * dh;
    let mut out = vec![0.0; l * c];
    for h in 0..heads {
        for t in 0..l {
            out[t * c + h * dh..t * c + (h + 1) * dh]
                .copy_from_slice(&data[(h * l + t) * dh..(h * l + t + 1) * dh]);
        }
    }
    Tensor::new(&[l, c], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (cin, h, wd) = x.dims3("conv2d")?;
    let s = w.shape();
    let (cout, kh, kw) = (s[0], s[2], s[3]);
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let (xd, wt, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; cout];
    for co in 0..cout {
        let plane = &gd[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = plane.iter().sum();
        for ci in 0..cin {
            for di in 0..kh {
                for dj in 0..kw {
                    let widx = ((co * cin + ci) * kh + di) * kw + dj;
                    let wv = wt[widx];
                    let mut gacc = 0.0;
                    for i in 0..oh {
                        let base = (ci * h + i + di) * wd + dj;
                        let grow = &plane[i * ow..(i + 1) * ow];
                        gacc += tensor::dot(grow, &xd[base..base + ow]);
                        if wv != 0.0 {
                            for (o, gv) in gx[base..base + ow].iter_mut().zip(grow) {
                                *o += wv * gv;
                            }
                        }
                    }
                    gw[widx] += gacc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        gb,
    ))
}

fn moving_average_backward(x: &Tensor, window: usize, g: &Tensor) -> Result<Tensor> {
    let (l, d) = x.dims2("moving_average")?;
    let half = window / 2;
    let padded = l + 2 * half;
    let gd = g.data();
    // prefix over output rows
    let mut prefix = vec![0.0; (l + 1) * d];
    for t in 0..l {
        for f in 0..d {
            prefix[(t + 1) * d + f] = prefix[t * d + f] + gd[t * d + f];
        }
    }
    let inv = 1.0 / window as f64;
    let mut gx = vec![0.0; l * d];
    for m in 0..padded {
        // outputs t with t <= m <= t + window - 1
        let lo = (m + 1).saturating_sub(window);
        let hi = m.min(l - 1);
        if lo > hi {
            continue;
        }
        let s = m.saturating_sub(half).min(l - 1);
        for f in 0..d {
            gx[s * d + f] += (prefix[(hi + 1) * d + f] - prefix[lo * d + f]) * inv;
        }
    }
    Tensor::new(&[l, d], gx)
}
