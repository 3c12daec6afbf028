use super::kernels;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Conv1d { input: Var, weight: Var, bias: Var },
    L2Normalize { input: Var, norms: Vec<f64> },
    Cosine { a: Var, b: Var, a_hat: Vec<f64>, b_hat: Vec<f64>, a_norm: Vec<f64>, b_norm: Vec<f64> },
    CrossEntropy { input: Var, targets: Vec<usize>, probs: Vec<f64> },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Record of one forward pass. Nodes are appended in evaluation order, which
/// is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" x ")
}

fn dims2(name: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(name, format!("expected rank 2, got {:?}", t.shape())))
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row(usize),
}

fn broadcast(name: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if let Some((_, c)) = a.dims2() {
        let row_like = matches!(b.shape(), [n] if *n == c) || matches!(b.shape(), [1, n] if *n == c);
        if row_like {
            return Ok(Broadcast::Row(c));
        }
    }
    Err(Error::shape(name, shape_str(&[a.shape(), b.shape()])))
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(Error::shape("matmul", shape_str(&[av.shape(), bv.shape()])));
        }
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast("add", av, bv)?;
        let out: Vec<f64> = match bc {
            Broadcast::Same => av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
            Broadcast::Row(c) => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[i % c])
                .collect(),
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may also be a row vector broadcast over rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast("mul", av, bv)?;
        let out: Vec<f64> = match bc {
            Broadcast::Same => av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
            Broadcast::Row(c) => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * bv.data()[i % c])
                .collect(),
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("transpose", av)?;
        let out = kernels::transpose(av.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} parts, axis {axis}", parts.len())));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| dims2("concat", self.value(p)))
            .collect::<Result<_>>()?;
        let mismatch = || {
            let s: Vec<&[usize]> = parts.iter().map(|&p| self.value(p).shape()).collect();
            Error::shape("concat", format!("axis {axis}: {}", shape_str(&s)))
        };
        let (rows, cols, data) = if axis == 0 {
            let cols = shapes[0].1;
            if shapes.iter().any(|s| s.1 != cols) {
                return Err(mismatch());
            }
            let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
            (shapes.iter().map(|s| s.0).sum(), cols, data)
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(mismatch());
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            (rows, cols, data)
        };
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a rank-2 tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("slice", av)?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > limit {
            return Err(Error::shape(
                "slice",
                format!("{:?} axis {axis} range {start}..{end}", av.shape()),
            ));
        }
        let (shape, data) = if axis == 0 {
            (vec![end - start, c], av.data()[start * c..end * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                d.extend_from_slice(&av.row(i)[start..end]);
            }
            (vec![r, end - start], d)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("softmax", av)?;
        let out = kernels::softmax_rows(av.data(), c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(a), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("layer_norm", av)?;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for (xr, or) in av.data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in or.iter_mut().zip(xr) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LayerNorm { input: a, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Convolution across the layer axis of a `[L, P, D]` stack.
    ///
    /// `weight` is `[C, L, K]` with odd `K`, sliding along the feature axis
    /// with zero padding; `bias` is `[C]`. The output is `[P, C * D]`, output
    /// channel `c` occupying columns `c*D..(c+1)*D`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let err = || Error::shape("conv1d", shape_str(&[x.shape(), w.shape(), b.shape()]));
        let (l, p, d) = match x.shape() {
            [l, p, d] => (*l, *p, *d),
            _ => return Err(err()),
        };
        let (c, wl, k) = match w.shape() {
            [c, wl, k] => (*c, *wl, *k),
            _ => return Err(err()),
        };
        if wl != l || k % 2 == 0 || b.numel() != c || b.rank() != 1 {
            return Err(err());
        }
        let half = (k / 2) as isize;
        let (xd, wd, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; p * c * d];
        for pi in 0..p {
            for ci in 0..c {
                let orow = &mut out[pi * c * d + ci * d..pi * c * d + (ci + 1) * d];
                orow.iter_mut().for_each(|o| *o = bd[ci]);
                for li in 0..l {
                    let xrow = &xd[(li * p + pi) * d..(li * p + pi + 1) * d];
                    for t in 0..k {
                        let wv = wd[(ci * l + li) * k + t];
                        let shift = t as isize - half;
                        for (di, o) in orow.iter_mut().enumerate() {
                            let src = di as isize + shift;
                            if src >= 0 && (src as usize) < d {
                                *o += wv * xrow[src as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(Tensor::new(vec![p, c * d], out)?, Op::Conv1d { input, weight, bias }, rg))
    }

    /// Divide each row by its Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2("l2_normalize", av)?;
        let (out, norms) = normalize_rows(av.data(), c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::L2Normalize { input: a, norms }, rg))
    }

    /// `S[i][j] = cos(a_i, b_j)` for `a: [N, d]`, `b: [M, d]`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = dims2("cosine_similarity_matrix", av)?;
        let (m, d2) = dims2("cosine_similarity_matrix", bv)?;
        if d != d2 {
            return Err(Error::shape("cosine_similarity_matrix", shape_str(&[av.shape(), bv.shape()])));
        }
        let (a_hat, a_norm) = normalize_rows(av.data(), d);
        let (b_hat, b_norm) = normalize_rows(bv.data(), d);
        let out = kernels::matmul_bt(&a_hat, &b_hat, n, d, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Cosine { a, b, a_hat, b_hat, a_norm, b_norm },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = dims2("cross_entropy", lv)?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let lse = kernels::logsumexp_rows(lv.data(), c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| lse[i] - lv.data()[i * c + t])
            .sum::<f64>()
            / r as f64;
        let probs = kernels::softmax_rows(lv.data(), c);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { input: logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Reverse-mode gradients of a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar_like() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().expect("rank 2");
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::matmul_bt(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_at(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                let bc = broadcast("add", self.value(*a), self.value(*b)).expect("checked in forward");
                match bc {
                    Broadcast::Same => self.accumulate(grads, *b, g.to_vec()),
                    Broadcast::Row(c) => self.accumulate_with(grads, *b, |acc| {
                        for (i, gv) in g.iter().enumerate() {
                            acc[i % c] += gv;
                        }
                    }),
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = broadcast("mul", av, bv).expect("checked in forward");
                let bval = |i: usize| match bc {
                    Broadcast::Same => bv.data()[i],
                    Broadcast::Row(c) => bv.data()[i % c],
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().enumerate().map(|(i, gv)| gv * bval(i)).collect());
                }
                match bc {
                    Broadcast::Same => {
                        self.accumulate(grads, *b, g.iter().zip(av.data()).map(|(gv, x)| gv * x).collect())
                    }
                    Broadcast::Row(c) => self.accumulate_with(grads, *b, |acc| {
                        for (i, (gv, x)) in g.iter().zip(av.data()).enumerate() {
                            acc[i % c] += gv * x;
                        }
                    }),
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|gv| gv * c).collect()),
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("rank 2");
                // g is [c, r]
                self.accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2().expect("rank 2");
                    if *axis == 0 {
                        self.accumulate(grads, p, g[offset * total_cols..(offset + r) * total_cols].to_vec());
                        offset += r;
                    } else {
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * total_cols + offset..i * total_cols + offset + c]);
                        }
                        self.accumulate(grads, p, part);
                        offset += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let (_, c) = self.value(*input).dims2().expect("rank 2");
                let (sr, sc) = node.value.dims2().expect("rank 2");
                let (axis, start) = (*axis, *start);
                self.accumulate_with(grads, *input, |acc| {
                    if axis == 0 {
                        for (a, gv) in acc[start * c..(start + sr) * c].iter_mut().zip(g) {
                            *a += gv;
                        }
                    } else {
                        for i in 0..sr {
                            for j in 0..sc {
                                acc[i * c + start + j] += g[i * sc + j];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm { input, inv_std } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut out = vec![0.0; y.len()];
                for (i, ((yr, gr), or)) in y.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[i] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(grads, *input, out);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(gv, xv)| gv * kernels::gelu_grad(*xv)).collect());
            }
            Op::Conv1d { input, weight, bias } => self.conv1d_backward(*input, *weight, *bias, g, grads),
            Op::L2Normalize { input, norms } => {
                let c = node.value.shape()[1];
                let out = normalize_rows_backward(node.value.data(), norms, g, c);
                self.accumulate(grads, *input, out);
            }
            Op::Cosine { a, b, a_hat, b_hat, a_norm, b_norm } => {
                let (n, d) = self.value(*a).dims2().expect("rank 2");
                let m = b_norm.len();
                if self.requires_grad(*a) {
                    let g_ahat = kernels::matmul(g, b_hat, n, m, d);
                    self.accumulate(grads, *a, normalize_rows_backward(a_hat, a_norm, &g_ahat, d));
                }
                if self.requires_grad(*b) {
                    let g_bhat = kernels::matmul_at(g, a_hat, n, m, d);
                    self.accumulate(grads, *b, normalize_rows_backward(b_hat, b_norm, &g_bhat, d));
                }
            }
            Op::CrossEntropy { input, targets, probs } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut out: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    out[i * c + t] -= scale;
                }
                self.accumulate(grads, *input, out);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
        }
    }

    fn conv1d_backward(&self, input: Var, weight: Var, bias: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (x, w) = (self.value(input), self.value(weight));
        let (l, p, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c, k) = (w.shape()[0], w.shape()[2]);
        let half = (k / 2) as isize;
        let (xd, wd) = (x.data(), w.data());
        let mut gx = vec![0.0; xd.len()];
        let mut gw = vec![0.0; wd.len()];
        let mut gb = vec![0.0; c];
        for pi in 0..p {
            for ci in 0..c {
                let grow = &g[pi * c * d + ci * d..pi * c * d + (ci + 1) * d];
                gb[ci] += grow.iter().sum::<f64>();
                for li in 0..l {
                    let base = (li * p + pi) * d;
                    for t in 0..k {
                        let widx = (ci * l + li) * k + t;
                        let shift = t as isize - half;
                        let mut acc_w = 0.0;
                        for (di, gv) in grow.iter().enumerate() {
                            let src = di as isize + shift;
                            if src >= 0 && (src as usize) < d {
                                let s = base + src as usize;
                                acc_w += gv * xd[s];
                                gx[s] += gv * wd[widx];
                            }
                        }
                        gw[widx] += acc_w;
                    }
                }
            }
        }
        self.accumulate(grads, input, gx);
        self.accumulate(grads, weight, gw);
        self.accumulate(grads, bias, gb);
    }
}

fn normalize_rows(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(x.len() / c.max(1));
    for (xr, or) in x.chunks(c).zip(out.chunks_mut(c)) {
        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        for (o, v) in or.iter_mut().zip(xr) {
            *o = v / n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through `y = x / |x|` given `y`, `|x|` and `dL/dy`.
fn normalize_rows_backward(y: &[f64], norms: &[f64], g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for (i, ((yr, gr), or)) in y.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)).enumerate() {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, yv), gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = (gv - yv * dot) / norms[i];
        }
    }
    out
}
