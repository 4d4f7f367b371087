//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of operations over row-major
//! `f64` tensors. Forward values are computed eagerly as ops are
//! recorded; [`Graph::backward`] walks the tape in reverse and returns
//! a gradient per `requires_grad` ancestor of the loss. The op set is
//! deliberately small and every backward rule lives in one match arm.

mod gradcheck;
mod nn;
mod optim;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};
pub use nn::{lstm_step, multi_head_attention, position_wise_ffn, scaled_dot_attention, LstmParams};
pub use optim::{Optimizer, OptimizerKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias { x: usize, b: usize },
    MulElem(usize, usize),
    Scale { x: usize, c: f64 },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    SoftmaxLast { x: usize },
    MeanAxis { x: usize, axis: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { x: usize, w: usize },
    GlobalMaxPool { x: usize, argmax: Vec<usize> },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    PairwiseLoss { pred: usize, truth: Vec<f64>, dists: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias { .. } => "add_bias",
            Op::MulElem(..) => "mul_elem",
            Op::Scale { .. } => "scale",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::SoftmaxLast { .. } => "softmax",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Conv1d { .. } => "conv1d",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy_with_softmax",
            Op::PairwiseLoss { .. } => "pairwise_loss",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::MulElem(a, b) => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Scale { x, .. }
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::SoftmaxLast { x }
            | Op::MeanAxis { x, .. }
            | Op::MeanAll { x }
            | Op::SumAll { x }
            | Op::GlobalMaxPool { x, .. }
            | Op::MaxPool1d { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::MatMul { a, b } | Op::Bmm { a, b } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { x, w } => vec![*x, *w],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::PairwiseLoss { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tensor handle.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// The autodiff tape. Create one per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    train_mode: bool,
}

impl Graph {
    /// Evaluation-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            train_mode: false,
        }
    }

    /// Training-mode graph; `seed` drives dropout masks.
    pub fn for_training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train_mode: true,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train_mode
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != values.len() {
            return Err(Error::shape(format!(
                "param: {} values for shape {shape:?}",
                values.len()
            )));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            values,
            requires_grad: true,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != values.len() {
            return Err(Error::shape(format!(
                "constant: {} values for shape {shape:?}",
                values.len()
            )));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            values,
            requires_grad: false,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].values
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a.0, b.0), shape, values))
    }

    /// Broadcast a vector `b` of length N over the last axis of `x`.
    pub fn add_bias(&mut self, x: Tensor, b: Tensor) -> Result<Tensor> {
        let n = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("add_bias on scalar"))?;
        if self.shape(b) != [n] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} vs last axis {n}",
                self.shape(b)
            )));
        }
        let bias = self.nodes[b.0].values.clone();
        let values = self.nodes[x.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::AddBias { x: x.0, b: b.0 }, shape, values))
    }

    pub fn mul_elem(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul_elem: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::MulElem(a.0, b.0), shape, values))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let values = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale { x: x.0, c }, shape, values)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let values = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu(x.0), shape, values)
    }

    pub fn tanh(&mut self, x: Tensor) -> Tensor {
        let values = self.nodes[x.0].values.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Tanh(x.0), shape, values)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let values = self.nodes[x.0]
            .values
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sigmoid(x.0), shape, values)
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, vec![m, n], out))
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = &bv[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = ab[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        ob[i * n + j] += x * bb[p * n + j];
                    }
                }
            }
        }
        Ok(self.push(Op::Bmm { a: a.0, b: b.0 }, vec![bs, m, n], out))
    }

    // -- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.nodes[x.0].values.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(Op::Reshape { x: x.0 }, shape, values))
    }

    /// Reorder axes: output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, x: Tensor, axes: Vec<usize>) -> Result<Tensor> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if axes.len() != in_shape.len()
            || axes.iter().any(|&a| a >= in_shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!("permute: axes {axes:?} for {in_shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_str = strides(&in_shape);
        let out_str = strides(&out_shape);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; xv.len()];
        let mut idx = vec![0usize; in_shape.len()];
        for (flat, &v) in xv.iter().enumerate() {
            let mut rem = flat;
            for (d, s) in in_str.iter().enumerate() {
                idx[d] = rem / s;
                rem %= s;
            }
            let mut oflat = 0;
            for (j, &a) in axes.iter().enumerate() {
                oflat += idx[a] * out_str[j];
            }
            out[oflat] = v;
        }
        Ok(self.push(Op::Permute { x: x.0, axes }, out_shape, out))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut axis_total = 0;
        for &t in xs {
            let s = self.shape(t);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for &t in xs {
            let a = self.shape(t)[axis];
            let tv = &self.nodes[t.0].values;
            for o in 0..outer {
                let src = &tv[o * a * inner..(o + 1) * a * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                out[dst_start..dst_start + a * inner].copy_from_slice(src);
            }
            offset += a;
        }
        let ids = xs.iter().map(|t| t.0).collect();
        Ok(self.push(Op::Concat { xs: ids, axis }, out_shape, out))
    }

    // -- reductions and normalizers ----------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Tensor) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax on scalar"))?;
        let mut values = self.nodes[x.0].values.clone();
        for row in values.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Op::SoftmaxLast { x: x.0 }, shape, values))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let in_shape = self.shape(x).to_vec();
        if axis >= in_shape.len() {
            return Err(Error::shape(format!("mean_axis {axis} for {in_shape:?}")));
        }
        let a = in_shape[axis];
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..a {
                for i in 0..inner {
                    out[o * inner + i] += xv[o * a * inner + k * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= a as f64;
        }
        let mut out_shape = in_shape.clone();
        out_shape.remove(axis);
        Ok(self.push(Op::MeanAxis { x: x.0, axis }, out_shape, out))
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let xv = &self.nodes[x.0].values;
        let mean = xv.iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::MeanAll { x: x.0 }, vec![1], vec![mean])
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let sum = self.nodes[x.0].values.iter().sum();
        self.push(Op::SumAll { x: x.0 }, vec![1], vec![sum])
    }

    // -- neural-net primitives ---------------------------------------------

    /// Gather rows of `table` (`[V,D]`) for `ids` with logical shape
    /// `id_shape`; output shape is `id_shape ++ [D]`.
    pub fn embedding_lookup(
        &mut self,
        table: Tensor,
        ids: &[usize],
        id_shape: &[usize],
    ) -> Result<Tensor> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if numel(id_shape) != ids.len() {
            return Err(Error::shape(format!(
                "embedding ids: {} for shape {id_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding id {bad} >= vocab {v}")));
        }
        let tv = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            shape,
            out,
        ))
    }

    /// 1-D convolution, stride 1, valid padding:
    /// `[B,T,Ci] * [K,Ci,Co] -> [B,T-K+1,Co]`.
    pub fn conv1d(&mut self, x: Tensor, w: Tensor) -> Result<Tensor> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(Error::shape(format!("conv1d: {sx:?} * {sw:?}")));
        }
        let (bs, t, ci) = (sx[0], sx[1], sx[2]);
        let (k, _, co) = (sw[0], sw[1], sw[2]);
        if t < k {
            return Err(Error::shape(format!("conv1d: length {t} < kernel {k}")));
        }
        let t_out = t - k + 1;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut out = vec![0.0; bs * t_out * co];
        for b in 0..bs {
            for ti in 0..t_out {
                for kk in 0..k {
                    for i in 0..ci {
                        let xval = xv[b * t * ci + (ti + kk) * ci + i];
                        if xval == 0.0 {
                            continue;
                        }
                        let wrow = &wv[kk * ci * co + i * co..kk * ci * co + (i + 1) * co];
                        let orow = &mut out[b * t_out * co + ti * co..b * t_out * co + (ti + 1) * co];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += xval * wv;
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Conv1d { x: x.0, w: w.0 }, vec![bs, t_out, co], out))
    }

    /// Global max over the time axis: `[B,T,C] -> [B,C]`.
    pub fn global_max_pool(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("global_max_pool: {s:?}")));
        }
        let (bs, t, c) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![f64::NEG_INFINITY; bs * c];
        let mut argmax = vec![0usize; bs * c];
        for b in 0..bs {
            for ti in 0..t {
                for ch in 0..c {
                    let v = xv[b * t * c + ti * c + ch];
                    if v > out[b * c + ch] {
                        out[b * c + ch] = v;
                        argmax[b * c + ch] = ti;
                    }
                }
            }
        }
        Ok(self.push(Op::GlobalMaxPool { x: x.0, argmax }, vec![bs, c], out))
    }

    /// Windowed max over time, valid windows only:
    /// `[B,T,C] -> [B,(T-width)/stride+1,C]`.
    pub fn max_pool1d(&mut self, x: Tensor, width: usize, stride: usize) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || width == 0 || stride == 0 {
            return Err(Error::shape(format!("max_pool1d: {s:?} width {width} stride {stride}")));
        }
        let (bs, t, c) = (s[0], s[1], s[2]);
        if t < width {
            return Err(Error::shape(format!("max_pool1d: length {t} < window {width}")));
        }
        let t_out = (t - width) / stride + 1;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![f64::NEG_INFINITY; bs * t_out * c];
        let mut argmax = vec![0usize; bs * t_out * c];
        for b in 0..bs {
            for to in 0..t_out {
                for w in 0..width {
                    let ti = to * stride + w;
                    for ch in 0..c {
                        let v = xv[b * t * c + ti * c + ch];
                        let oi = b * t_out * c + to * c + ch;
                        if v > out[oi] {
                            out[oi] = v;
                            argmax[oi] = ti;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::MaxPool1d { x: x.0, argmax },
            vec![bs, t_out, c],
            out,
        ))
    }

    /// Train-mode inverted dropout; identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Tensor, p: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p}")));
        }
        if !self.train_mode || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[x.0].values.len())
            .map(|_| {
                if self.rng.gen_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let values = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Dropout { x: x.0, mask }, shape, values))
    }

    /// Fused softmax + cross-entropy, mean over the batch:
    /// logits `[B,C]`, targets are class indices.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?}, {} targets",
                targets.len()
            )));
        }
        let (bs, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {bad} >= classes {c}")));
        }
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![0.0; bs * c];
        let mut loss = 0.0;
        for b in 0..bs {
            let row = &lv[b * c..(b + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[b * c + j] /= sum;
            }
            loss -= probs[b * c + targets[b]].max(1e-300).ln();
        }
        loss /= bs as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
        ))
    }

    /// Mean Euclidean distance between predicted rows and constant
    /// truth rows; subgradient 0 at coincident pairs.
    pub fn pairwise_loss(&mut self, pred: Tensor, truth: &[f64]) -> Result<Tensor> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || numel(&s) != truth.len() {
            return Err(Error::shape(format!(
                "pairwise_loss: pred {s:?}, {} truth values",
                truth.len()
            )));
        }
        let (bs, d) = (s[0], s[1]);
        let pv = &self.nodes[pred.0].values;
        let mut dists = vec![0.0; bs];
        for b in 0..bs {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = pv[b * d + j] - truth[b * d + j];
                acc += diff * diff;
            }
            dists[b] = acc.sqrt();
        }
        let loss = dists.iter().sum::<f64>() / bs as f64;
        Ok(self.push(
            Op::PairwiseLoss {
                pred: pred.0,
                truth: truth.to_vec(),
                dists,
            },
            vec![1],
            vec![loss],
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Returns a gradient for every
    /// `requires_grad` ancestor; untouched tensors report `None`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &self.nodes {
            if node.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite value in forward pass at op `{}`",
                    node.op.name()
                )));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.accumulate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn add_to(&self, grads: &mut Vec<Option<Vec<f64>>>, node: usize, delta: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let slot = grads[node]
            .get_or_insert_with(|| vec![0.0; self.nodes[node].values.len()]);
        delta(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, gout: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to(grads, *a, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
                self.add_to(grads, *b, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
            }
            Op::AddBias { x, b } => {
                self.add_to(grads, *x, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
                let n = self.nodes[*b].values.len();
                self.add_to(grads, *b, |g| {
                    for (j, &d) in gout.iter().enumerate() {
                        g[j % n] += d;
                    }
                });
            }
            Op::MulElem(a, b) => {
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.add_to(grads, *a, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                });
                self.add_to(grads, *b, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.add_to(grads, *x, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += d * c;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].values;
                self.add_to(grads, *x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gout).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[i].values;
                self.add_to(grads, *x, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(yv) {
                        *g += d * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[i].values;
                self.add_to(grads, *x, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gout).zip(yv) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::MatMul { a, b } => {
                let sa = &self.nodes[*a].shape;
                let sb = &self.nodes[*b].shape;
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.add_to(grads, *a, |g| {
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i2 * n + j] * bv[p * n + j];
                            }
                            g[i2 * k + p] += acc;
                        }
                    }
                });
                self.add_to(grads, *b, |g| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += av[i2 * k + p] * gout[i2 * n + j];
                            }
                            g[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Bmm { a, b } => {
                let sa = &self.nodes[*a].shape;
                let sb = &self.nodes[*b].shape;
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let av = &self.nodes[*a].values;
                let bv = &self.nodes[*b].values;
                self.add_to(grads, *a, |g| {
                    for bi in 0..bs {
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gout[bi * m * n + i2 * n + j] * bv[bi * k * n + p * n + j];
                                }
                                g[bi * m * k + i2 * k + p] += acc;
                            }
                        }
                    }
                });
                self.add_to(grads, *b, |g| {
                    for bi in 0..bs {
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i2 in 0..m {
                                    acc += av[bi * m * k + i2 * k + p] * gout[bi * m * n + i2 * n + j];
                                }
                                g[bi * k * n + p * n + j] += acc;
                            }
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.add_to(grads, *x, |g| {
                    for (g, &d) in g.iter_mut().zip(gout) {
                        *g += d;
                    }
                });
            }
            Op::Permute { x, axes } => {
                let in_shape = &self.nodes[*x].shape;
                let out_shape = &self.nodes[i].shape;
                let in_str = strides(in_shape);
                let out_str = strides(out_shape);
                let mut idx = vec![0usize; in_shape.len()];
                self.add_to(grads, *x, |g| {
                    for (flat, gslot) in g.iter_mut().enumerate() {
                        let mut rem = flat;
                        for (d, s) in in_str.iter().enumerate() {
                            idx[d] = rem / s;
                            rem %= s;
                        }
                        let mut oflat = 0;
                        for (j, &a) in axes.iter().enumerate() {
                            oflat += idx[a] * out_str[j];
                        }
                        *gslot += gout[oflat];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &src in xs {
                    let a = self.nodes[src].shape[*axis];
                    self.add_to(grads, src, |g| {
                        for o in 0..outer {
                            let dst_start = o * axis_total * inner + offset * inner;
                            for (gs, &d) in g[o * a * inner..(o + 1) * a * inner]
                                .iter_mut()
                                .zip(&gout[dst_start..dst_start + a * inner])
                            {
                                *gs += d;
                            }
                        }
                    });
                    offset += a;
                }
            }
            Op::SoftmaxLast { x } => {
                let yv = &self.nodes[i].values;
                let n = *self.nodes[i].shape.last().unwrap();
                self.add_to(grads, *x, |g| {
                    for (row, (yrow, grow)) in yv.chunks(n).zip(gout.chunks(n)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            g[row * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let in_shape = &self.nodes[*x].shape;
                let a = in_shape[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let inv = 1.0 / a as f64;
                self.add_to(grads, *x, |g| {
                    for o in 0..outer {
                        for k in 0..a {
                            for j in 0..inner {
                                g[o * a * inner + k * inner + j] += gout[o * inner + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::MeanAll { x } => {
                let inv = 1.0 / self.nodes[*x].values.len() as f64;
                self.add_to(grads, *x, |g| {
                    for gs in g.iter_mut() {
                        *gs += gout[0] * inv;
                    }
                });
            }
            Op::SumAll { x } => {
                self.add_to(grads, *x, |g| {
                    for gs in g.iter_mut() {
                        *gs += gout[0];
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].shape[1];
                self.add_to(grads, *table, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[row * d + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, w } => {
                let sx = &self.nodes[*x].shape;
                let sw = &self.nodes[*w].shape;
                let (bs, t, ci) = (sx[0], sx[1], sx[2]);
                let (k, _, co) = (sw[0], sw[1], sw[2]);
                let t_out = t - k + 1;
                let xv = &self.nodes[*x].values;
                let wv = &self.nodes[*w].values;
                self.add_to(grads, *x, |g| {
                    for b in 0..bs {
                        for ti in 0..t_out {
                            for kk in 0..k {
                                for ii in 0..ci {
                                    let mut acc = 0.0;
                                    for o in 0..co {
                                        acc += gout[b * t_out * co + ti * co + o]
                                            * wv[kk * ci * co + ii * co + o];
                                    }
                                    g[b * t * ci + (ti + kk) * ci + ii] += acc;
                                }
                            }
                        }
                    }
                });
                self.add_to(grads, *w, |g| {
                    for kk in 0..k {
                        for ii in 0..ci {
                            for o in 0..co {
                                let mut acc = 0.0;
                                for b in 0..bs {
                                    for ti in 0..t_out {
                                        acc += xv[b * t * ci + (ti + kk) * ci + ii]
                                            * gout[b * t_out * co + ti * co + o];
                                    }
                                }
                                g[kk * ci * co + ii * co + o] += acc;
                            }
                        }
                    }
                });
            }
            Op::GlobalMaxPool { x, argmax } => {
                let sx = &self.nodes[*x].shape;
                let (t, c) = (sx[1], sx[2]);
                self.add_to(grads, *x, |g| {
                    for (bc, &ti) in argmax.iter().enumerate() {
                        let (b, ch) = (bc / c, bc % c);
                        g[b * t * c + ti * c + ch] += gout[bc];
                    }
                });
            }
            Op::MaxPool1d { x, argmax, .. } => {
                let sx = &self.nodes[*x].shape;
                let (t, c) = (sx[1], sx[2]);
                let t_out = self.nodes[i].shape[1];
                self.add_to(grads, *x, |g| {
                    for (oi, &ti) in argmax.iter().enumerate() {
                        let b = oi / (t_out * c);
                        let ch = oi % c;
                        g[b * t * c + ti * c + ch] += gout[oi];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.add_to(grads, *x, |g| {
                    for ((g, &d), &m) in g.iter_mut().zip(gout).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[*logits].shape[1];
                let bs = targets.len();
                let scale = gout[0] / bs as f64;
                self.add_to(grads, *logits, |g| {
                    for (b, &tgt) in targets.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == tgt { 1.0 } else { 0.0 };
                            g[b * c + j] += scale * (probs[b * c + j] - indicator);
                        }
                    }
                });
            }
            Op::PairwiseLoss { pred, truth, dists } => {
                let s = &self.nodes[*pred].shape;
                let (bs, d) = (s[0], s[1]);
                let pv = &self.nodes[*pred].values;
                let scale = gout[0] / bs as f64;
                self.add_to(grads, *pred, |g| {
                    for b in 0..bs {
                        if dists[b] < 1e-12 {
                            continue; // subgradient 0 at the kink
                        }
                        for j in 0..d {
                            g[b * d + j] +=
                                scale * (pv[b * d + j] - truth[b * d + j]) / dists[b];
                        }
                    }
                });
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Non-trainable sinusoidal positional encodings, length × dim.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests;
