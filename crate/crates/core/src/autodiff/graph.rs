use rand::Rng;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    LogSigmoid {
        a: Var,
    },
    Log {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    MaskFill {
        a: Var,
        mask: Vec<bool>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SumLast {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Narrow {
        a: Var,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Embedding { .. } => "embedding",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::Log { .. } => "log",
            Op::Dropout { .. } => "dropout",
            Op::MaskFill { .. } => "mask_fill",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumLast { .. } => "sum_last",
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

/// A tape of recorded operations.
///
/// Nodes only reference earlier nodes, so the tape order is a topological
/// order and the backward sweep walks it in reverse, visiting each node once.
/// A graph supports a single backward pass; a second call is an error.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast `b` over the leading axes of `a`: `b.shape` must be a suffix of `a.shape`.
fn broadcast_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(
            op,
            format!("cannot broadcast {:?} over {:?}", b, a),
        ));
    }
    Ok(())
}

fn reduce_to(b_len: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b_len];
    for chunk in g.chunks(b_len) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
            backward_done: false,
        }
    }

    /// Disable the per-op finiteness check (on by default).
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let shared = sb.len() == 2;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for z in 0..batch {
            let bs = if shared { 0 } else { z * k * n };
            mm_nn(
                &av[z * m * k..(z + 1) * m * k],
                &bv[bs..bs + k * n],
                &mut out[z * m * n..(z + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "transpose",
                format!("needs rank >= 2, got {:?}", s),
            ));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_last2(self.value(a).data(), r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(Tensor::new(shape, out)?, Op::Transpose { a }, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        broadcast_suffix(op, ta.shape(), tb.shape())?;
        let bl = tb.len().max(1);
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % bl]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scaled(factor);
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    /// Gather rows of a `[rows, d]` table; the result has shape `index_shape ++ [d]`.
    pub fn embedding(
        &mut self,
        table: Var,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape(
                "embedding",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape(
                "embedding",
                format!(
                    "{} indices do not fill shape {:?}",
                    indices.len(),
                    index_shape
                ),
            ));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::InvalidArgument(format!(
                    "embedding index {} out of range for table with {} rows",
                    ix, rows
                )));
            }
            out.extend_from_slice(t.row(ix));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::LogSoftmax { a }, &[a])
    }

    /// Normalize each row over the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "{} shape {:?} does not match feature size {}",
                        name,
                        self.shape(p),
                        d
                    ),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.num_rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |v| v.max(0.0))?;
        self.push(out, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid)?;
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    /// `ln(sigmoid(x))`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, log_sigmoid)?;
        self.push(out, Op::LogSigmoid { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::ln)?;
        self.push(out, Op::Log { a }, &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {} not in [0, 1)",
                p
            )));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { a, mask }, &[a])
    }

    /// Replace entries where `mask` is true by `value`.
    ///
    /// Attention uses this with an additive-sized constant (-1e9) rather than
    /// -inf, so a fully masked row softmaxes to uniform instead of NaN.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::shape(
                "mask_fill",
                format!("mask of {} entries for tensor {:?}", mask.len(), t.shape()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            out,
            Op::MaskFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().is_empty() {
            return Err(Error::shape("sum_last", "scalar has no last axis"));
        }
        let w = t.last_dim();
        let data: Vec<f64> = t.data().chunks(w).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::SumLast { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape { a }, &[a])
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if start + len > w || t.shape().is_empty() {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {}..{} outside last axis of {:?}",
                    start,
                    start + len,
                    t.shape()
                ),
            ));
        }
        let mut data = Vec::with_capacity(t.len() / w * len);
        for row in t.data().chunks(w) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Narrow { a, start }, &[a])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not align with leading axes {:?}", s, lead),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Scale each last-axis row to unit length: `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let mut norms = Vec::with_capacity(t.num_rows());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms.push(r);
            for v in row.iter_mut() {
                *v /= r;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::L2Normalize { a, norms }, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward already ran on this graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (parent, pg) in self.vjp(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(shapes[i].clone(), g)).transpose(),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = matmul_dims(sa, sb)?;
                let shared = sb.len() == 2;
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for z in 0..batch {
                    let bs = if shared { 0 } else { z * k * n };
                    let gz = &g[z * m * n..(z + 1) * m * n];
                    mm_nt(
                        gz,
                        &bv[bs..bs + k * n],
                        &mut ga[z * m * k..(z + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    mm_tn(
                        &av[z * m * k..(z + 1) * m * k],
                        gz,
                        &mut gb[bs..bs + k * n],
                        m,
                        k,
                        n,
                    );
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                vec![(*a, transpose_last2(g, r, c))]
            }
            Op::Add { a, b } => {
                let bl = val(*b).len().max(1);
                vec![(*a, g.to_vec()), (*b, reduce_to(bl, g))]
            }
            Op::Sub { a, b } => {
                let bl = val(*b).len().max(1);
                let neg: Vec<f64> = reduce_to(bl, g).into_iter().map(|v| -v).collect();
                vec![(*a, g.to_vec()), (*b, neg)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let bl = bv.len().max(1);
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bv[i % bl])
                    .collect();
                let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                vec![(*a, ga), (*b, reduce_to(bl, &prod))]
            }
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|v| v * factor).collect())],
            Op::Embedding { table, indices } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (slot, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[slot * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Softmax { a } => {
                let w = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((yr, gr), outr) in out.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..w {
                        outr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax { a } => {
                let w = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((yr, gr), outr) in out.chunks(w).zip(g.chunks(w)).zip(ga.chunks_mut(w)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..w {
                        outr[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gamma = val(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    let nd = d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gamma[j];
                        gx[r * d + j] = inv / nd * (nd * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gbias)]
            }
            Op::Relu { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sigmoid { a } => {
                let ga = g
                    .iter()
                    .zip(out)
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                vec![(*a, ga)]
            }
            Op::LogSigmoid { a } => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| gi * sigmoid(-x))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Log { a } => {
                let ga = g.iter().zip(val(*a)).map(|(gi, x)| gi / x).collect();
                vec![(*a, ga)]
            }
            Op::Dropout { a, mask } => {
                vec![(*a, g.iter().zip(mask).map(|(gi, m)| gi * m).collect())]
            }
            Op::MaskFill { a, mask } => {
                let ga = g
                    .iter()
                    .zip(mask)
                    .map(|(gi, &m)| if m { 0.0 } else { *gi })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean { a } => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumLast { a } => {
                let w = self.value(*a).last_dim();
                let ga = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, w))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Narrow { a, start } => {
                let wi = self.value(*a).last_dim();
                let wo = node.value.last_dim();
                let mut ga = vec![0.0; val(*a).len()];
                for (r, gr) in g.chunks(wo).enumerate() {
                    ga[r * wi + start..r * wi + start + wo].copy_from_slice(gr);
                }
                vec![(*a, ga)]
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.num_rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, gp));
                }
                res
            }
            Op::L2Normalize { a, norms } => {
                let w = node.value.last_dim();
                let mut ga = vec![0.0; g.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let yr = &out[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..w {
                        ga[r * w + j] = (gr[j] - yr[j] * dot) / nr;
                    }
                }
                vec![(*a, ga)]
            }
        })
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be rank >= 2, got {:?} x {:?}", sa, sb),
        ));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", sa, sb),
        ));
    }
    if sb.len() > 2 && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::shape(
            "matmul",
            format!("batch axes differ: {:?} x {:?}", sa, sb),
        ));
    }
    let batch = sa[..sa.len() - 2].iter().product();
    Ok((batch, m, k, n))
}

fn transpose_last2(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = r * c;
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
