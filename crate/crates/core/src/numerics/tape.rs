//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Nodes are appended in execution order, so the tape is topologically
//! sorted by construction and the backward sweep is a single reverse scan.
//! A tape can be swept once; record a fresh tape for every step.

use std::collections::HashMap;

use super::fft::causal_conv_f64;
use super::kernels::{self, Conv1dGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Gelu(Var),
    SumAll(Var),
    MeanAll(Var),
    GroupMeanRows { x: Var, group: usize },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, inv_norm: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    SumSqDiff(Var, Var),
    Attention(Box<AttnCache>),
    CausalConv { u: Var, kernel: Var, group: usize },
    NormalizeL1Cols { x: Var, norms: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var, geom: Conv1dGeom },
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    group: usize,
    half_window: Option<usize>,
    band: usize,
    probs: Vec<f64>,
}

impl AttnCache {
    fn span(&self, i: usize) -> (usize, usize) {
        match self.half_window {
            Some(h) => (i.saturating_sub(h), (i + h).min(self.group - 1)),
            None => (0, self.group - 1),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    pub fn wrt(&self, var: Var) -> Result<&[f64]> {
        self.grads
            .get(var.0)
            .and_then(|g| g.as_deref())
            .ok_or_else(|| Error::MissingGradient(format!("node {}", var.0)))
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Linear record of tensor primitives. Values are held in `f64`; tensors
/// entering and leaving the tape are `f32`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|&v| v as f32).collect())
            .expect("tape values are finite")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn d2(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(widen(t.data()), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(data, shape, Op::Leaf, false)
    }

    /// Differentiable leaf (free input).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(widen(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls return the same node, so
    /// fan-out gradients accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(widen(t.data()), t.shape().to_vec(), Op::Param, t.requires_grad());
        self.bound.insert(id, v);
        v
    }

    /// Value copy cut off from the graph (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].value.len(),
            self.nodes[b.0].value.len(),
            "{what}: operand sizes differ ({:?} vs {:?})",
            self.nodes[a.0].shape,
            self.nodes[b.0].shape
        );
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        self.push(value, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "add");
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sub");
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "mul");
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[r, c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, c) = self.d2(x);
        assert_eq!(self.nodes[b.0].value.len(), c, "add_row: bias width");
        let bv = &self.nodes[b.0].value;
        let value: Vec<f64> =
            self.nodes[x.0].value.iter().enumerate().map(|(i, &v)| v + bv[i % c]).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, b]);
        self.push(value, shape, Op::AddRow(x, b), ng)
    }

    /// `x[r, c] * s[c]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (_, c) = self.d2(x);
        assert_eq!(self.nodes[s.0].value.len(), c, "mul_row: scale width");
        let sv = &self.nodes[s.0].value;
        let value: Vec<f64> =
            self.nodes[x.0].value.iter().enumerate().map(|(i, &v)| v * sv[i % c]).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, s]);
        self.push(value, shape, Op::MulRow(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, Op::Scale(x, c), ng)
    }

    /// `a[.., k] @ b[k, n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.d2(a);
        let bs = &self.nodes[b.0].shape;
        assert!(bs.len() == 2 && bs[0] == k, "matmul: {:?} x {:?}", self.nodes[a.0].shape, bs);
        let n = bs[1];
        let value = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let mut shape = self.nodes[a.0].shape.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        self.push(value, shape, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.d2(x);
        let value = kernels::transpose(&self.nodes[x.0].value, r, c);
        let ng = self.ng(&[x]);
        self.push(value, vec![c, r], Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.nodes[x.0].value.len(), "reshape size");
        let value = self.nodes[x.0].value.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, Op::Reshape(x), ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let rows = self.d2(xs[0]).0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (r, c) = self.d2(v);
                assert_eq!(r, rows, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[v.0].value[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(xs);
        self.push(value, vec![rows, total], Op::ConcatCols(xs.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let cols = self.d2(xs[0]).1;
        let mut value = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let (r, c) = self.d2(v);
            assert_eq!(c, cols, "concat_rows: column mismatch");
            rows += r;
            value.extend_from_slice(&self.nodes[v.0].value);
        }
        let ng = self.ng(xs);
        self.push(value, vec![rows, cols], Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.d2(x);
        assert!(start + len <= r, "slice_rows out of range");
        let value = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        let ng = self.ng(&[x]);
        self.push(value, vec![len, c], Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.d2(x);
        assert!(start + len <= c, "slice_cols out of range");
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(value, vec![r, len], Op::SliceCols { x, start }, ng)
    }

    /// Row lookup `out[i] = x[idx[i]]` (embeddings, upsampling, reordering).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.d2(x);
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} >= {r}");
            value.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[x]);
        self.push(value, vec![idx.len(), c], Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, op, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(vec![s], vec![1], Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vals = &self.nodes[x.0].value;
        let s: f64 = vals.iter().copied().sum::<f64>() / vals.len() as f64;
        let ng = self.ng(&[x]);
        self.push(vec![s], vec![1], Op::MeanAll(x), ng)
    }

    /// Mean over consecutive blocks of `group` rows: `[G*group, c] -> [G, c]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.d2(x);
        assert!(group > 0 && r % group == 0, "group_mean_rows: {r} rows, group {group}");
        let g = r / group;
        let src = &self.nodes[x.0].value;
        let mut value = vec![0f64; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut acc = 0f64;
                for i in 0..group {
                    acc += src[(gi * group + i) * c + j];
                }
                value[gi * c + j] = acc / group as f64;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, vec![g, c], Op::GroupMeanRows { x, group }, ng)
    }

    /// Row-wise `scale * x / sqrt(mean(x^2) + 1e-8)`.
    pub fn rms_norm(&mut self, x: Var, scale: Var) -> Var {
        let (r, c) = self.d2(x);
        assert_eq!(self.nodes[scale.0].value.len(), c, "rms_norm: scale width");
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[scale.0].value;
        let mut value = vec![0f64; r * c];
        let mut inv_rms = vec![0f64; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + super::RMS_EPS).sqrt();
            inv_rms[i] = inv;
            for j in 0..c {
                value[i * c + j] = sv[j] * row[j] * inv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, scale]);
        self.push(value, shape, Op::RmsNorm { x, scale, inv_rms }, ng)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert!(gv.len() == c && bv.len() == c, "layer_norm: affine width");
        let mut value = vec![0f64; r * c];
        let mut inv_std = vec![0f64; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                value[i * c + j] = ((row[j] - mean) * inv) * gv[j] + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(value, shape, Op::LayerNorm { x, gamma, beta, inv_std }, ng)
    }

    /// Row-wise `x / sqrt(|x|^2 + 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0f64; r * c];
        let mut inv_norm = vec![0f64; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let inv = 1.0 / (kernels::dot(row, row) + 1e-12).sqrt();
            inv_norm[i] = inv;
            for j in 0..c {
                value[i * c + j] = row[j] * inv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, Op::L2NormalizeRows { x, inv_norm }, ng)
    }

    /// `sum_i weights[i] * CE(logits[i], targets[i])` as a scalar.
    /// Rows with zero weight contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, k) = self.d2(logits);
        if targets.len() != r || weights.len() != r {
            return invalid(format!(
                "cross_entropy: {r} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return invalid(format!("target {t} out of range for {k} classes"));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0f64; r * k];
        let mut total = 0f64;
        for i in 0..r {
            let row = &lv[i * k..(i + 1) * k];
            let (lse, p) = log_softmax_probs(row);
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
            if weights[i] != 0.0 {
                total += weights[i] * (lse - row[targets[i]]);
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![total],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `sum (a - b)^2` as a scalar.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Var {
        self.same_len(a, b, "sum_sq_diff");
        let s: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| (x - y).powi(2))
            .sum();
        let ng = self.ng(&[a, b]);
        self.push(vec![s], vec![1], Op::SumSqDiff(a, b), ng)
    }

    /// Multi-head scaled dot-product attention over independent groups of
    /// `group` consecutive rows. With `half_window = Some(h)` position `i`
    /// only attends to `j` with `|i - j| <= h`; cost is O(rows * band).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        half_window: Option<usize>,
    ) -> Var {
        let (n, width) = self.d2(q);
        assert_eq!(self.d2(k), (n, width), "attention: key shape");
        assert_eq!(self.d2(v), (n, width), "attention: value shape");
        assert!(heads > 0 && width % heads == 0, "attention: {width} not divisible by {heads} heads");
        assert!(group > 0 && n % group == 0, "attention: {n} rows not divisible by group {group}");
        let dh = width / heads;
        let band = match half_window {
            Some(h) => (2 * h + 1).min(group),
            None => group,
        };
        let mut cache = AttnCache {
            q,
            k,
            v,
            heads,
            group,
            half_window,
            band,
            probs: vec![0f64; n * heads * band],
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut out = vec![0f64; n * width];
        let mut scores = vec![0f64; band];
        for row in 0..n {
            let i = row % group;
            let base = row - i;
            let (lo, hi) = cache.span(i);
            for h in 0..heads {
                let qrow = &qv[row * width + h * dh..row * width + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in lo..=hi {
                    let krow = &kv[(base + j) * width + h * dh..(base + j) * width + (h + 1) * dh];
                    let s = kernels::dot(qrow, krow) * scale;
                    scores[j - lo] = s;
                    max = max.max(s);
                }
                let mut z = 0f64;
                for s in &mut scores[..=hi - lo] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let poff = (row * heads + h) * band;
                let mut acc = vec![0f64; dh];
                for j in lo..=hi {
                    let p = scores[j - lo] / z;
                    cache.probs[poff + j - lo] = p;
                    let vrow = &vv[(base + j) * width + h * dh..(base + j) * width + (h + 1) * dh];
                    for (a, &x) in acc.iter_mut().zip(vrow) {
                        *a += p * x;
                    }
                }
                for (d, a) in acc.into_iter().enumerate() {
                    out[row * width + h * dh + d] = a;
                }
            }
        }
        let shape = self.nodes[q.0].shape.clone();
        let ng = self.ng(&[q, k, v]);
        self.push(out, shape, Op::Attention(Box::new(cache)), ng)
    }

    /// Per-column causal convolution of `u[G*group, F]` with the first
    /// `group` rows of `kernel[L, F]`, independently for each group,
    /// computed through zero-padded FFTs.
    pub fn causal_conv(&mut self, u: Var, kernel: Var, group: usize) -> Result<Var> {
        let (n, f) = self.d2(u);
        let (kl, kf) = self.d2(kernel);
        if kf != f {
            return invalid(format!("causal_conv: {f} features vs kernel width {kf}"));
        }
        if group == 0 || n % group != 0 {
            return invalid(format!("causal_conv: {n} rows not divisible by group {group}"));
        }
        if group > kl {
            return invalid(format!("sequence length {group} exceeds kernel length {kl}"));
        }
        let uv = &self.nodes[u.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut out = vec![0f64; n * f];
        let mut ucol = vec![0f64; group];
        let mut kcol = vec![0f64; group];
        for j in 0..f {
            for (t, kc) in kcol.iter_mut().enumerate() {
                *kc = kv[t * f + j];
            }
            for g0 in (0..n).step_by(group) {
                for (t, uc) in ucol.iter_mut().enumerate() {
                    *uc = uv[(g0 + t) * f + j];
                }
                let y = causal_conv_f64(&ucol, &kcol);
                for (t, yv) in y.into_iter().enumerate() {
                    out[(g0 + t) * f + j] = yv;
                }
            }
        }
        let shape = self.nodes[u.0].shape.clone();
        let ng = self.ng(&[u, kernel]);
        Ok(self.push(out, shape, Op::CausalConv { u, kernel, group }, ng))
    }

    /// Column-wise `x / sum(|x|)`.
    pub fn normalize_l1_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.d2(x);
        let xv = &self.nodes[x.0].value;
        let mut norms = vec![0f64; c];
        for i in 0..r {
            for j in 0..c {
                norms[j] += xv[i * c + j].abs();
            }
        }
        for nrm in &mut norms {
            *nrm = nrm.max(1e-12);
        }
        let value = xv.iter().enumerate().map(|(i, &v)| v / norms[i % c]).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, Op::NormalizeL1Cols { x, norms }, ng)
    }

    /// Batched 1-D convolution; `x` is `[N, Cin, Lin]`, `w` is `[Cout, Cin, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Var {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[1], "conv1d: {xs:?} with {ws:?}");
        let geom = Conv1dGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_len: xs[2],
            kernel: ws[2],
            stride,
            padding,
        };
        let value = kernels::conv1d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            &geom,
        );
        let ng = self.ng(&[x, w, b]);
        self.push(value, vec![geom.batch, geom.out_ch, geom.out_len()], Op::Conv1d { x, w, b, geom }, ng)
    }

    /// Forward value `value`, gradient copied unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), self.nodes[x.0].value.len(), "straight_through size");
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x]);
        self.push(value, shape, Op::StraightThrough(x), ng)
    }

    /// Sweeps the tape backwards from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::InvalidState("tape already swept; record a new one".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::MissingGradient("loss does not depend on any differentiable input".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, d: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], &d);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                if wants(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0f64; c];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % c] += gv;
                    }
                    send(*b, db.into_iter().collect());
                }
            }
            Op::MulRow(x, s) => {
                let sv = val(*s);
                let c = sv.len();
                if wants(*x) {
                    send(*x, g.iter().enumerate().map(|(idx, &gv)| gv * sv[idx % c]).collect());
                }
                if wants(*s) {
                    let xv = val(*x);
                    let mut ds = vec![0f64; c];
                    for (idx, &gv) in g.iter().enumerate() {
                        ds[idx % c] += gv * xv[idx];
                    }
                    send(*s, ds.into_iter().collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = self.d2(*a);
                let n = self.nodes[b.0].shape[1];
                if wants(*a) {
                    send(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    send(*b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.d2(*x);
                send(*x, kernels::transpose(g, c, r));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::ConcatCols(xs) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &x in xs {
                    let w = self.d2(x).1;
                    if wants(x) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        send(x, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    if wants(x) {
                        send(x, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (_, c) = self.d2(*x);
                let mut d = vec![0f64; val(*x).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                send(*x, d);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.d2(*x);
                let len = node.shape[1];
                let mut d = vec![0f64; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, d);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.d2(*x);
                let mut d = vec![0f64; r * c];
                for (o, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[o * c + j];
                    }
                }
                send(*x, d);
            }
            Op::Tanh(x) => {
                send(*x, g.iter().zip(&node.value).map(|(gv, y)| gv * (1.0 - y * y)).collect())
            }
            Op::Sigmoid(x) => {
                send(*x, g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect())
            }
            Op::Relu(x) => send(
                *x,
                g.iter().zip(val(*x)).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect(),
            ),
            Op::Elu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .zip(&node.value)
                    .map(|((gv, &xv), &y)| if xv > 0.0 { *gv } else { gv * (y + 1.0) })
                    .collect(),
            ),
            Op::Gelu(x) => {
                send(*x, g.iter().zip(val(*x)).map(|(gv, &xv)| gv * gelu_grad(xv)).collect())
            }
            Op::SumAll(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n])
            }
            Op::GroupMeanRows { x, group } => {
                let (r, c) = self.d2(*x);
                let inv = 1.0 / *group as f64;
                let mut d = vec![0f64; r * c];
                for row in 0..r {
                    let gi = row / group;
                    for j in 0..c {
                        d[row * c + j] = g[gi * c + j] * inv;
                    }
                }
                send(*x, d);
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (r, c) = self.d2(*x);
                let xv = val(*x);
                let sv = val(*scale);
                let mut dx = vec![0f64; r * c];
                let mut ds = vec![0f64; c];
                for i in 0..r {
                    let inv = inv_rms[i];
                    let mut dotp = 0f64;
                    for j in 0..c {
                        let xhat = xv[i * c + j] * inv;
                        let gh = g[i * c + j] * sv[j];
                        ds[j] += g[i * c + j] * xhat;
                        dotp += gh * xhat;
                    }
                    dotp /= c as f64;
                    for j in 0..c {
                        let xhat = xv[i * c + j] * inv;
                        let gh = g[i * c + j] * sv[j];
                        dx[i * c + j] = (gh - xhat * dotp) * inv;
                    }
                }
                if wants(*x) {
                    send(*x, dx);
                }
                if wants(*scale) {
                    send(*scale, ds.into_iter().collect());
                }
            }
            Op::LayerNorm { x, gamma, beta, inv_std } => {
                let (r, c) = self.d2(*x);
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dx = vec![0f64; r * c];
                let mut dg = vec![0f64; c];
                let mut db = vec![0f64; c];
                let mut xhat = vec![0f64; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().copied().sum::<f64>() / c as f64;
                    let inv = inv_std[i];
                    let (mut s1, mut s2) = (0f64, 0f64);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        let gj = g[i * c + j];
                        dg[j] += gj * xhat[j];
                        db[j] += gj;
                        let gh = gj * gv[j];
                        s1 += gh;
                        s2 += gh * xhat[j];
                    }
                    for j in 0..c {
                        let gh = g[i * c + j] * gv[j];
                        dx[i * c + j] = inv * (gh - s1 / c as f64 - xhat[j] * s2 / c as f64);
                    }
                }
                if wants(*x) {
                    send(*x, dx);
                }
                if wants(*gamma) {
                    send(*gamma, dg.into_iter().collect());
                }
                if wants(*beta) {
                    send(*beta, db.into_iter().collect());
                }
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                let (r, c) = self.d2(*x);
                let y = &node.value;
                let mut dx = vec![0f64; r * c];
                for i in 0..r {
                    let gy = kernels::dot(&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    for j in 0..c {
                        dx[i * c + j] =
                            (g[i * c + j] - y[i * c + j] * gy) * inv_norm[i];
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (r, k) = self.d2(*logits);
                let mut d = vec![0f64; r * k];
                for i in 0..r {
                    let w = weights[i] * g[0];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        d[i * k + j] = w * (probs[i * k + j] - onehot);
                    }
                }
                send(*logits, d);
            }
            Op::SumSqDiff(a, b) => {
                let d: Vec<f64> =
                    val(*a).iter().zip(val(*b)).map(|(&x, &y)| 2.0 * (x - y) * g[0]).collect();
                if wants(*b) {
                    send(*b, d.iter().map(|v| -v).collect());
                }
                send(*a, d);
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
            Op::CausalConv { u, kernel, group } => {
                let (n, f) = self.d2(*u);
                let group = *group;
                let uv = val(*u);
                let kv = val(*kernel);
                let mut du = vec![0f64; n * f];
                let mut dk = vec![0f64; val(*kernel).len()];
                let mut grev = vec![0f64; group];
                let mut col = vec![0f64; group];
                let mut kcol = vec![0f64; group];
                for j in 0..f {
                    for (t, kc) in kcol.iter_mut().enumerate() {
                        *kc = kv[t * f + j];
                    }
                    for g0 in (0..n).step_by(group) {
                        for t in 0..group {
                            grev[t] = g[(g0 + group - 1 - t) * f + j];
                        }
                        if wants(*u) {
                            let r = causal_conv_f64(&grev, &kcol);
                            for t in 0..group {
                                du[(g0 + t) * f + j] = r[group - 1 - t];
                            }
                        }
                        if wants(*kernel) {
                            for (t, c) in col.iter_mut().enumerate() {
                                *c = uv[(g0 + t) * f + j];
                            }
                            let r = causal_conv_f64(&grev, &col);
                            for t in 0..group {
                                dk[t * f + j] += r[group - 1 - t];
                            }
                        }
                    }
                }
                if wants(*u) {
                    send(*u, du);
                }
                if wants(*kernel) {
                    send(*kernel, dk.into_iter().collect());
                }
            }
            Op::NormalizeL1Cols { x, norms } => {
                let (r, c) = self.d2(*x);
                let xv = val(*x);
                let y = &node.value;
                let mut gy = vec![0f64; c];
                for i in 0..r {
                    for j in 0..c {
                        gy[j] += g[i * c + j] * y[i * c + j];
                    }
                }
                let mut dx = vec![0f64; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let sign = xv[i * c + j].signum() * (xv[i * c + j] != 0.0) as u8 as f64;
                        dx[i * c + j] = (g[i * c + j] - sign * gy[j]) / norms[j];
                    }
                }
                send(*x, dx);
            }
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv1d_backward(val(*x), val(*w), g, geom);
                if wants(*x) {
                    send(*x, dx);
                }
                if wants(*w) {
                    send(*w, dw);
                }
                if wants(*b) {
                    send(*b, db);
                }
            }
            Op::StraightThrough(x) => send(*x, g.to_vec()),
        }
    }

    fn backprop_attention(&self, c: &AttnCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, width) = self.d2(c.q);
        let dh = width / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[c.q.0].value, &self.nodes[c.k.0].value, &self.nodes[c.v.0].value);
        let mut dq = vec![0f64; n * width];
        let mut dk = vec![0f64; n * width];
        let mut dv = vec![0f64; n * width];
        let mut dp = vec![0f64; c.band];
        for row in 0..n {
            let i = row % c.group;
            let base = row - i;
            let (lo, hi) = c.span(i);
            for h in 0..c.heads {
                let hs = h * dh;
                let grow = &g[row * width + hs..row * width + hs + dh];
                let poff = (row * c.heads + h) * c.band;
                let mut sum_pdp = 0f64;
                for j in lo..=hi {
                    let p = c.probs[poff + j - lo];
                    let vrow = &vv[(base + j) * width + hs..(base + j) * width + hs + dh];
                    let d = kernels::dot(grow, vrow);
                    dp[j - lo] = d;
                    sum_pdp += p * d;
                    for (t, &gv) in grow.iter().enumerate() {
                        dv[(base + j) * width + hs + t] += p * gv;
                    }
                }
                for j in lo..=hi {
                    let p = c.probs[poff + j - lo];
                    let ds = p * (dp[j - lo] - sum_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        dq[row * width + hs + t] += ds * kv[(base + j) * width + hs + t];
                        dk[(base + j) * width + hs + t] += ds * qv[row * width + hs + t];
                    }
                }
            }
        }
        for (var, d) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.nodes[var.0].needs_grad {
                let d: Vec<f64> = d.into_iter().collect();
                add_into(&mut grads[var.0], &d);
            }
        }
    }
}

/// `(logsumexp(row), softmax(row))` with max subtraction.
pub(crate) fn log_softmax_probs(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let probs = row.iter().map(|&v| (v - max).exp() / z).collect();
    (max + z.ln(), probs)
}
