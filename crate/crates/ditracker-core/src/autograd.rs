//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and enough saved state to run the chain rule backwards. Models
//! keep their weights in a [`ParamStore`] outside any graph; a fresh graph is
//! built per step and dropped afterwards. Everything is single-threaded and
//! evaluated in creation order, so identical inputs yield bit-identical
//! values and gradients.
//!
//! The engine is generic over [`Scalar`] so the exact same pipeline code can
//! run in `f32` for training and in `f64` for finite-difference gradient
//! verification. Gradients are only propagated into nodes that (transitively)
//! depend on a trainable parameter; frozen weights and constants cost
//! nothing on the backward pass.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{is_clamped, lerp_cell, resize_coord, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`]. Ids carry the identity of the
/// issuing store, so parameters from different stores (e.g. the transformer's
/// adapters and the convolutional branch) can safely meet on one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store_tag: u64,
    index: usize,
}

/// Named tensor parameter with a trainability flag.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub value: ArrayD<S>,
    pub trainable: bool,
}

static STORE_TAGS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Flat, ordered collection of model parameters.
///
/// Ordering is creation order and is part of the checkpoint format, so
/// models must register parameters deterministically. Every store gets a
/// unique identity tag baked into its ids; clones keep the tag (their ids
/// stay interchangeable), while [`ParamStore::cast`] issues a fresh one.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    tag: u64,
    params: Vec<Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tag: STORE_TAGS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    fn check(&self, id: ParamId) {
        debug_assert_eq!(id.store_tag, self.tag, "parameter id belongs to another store");
    }

    /// Whether this store issued `id`.
    pub fn owns(&self, id: ParamId) -> bool {
        id.store_tag == self.tag
    }

    fn id_at(&self, index: usize) -> ParamId {
        ParamId { store_tag: self.tag, index }
    }

    /// Registers a parameter and returns its id. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<S>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, trainable });
        self.id_at(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        self.check(id);
        &self.params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        self.check(id);
        &self.params[id.index].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        self.check(id);
        &mut self.params[id.index].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.check(id);
        self.params[id.index].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (self.id_at(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|i| self.id_at(i))
    }

    /// Ids of trainable parameters, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(|i| self.id_at(i))
    }

    /// Converts every parameter to another scalar type (used to lift an
    /// `f32` model to `f64` for gradient checking). The result is a new
    /// store with its own identity; look ids up again by name or index.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.params.push(Param {
                name: p.name.clone(),
                value: p.value.mapv(|v| T::from_f64_c(v.to_f64())),
                trainable: p.trainable,
            });
        }
        out
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    by_param: HashMap<ParamId, ArrayD<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<S>> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ArrayD<S>)> {
        let mut keys: Vec<&ParamId> = self.by_param.keys().collect();
        keys.sort_unstable();
        keys.into_iter().map(|&k| (k, &self.by_param[&k]))
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> S {
        let mut acc = S::zero();
        for (_, g) in self.iter() {
            for &v in g.iter() {
                acc = acc + v * v;
            }
        }
        acc.sqrt()
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddConst(Var),
    MulConst(Var, ArrayD<S>),
    Matmul(Var, Var),
    Transpose(Var),
    AddRowVec(Var, Var),
    BroadcastRows(Var),
    SoftmaxRows { x: Var, saved: Array2<S> },
    Gelu(Var),
    Relu(Var),
    Sigmoid { x: Var, saved: ArrayD<S> },
    Sqrt { x: Var, saved: ArrayD<S> },
    Sin(Var),
    Cos(Var),
    Huber { x: Var, delta: S },
    HuberNorm { x: Var, delta: S },
    BceWithLogits { x: Var, targets: ArrayD<S> },
    LayerNormRows { x: Var, gain: Var, bias: Var, xhat: Array2<S>, inv_std: Array1<S> },
    ColNorm { x: Var, gain: Var, bias: Var, xhat: Array2<S>, inv_std: Array1<S> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Array2<S>> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GridSample { grid: Var, coords: Var },
    ResizeBilinear { x: Var, out_h: usize, out_w: usize },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    SumAll(Var),
    SumCols(Var),
}

struct Node<S> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded forward pass; see the module docs.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_leaves: HashMap<ParamId, Var>,
}

fn as2<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView2<'_, S> {
    a.view().into_dimensionality::<Ix2>().expect("node value is not 2-d")
}

fn as3<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView3<'_, S> {
    a.view().into_dimensionality::<Ix3>().expect("node value is not 3-d")
}

fn mm<S: Scalar>(a: ndarray::ArrayView2<'_, S>, b: ndarray::ArrayView2<'_, S>) -> Array2<S> {
    a.dot(&b)
}

/// Rowwise softmax of a 2D array (used by both the attention op and the
/// standalone softmax op so the two cannot drift apart).
fn softmax_rows<S: Scalar>(x: &ndarray::ArrayView2<'_, S>) -> Array2<S> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn gelu_forward<S: Scalar>(x: S) -> S {
    let a = S::from_f64_c(GELU_A);
    let b = S::from_f64_c(GELU_B);
    let half = S::from_f64_c(0.5);
    let inner = a * (x + b * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_backward<S: Scalar>(x: S) -> S {
    let a = S::from_f64_c(GELU_A);
    let b = S::from_f64_c(GELU_B);
    let half = S::from_f64_c(0.5);
    let three = S::from_f64_c(3.0);
    let inner = a * (x + b * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * a * (S::one() + three * b * x * x)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: HashMap::new() }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    /// Value of a node viewed as a 2D matrix.
    pub fn value2(&self, v: Var) -> ndarray::ArrayView2<'_, S> {
        as2(&self.nodes[v.0].value)
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        *self.nodes[v.0].value.iter().next().unwrap()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts a constant leaf (no gradient).
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant2(&mut self, value: Array2<S>) -> Var {
        self.constant(value.into_dyn())
    }

    /// Inserts (or reuses) the leaf for a parameter. Each parameter maps to
    /// exactly one leaf per graph so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_leaves.insert(id, var);
        var
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant array of the same shape.
    pub fn add_const(&mut self, a: Var, c: &ArrayD<S>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), c.shape());
        let value = &self.nodes[a.0].value + c;
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    /// Elementwise product with a constant array (masks, loss weights).
    pub fn mul_const(&mut self, a: Var, c: ArrayD<S>) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.shape(), c.shape());
        let value = &self.nodes[a.0].value * &c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    /// 2D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = mm(as2(&self.nodes[a.0].value), as2(&self.nodes[b.0].value));
        let rg = self.rg(a) || self.rg(b);
        self.push(value.into_dyn(), Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = as2(&self.nodes[a.0].value).t().to_owned();
        let rg = self.rg(a);
        self.push(value.into_dyn(), Op::Transpose(a), rg)
    }

    /// Adds a `[d]` (or `[1, d]`) bias vector to every row of a `[n, d]` matrix.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let vv = &self.nodes[v.0].value;
        let flat = vv.view().into_shape_with_order(vv.len()).expect("bias is not contiguous");
        debug_assert_eq!(xv.ncols(), flat.len());
        let value = xv + &flat.insert_axis(Axis(0));
        let rg = self.rg(x) || self.rg(v);
        self.push(value.into_dyn(), Op::AddRowVec(x, v), rg)
    }

    /// Repeats a `[1, d]` row `n` times into `[n, d]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        debug_assert_eq!(xv.nrows(), 1);
        let mut out = Array2::zeros((n, xv.ncols()));
        for mut row in out.rows_mut() {
            row.assign(&xv.row(0));
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::BroadcastRows(x), rg)
    }

    /// Rowwise softmax of a 2D matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = softmax_rows(&as2(&self.nodes[x.0].value));
        let rg = self.rg(x);
        let saved = if rg { y.clone() } else { Array2::zeros((0, 0)) };
        self.push(y.into_dyn(), Op::SoftmaxRows { x, saved }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(gelu_forward);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| S::one() / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        let saved = if rg { value.clone() } else { ArrayD::zeros(ndarray::IxDyn(&[0])) };
        self.push(value, Op::Sigmoid { x, saved }, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(S::sqrt);
        let rg = self.rg(x);
        let saved = if rg { value.clone() } else { ArrayD::zeros(ndarray::IxDyn(&[0])) };
        self.push(value, Op::Sqrt { x, saved }, rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(S::sin);
        let rg = self.rg(x);
        self.push(value, Op::Sin(x), rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(S::cos);
        let rg = self.rg(x);
        self.push(value, Op::Cos(x), rg)
    }

    /// Elementwise Huber penalty of a non-negative error magnitude:
    /// `0.5 e^2` for `e <= delta`, `delta * (e - delta/2)` beyond.
    pub fn huber(&mut self, x: Var, delta: S) -> Var {
        let half = S::from_f64_c(0.5);
        let value = self.nodes[x.0].value.mapv(|e| {
            if e <= delta {
                half * e * e
            } else {
                delta * (e - half * delta)
            }
        });
        let rg = self.rg(x);
        self.push(value, Op::Huber { x, delta }, rg)
    }

    /// Huber penalty of each row's L2 norm, `[n, c] -> [n, 1]`. Unlike
    /// composing `sqrt` with [`Graph::huber`], the gradient stays finite at a
    /// zero-error row.
    pub fn huber_norm(&mut self, x: Var, delta: S) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let n = xv.nrows();
        let half = S::from_f64_c(0.5);
        let mut out = Array2::zeros((n, 1));
        for i in 0..n {
            let e = xv.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
            out[(i, 0)] = if e <= delta { half * e * e } else { delta * (e - half * delta) };
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::HuberNorm { x, delta }, rg)
    }

    /// Elementwise binary cross-entropy on logits against constant targets,
    /// in the overflow-safe form `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, x: Var, targets: ArrayD<S>) -> Var {
        debug_assert_eq!(self.nodes[x.0].value.shape(), targets.shape());
        let mut value = self.nodes[x.0].value.clone();
        ndarray::Zip::from(&mut value).and(&targets).for_each(|v, &t| {
            let x = *v;
            let pos = if x > S::zero() { x } else { S::zero() };
            *v = pos - x * t + (S::one() + (-x.abs()).exp()).ln();
        });
        let rg = self.rg(x);
        self.push(value, Op::BceWithLogits { x, targets }, rg)
    }

    /// Layer normalization over the last axis of `[n, d]` with per-column
    /// affine parameters `gain`/`bias` of length `d`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let (n, d) = xv.dim();
        let dn = S::from_usize(d).unwrap();
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().cloned().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                xhat[(i, j)] = (row[j] - mean) * inv;
            }
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let g1 = gv.view().into_shape_with_order(d).expect("gain len mismatch");
        let b1 = bv.view().into_shape_with_order(d).expect("bias len mismatch");
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for j in 0..d {
                row[j] = row[j] * g1[j] + b1[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (sx, si) = if rg { (xhat, inv_std) } else { (Array2::zeros((0, 0)), Array1::zeros(0)) };
        self.push(
            out.into_dyn(),
            Op::LayerNormRows { x, gain, bias, xhat: sx, inv_std: si },
            rg,
        )
    }

    /// Normalizes each column of `[n, c]` to zero mean / unit variance over
    /// the rows, then applies per-column affine parameters. With rows =
    /// spatial positions and columns = channels this is instance
    /// normalization of one frame.
    pub fn col_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Var {
        let xv = as2(&self.nodes[x.0].value).to_owned();
        let (n, c) = xv.dim();
        let nn = S::from_usize(n).unwrap();
        let mut xhat = Array2::zeros((n, c));
        let mut inv_std = Array1::zeros(c);
        for j in 0..c {
            let col = xv.column(j);
            let mean = col.iter().cloned().sum::<S>() / nn;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std[j] = inv;
            for i in 0..n {
                xhat[(i, j)] = (col[i] - mean) * inv;
            }
        }
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let g1 = gv.view().into_shape_with_order(c).expect("gain len mismatch");
        let b1 = bv.view().into_shape_with_order(c).expect("bias len mismatch");
        let mut out = xhat.clone();
        for i in 0..n {
            for j in 0..c {
                out[(i, j)] = out[(i, j)] * g1[j] + b1[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let (sx, si) = if rg { (xhat, inv_std) } else { (Array2::zeros((0, 0)), Array1::zeros(0)) };
        self.push(out.into_dyn(), Op::ColNorm { x, gain, bias, xhat: sx, inv_std: si }, rg)
    }

    /// Multi-head scaled dot-product attention over one sequence.
    /// `q`, `k`, `v` are `[n, d_model]` with `d_model` divisible by `heads`;
    /// scores are scaled by `1/sqrt(d_head)` and softmaxed per row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qv = as2(&self.nodes[q.0].value).to_owned();
        let kv = as2(&self.nodes[k.0].value).to_owned();
        let vv = as2(&self.nodes[v.0].value).to_owned();
        let (n, d_model) = qv.dim();
        debug_assert_eq!(d_model % heads, 0, "d_model not divisible by head count");
        let dh = d_model / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let mut out = Array2::zeros((n, d_model));
        let mut probs = Vec::with_capacity(if rg { heads } else { 0 });
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = qv.slice(ndarray::s![.., cols.clone()]);
            let kh = kv.slice(ndarray::s![.., cols.clone()]);
            let vh = vv.slice(ndarray::s![.., cols.clone()]);
            let mut scores = mm(qh, kh.t());
            scores.mapv_inplace(|s| s * scale);
            let p = softmax_rows(&scores.view());
            let oh = mm(p.view(), vh);
            out.slice_mut(ndarray::s![.., cols]).assign(&oh);
            if rg {
                probs.push(p);
            }
        }
        self.push(out.into_dyn(), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// 2D convolution of one frame. `x` is `[h, w, c_in]`, `w` is
    /// `[kh, kw, c_in, c_out]`, `b` is `[c_out]`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value).to_owned();
        let wv = self.nodes[w.0].value.clone();
        let ws = wv.shape();
        let (kh, kw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let (h, w_in, _) = xv.dim();
        debug_assert_eq!(xv.dim().2, cin, "conv input channels mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w_in + 2 * pad - kw) / stride + 1;
        let cols = im2col(&xv.view(), kh, kw, stride, pad, oh, ow);
        let wf = wv.view().into_shape_with_order((kh * kw * cin, cout)).unwrap().to_owned();
        let mut yf = mm(cols.view(), wf.view());
        let bv = &self.nodes[b.0].value;
        let b1 = bv.view().into_shape_with_order(cout).expect("conv bias len mismatch");
        for mut row in yf.rows_mut() {
            for j in 0..cout {
                row[j] = row[j] + b1[j];
            }
        }
        let out = yf.into_shape_with_order((oh, ow, cout)).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Samples every row of `coords` (`[n, 2]`, columns `x`, `y`) from a
    /// `[h, w, c]` grid with clamped bilinear interpolation; returns
    /// `[n, c]`. Gradients flow into both the grid and the coordinates
    /// (clamped axes get zero coordinate gradient).
    pub fn grid_sample(&mut self, grid: Var, coords: Var) -> Var {
        let gv = as3(&self.nodes[grid.0].value).to_owned();
        let cv = as2(&self.nodes[coords.0].value).to_owned();
        let (h, w, c) = gv.dim();
        debug_assert_eq!(cv.ncols(), 2);
        let n = cv.nrows();
        let mut out = Array2::zeros((n, c));
        for i in 0..n {
            let (x0, x1, fx) = lerp_cell(w, cv[(i, 0)]);
            let (y0, y1, fy) = lerp_cell(h, cv[(i, 1)]);
            for ch in 0..c {
                let v00 = gv[(y0, x0, ch)];
                let v01 = gv[(y0, x1, ch)];
                let v10 = gv[(y1, x0, ch)];
                let v11 = gv[(y1, x1, ch)];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(i, ch)] = top + fy * (bot - top);
            }
        }
        let rg = self.rg(grid) || self.rg(coords);
        self.push(out.into_dyn(), Op::GridSample { grid, coords }, rg)
    }

    /// Corner-aligned bilinear resize of a `[h, w, c]` grid; matches
    /// [`crate::numerics::interpolate_to`] exactly.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (in_h, in_w, c) = xv.dim();
        let mut out = Array3::zeros((out_h, out_w, c));
        for oy in 0..out_h {
            let (y0, y1, fy) = lerp_cell(in_h, resize_coord::<S>(oy, out_h, in_h));
            for ox in 0..out_w {
                let (x0, x1, fx) = lerp_cell(in_w, resize_coord::<S>(ox, out_w, in_w));
                for ch in 0..c {
                    let v00 = xv[(y0, x0, ch)];
                    let v01 = xv[(y0, x1, ch)];
                    let v10 = xv[(y1, x0, ch)];
                    let v11 = xv[(y1, x1, ch)];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    out[(oy, ox, ch)] = top + fy * (bot - top);
                }
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::ResizeBilinear { x, out_h, out_w }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order(shape)
            .expect("reshape length mismatch")
            .to_owned();
        let rg = self.rg(x);
        self.push(value.into_dyn(), Op::Reshape(x), rg)
    }

    /// Concatenates 2D matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.nodes[p.0].value)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("column concat shape mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value.into_dyn(), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Concatenates 2D matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| as2(&self.nodes[p.0].value)).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat shape mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value.into_dyn(), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes[x.0].value)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.rg(x);
        self.push(value.into_dyn(), Op::SliceCols { x, start, len }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes[x.0].value)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.rg(x);
        self.push(value.into_dyn(), Op::SliceRows { x, start, len }, rg)
    }

    /// Gathers rows of a 2D matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = Array2::zeros((indices.len(), xv.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(idx));
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GatherRows { x, indices: indices.to_vec() }, rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.nodes[x.0].value.iter().cloned().sum();
        let rg = self.rg(x);
        self.push(ArrayD::from_elem(ndarray::IxDyn(&[1]), s), Op::SumAll(x), rg)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    /// Rowwise sum of a `[n, d]` matrix, producing `[n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = Array2::zeros((xv.nrows(), 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            out[(i, 0)] = row.iter().cloned().sum();
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SumCols(x), rg)
    }

    /// Runs the chain rule backwards from a single-element `root` and
    /// returns the gradients of every trainable parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), S::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let mut by_param = HashMap::new();
        for (&pid, &var) in &self.param_leaves {
            if let Some(g) = grads[var.0].take() {
                by_param.insert(pid, g);
            }
        }
        Ok(Gradients { by_param })
    }

    fn accumulate_inputs(&self, i: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let add_to = |grads: &mut [Option<ArrayD<S>>], v: Var, contrib: ArrayD<S>, rg: bool| {
            if !rg {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &contrib,
                slot => *slot = Some(contrib),
            }
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone(), self.rg(*a));
                add_to(grads, *b, g.clone(), self.rg(*b));
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone(), self.rg(*a));
                add_to(grads, *b, g.mapv(|v| -v), self.rg(*b));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    add_to(grads, *a, g * &self.nodes[b.0].value, true);
                }
                if self.rg(*b) {
                    add_to(grads, *b, g * &self.nodes[a.0].value, true);
                }
            }
            Op::Scale(a, c) => add_to(grads, *a, g.mapv(|v| v * *c), self.rg(*a)),
            Op::AddConst(a) => add_to(grads, *a, g.clone(), self.rg(*a)),
            Op::MulConst(a, c) => add_to(grads, *a, g * c, self.rg(*a)),
            Op::Matmul(a, b) => {
                let g2 = as2(g);
                if self.rg(*a) {
                    let da = mm(g2, as2(&self.nodes[b.0].value).t());
                    add_to(grads, *a, da.into_dyn(), true);
                }
                if self.rg(*b) {
                    let db = mm(as2(&self.nodes[a.0].value).t(), g2);
                    add_to(grads, *b, db.into_dyn(), true);
                }
            }
            Op::Transpose(a) => {
                add_to(grads, *a, as2(g).t().to_owned().into_dyn(), self.rg(*a));
            }
            Op::AddRowVec(x, v) => {
                add_to(grads, *x, g.clone(), self.rg(*x));
                if self.rg(*v) {
                    let g2 = as2(g);
                    let summed = g2.sum_axis(Axis(0));
                    let shaped = summed
                        .into_shape_with_order(self.nodes[v.0].value.raw_dim())
                        .expect("bias grad shape");
                    add_to(grads, *v, shaped, true);
                }
            }
            Op::BroadcastRows(x) => {
                if self.rg(*x) {
                    let summed = as2(g).sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_to(grads, *x, summed.into_dyn(), true);
                }
            }
            Op::SoftmaxRows { x, saved } => {
                if self.rg(*x) {
                    let g2 = as2(g);
                    let mut dx = Array2::zeros(saved.dim());
                    for r in 0..saved.nrows() {
                        let dot: S = g2
                            .row(r)
                            .iter()
                            .zip(saved.row(r).iter())
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for c in 0..saved.ncols() {
                            dx[(r, c)] = saved[(r, c)] * (g2[(r, c)] - dot);
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let mut dx = self.nodes[x.0].value.mapv(gelu_backward);
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let mut dx = self.nodes[x.0]
                        .value
                        .mapv(|v| if v > S::zero() { S::one() } else { S::zero() });
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Sigmoid { x, saved } => {
                if self.rg(*x) {
                    let mut dx = saved.mapv(|y| y * (S::one() - y));
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Sqrt { x, saved } => {
                if self.rg(*x) {
                    let half = S::from_f64_c(0.5);
                    let mut dx = saved.mapv(|y| half / y);
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Sin(x) => {
                if self.rg(*x) {
                    let mut dx = self.nodes[x.0].value.mapv(S::cos);
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Cos(x) => {
                if self.rg(*x) {
                    let mut dx = self.nodes[x.0].value.mapv(|v| -v.sin());
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::Huber { x, delta } => {
                if self.rg(*x) {
                    let d = *delta;
                    let mut dx = self.nodes[x.0].value.mapv(|e| if e <= d { e } else { d });
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::HuberNorm { x, delta } => {
                if self.rg(*x) {
                    let g2 = as2(g);
                    let xv = as2(&self.nodes[x.0].value).to_owned();
                    let (n, c) = xv.dim();
                    let d = *delta;
                    let mut dx = Array2::zeros((n, c));
                    for i in 0..n {
                        let e = xv.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                        let f = if e <= d { S::one() } else { d / e };
                        for j in 0..c {
                            dx[(i, j)] = g2[(i, 0)] * xv[(i, j)] * f;
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::BceWithLogits { x, targets } => {
                if self.rg(*x) {
                    let mut dx = self.nodes[x.0].value.clone();
                    ndarray::Zip::from(&mut dx).and(targets).for_each(|v, &t| {
                        let sig = S::one() / (S::one() + (-*v).exp());
                        *v = sig - t;
                    });
                    dx *= g;
                    add_to(grads, *x, dx, true);
                }
            }
            Op::LayerNormRows { x, gain, bias, xhat, inv_std } => {
                let g2 = as2(g).to_owned();
                let (n, d) = xhat.dim();
                let dn = S::from_usize(d).unwrap();
                let gv = &self.nodes[gain.0].value;
                let g1 = gv.view().into_shape_with_order(d).unwrap();
                if self.rg(*gain) {
                    let mut dgain = Array1::zeros(d);
                    for r in 0..n {
                        for c in 0..d {
                            dgain[c] = dgain[c] + g2[(r, c)] * xhat[(r, c)];
                        }
                    }
                    let shaped = dgain
                        .into_shape_with_order(self.nodes[gain.0].value.raw_dim())
                        .unwrap();
                    add_to(grads, *gain, shaped, true);
                }
                if self.rg(*bias) {
                    let dbias = g2.sum_axis(Axis(0));
                    let shaped = dbias
                        .into_shape_with_order(self.nodes[bias.0].value.raw_dim())
                        .unwrap();
                    add_to(grads, *bias, shaped, true);
                }
                if self.rg(*x) {
                    let mut dx = Array2::zeros((n, d));
                    for r in 0..n {
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for c in 0..d {
                            let dxh = g2[(r, c)] * g1[c];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[(r, c)];
                        }
                        for c in 0..d {
                            let dxh = g2[(r, c)] * g1[c];
                            dx[(r, c)] = inv_std[r]
                                * (dxh - sum_dxhat / dn - xhat[(r, c)] * sum_dxhat_xhat / dn);
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::ColNorm { x, gain, bias, xhat, inv_std } => {
                let g2 = as2(g).to_owned();
                let (n, c) = xhat.dim();
                let nn = S::from_usize(n).unwrap();
                let gv = &self.nodes[gain.0].value;
                let g1 = gv.view().into_shape_with_order(c).unwrap();
                if self.rg(*gain) {
                    let mut dgain = Array1::zeros(c);
                    for r in 0..n {
                        for j in 0..c {
                            dgain[j] = dgain[j] + g2[(r, j)] * xhat[(r, j)];
                        }
                    }
                    let shaped = dgain
                        .into_shape_with_order(self.nodes[gain.0].value.raw_dim())
                        .unwrap();
                    add_to(grads, *gain, shaped, true);
                }
                if self.rg(*bias) {
                    let dbias = g2.sum_axis(Axis(0));
                    let shaped = dbias
                        .into_shape_with_order(self.nodes[bias.0].value.raw_dim())
                        .unwrap();
                    add_to(grads, *bias, shaped, true);
                }
                if self.rg(*x) {
                    let mut dx = Array2::zeros((n, c));
                    for j in 0..c {
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for r in 0..n {
                            let dxh = g2[(r, j)] * g1[j];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[(r, j)];
                        }
                        for r in 0..n {
                            let dxh = g2[(r, j)] * g1[j];
                            dx[(r, j)] = inv_std[j]
                                * (dxh - sum_dxhat / nn - xhat[(r, j)] * sum_dxhat_xhat / nn);
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let g2 = as2(g);
                let qv = as2(&self.nodes[q.0].value);
                let kv = as2(&self.nodes[k.0].value);
                let vv = as2(&self.nodes[v.0].value);
                let (n, d_model) = qv.dim();
                let dh = d_model / heads;
                let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
                let mut dq = Array2::zeros((n, d_model));
                let mut dk = Array2::zeros((n, d_model));
                let mut dv = Array2::zeros((n, d_model));
                for h in 0..*heads {
                    let cols = h * dh..(h + 1) * dh;
                    let p = &probs[h];
                    let go = g2.slice(ndarray::s![.., cols.clone()]);
                    let qh = qv.slice(ndarray::s![.., cols.clone()]);
                    let kh = kv.slice(ndarray::s![.., cols.clone()]);
                    let vh = vv.slice(ndarray::s![.., cols.clone()]);
                    dv.slice_mut(ndarray::s![.., cols.clone()])
                        .assign(&mm(p.t().into_dimensionality::<Ix2>().unwrap(), go));
                    let dp = mm(go, vh.t());
                    let mut ds = Array2::zeros((n, n));
                    for r in 0..n {
                        let dot: S = dp
                            .row(r)
                            .iter()
                            .zip(p.row(r).iter())
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for cc in 0..n {
                            ds[(r, cc)] = p[(r, cc)] * (dp[(r, cc)] - dot) * scale;
                        }
                    }
                    dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&mm(ds.view(), kh));
                    dk.slice_mut(ndarray::s![.., cols]).assign(&mm(ds.t().into_dimensionality::<Ix2>().unwrap(), qh));
                }
                add_to(grads, *q, dq.into_dyn(), self.rg(*q));
                add_to(grads, *k, dk.into_dyn(), self.rg(*k));
                add_to(grads, *v, dv.into_dyn(), self.rg(*v));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = as3(&self.nodes[x.0].value).to_owned();
                let wv = &self.nodes[w.0].value;
                let ws = wv.shape();
                let (kh, kw, cin, cout) = (ws[0], ws[1], ws[2], ws[3]);
                let g3 = as3(g);
                let (oh, ow, _) = g3.dim();
                let gf = g3.into_shape_with_order((oh * ow, cout)).unwrap();
                if self.rg(*b) {
                    let db = gf.sum_axis(Axis(0));
                    let shaped =
                        db.into_shape_with_order(self.nodes[b.0].value.raw_dim()).unwrap();
                    add_to(grads, *b, shaped, true);
                }
                if self.rg(*w) {
                    let cols = im2col(&xv.view(), kh, kw, *stride, *pad, oh, ow);
                    let dwf = mm(cols.t().into_dimensionality::<Ix2>().unwrap(), gf.view());
                    let dw = dwf.into_shape_with_order((kh, kw, cin, cout)).unwrap();
                    add_to(grads, *w, dw.into_dyn(), true);
                }
                if self.rg(*x) {
                    let wf = wv.view().into_shape_with_order((kh * kw * cin, cout)).unwrap();
                    let dcols = mm(gf.view(), wf.t().into_dimensionality::<Ix2>().unwrap());
                    let (h, w_in, _) = xv.dim();
                    let dx = col2im::<S>(&dcols.view(), h, w_in, cin, kh, kw, *stride, *pad, oh, ow);
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::GridSample { grid, coords } => {
                let gv = as3(&self.nodes[grid.0].value);
                let cv = as2(&self.nodes[coords.0].value);
                let (h, w, c) = gv.dim();
                let n = cv.nrows();
                let g2 = as2(g);
                let want_grid = self.rg(*grid);
                let want_coords = self.rg(*coords);
                let mut dgrid = Array3::<S>::zeros((h, w, c));
                let mut dcoords = Array2::<S>::zeros((n, 2));
                for i in 0..n {
                    let px = cv[(i, 0)];
                    let py = cv[(i, 1)];
                    let (x0, x1, fx) = lerp_cell(w, px);
                    let (y0, y1, fy) = lerp_cell(h, py);
                    let one = S::one();
                    for ch in 0..c {
                        let go = g2[(i, ch)];
                        if want_grid {
                            dgrid[(y0, x0, ch)] =
                                dgrid[(y0, x0, ch)] + go * (one - fx) * (one - fy);
                            dgrid[(y0, x1, ch)] = dgrid[(y0, x1, ch)] + go * fx * (one - fy);
                            dgrid[(y1, x0, ch)] = dgrid[(y1, x0, ch)] + go * (one - fx) * fy;
                            dgrid[(y1, x1, ch)] = dgrid[(y1, x1, ch)] + go * fx * fy;
                        }
                        if want_coords {
                            let v00 = gv[(y0, x0, ch)];
                            let v01 = gv[(y0, x1, ch)];
                            let v10 = gv[(y1, x0, ch)];
                            let v11 = gv[(y1, x1, ch)];
                            if !is_clamped(w, px) {
                                let ddx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
                                dcoords[(i, 0)] = dcoords[(i, 0)] + go * ddx;
                            }
                            if !is_clamped(h, py) {
                                let ddy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
                                dcoords[(i, 1)] = dcoords[(i, 1)] + go * ddy;
                            }
                        }
                    }
                }
                if want_grid {
                    add_to(grads, *grid, dgrid.into_dyn(), true);
                }
                if want_coords {
                    add_to(grads, *coords, dcoords.into_dyn(), true);
                }
            }
            Op::ResizeBilinear { x, out_h, out_w } => {
                if self.rg(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let (in_h, in_w, c) = (xs[0], xs[1], xs[2]);
                    let g3 = as3(g);
                    let mut dx = Array3::<S>::zeros((in_h, in_w, c));
                    let one = S::one();
                    for oy in 0..*out_h {
                        let (y0, y1, fy) = lerp_cell(in_h, resize_coord::<S>(oy, *out_h, in_h));
                        for ox in 0..*out_w {
                            let (x0, x1, fx) =
                                lerp_cell(in_w, resize_coord::<S>(ox, *out_w, in_w));
                            for ch in 0..c {
                                let go = g3[(oy, ox, ch)];
                                dx[(y0, x0, ch)] =
                                    dx[(y0, x0, ch)] + go * (one - fx) * (one - fy);
                                dx[(y0, x1, ch)] = dx[(y0, x1, ch)] + go * fx * (one - fy);
                                dx[(y1, x0, ch)] = dx[(y1, x0, ch)] + go * (one - fx) * fy;
                                dx[(y1, x1, ch)] = dx[(y1, x1, ch)] + go * fx * fy;
                            }
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let dx = g
                        .view()
                        .into_shape_with_order(self.nodes[x.0].value.raw_dim())
                        .expect("reshape grad")
                        .to_owned();
                    add_to(grads, *x, dx, true);
                }
            }
            Op::ConcatCols(parts) => {
                let g2 = as2(g);
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[1];
                    if self.rg(p) {
                        let dp = g2.slice(ndarray::s![.., start..start + len]).to_owned();
                        add_to(grads, p, dp.into_dyn(), true);
                    }
                    start += len;
                }
            }
            Op::ConcatRows(parts) => {
                let g2 = as2(g);
                let mut start = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[0];
                    if self.rg(p) {
                        let dp = g2.slice(ndarray::s![start..start + len, ..]).to_owned();
                        add_to(grads, p, dp.into_dyn(), true);
                    }
                    start += len;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.rg(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let mut dx = Array2::<S>::zeros((xs[0], xs[1]));
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&as2(g));
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.rg(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let mut dx = Array2::<S>::zeros((xs[0], xs[1]));
                    dx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&as2(g));
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::GatherRows { x, indices } => {
                if self.rg(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let mut dx = Array2::<S>::zeros((xs[0], xs[1]));
                    let g2 = as2(g);
                    for (i, &idx) in indices.iter().enumerate() {
                        let mut row = dx.row_mut(idx);
                        row += &g2.row(i);
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let s = g.iter().next().cloned().unwrap();
                    let dx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), s);
                    add_to(grads, *x, dx, true);
                }
            }
            Op::SumCols(x) => {
                if self.rg(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let g2 = as2(g);
                    let mut dx = Array2::<S>::zeros((xs[0], xs[1]));
                    for r in 0..xs[0] {
                        let gv = g2[(r, 0)];
                        for c in 0..xs[1] {
                            dx[(r, c)] = gv;
                        }
                    }
                    add_to(grads, *x, dx.into_dyn(), true);
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn im2col<S: Scalar>(
    x: &ndarray::ArrayView3<'_, S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (h, w, cin) = x.dim();
    let mut cols = Array2::zeros((oh * ow, kh * kw * cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        for ci in 0..cin {
                            cols[(row, col + ci)] = x[(iy as usize, ix as usize, ci)];
                        }
                    }
                    col += cin;
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    dcols: &ndarray::ArrayView2<'_, S>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<S> {
    let mut dx = Array3::zeros((h, w, cin));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        for ci in 0..cin {
                            dx[(iy as usize, ix as usize, ci)] =
                                dx[(iy as usize, ix as usize, ci)] + dcols[(row, col + ci)];
                        }
                    }
                    col += cin;
                }
            }
        }
    }
    dx
}

/// Adam optimizer over a [`ParamStore`]. Moment buffers are keyed by
/// parameter id, so one instance must stay paired with one store.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    beta1: S,
    beta2: S,
    eps: S,
    step: u64,
    m: HashMap<ParamId, ArrayD<S>>,
    v: HashMap<ParamId, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            beta1: S::from_f64_c(0.9),
            beta2: S::from_f64_c(0.999),
            eps: S::from_f64_c(1e-8),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one Adam update with learning rate `lr`. When `clip` is set,
    /// gradients are rescaled so their global norm does not exceed it.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &Gradients<S>,
        lr: S,
        clip: Option<S>,
    ) {
        self.step_multi(&mut [store], grads, lr, clip);
    }

    /// One Adam update routing each gradient to the store that owns its
    /// parameter. Gradients whose owner is not in `stores` are skipped; the
    /// clipping norm is computed over the whole gradient set once.
    pub fn step_multi(
        &mut self,
        stores: &mut [&mut ParamStore<S>],
        grads: &Gradients<S>,
        lr: S,
        clip: Option<S>,
    ) {
        let one = S::one();
        let mut scale = one;
        if let Some(max_norm) = clip {
            let norm = grads.global_norm();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let t = S::from_f64_c(self.step as f64);
        let bc1 = one - self.beta1.powf(t);
        let bc2 = one - self.beta2.powf(t);
        for (id, grad) in grads.iter() {
            let Some(store) = stores.iter_mut().find(|s| s.owns(id)) else {
                continue;
            };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Central finite-difference derivative of `f` with respect to one entry of
/// one parameter, at step `eps`.
pub fn numeric_partial<S: Scalar>(
    store: &mut ParamStore<S>,
    id: ParamId,
    flat_index: usize,
    eps: S,
    mut f: impl FnMut(&ParamStore<S>) -> S,
) -> S {
    let orig = store.value(id).as_slice().expect("param not contiguous")[flat_index];
    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = orig + eps;
    let plus = f(store);
    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = orig - eps;
    let minus = f(store);
    store.value_mut(id).as_slice_mut().unwrap()[flat_index] = orig;
    let two = S::from_f64_c(2.0);
    (plus - minus) / (two * eps)
}
