//! Reverse-mode autodiff on a flat arena.
//!
//! Every operation evaluates eagerly and records a node; `backward` walks the
//! arena in reverse id order. Each op's backward writes into fresh zero
//! tensors first and the results are then folded into the per-node gradient
//! slots, so aliased inputs (say `add(x, x)`) accumulate correctly.
//!
//! Determinism matters more than speed here. Loop orders inside the kernels
//! are fixed, so a graph built from the same inputs in the same order yields
//! bit-identical values and gradients on every run.

use std::cell::{Ref, RefCell};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv1d { x: Value, k: Value, stride: usize, dilation: usize },
    FractionalConv { x: Value, k: Value, num: usize, den: usize },
    GroupedTimeConv { x: Value, k: Value, b: Value, groups: usize },
    Linear { x: Value, w: Value, b: Value },
    BmmNt { a: Value, b: Value },
    BmmNn { a: Value, b: Value },
    LayerNorm { x: Value, gamma: Value, beta: Value },
    Gelu { x: Value },
    SoftmaxLast { x: Value },
    LogSoftmaxLast { x: Value },
    CrossEntropy { logits: Value, targets: Vec<usize> },
    CosineRows { a: Value, b: Value },
    ExpEntropyRows { p: Value },
    Transpose2d { x: Value },
    SplitHeads { x: Value },
    MergeHeads { x: Value },
    GatherRows { x: Value, idx: Vec<usize> },
    SubstituteRows { x: Value, v: Value, idx: Vec<usize> },
    MeanAxis0 { x: Value },
    CodebookLookup { y: Value, cb: Value },
    Add { a: Value, b: Value },
    Scale { x: Value, c: T },
    AddConst { x: Value },
    StackCols { cols: Vec<Value> },
    SumAll { x: Value },
    Clamp { x: Value, lo: T, hi: T },
    Reshape { x: Value },
    Dropout { x: Value, mask: Tensor<T> },
    GumbelSoft { logits: Value, inv_temp: T },
    Harden { soft: Value },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Value`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Value) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Value) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a tensor as a graph input.
    pub fn leaf(&self, t: Tensor<T>) -> Value {
        self.push(t, Op::Leaf)
    }

    pub fn shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Clone out the value of a node.
    pub fn tensor(&self, v: Value) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Value) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    /// The single element of a scalar node.
    pub fn item(&self, v: Value) -> Result<T> {
        self.nodes.borrow()[v.0].value.item()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Value(nodes.len() - 1)
    }

    fn val<R>(&self, v: Value, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // -- operators ----------------------------------------------------------

    pub fn conv1d(&self, x: Value, k: Value, stride: usize, dilation: usize) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::conv1d_fwd(&nodes[x.0].value, &nodes[k.0].value, stride, dilation)?
        };
        Ok(self.push(out, Op::Conv1d { x, k, stride, dilation }))
    }

    pub fn fractional_conv(&self, x: Value, k: Value, num: usize, den: usize) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::fractional_conv_fwd(&nodes[x.0].value, &nodes[k.0].value, num, den)?
        };
        Ok(self.push(out, Op::FractionalConv { x, k, num, den }))
    }

    pub fn grouped_time_conv(&self, x: Value, k: Value, b: Value, groups: usize) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::grouped_time_conv_fwd(
                &nodes[x.0].value,
                &nodes[k.0].value,
                &nodes[b.0].value,
                groups,
            )?
        };
        Ok(self.push(out, Op::GroupedTimeConv { x, k, b, groups }))
    }

    pub fn linear(&self, x: Value, w: Value, b: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::linear_fwd(&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn bmm_nt(&self, a: Value, b: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::bmm_nt_fwd(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::BmmNt { a, b }))
    }

    pub fn bmm_nn(&self, a: Value, b: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::bmm_nn_fwd(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::BmmNn { a, b }))
    }

    pub fn layer_norm(&self, x: Value, gamma: Value, beta: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::layer_norm_fwd(&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value)?
        };
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn gelu(&self, x: Value) -> Value {
        let out = self.val(x, |t| t.map(ops::gelu));
        self.push(out, Op::Gelu { x })
    }

    pub fn softmax_last(&self, x: Value) -> Result<Value> {
        let out = self.val(x, ops::softmax_last_fwd)?;
        Ok(self.push(out, Op::SoftmaxLast { x }))
    }

    pub fn log_softmax_last(&self, x: Value) -> Result<Value> {
        let out = self.val(x, ops::log_softmax_last_fwd)?;
        Ok(self.push(out, Op::LogSoftmaxLast { x }))
    }

    /// Mean cross entropy against integer targets; yields a scalar node.
    pub fn cross_entropy(&self, logits: Value, targets: &[usize]) -> Result<Value> {
        let loss = self.val(logits, |t| ops::cross_entropy_fwd(t, targets))?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    pub fn cosine_rows(&self, a: Value, b: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::cosine_rows_fwd(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(out, Op::CosineRows { a, b }))
    }

    pub fn exp_entropy_rows(&self, p: Value) -> Result<Value> {
        let out = self.val(p, ops::exp_entropy_rows_fwd)?;
        Ok(self.push(out, Op::ExpEntropyRows { p }))
    }

    pub fn transpose2d(&self, x: Value) -> Result<Value> {
        let out = self.val(x, ops::transpose2d)?;
        Ok(self.push(out, Op::Transpose2d { x }))
    }

    pub fn split_heads(&self, x: Value, heads: usize) -> Result<Value> {
        let out = self.val(x, |t| ops::split_heads(t, heads))?;
        Ok(self.push(out, Op::SplitHeads { x }))
    }

    pub fn merge_heads(&self, x: Value) -> Result<Value> {
        let out = self.val(x, ops::merge_heads)?;
        Ok(self.push(out, Op::MergeHeads { x }))
    }

    pub fn gather_rows(&self, x: Value, idx: &[usize]) -> Result<Value> {
        let out = self.val(x, |t| ops::gather_rows_fwd(t, idx))?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn substitute_rows(&self, x: Value, idx: &[usize], v: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::substitute_rows_fwd(&nodes[x.0].value, idx, &nodes[v.0].value)?
        };
        Ok(self.push(out, Op::SubstituteRows { x, v, idx: idx.to_vec() }))
    }

    pub fn mean_axis0(&self, x: Value) -> Result<Value> {
        let out = self.val(x, ops::mean_axis0_fwd)?;
        Ok(self.push(out, Op::MeanAxis0 { x }))
    }

    pub fn codebook_lookup(&self, y: Value, cb: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            ops::codebook_lookup_fwd(&nodes[y.0].value, &nodes[cb.0].value)?
        };
        Ok(self.push(out, Op::CodebookLookup { y, cb }))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(Error::Shape(format!(
                    "add shapes differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let mut out = ta.clone();
            out.add_assign(tb);
            out
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&self, x: Value, c: T) -> Value {
        let out = self.val(x, |t| t.map(|v| v * c));
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_const(&self, x: Value, c: T) -> Value {
        let out = self.val(x, |t| t.map(|v| v + c));
        self.push(out, Op::AddConst { x })
    }

    /// Stack rank-1 columns of equal length into an [n, cols] matrix.
    pub fn stack_cols(&self, cols: &[Value]) -> Result<Value> {
        if cols.is_empty() {
            return Err(Error::InvalidArgument("stack_cols needs at least one column".into()));
        }
        let nodes = self.nodes.borrow();
        let n = match nodes[cols[0].0].value.shape() {
            [n] => *n,
            s => return Err(Error::Shape(format!("stack_cols wants rank 1, got {s:?}"))),
        };
        let m = cols.len();
        let mut out = vec![T::zero(); n * m];
        for (j, c) in cols.iter().enumerate() {
            let col = &nodes[c.0].value;
            if col.shape() != [n] {
                return Err(Error::Shape("stack_cols lengths differ".into()));
            }
            for i in 0..n {
                out[i * m + j] = col.data()[i];
            }
        }
        drop(nodes);
        let t = Tensor::from_vec(vec![n, m], out)?;
        Ok(self.push(t, Op::StackCols { cols: cols.to_vec() }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&self, x: Value) -> Value {
        let s = self.val(x, |t| {
            let mut acc = T::zero();
            for &v in t.data() {
                acc += v;
            }
            acc
        });
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Elementwise clamp to [lo, hi]; gradient passes through unclipped
    /// entries (boundary values count as unclipped).
    pub fn clamp(&self, x: Value, lo: T, hi: T) -> Value {
        let out = self.val(x, |t| {
            t.map(|v| {
                if v < lo {
                    lo
                } else if v > hi {
                    hi
                } else {
                    v
                }
            })
        });
        self.push(out, Op::Clamp { x, lo, hi })
    }

    pub fn reshape(&self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let out = self.val(x, |t| t.reshaped(shape.clone()))?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Inverted dropout; `rate == 0` is the identity and records nothing.
    pub fn dropout(&self, x: Value, rate: f64, rng: &mut ChaCha8Rng) -> Result<Value> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = T::from_f64c(1.0 - rate);
        let inv = keep.recip();
        let thresh = T::from_f64c(rate);
        let (out, mask) = self.val(x, |t| {
            let mut mask = Tensor::zeros(t.shape().to_vec());
            let mut out = t.clone();
            for (m, o) in mask.data_mut().iter_mut().zip(out.data_mut().iter_mut()) {
                let u = T::sample_uniform(rng);
                if u < thresh {
                    *m = T::zero();
                    *o = T::zero();
                } else {
                    *m = inv;
                    *o = *o * inv;
                }
            }
            (out, mask)
        });
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Gumbel-softmax over the last axis. Returns `(weights, soft)` where
    /// `soft` is the noisy softmax; `weights` equals `soft` when `hard` is
    /// false, otherwise a straight-through one-hot of the noisy argmax
    /// (first index wins ties).
    pub fn gumbel_softmax(
        &self,
        logits: Value,
        temperature: f64,
        hard: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Value, Value)> {
        if temperature_invalid(temperature) {
            return Err(Error::InvalidArgument(format!(
                "gumbel temperature {temperature} must be positive and finite"
            )));
        }
        let inv_temp = T::from_f64c(1.0 / temperature);
        let noisy = self.val(logits, |t| {
            let mut z = t.clone();
            for v in z.data_mut().iter_mut() {
                let mut u = T::sample_uniform(rng);
                if u <= T::zero() {
                    u = T::min_positive_value();
                }
                let gumbel = -((-(u.ln())).ln());
                *v = (*v + gumbel) * inv_temp;
            }
            z
        });
        let soft = ops::softmax_last_fwd(&noisy)?;
        let soft_v = self.push(soft, Op::GumbelSoft { logits, inv_temp });
        if !hard {
            return Ok((soft_v, soft_v));
        }
        let hardened = self.val(soft_v, |t| {
            let v = *t.shape().last().unwrap();
            let n = t.numel() / v;
            let mut out = Tensor::zeros(t.shape().to_vec());
            for i in 0..n {
                let row = &t.data()[i * v..(i + 1) * v];
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                out.data_mut()[i * v + best] = T::one();
            }
            out
        });
        Ok((self.push(hardened, Op::Harden { soft: soft_v }), soft_v))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Value) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        slots.resize_with(nodes.len(), || None);
        slots[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Conv1d { x, k, stride, dilation } => {
                    let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dk = Tensor::zeros(tk.shape().to_vec());
                    ops::conv1d_bwd(tx, tk, *stride, *dilation, &g, &mut dx, &mut dk);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *k, dk);
                }
                Op::FractionalConv { x, k, num, den } => {
                    let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dk = Tensor::zeros(tk.shape().to_vec());
                    ops::fractional_conv_bwd(tx, tk, *num, *den, &g, &mut dx, &mut dk);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *k, dk);
                }
                Op::GroupedTimeConv { x, k, b, groups } => {
                    let (tx, tk) = (&nodes[x.0].value, &nodes[k.0].value);
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dk = Tensor::zeros(tk.shape().to_vec());
                    let mut db = Tensor::zeros(nodes[b.0].value.shape().to_vec());
                    ops::grouped_time_conv_bwd(tx, tk, *groups, &g, &mut dx, &mut dk, &mut db);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *k, dk);
                    accumulate(&mut slots, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dw = Tensor::zeros(tw.shape().to_vec());
                    let mut db = Tensor::zeros(nodes[b.0].value.shape().to_vec());
                    ops::linear_bwd(tx, tw, &g, &mut dx, &mut dw, &mut db);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *w, dw);
                    accumulate(&mut slots, *b, db);
                }
                Op::BmmNt { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut da = Tensor::zeros(ta.shape().to_vec());
                    let mut db = Tensor::zeros(tb.shape().to_vec());
                    ops::bmm_nt_bwd(ta, tb, &g, &mut da, &mut db);
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::BmmNn { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut da = Tensor::zeros(ta.shape().to_vec());
                    let mut db = Tensor::zeros(tb.shape().to_vec());
                    ops::bmm_nn_bwd(ta, tb, &g, &mut da, &mut db);
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (tx, tg) = (&nodes[x.0].value, &nodes[gamma.0].value);
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dgamma = Tensor::zeros(tg.shape().to_vec());
                    let mut dbeta = Tensor::zeros(tg.shape().to_vec());
                    ops::layer_norm_bwd(tx, tg, &g, &mut dx, &mut dgamma, &mut dbeta);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *gamma, dgamma);
                    accumulate(&mut slots, *beta, dbeta);
                }
                Op::Gelu { x } => {
                    let tx = &nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    for ((d, &xv), &gv) in
                        dx.data_mut().iter_mut().zip(tx.data().iter()).zip(g.data().iter())
                    {
                        *d = gv * ops::gelu_grad(xv);
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::SoftmaxLast { x } => {
                    let mut dx = Tensor::zeros(nodes[x.0].value.shape().to_vec());
                    ops::softmax_last_bwd(&nodes[i].value, &g, &mut dx);
                    accumulate(&mut slots, *x, dx);
                }
                Op::LogSoftmaxLast { x } => {
                    let mut dx = Tensor::zeros(nodes[x.0].value.shape().to_vec());
                    ops::log_softmax_last_bwd(&nodes[i].value, &g, &mut dx);
                    accumulate(&mut slots, *x, dx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let tl = &nodes[logits.0].value;
                    let mut dx = Tensor::zeros(tl.shape().to_vec());
                    ops::cross_entropy_bwd(tl, targets, g.data()[0], &mut dx);
                    accumulate(&mut slots, *logits, dx);
                }
                Op::CosineRows { a, b } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mut da = Tensor::zeros(ta.shape().to_vec());
                    let mut db = Tensor::zeros(tb.shape().to_vec());
                    ops::cosine_rows_bwd(ta, tb, &g, &mut da, &mut db);
                    accumulate(&mut slots, *a, da);
                    accumulate(&mut slots, *b, db);
                }
                Op::ExpEntropyRows { p } => {
                    let tp = &nodes[p.0].value;
                    let mut dp = Tensor::zeros(tp.shape().to_vec());
                    ops::exp_entropy_rows_bwd(tp, &g, &mut dp);
                    accumulate(&mut slots, *p, dp);
                }
                Op::Transpose2d { x } => {
                    let dx = ops::transpose2d(&g)?;
                    accumulate(&mut slots, *x, dx);
                }
                Op::SplitHeads { x } => {
                    let dx = ops::merge_heads(&g)?;
                    accumulate(&mut slots, *x, dx);
                }
                Op::MergeHeads { x } => {
                    let heads = nodes[x.0].value.shape()[0];
                    let dx = ops::split_heads(&g, heads)?;
                    accumulate(&mut slots, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let tx = &nodes[x.0].value;
                    let d = tx.shape()[1];
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    ops::gather_rows_bwd(idx, d, &g, &mut dx);
                    accumulate(&mut slots, *x, dx);
                }
                Op::SubstituteRows { x, v, idx } => {
                    let tx = &nodes[x.0].value;
                    let d = tx.shape()[1];
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    let mut dv = Tensor::zeros(nodes[v.0].value.shape().to_vec());
                    ops::substitute_rows_bwd(idx, d, &g, &mut dx, &mut dv);
                    accumulate(&mut slots, *x, dx);
                    accumulate(&mut slots, *v, dv);
                }
                Op::MeanAxis0 { x } => {
                    let tx = &nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.shape().to_vec());
                    ops::mean_axis0_bwd(tx.shape()[0], &g, &mut dx);
                    accumulate(&mut slots, *x, dx);
                }
                Op::CodebookLookup { y, cb } => {
                    let (ty, tcb) = (&nodes[y.0].value, &nodes[cb.0].value);
                    let mut dy = Tensor::zeros(ty.shape().to_vec());
                    let mut dcb = Tensor::zeros(tcb.shape().to_vec());
                    ops::codebook_lookup_bwd(ty, tcb, &g, &mut dy, &mut dcb);
                    accumulate(&mut slots, *y, dy);
                    accumulate(&mut slots, *cb, dcb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut slots, *a, g.clone());
                    accumulate(&mut slots, *b, g.clone());
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    accumulate(&mut slots, *x, g.map(|v| v * c));
                }
                Op::AddConst { x } => {
                    accumulate(&mut slots, *x, g.clone());
                }
                Op::StackCols { cols } => {
                    let m = cols.len();
                    let n = g.shape()[0];
                    for (j, c) in cols.iter().enumerate() {
                        let mut dc = Tensor::zeros(vec![n]);
                        for r in 0..n {
                            dc.data_mut()[r] = g.data()[r * m + j];
                        }
                        accumulate(&mut slots, *c, dc);
                    }
                }
                Op::SumAll { x } => {
                    let gv = g.data()[0];
                    let tx = &nodes[x.0].value;
                    accumulate(&mut slots, *x, Tensor::filled(tx.shape().to_vec(), gv));
                }
                Op::Clamp { x, lo, hi } => {
                    let tx = &nodes[x.0].value;
                    let mut dx = g.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(tx.data().iter()) {
                        if xv < *lo || xv > *hi {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::Reshape { x } => {
                    let dx = g.clone().reshaped(nodes[x.0].value.shape().to_vec())?;
                    accumulate(&mut slots, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g.clone();
                    for (d, &m) in dx.data_mut().iter_mut().zip(mask.data().iter()) {
                        *d = *d * m;
                    }
                    accumulate(&mut slots, *x, dx);
                }
                Op::GumbelSoft { logits, inv_temp } => {
                    let soft = &nodes[i].value;
                    let mut dz = Tensor::zeros(soft.shape().to_vec());
                    ops::softmax_last_bwd(soft, &g, &mut dz);
                    let it = *inv_temp;
                    accumulate(&mut slots, *logits, dz.map(|v| v * it));
                }
                Op::Harden { soft } => {
                    accumulate(&mut slots, *soft, g.clone());
                }
            }
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }
}

fn temperature_invalid(t: f64) -> bool {
    !(t.is_finite() && t > 0.0)
}

fn accumulate<T: Scalar>(slots: &mut [Option<Tensor<T>>], v: Value, delta: Tensor<T>) {
    match &mut slots[v.0] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
