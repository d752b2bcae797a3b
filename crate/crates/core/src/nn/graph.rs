//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation
//! order. Parents always precede their children on the tape, so the graph
//! is acyclic by construction and the backward sweep is a single pass in
//! reverse index order.
//!
//! Parameters live outside the graph in a [`ParamStore`]; a graph borrows
//! the store and reads parameter values in place. [`Graph::backward`]
//! returns [`Gradients`], which the caller folds into the store's gradient
//! buffers with [`ParamStore::accumulate`].

use std::collections::HashMap;

use super::attention::{self, AttentionCache, Segment};
use super::fused;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<T>),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    L2NormalizeRows(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention(Box<AttentionCache<T>>),
    FocalProbs {
        p: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
    },
    FocalLogits {
        z: Var,
        targets: Vec<T>,
        alpha: T,
        gamma: T,
    },
    Contrastive(Box<fused::ContrastiveCache<T>>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
}

/// Rows and columns of a 2-D view of `shape` (leading dim × the rest).
pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph without parameters; every input is a leaf.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self
                .params
                .expect("param node implies a store")
                .get(*id)
                .data(),
        }
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// The single value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(self.shape(v))
    }

    /// Records a constant input. Gradients with respect to it are still
    /// computed and can be read from [`Gradients::of`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape("input", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(vec![rows, cols], data, Op::Leaf))
    }

    /// Places a parameter on the tape; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Contract("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Lookup(format!("parameter #{}", id.0)));
        }
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a),
            k,
            1,
            self.value(b),
            m,
            1,
            &mut out,
            false,
        );
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b)))
    }

    /// `x·W + b` with `x: N×D_in`, `W: D_in×D_out`, `b: D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims(x);
        let wshape = self.shape(w);
        if wshape.len() != 2 || wshape[0] != din {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let dout = wshape[1];
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != dout {
                return Err(Error::shape("linear bias", self.shape(w), self.shape(b)));
            }
            for row in out.chunks_mut(dout.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            n,
            din,
            dout,
            self.value(x),
            din,
            1,
            self.value(w),
            dout,
            1,
            &mut out,
            b.is_some(),
        );
        Ok(self.push(vec![n, dout], out, Op::Linear(x, w, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(c.max(1))
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    fn require_finite(&self, op: &str, x: Var) -> Result<()> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input to {op}")));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.require_finite("relu", x)?;
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.require_finite("sigmoid", x)?;
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Ln(x))
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows) of a matrix.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 1 || self.shape(x).len() > 2 {
            return Err(Error::Config(format!(
                "softmax axis {axis} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        self.require_finite("softmax", x)?;
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for_each_lane(r, c, axis, |idx| softmax_lane(&mut out, idx));
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        self.push(Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b) / T::of(n as f64);
        self.push(Vec::new(), vec![s], Op::Mean(x))
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                self.shape(x),
                &[weights.len()],
            ));
        }
        let s = self
            .value(x)
            .iter()
            .zip(&weights)
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.push(Vec::new(), vec![s], Op::WeightedSum(x, weights)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(Error::shape("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[rows, c], self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Lookup(format!("row {i} of {r}")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![index.len(), c], out, Op::GatherRows(x, index.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let eps = T::of(1e-12);
        let src = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in src.chunks(c.max(1)).take(r) {
            let n = row
                .iter()
                .fold(T::zero(), |a, &v| a + v * v)
                .sqrt()
                .max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        self.push(vec![r, c], out, Op::L2NormalizeRows(x, norms))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of width C.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::of(1e-5);
        let cn = T::of(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for row in self.value(x).chunks(c.max(1)).take(r) {
            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / cn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&v| (v - mu) * is));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat
            .chunks(c.max(1))
            .flat_map(|row| row.iter().enumerate().map(|(j, &h)| h * g[j] + b[j]))
            .collect();
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// Each [`Segment`] names a block of query rows that attends only to its
    /// own block of key rows, so many independent sequences can share one
    /// call. Channels are split evenly across `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
    ) -> Result<Var> {
        let (lq, c) = self.dims(q);
        let (lk, ck) = self.dims(k);
        let (lv, cv) = self.dims(v);
        if ck != c || cv != c || lk != lv {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "{c} channels not divisible into {heads} heads"
            )));
        }
        for s in &segments {
            if s.q_start + s.q_len > lq || s.k_start + s.k_len > lk || s.k_len == 0 {
                return Err(Error::Contract(format!(
                    "attention segment {s:?} out of range"
                )));
            }
        }
        let (out, probs) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            lq,
            c,
            heads,
            &segments,
        );
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            channels: c,
            segments,
            probs,
        };
        Ok(self.push(vec![lq, c], out, Op::Attention(Box::new(cache))))
    }

    /// Elementwise binary focal loss of probabilities `p` against `targets`.
    pub fn focal_loss_probs(&mut self, p: Var, targets: &[T], alpha: T, gamma: T) -> Result<Var> {
        if targets.len() != self.value(p).len() {
            return Err(Error::shape("focal_loss", self.shape(p), &[targets.len()]));
        }
        let out = self
            .value(p)
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| fused::focal_probs(pv, y, alpha, gamma).0)
            .collect();
        Ok(self.push(
            self.shape(p).to_vec(),
            out,
            Op::FocalProbs {
                p,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Elementwise binary focal loss of `sigmoid(z)`, evaluated from logits.
    pub fn focal_loss_logits(&mut self, z: Var, targets: &[T], alpha: T, gamma: T) -> Result<Var> {
        if targets.len() != self.value(z).len() {
            return Err(Error::shape("focal_loss", self.shape(z), &[targets.len()]));
        }
        self.require_finite("focal_loss", z)?;
        let out = self
            .value(z)
            .iter()
            .zip(targets)
            .map(|(&zv, &y)| fused::focal_logits(zv, y, alpha, gamma).0)
            .collect();
        Ok(self.push(
            self.shape(z).to_vec(),
            out,
            Op::FocalLogits {
                z,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Supervised contrastive loss over groups of embedding rows.
    ///
    /// Returns `Σ_g weight_g · L_g`, where each group is scored on its own.
    pub fn contrastive(
        &mut self,
        emb: Var,
        groups: &[fused::ContrastiveGroup<T>],
        tau: T,
    ) -> Result<Var> {
        let (r, c) = self.dims(emb);
        let (loss, data) = fused::contrastive_forward(self.value(emb), r, c, groups, tau)?;
        let cache = fused::ContrastiveCache { emb, data };
        Ok(self.push(Vec::new(), vec![loss], Op::Contrastive(Box::new(cache))))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((
                    id,
                    grads[i]
                        .clone()
                        .unwrap_or_else(|| vec![T::zero(); self.value(Var(i)).len()]),
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                let mut da = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, m, 1, self.value(*b), 1, m, &mut da, false);
                let mut db = vec![T::zero(); k * m];
                T::gemm(k, n, m, self.value(*a), 1, k, g, m, 1, &mut db, false);
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Linear(x, w, b) => {
                let (n, din) = self.dims(*x);
                let dout = self.shape(*w)[1];
                let mut dx = vec![T::zero(); n * din];
                T::gemm(
                    n,
                    dout,
                    din,
                    g,
                    dout,
                    1,
                    self.value(*w),
                    1,
                    dout,
                    &mut dx,
                    false,
                );
                let mut dw = vec![T::zero(); din * dout];
                T::gemm(
                    din,
                    n,
                    dout,
                    self.value(*x),
                    1,
                    din,
                    g,
                    dout,
                    1,
                    &mut dw,
                    false,
                );
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
                if let Some(b) = b {
                    add_into(grads, *b, &column_sums(g, dout));
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                add_into(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(self.value(*b)).map(|(&d, &y)| d * y).collect();
                let db: Vec<T> = g.iter().zip(self.value(*a)).map(|(&d, &x)| d * x).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::AddRow(x, row) => {
                add_into(grads, *x, g);
                add_into(grads, *row, &column_sums(g, self.value(*row).len()));
            }
            Op::Scale(x, s) => {
                let d: Vec<T> = g.iter().map(|&v| v * *s).collect();
                add_into(grads, *x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let out = self.value(Var(idx));
                let d: Vec<T> = g
                    .iter()
                    .zip(out)
                    .map(|(&d, &s)| d * s * (T::one() - s))
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<T> = g
                    .iter()
                    .zip(self.value(Var(idx)))
                    .map(|(&d, &e)| d * e)
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Ln(x) => {
                let d: Vec<T> = g.iter().zip(self.value(*x)).map(|(&d, &v)| d / v).collect();
                add_into(grads, *x, &d);
            }
            Op::Softmax(x, axis) => {
                let (r, c) = self.dims(*x);
                let y = self.value(Var(idx));
                let mut d = vec![T::zero(); r * c];
                for_each_lane(r, c, *axis, |lane| {
                    let dot = lane.clone().fold(T::zero(), |a, i| a + g[i] * y[i]);
                    for i in lane {
                        d[i] = y[i] * (g[i] - dot);
                    }
                });
                add_into(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / T::of(n.max(1) as f64); n];
                add_into(grads, *x, &d);
            }
            Op::WeightedSum(x, w) => {
                let d: Vec<T> = w.iter().map(|&wi| wi * g[0]).collect();
                add_into(grads, *x, &d);
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.dims(*a);
                let cb = self.dims(*b).1;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.chunks(ca + cb).take(r) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    add_into(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::GatherRows(x, index) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![T::zero(); r * c];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[k * c + j];
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::Reshape(x) => add_into(grads, *x, g),
            Op::L2NormalizeRows(x, norms) => {
                let (_, c) = self.dims(*x);
                let y = self.value(Var(idx));
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks(c.max(1)).zip(g.chunks(c.max(1))).zip(norms) {
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                }
                add_into(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (_, c) = self.dims(*x);
                let gam = self.value(*gamma);
                let cn = T::of(c as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = Vec::with_capacity(xhat.len());
                for ((hr, gr), &is) in xhat.chunks(c.max(1)).zip(g.chunks(c.max(1))).zip(inv_std) {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= cn;
                    mean_dh_h /= cn;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        dx.push(is * (dh - mean_dh - hr[j] * mean_dh_h));
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *gamma, &dgamma);
                add_into(grads, *beta, &dbeta);
            }
            Op::Attention(cache) => {
                let (dq, dk, dv) = attention::backward(
                    cache,
                    self.value(cache.q),
                    self.value(cache.k),
                    self.value(cache.v),
                    g,
                    self.dims(cache.k).0,
                );
                add_into(grads, cache.q, &dq);
                add_into(grads, cache.k, &dk);
                add_into(grads, cache.v, &dv);
            }
            Op::FocalProbs {
                p,
                targets,
                alpha,
                gamma,
            } => {
                let d: Vec<T> = self
                    .value(*p)
                    .iter()
                    .zip(targets)
                    .zip(g)
                    .map(|((&pv, &y), &gv)| gv * fused::focal_probs(pv, y, *alpha, *gamma).1)
                    .collect();
                add_into(grads, *p, &d);
            }
            Op::FocalLogits {
                z,
                targets,
                alpha,
                gamma,
            } => {
                let d: Vec<T> = self
                    .value(*z)
                    .iter()
                    .zip(targets)
                    .zip(g)
                    .map(|((&zv, &y), &gv)| gv * fused::focal_logits(zv, y, *alpha, *gamma).1)
                    .collect();
                add_into(grads, *z, &d);
            }
            Op::Contrastive(cache) => {
                let d = fused::contrastive_backward(cache, self.value(cache.emb), g[0]);
                add_into(grads, cache.emb, &d);
            }
        }
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: &[T]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(b, &x)| *b += x),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn column_sums<T: Scalar>(g: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in g.chunks(cols.max(1)) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
    }
    out
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(
    r: usize,
    c: usize,
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1));
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c.max(1)));
        }
    }
}

fn softmax_lane<T: Scalar>(buf: &mut [T], lane: std::iter::StepBy<std::ops::Range<usize>>) {
    let idx: Vec<usize> = lane.collect();
    let m = idx.iter().fold(T::neg_infinity(), |a, &i| a.max(buf[i]));
    let mut z = T::zero();
    for &i in &idx {
        buf[i] = (buf[i] - m).exp();
        z += buf[i];
    }
    for &i in &idx {
        buf[i] /= z;
    }
}

/// `1/(1+e^{−x})` without overflow for large `|x|`.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    let e = (-x.abs()).exp();
    let pos = T::one() / (T::one() + e);
    if x >= T::zero() {
        pos
    } else {
        e / (T::one() + e)
    }
}

/// Gradients of one backward pass: per node and per parameter.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂loss/∂v`; zeros when `v` does not influence the loss.
    pub fn of(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}
