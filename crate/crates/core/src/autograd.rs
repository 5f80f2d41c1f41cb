//! A small tape-based reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation as
//! a node, and [`Graph::backward`] walks the tape in reverse to produce a
//! [`Grads`] aligned with the store. Graphs are cheap and single-use: build
//! one per sequence, run backward, drop it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`]; `None` means zero.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.grads[id.0].as_mut()
    }

    /// Scalar gradient entry, zero when the parameter received no gradient.
    pub fn entry(&self, id: ParamId, index: usize) -> f64 {
        self.grads[id.0].as_ref().map_or(0.0, |g| g.data()[index])
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather { param: ParamId, indices: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Softmax(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRow { x: Var, row: usize },
    StackRows(Vec<Var>),
    ScaleRows { x: Var, factors: Vec<f64> },
    RowDot(Var, Var),
    MaskedBce { pos: Var, neg: Var, mask: Vec<bool> },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), rng: None }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn with_dropout(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self { params, nodes: Vec::new(), rng: Some(rng) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Rows `indices` of a parameter table, gradient scattered back sparsely.
    pub fn gather(&mut self, id: ParamId, indices: &[usize]) -> Var {
        let table = self.params.get(id);
        let rows: Vec<&[f64]> = indices.iter().map(|&i| table.row(i)).collect();
        let value = Matrix::from_rows(&rows);
        let value = if indices.is_empty() { Matrix::zeros(0, table.cols()) } else { value };
        self.push(value, Op::Gather { param: id, indices: indices.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 × c` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, bb) in value.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bb;
            }
        }
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise `gamma ⊙ (x - mean) / sqrt(var + eps) + beta` with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, cols), "layer norm scale shape");
        assert_eq!(b.shape(), (1, cols), "layer norm bias shape");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat[(i, j)] = h;
                value[(i, j)] = g[(0, j)] * h + b[(0, j)];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row-wise softmax. `-inf` logits act as masked entries and receive weight 0.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push(value, Op::Softmax(x))
    }

    /// Sets entries where `allowed` is false to `-inf`. Treated as a constant mask:
    /// masked entries receive no gradient.
    pub fn mask_fill(&mut self, x: Var, allowed: &[bool]) -> Var {
        let src = self.value(x);
        assert_eq!(allowed.len(), src.data().len(), "mask shape mismatch");
        let mut value = src.clone();
        let factors: Vec<f64> = allowed.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        for (v, &a) in value.data_mut().iter_mut().zip(allowed) {
            if !a {
                *v = f64::NEG_INFINITY;
            }
        }
        self.push(value, Op::ScaleRows { x, factors })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_cols(start, len);
        self.push(value, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let value = Matrix::row_vector(self.value(x).row(row));
        self.push(value, Op::SelectRow { x, row })
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        let mats: Vec<&[f64]> = rows
            .iter()
            .map(|&r| {
                let m = self.value(r);
                assert_eq!(m.rows(), 1, "stack_rows expects row vectors");
                m.row(0)
            })
            .collect();
        let value = Matrix::from_rows(&mats);
        self.push(value, Op::StackRows(rows.to_vec()))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Var {
        let src = self.value(x);
        assert_eq!(factors.len(), src.rows(), "row factor count mismatch");
        let cols = src.cols();
        let mut value = src.clone();
        for (i, &f) in factors.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        let elementwise = factors.iter().flat_map(|&f| std::iter::repeat_n(f, cols)).collect();
        self.push(value, Op::ScaleRows { x, factors: elementwise })
    }

    /// Inverted dropout. Identity on inference graphs or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.data().len();
        let factors: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut value = self.value(x).clone();
        for (v, f) in value.data_mut().iter_mut().zip(&factors) {
            *v *= f;
        }
        self.push(value, Op::ScaleRows { x, factors })
    }

    /// Row-wise dot products of two equally shaped matrices, as an `n × 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let data = (0..av.rows()).map(|i| dot(av.row(i), bv.row(i))).collect();
        let value = Matrix::from_vec(av.rows(), 1, data);
        self.push(value, Op::RowDot(a, b))
    }

    /// `-Σ_valid [log σ(pos) + log(1 - σ(neg))]` over `n × 1` score columns.
    pub fn masked_bce(&mut self, pos: Var, neg: Var, mask: &[bool]) -> Var {
        let (p, n) = (self.value(pos), self.value(neg));
        assert_eq!(p.shape(), (mask.len(), 1), "positive scores shape");
        assert_eq!(n.shape(), (mask.len(), 1), "negative scores shape");
        let loss = bce_value(p.data(), n.data(), mask);
        self.push(Matrix::from_vec(1, 1, vec![loss]), Op::MaskedBce { pos, neg, mask: mask.to_vec() })
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Grads::zeros_like(self.params);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Gather { param, indices } => {
                    let shape = self.params.get(*param).shape();
                    let slot = out.slot(*param, shape);
                    for (r, &i) in indices.iter().enumerate() {
                        for (s, v) in slot.row_mut(i).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *bias, db);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = g.shape();
                    let gam = self.value(*gamma);
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            dgamma[(0, j)] += gr[j] * hr[j];
                            dbeta[(0, j)] += gr[j];
                            let dh = gr[j] * gam[(0, j)];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for j in 0..cols {
                            let dh = gr[j] * gam[(0, j)];
                            dx[(i, j)] = inv_std[i] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s = dot(g.row(i), y.row(i));
                        for j in 0..y.cols() {
                            dx[(i, j)] = y[(i, j)] * (g[(i, j)] - s);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()),
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut grads, *p, g.slice_cols(off, w));
                        off += w;
                    }
                }
                Op::SelectRow { x, row } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    dx.row_mut(*row).copy_from_slice(g.row(0));
                    acc(&mut grads, *x, dx);
                }
                Op::StackRows(rows) => {
                    for (i, r) in rows.iter().enumerate() {
                        acc(&mut grads, *r, Matrix::row_vector(g.row(i)));
                    }
                }
                Op::ScaleRows { x, factors } => {
                    let mut dx = g;
                    for (v, f) in dx.data_mut().iter_mut().zip(factors) {
                        *v *= f;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        let gi = g[(i, 0)];
                        for j in 0..av.cols() {
                            da[(i, j)] = gi * bv[(i, j)];
                            db[(i, j)] = gi * av[(i, j)];
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MaskedBce { pos, neg, mask } => {
                    let up = g[(0, 0)];
                    let (p, n) = (self.value(*pos), self.value(*neg));
                    let mut dp = Matrix::zeros(mask.len(), 1);
                    let mut dn = Matrix::zeros(mask.len(), 1);
                    for (t, &valid) in mask.iter().enumerate() {
                        if valid {
                            dp[(t, 0)] = up * (sigmoid(p[(t, 0)]) - 1.0);
                            dn[(t, 0)] = up * sigmoid(n[(t, 0)]);
                        }
                    }
                    acc(&mut grads, *pos, dp);
                    acc(&mut grads, *neg, dn);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn bce_value(pos: &[f64], neg: &[f64], mask: &[bool]) -> f64 {
    let mut loss = 0.0;
    for ((&p, &n), &valid) in pos.iter().zip(neg).zip(mask) {
        if valid {
            loss -= log_sigmoid(p) + log_sigmoid(-n);
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Central-difference check of every scalar in every parameter.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            g.backward(out)
        };
        let eps = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).data().len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + eps;
                let up = {
                    let mut g = Graph::new(store);
                    let o = f(&mut g);
                    g.value(o)[(0, 0)]
                };
                store.get_mut(id).data_mut()[k] = orig - eps;
                let down = {
                    let mut g = Graph::new(store);
                    let o = f(&mut g);
                    g.value(o)[(0, 0)]
                };
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.entry(id, k);
                let tol = 1e-5 * a.abs().max(numeric.abs()) + 1e-9;
                assert!((a - numeric).abs() <= tol, "{} [{k}]: analytic {a} numeric {numeric}", store.name(id));
            }
        }
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.add(n, Matrix::random_normal(r, c, 0.7, &mut rng));
        }
        s
    }

    #[test]
    fn gradients_of_composite_ops() {
        let mut s = rand_store(&[("a", 3, 4), ("b", 4, 2), ("bias", 1, 2), ("g", 1, 2), ("be", 1, 2)], 1);
        check(&mut s, |g| {
            let p = g.params();
            let (a, b, bias, gm, be) = (p.id("a").unwrap(), p.id("b").unwrap(), p.id("bias").unwrap(), p.id("g").unwrap(), p.id("be").unwrap());
            let (a, b, bias, gm, be) = (g.param(a), g.param(b), g.param(bias), g.param(gm), g.param(be));
            let x = g.matmul(a, b);
            let x = g.add_bias(x, bias);
            let t = g.tanh(x);
            let sg = g.sigmoid(x);
            let m = g.mul(t, sg);
            let ln = g.layer_norm(m, gm, be, 1e-5);
            let sm = g.softmax_rows(ln);
            let tr = g.transpose(sm);
            let r0 = g.select_row(tr, 0);
            let r1 = g.select_row(tr, 1);
            let st = g.stack_rows(&[r1, r0]);
            let sc = g.scale(st, 1.7);
            let sh = g.add_scalar(sc, -0.3);
            let rd = g.row_dot(sh, st);
            let neg = g.scale(rd, -0.5);
            g.masked_bce(rd, neg, &[true, false])
        });
    }

    #[test]
    fn gradients_through_gather_and_slicing() {
        let mut s = rand_store(&[("table", 5, 3), ("w", 3, 4)], 2);
        check(&mut s, |g| {
            let p = g.params();
            let rows = g.gather(p.id("table").unwrap(), &[4, 1, 4]);
            let w = g.param(p.id("w").unwrap());
            let x = g.matmul(rows, w);
            let l = g.slice_cols(x, 0, 2);
            let r = g.slice_cols(x, 2, 2);
            let rr = g.relu(r);
            let c = g.concat_cols(&[rr, l]);
            let c = g.scale_rows(c, &[1.0, 0.0, 2.0]);
            let mask = [true, false, true, true, true, true, true, true, true, true, true, true];
            let c = g.mask_fill(c, &mask);
            let sm = g.softmax_rows(c);
            let a = g.slice_cols(sm, 0, 1);
            let b = g.slice_cols(sm, 1, 1);
            g.masked_bce(a, b, &[true, true, true])
        });
    }

    #[test]
    fn masked_bce_values() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let p = g.constant(Matrix::from_vec(1, 1, vec![0.0]));
        let n = g.constant(Matrix::from_vec(1, 1, vec![0.0]));
        let l = g.masked_bce(p, n, &[true]);
        assert!((g.value(l)[(0, 0)] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let l = g.masked_bce(p, n, &[false]);
        assert_eq!(g.value(l)[(0, 0)], 0.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!(log_sigmoid(1000.0).abs() < 1e-300);
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!((log_sigmoid(0.3) - sigmoid(0.3).ln()).abs() < 1e-15);
    }

    #[test]
    fn dropout_is_identity_without_rng() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Matrix::filled(2, 2, 3.0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::with_dropout(&s, ChaCha8Rng::seed_from_u64(3));
        let x = g.constant(Matrix::filled(20, 20, 1.0));
        let y = g.dropout(x, 0.5);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
