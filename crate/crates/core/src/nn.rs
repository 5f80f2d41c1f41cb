//! Graph-level building blocks shared by the backbone and the alignment block.

use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite activations after {0}")]
    NonFinite(String),
    #[error("user has no preference embeddings but the alignment block is enabled")]
    MissingPreferences,
}

/// Parameters of a LayerNorm: scale α and shift β (both `1 × d`) and ε.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, eps: f64) -> Self {
        Self {
            alpha: store.add(format!("{prefix}.alpha"), Matrix::filled(1, d, 1.0)),
            beta: store.add(format!("{prefix}.beta"), Matrix::zeros(1, d)),
            eps,
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let (a, b) = (g.param(self.alpha), g.param(self.beta));
        g.layer_norm(x, a, b, self.eps)
    }
}

pub fn xavier<R: Rng + ?Sized>(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    store.add(name, Matrix::xavier_uniform(rows, cols, rng))
}

pub fn zeros(store: &mut ParamStore, name: String, cols: usize) -> ParamId {
    store.add(name, Matrix::zeros(1, cols))
}

/// `x W (+ b)`.
pub fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
    let w = g.param(w);
    let y = g.matmul(x, w);
    match b {
        Some(b) => {
            let b = g.param(b);
            g.add_bias(y, b)
        }
        None => y,
    }
}

/// Scaled dot-product attention per head over already projected inputs.
/// Head `i` reads columns `i·d_k..(i+1)·d_k` of `q`/`k` and `i·d_v..` of `v`;
/// the head outputs are concatenated. `allowed` is a row-major `a × b` mask
/// over (query, key) pairs.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_scores(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    d_k: usize,
    d_v: usize,
    allowed: Option<&[bool]>,
    dropout: f64,
) -> Var {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * d_k, d_k), g.slice_cols(k, h * d_k, d_k), g.slice_cols(v, h * d_v, d_v))
        };
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let s = g.scale(s, scale);
        let s = match allowed {
            Some(mask) => g.mask_fill(s, mask),
            None => s,
        };
        let a = g.softmax_rows(s);
        let a = g.dropout(a, dropout);
        outs.push(g.matmul(a, vh));
    }
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

pub fn check_finite(g: &Graph<'_>, x: Var, layer: impl FnOnce() -> String) -> Result<(), ModelError> {
    if g.value(x).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite(layer()))
    }
}
