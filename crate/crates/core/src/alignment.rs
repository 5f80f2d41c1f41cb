//! Cross-attention from sequence features to preference embeddings.
//!
//! ```text
//! att = LayerNorm(MultiHead(Q, P, P)) + Q
//! F   = LayerNorm(FFN(att)) + att
//! ```
//!
//! The residuals are added after the LayerNorm. The same query/key
//! projections give the preference weights ω: the per-head projections of
//! `q_n` and `P` are concatenated and a single softmax over the m
//! preferences is taken with scale `1/sqrt(h·d_k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::nn::{self, LayerNormParams, ModelError};
use crate::tensor::softmax_in_place;
use crate::Matrix;

pub const ALIGNMENT_LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub d: usize,
    /// Number of heads.
    pub h: usize,
    pub d_k: usize,
    pub dropout: f64,
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.h == 0 || self.d_k == 0 {
            return Err(ModelError::Config(format!("alignment sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-head projections are stored side by side: head `i` of `wq` is columns
/// `i·d_k..(i+1)·d_k`.
#[derive(Debug, Clone)]
pub struct AlignmentParams {
    pub config: AlignmentConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl AlignmentParams {
    /// Xavier-uniform projections, zero biases, LayerNorm α = 1, β = 0.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: AlignmentConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, hk) = (config.d, config.h * config.d_k);
        Ok(Self {
            wq: nn::xavier(store, "align.wq".into(), d, hk, rng),
            wk: nn::xavier(store, "align.wk".into(), d, hk, rng),
            wv: nn::xavier(store, "align.wv".into(), d, hk, rng),
            wo: nn::xavier(store, "align.wo".into(), hk, d, rng),
            w1: nn::xavier(store, "align.w1".into(), d, d, rng),
            b1: nn::zeros(store, "align.b1".into(), d),
            w2: nn::xavier(store, "align.w2".into(), d, d, rng),
            b2: nn::zeros(store, "align.b2".into(), d),
            ln1: LayerNormParams::init(store, "align.ln1", d, ALIGNMENT_LN_EPS),
            ln2: LayerNormParams::init(store, "align.ln2", d, ALIGNMENT_LN_EPS),
            config,
        })
    }
}

/// `Concat(head_1..head_h) W^o`, `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
pub fn multi_head_graph(g: &mut Graph<'_>, q: Var, k: Var, v: Var, p: &AlignmentParams) -> Var {
    let qp = nn::linear(g, q, p.wq, None);
    let kp = nn::linear(g, k, p.wk, None);
    let vp = nn::linear(g, v, p.wv, None);
    let heads = nn::multi_head_scores(g, qp, kp, vp, p.config.h, p.config.d_k, p.config.d_k, None, p.config.dropout);
    nn::linear(g, heads, p.wo, None)
}

/// `ReLU(x W_1 + b_1) W_2 + b_2`, dropout on the hidden layer.
pub fn ffn_graph(g: &mut Graph<'_>, x: Var, p: &AlignmentParams) -> Var {
    let h = nn::linear(g, x, p.w1, Some(p.b1));
    let h = g.relu(h);
    let h = g.dropout(h, p.config.dropout);
    nn::linear(g, h, p.w2, Some(p.b2))
}

/// Returns `(att, F)`.
pub fn align_graph(g: &mut Graph<'_>, q: Var, prefs: Var, p: &AlignmentParams) -> (Var, Var) {
    let mh = multi_head_graph(g, q, prefs, prefs, p);
    let normed = p.ln1.apply(g, mh);
    let att = g.add(normed, q);
    let ff = ffn_graph(g, att, p);
    let normed = p.ln2.apply(g, ff);
    let f = g.add(normed, att);
    (att, f)
}

/// `softmax(q_n W^Q · (P W^K)ᵀ / sqrt(h·d_k))` as a `1 × m` row.
pub fn preference_weights_graph(g: &mut Graph<'_>, q_n: Var, prefs: Var, p: &AlignmentParams) -> Var {
    let qp = nn::linear(g, q_n, p.wq, None);
    let kp = nn::linear(g, prefs, p.wk, None);
    let kt = g.transpose(kp);
    let s = g.matmul(qp, kt);
    let s = g.scale(s, 1.0 / ((p.config.h * p.config.d_k) as f64).sqrt());
    g.softmax_rows(s)
}

/// `softmax(QKᵀ/√d_k) V`, row-wise softmax.
pub fn scaled_dot_product_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    assert_eq!(q.cols(), k.cols(), "query/key width mismatch");
    assert_eq!(k.rows(), v.rows(), "key/value count mismatch");
    let mut s = q.matmul_t(k).scale(1.0 / (q.cols() as f64).sqrt());
    for i in 0..s.rows() {
        softmax_in_place(s.row_mut(i));
    }
    s.matmul(v)
}

fn check_shapes(store: &ParamStore, p: &AlignmentParams, rows_of: &[(&str, &Matrix)]) -> Result<(), ModelError> {
    let d = store.get(p.wq).rows();
    for (what, m) in rows_of {
        if m.cols() != d {
            return Err(ModelError::Config(format!("{what} has width {} but the alignment block expects d = {d}", m.cols())));
        }
    }
    Ok(())
}

pub fn multi_head_attention(store: &ParamStore, p: &AlignmentParams, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix, ModelError> {
    check_shapes(store, p, &[("Q", q), ("K", k), ("V", v)])?;
    let mut g = Graph::new(store);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = multi_head_graph(&mut g, q, k, v, p);
    Ok(g.value(out).clone())
}

pub fn position_wise_ffn(store: &ParamStore, p: &AlignmentParams, x: &Matrix) -> Result<Matrix, ModelError> {
    check_shapes(store, p, &[("x", x)])?;
    let mut g = Graph::new(store);
    let x = g.constant(x.clone());
    let out = ffn_graph(&mut g, x, p);
    Ok(g.value(out).clone())
}

/// `α ⊙ (x − μ)/√(σ² + ε) + β` with the population variance.
pub fn layer_normalize(x: &[f64], alpha: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mu = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().zip(alpha).zip(beta).map(|((v, a), b)| a * (v - mu) * inv + b).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFeatures {
    pub f: Matrix,
    pub att: Matrix,
}

pub fn align(store: &ParamStore, p: &AlignmentParams, q: &Matrix, prefs: &Matrix) -> Result<AlignedFeatures, ModelError> {
    check_shapes(store, p, &[("Q", q), ("P", prefs)])?;
    let mut g = Graph::new(store);
    let (qv, pv) = (g.constant(q.clone()), g.constant(prefs.clone()));
    let (att, f) = align_graph(&mut g, qv, pv, p);
    Ok(AlignedFeatures { f: g.value(f).clone(), att: g.value(att).clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceWeights {
    pub omega: Vec<f64>,
}

pub fn preference_attention_weights(store: &ParamStore, p: &AlignmentParams, q_n: &[f64], prefs: &Matrix) -> Result<PreferenceWeights, ModelError> {
    let q = Matrix::row_vector(q_n);
    check_shapes(store, p, &[("q_n", &q), ("P", prefs)])?;
    let mut g = Graph::new(store);
    let (qv, pv) = (g.constant(q), g.constant(prefs.clone()));
    let w = preference_weights_graph(&mut g, qv, pv, p);
    Ok(PreferenceWeights { omega: g.value(w).row(0).to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, h: usize, d_k: usize, seed: u64) -> (ParamStore, AlignmentParams) {
        let mut store = ParamStore::new();
        let p = AlignmentParams::init(&mut store, AlignmentConfig { d, h, d_k, dropout: 0.0 }, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, p)
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
        Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_key_returns_its_value() {
        let v = Matrix::from_rows(&[[0.3, -1.0, 2.0]]);
        let out = scaled_dot_product_attention(&rand(4, 2, 1), &rand(1, 2, 2), &v);
        for i in 0..4 {
            assert!(out.row(i).iter().zip(v.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_keys_average_the_values() {
        let k = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let v = rand(3, 2, 5);
        let out = scaled_dot_product_attention(&rand(2, 2, 4), &k, &v);
        for j in 0..2 {
            let mean = (v[(0, j)] + v[(1, j)] + v[(2, j)]) / 3.0;
            assert!((out[(0, j)] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_matches_explicit_exp_normalize() {
        let q = Matrix::from_rows(&[[0.2, -0.4], [1.1, 0.5]]);
        let k = Matrix::from_rows(&[[0.7, 0.1], [-0.3, 0.9]]);
        let v = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let out = scaled_dot_product_attention(&q, &k, &v);
        let s = 2f64.sqrt();
        for i in 0..2 {
            let s0 = ((q[(i, 0)] * k[(0, 0)] + q[(i, 1)] * k[(0, 1)]) / s).exp();
            let s1 = ((q[(i, 0)] * k[(1, 0)] + q[(i, 1)] * k[(1, 1)]) / s).exp();
            for j in 0..2 {
                let expected = (s0 * v[(0, j)] + s1 * v[(1, j)]) / (s0 + s1);
                assert!((out[(i, j)] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_projections_reduce_to_single_attention() {
        let (mut store, p) = params(3, 1, 3, 0);
        for id in [p.wq, p.wk, p.wv, p.wo] {
            *store.get_mut(id) = Matrix::identity(3);
        }
        let (q, k) = (rand(2, 3, 1), rand(4, 3, 2));
        let got = multi_head_attention(&store, &p, &q, &k, &k).unwrap();
        assert!(got.max_abs_diff(&scaled_dot_product_attention(&q, &k, &k)) < 1e-12);
    }

    #[test]
    fn output_shapes_for_several_head_counts() {
        for h in [1, 2, 4] {
            let (store, p) = params(4, h, 3, h as u64);
            let out = multi_head_attention(&store, &p, &rand(5, 4, 1), &rand(2, 4, 2), &rand(2, 4, 3)).unwrap();
            assert_eq!(out.shape(), (5, 4));
            let a = align(&store, &p, &rand(5, 4, 1), &rand(2, 4, 2)).unwrap();
            assert_eq!(a.f.shape(), (5, 4));
            assert_eq!(a.att.shape(), (5, 4));
        }
    }

    #[test]
    fn per_head_loop_oracle() {
        let (store, p) = params(4, 2, 2, 7);
        let (q, k, v) = (rand(2, 4, 11), rand(3, 4, 12), rand(3, 4, 13));
        let got = multi_head_attention(&store, &p, &q, &k, &v).unwrap();
        let (wq, wk, wv, wo) = (store.get(p.wq), store.get(p.wk), store.get(p.wv), store.get(p.wo));
        let mut concat = vec![vec![0.0; 4]; 2];
        for head in 0..2 {
            for i in 0..2 {
                let mut scores = [0.0; 3];
                for (j, s) in scores.iter_mut().enumerate() {
                    for c in 0..2 {
                        let (mut qc, mut kc) = (0.0, 0.0);
                        for r in 0..4 {
                            qc += q[(i, r)] * wq[(r, head * 2 + c)];
                            kc += k[(j, r)] * wk[(r, head * 2 + c)];
                        }
                        *s += qc * kc;
                    }
                    *s /= 2f64.sqrt();
                }
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..2 {
                    let mut acc = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        let mut vc = 0.0;
                        for r in 0..4 {
                            vc += v[(j, r)] * wv[(r, head * 2 + c)];
                        }
                        acc += s.exp() / z * vc;
                    }
                    concat[i][head * 2 + c] = acc;
                }
            }
        }
        for i in 0..2 {
            for j in 0..4 {
                let expected: f64 = (0..4).map(|c| concat[i][c] * wo[(c, j)]).sum();
                assert!((got[(i, j)] - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ffn_identity_and_zeroing_cases() {
        let (mut store, p) = params(3, 1, 3, 0);
        *store.get_mut(p.w1) = Matrix::identity(3);
        *store.get_mut(p.w2) = Matrix::identity(3);
        let x = Matrix::from_rows(&[[0.5, 1.0, 0.0], [2.0, 0.1, 3.0]]);
        assert!(position_wise_ffn(&store, &p, &x).unwrap().max_abs_diff(&x) < 1e-15);
        *store.get_mut(p.b2) = Matrix::row_vector(&[0.1, -0.2, 0.3]);
        let neg = Matrix::from_rows(&[[-0.5, -1.0, -2.0]]);
        assert_eq!(position_wise_ffn(&store, &p, &neg).unwrap(), Matrix::row_vector(&[0.1, -0.2, 0.3]));
    }

    #[test]
    fn ffn_two_by_three_matches_matmul_oracle() {
        let (mut store, p) = params(3, 1, 3, 3);
        *store.get_mut(p.b1) = Matrix::row_vector(&[0.1, -0.3, 0.2]);
        *store.get_mut(p.b2) = Matrix::row_vector(&[-0.1, 0.0, 0.4]);
        let x = rand(2, 3, 9);
        let got = position_wise_ffn(&store, &p, &x).unwrap();
        let (w1, b1, w2, b2) = (store.get(p.w1), store.get(p.b1), store.get(p.w2), store.get(p.b2));
        for i in 0..2 {
            let hidden: Vec<f64> = (0..3).map(|j| ((0..3).map(|r| x[(i, r)] * w1[(r, j)]).sum::<f64>() + b1[(0, j)]).max(0.0)).collect();
            for j in 0..3 {
                let expected = (0..3).map(|r| hidden[r] * w2[(r, j)]).sum::<f64>() + b2[(0, j)];
                assert!((got[(i, j)] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        assert_eq!(layer_normalize(&[2.0, 2.0, 2.0], &[1.0; 3], &[0.5, -0.5, 1.0], 1e-5), vec![0.5, -0.5, 1.0]);
        let out = layer_normalize(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5);
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - expected).abs() < 1e-12 && (out[1] + expected).abs() < 1e-12);
        assert!((out[0] - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn constant_multihead_output_gives_beta_plus_q() {
        // W^o = 0 and β = c makes the multi-head output constant, so att = LN(0) + Q = β + Q.
        let (mut store, p) = params(4, 2, 2, 1);
        *store.get_mut(p.wo) = Matrix::zeros(4, 4);
        let beta = Matrix::row_vector(&[0.1, 0.2, -0.3, 0.4]);
        *store.get_mut(p.ln1.beta) = beta.clone();
        let q = rand(3, 4, 2);
        let a = align(&store, &p, &q, &rand(2, 4, 3)).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((a.att[(i, j)] - (beta[(0, j)] + q[(i, j)])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_and_identical_preferences() {
        let (store, p) = params(4, 2, 3, 2);
        let q = [0.3, -0.2, 1.0, 0.5];
        assert_eq!(preference_attention_weights(&store, &p, &q, &rand(1, 4, 1)).unwrap().omega, vec![1.0]);
        let same = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4]; 5]);
        let w = preference_attention_weights(&store, &p, &q, &same).unwrap().omega;
        assert!(w.iter().all(|x| (x - 0.2).abs() < 1e-12));
    }

    #[test]
    fn gradients_for_every_parameter_group() {
        let (mut store, p) = params(6, 2, 3, 4);
        for id in [p.b1, p.b2, p.ln1.alpha, p.ln1.beta, p.ln2.alpha, p.ln2.beta] {
            let shape = store.get(id).shape();
            *store.get_mut(id) = rand(shape.0, shape.1, id.0 as u64).map(|x| 0.2 * x + if store.name(id).ends_with("alpha") { 1.0 } else { 0.0 });
        }
        let (q, prefs, target) = (rand(3, 6, 20), rand(2, 6, 21), rand(3, 6, 22));
        let entries = gradcheck::all_entries(&store);
        let checks = gradcheck::check(&mut store, &entries, 1e-5, |g| {
            let (qv, pv, tv) = (g.constant(q.clone()), g.constant(prefs.clone()), g.constant(target.clone()));
            let (_, f) = align_graph(g, qv, pv, &p);
            let s = g.row_dot(f, tv);
            let qn = g.select_row(qv, 2);
            let w = preference_weights_graph(g, qn, pv, &p);
            let wt = g.transpose(w);
            let zero = g.scale(wt, -3.0);
            let a = g.masked_bce(s, s, &[true, true, false]);
            let b = g.masked_bce(wt, zero, &[true, true]);
            let both = g.add(a, b);
            g.add(both, a)
        });
        let mut seen = std::collections::BTreeSet::new();
        for c in &checks {
            assert!(c.relative_error(1e-6) < 1e-4, "{c:?}");
            seen.insert(c.param.clone());
        }
        assert_eq!(seen.len(), 12);
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution_and_follow_permutations(seed in 0u64..1000, m in 1usize..6, shift in 0usize..6) {
            let (store, p) = params(5, 2, 3, seed);
            let prefs = rand(m, 5, seed + 1);
            let q = rand(1, 5, seed + 2);
            let w = preference_attention_weights(&store, &p, q.row(0), &prefs).unwrap().omega;
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| prefs.row(i).to_vec()).collect();
            let permuted = Matrix::from_rows(&rows);
            let wp = preference_attention_weights(&store, &p, q.row(0), &permuted).unwrap().omega;
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((wp[k] - w[i]).abs() < 1e-12);
            }
            let a = align(&store, &p, &rand(3, 5, seed + 3), &prefs).unwrap();
            let b = align(&store, &p, &rand(3, 5, seed + 3), &permuted).unwrap();
            prop_assert!(a.f.max_abs_diff(&b.f) < 1e-10);
        }
    }
}
