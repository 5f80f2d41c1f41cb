//! The sequential recommender whose features get explained.
//!
//! Input embeddings are the title embeddings `M[index]` plus a learnable
//! positional table; the encoder is either a stack of causal self-attention
//! blocks or a gated recurrent network. Only per-position features come out:
//! there is no prediction head here.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::corpus::PaddedSequence;
use crate::nn::{self, check_finite, LayerNormParams, ModelError};
use crate::Matrix;

pub const BACKBONE_LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    SelfAttention,
    GatedRecurrent,
}

impl std::str::FromStr for BackboneVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self_attention" | "sasrec" => Ok(Self::SelfAttention),
            "gated_recurrent" | "gru" | "gru4rec" => Ok(Self::GatedRecurrent),
            other => Err(format!("unknown backbone variant {other:?} (expected self_attention or gated_recurrent)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Sequence length.
    pub n: usize,
    pub d: usize,
    /// Self-attention blocks, or stacked recurrent layers.
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n == 0 || self.d == 0 || self.blocks == 0 || self.heads == 0 {
            return err(format!("backbone sizes must be positive: {self:?}"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return err(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    attn_ln: LayerNormParams,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ffn_ln: LayerNormParams,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct GruLayer {
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

#[derive(Debug, Clone)]
enum Layers {
    Attention(Vec<AttentionBlock>),
    Recurrent(Vec<GruLayer>),
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub positional: ParamId,
    layers: Layers,
    final_ln: LayerNormParams,
}

impl BackboneParams {
    /// Registers every backbone parameter in `store` under `backbone.*`.
    /// Weights are Xavier-uniform, biases zero, LayerNorms (1, 0) and the
    /// positional table `N(0, 1/d)`.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d;
        let positional = store.add("backbone.positional", Matrix::random_normal(config.n, d, 1.0 / (d as f64).sqrt(), rng));
        let layers = match config.variant {
            BackboneVariant::SelfAttention => Layers::Attention(
                (0..config.blocks)
                    .map(|b| {
                        let p = format!("backbone.block{b}");
                        AttentionBlock {
                            attn_ln: LayerNormParams::init(store, &format!("{p}.attn_ln"), d, BACKBONE_LN_EPS),
                            wq: nn::xavier(store, format!("{p}.wq"), d, d, rng),
                            bq: nn::zeros(store, format!("{p}.bq"), d),
                            wk: nn::xavier(store, format!("{p}.wk"), d, d, rng),
                            bk: nn::zeros(store, format!("{p}.bk"), d),
                            wv: nn::xavier(store, format!("{p}.wv"), d, d, rng),
                            bv: nn::zeros(store, format!("{p}.bv"), d),
                            wo: nn::xavier(store, format!("{p}.wo"), d, d, rng),
                            bo: nn::zeros(store, format!("{p}.bo"), d),
                            ffn_ln: LayerNormParams::init(store, &format!("{p}.ffn_ln"), d, BACKBONE_LN_EPS),
                            w1: nn::xavier(store, format!("{p}.w1"), d, d, rng),
                            b1: nn::zeros(store, format!("{p}.b1"), d),
                            w2: nn::xavier(store, format!("{p}.w2"), d, d, rng),
                            b2: nn::zeros(store, format!("{p}.b2"), d),
                        }
                    })
                    .collect(),
            ),
            BackboneVariant::GatedRecurrent => Layers::Recurrent(
                (0..config.blocks)
                    .map(|b| {
                        let p = format!("backbone.gru{b}");
                        GruLayer {
                            wz: nn::xavier(store, format!("{p}.wz"), d, d, rng),
                            uz: nn::xavier(store, format!("{p}.uz"), d, d, rng),
                            bz: nn::zeros(store, format!("{p}.bz"), d),
                            wr: nn::xavier(store, format!("{p}.wr"), d, d, rng),
                            ur: nn::xavier(store, format!("{p}.ur"), d, d, rng),
                            br: nn::zeros(store, format!("{p}.br"), d),
                            wh: nn::xavier(store, format!("{p}.wh"), d, d, rng),
                            uh: nn::xavier(store, format!("{p}.uh"), d, d, rng),
                            bh: nn::zeros(store, format!("{p}.bh"), d),
                        }
                    })
                    .collect(),
            ),
        };
        let final_ln = LayerNormParams::init(store, "backbone.final_ln", d, BACKBONE_LN_EPS);
        Ok(Self { config, positional, layers, final_ln })
    }
}

/// `E_t = M[index_t] + PE_t` for every position, pads included.
pub fn embed_with_positions(g: &mut Graph<'_>, table: ParamId, seq: &PaddedSequence, params: &BackboneParams) -> Result<Var, ModelError> {
    let (rows, cols) = g.params().get(table).shape();
    if seq.indices.len() != params.config.n {
        return Err(ModelError::Config(format!("sequence length {} but the positional table has {} rows", seq.indices.len(), params.config.n)));
    }
    if cols != params.config.d {
        return Err(ModelError::Config(format!("embedding width {cols} but backbone d = {}", params.config.d)));
    }
    if let Some(&bad) = seq.indices.iter().find(|&&i| i >= rows) {
        return Err(ModelError::Config(format!("item index {bad} outside the embedding table ({rows} rows)")));
    }
    let looked_up = g.gather(table, &seq.indices);
    let pe = g.param(params.positional);
    Ok(g.add(looked_up, pe))
}

/// Query `i` may attend to key `j` when `j ≤ i` and `j` is a real item. A pad
/// query has no such key and attends to itself; its row is masked out of the
/// loss anyway.
pub fn causal_mask(valid: &[bool]) -> Vec<bool> {
    let n = valid.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            allowed[i * n + j] = valid[j] || j == i;
        }
    }
    allowed
}

/// Per-position features `Q` (n × d) from the embedded sequence.
pub fn encode_sequence(g: &mut Graph<'_>, e: Var, valid: &[bool], params: &BackboneParams) -> Result<Var, ModelError> {
    check_finite(g, e, || "input embeddings".into())?;
    let rate = params.config.dropout;
    let x = g.dropout(e, rate);
    let x = match &params.layers {
        Layers::Attention(blocks) => {
            let mask = causal_mask(valid);
            let heads = params.config.heads;
            let d_k = params.config.d / heads;
            let mut x = x;
            for (b, blk) in blocks.iter().enumerate() {
                let qn = blk.attn_ln.apply(g, x);
                let q = nn::linear(g, qn, blk.wq, Some(blk.bq));
                let k = nn::linear(g, x, blk.wk, Some(blk.bk));
                let v = nn::linear(g, x, blk.wv, Some(blk.bv));
                let heads_out = nn::multi_head_scores(g, q, k, v, heads, d_k, d_k, Some(&mask), rate);
                let mha = nn::linear(g, heads_out, blk.wo, Some(blk.bo));
                let y = g.add(qn, mha);
                let y = blk.ffn_ln.apply(g, y);
                let h = nn::linear(g, y, blk.w1, Some(blk.b1));
                let h = g.relu(h);
                let h = g.dropout(h, rate);
                let h = nn::linear(g, h, blk.w2, Some(blk.b2));
                let h = g.dropout(h, rate);
                x = g.add(h, y);
                check_finite(g, x, || format!("self-attention block {b}"))?;
            }
            x
        }
        Layers::Recurrent(layers) => {
            let mut x = x;
            for (l, layer) in layers.iter().enumerate() {
                x = gru_layer(g, x, valid, layer, params.config.d);
                x = g.dropout(x, rate);
                check_finite(g, x, || format!("recurrent layer {l}"))?;
            }
            x
        }
    };
    let out = params.final_ln.apply(g, x);
    check_finite(g, out, || "final layer norm".into())?;
    Ok(out)
}

/// One GRU pass. The hidden state stays zero across pad positions.
fn gru_layer(g: &mut Graph<'_>, x: Var, valid: &[bool], p: &GruLayer, d: usize) -> Var {
    let (wz, uz, bz) = (g.param(p.wz), g.param(p.uz), g.param(p.bz));
    let (wr, ur, br) = (g.param(p.wr), g.param(p.ur), g.param(p.br));
    let (wh, uh, bh) = (g.param(p.wh), g.param(p.uh), g.param(p.bh));
    let xz = g.matmul(x, wz);
    let xz = g.add_bias(xz, bz);
    let xr = g.matmul(x, wr);
    let xr = g.add_bias(xr, br);
    let xh = g.matmul(x, wh);
    let xh = g.add_bias(xh, bh);
    let mut h: Option<Var> = None;
    let mut rows = Vec::with_capacity(valid.len());
    for (t, &is_valid) in valid.iter().enumerate() {
        if !is_valid {
            h = None;
            rows.push(g.constant(Matrix::zeros(1, d)));
            continue;
        }
        let (az, ar, ah) = (g.select_row(xz, t), g.select_row(xr, t), g.select_row(xh, t));
        let next = match h {
            None => {
                // h_{t-1} = 0: z ⊙ tanh(x W_h + b_h)
                let z = g.sigmoid(az);
                let cand = g.tanh(ah);
                g.mul(z, cand)
            }
            Some(prev) => {
                let hz = g.matmul(prev, uz);
                let z = g.add(az, hz);
                let z = g.sigmoid(z);
                let hr = g.matmul(prev, ur);
                let r = g.add(ar, hr);
                let r = g.sigmoid(r);
                let rh = g.mul(r, prev);
                let rh = g.matmul(rh, uh);
                let cand = g.add(ah, rh);
                let cand = g.tanh(cand);
                // (1 - z) ⊙ h + z ⊙ cand
                let keep = g.scale(z, -1.0);
                let keep = g.add_scalar(keep, 1.0);
                let kept = g.mul(keep, prev);
                let fresh = g.mul(z, cand);
                g.add(kept, fresh)
            }
        };
        h = Some(next);
        rows.push(next);
    }
    g.stack_rows(&rows)
}
