//! The full scorer: embedding table, backbone, and (optionally) the
//! alignment block, all held in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_graph, preference_weights_graph, AlignmentConfig, AlignmentParams};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{embed_with_positions, encode_sequence, BackboneConfig, BackboneParams};
use crate::corpus::PaddedSequence;
use crate::nn::ModelError;
use crate::tensor::dot;
use crate::text_encoder::EmbeddingMatrix;
use crate::Matrix;

pub const EMBEDDING_PARAM: &str = "item_embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` scores straight from the backbone features.
    pub alignment: Option<AlignmentConfig>,
    /// Keep the title embedding table fixed during training.
    pub freeze_embeddings: bool,
}

#[derive(Debug, Clone)]
pub struct LaneModel {
    config: ModelConfig,
    store: ParamStore,
    embeddings: ParamId,
    backbone: BackboneParams,
    alignment: Option<AlignmentParams>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub q: Var,
    pub f: Var,
}

/// Inference outputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutputs {
    pub q: Matrix,
    pub f: Matrix,
}

impl LaneModel {
    /// The embedding table starts as a copy of `embeddings`; every other
    /// parameter is drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Self, ModelError> {
        if embeddings.dim() != config.backbone.d {
            return Err(ModelError::Config(format!("embedding dim {} but backbone d = {}", embeddings.dim(), config.backbone.d)));
        }
        if let Some(a) = &config.alignment {
            if a.d != config.backbone.d {
                return Err(ModelError::Config(format!("alignment d = {} but backbone d = {}", a.d, config.backbone.d)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let table = store.add(EMBEDDING_PARAM, embeddings.values().clone());
        store.set_trainable(table, !config.freeze_embeddings);
        let backbone = BackboneParams::init(&mut store, config.backbone.clone(), &mut rng)?;
        let alignment = config.alignment.clone().map(|a| AlignmentParams::init(&mut store, a, &mut rng)).transpose()?;
        Ok(Self { config, store, embeddings: table, backbone, alignment })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embeddings_id(&self) -> ParamId {
        self.embeddings
    }

    pub fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn alignment(&self) -> Option<&AlignmentParams> {
        self.alignment.as_ref()
    }

    pub fn uses_alignment(&self) -> bool {
        self.alignment.is_some()
    }

    /// Catalog size, not counting the pad row.
    pub fn item_count(&self) -> usize {
        self.store.get(self.embeddings).rows() - 1
    }

    pub fn item_embedding(&self, item: usize) -> &[f64] {
        self.store.get(self.embeddings).row(item)
    }

    /// Re-zeroes the pad row after an update.
    pub fn clear_pad_row(&mut self) {
        self.store.get_mut(self.embeddings).row_mut(0).fill(0.0);
    }

    /// Builds `Q` and `F` on `g`, which must borrow this model's store.
    pub fn forward(&self, g: &mut Graph<'_>, seq: &PaddedSequence, prefs: Option<&Matrix>) -> Result<Forward, ModelError> {
        let e = embed_with_positions(g, self.embeddings, seq, &self.backbone)?;
        let q = encode_sequence(g, e, &seq.valid_mask, &self.backbone)?;
        let f = match &self.alignment {
            None => q,
            Some(p) => {
                let prefs = prefs.ok_or(ModelError::MissingPreferences)?;
                if prefs.cols() != self.config.backbone.d || prefs.rows() == 0 {
                    return Err(ModelError::Config(format!("preference matrix is {}×{}, expected m×{}", prefs.rows(), prefs.cols(), self.config.backbone.d)));
                }
                let pv = g.constant(prefs.clone());
                let (_, f) = align_graph(g, q, pv, p);
                nn_finite(g, f)?;
                f
            }
        };
        Ok(Forward { q, f })
    }

    /// Masked BCE over every position: `positives[t]` and `negatives[t]` are
    /// the items scored against `F_t`; positions with `mask[t] == false`
    /// contribute nothing (their item indices may be anything in range).
    pub fn sequence_loss(
        &self,
        g: &mut Graph<'_>,
        seq: &PaddedSequence,
        positives: &[usize],
        negatives: &[usize],
        mask: &[bool],
        prefs: Option<&Matrix>,
    ) -> Result<Var, ModelError> {
        let fw = self.forward(g, seq, prefs)?;
        let pos = g.gather(self.embeddings, positives);
        let neg = g.gather(self.embeddings, negatives);
        let pos_scores = g.row_dot(fw.f, pos);
        let neg_scores = g.row_dot(fw.f, neg);
        Ok(g.masked_bce(pos_scores, neg_scores, mask))
    }

    /// Dropout-free `Q` and `F`.
    pub fn outputs(&self, seq: &PaddedSequence, prefs: Option<&Matrix>) -> Result<SequenceOutputs, ModelError> {
        let mut g = Graph::new(&self.store);
        let fw = self.forward(&mut g, seq, prefs)?;
        Ok(SequenceOutputs { q: g.value(fw.q).clone(), f: g.value(fw.f).clone() })
    }

    /// `F` row at the last position, which is always the most recent real item.
    pub fn final_features(&self, seq: &PaddedSequence, prefs: Option<&Matrix>) -> Result<Vec<f64>, ModelError> {
        let out = self.outputs(seq, prefs)?;
        Ok(out.f.row(out.f.rows() - 1).to_vec())
    }

    /// ω from the backbone feature at the last position.
    pub fn preference_weights(&self, seq: &PaddedSequence, prefs: &Matrix) -> Result<Vec<f64>, ModelError> {
        let p = self.alignment.as_ref().ok_or_else(|| ModelError::Config("preference weights need the alignment block".into()))?;
        let mut g = Graph::new(&self.store);
        let e = embed_with_positions(&mut g, self.embeddings, seq, &self.backbone)?;
        let q = encode_sequence(&mut g, e, &seq.valid_mask, &self.backbone)?;
        let last = seq.indices.len() - 1;
        let q_n = g.select_row(q, last);
        let pv = g.constant(prefs.clone());
        let w = preference_weights_graph(&mut g, q_n, pv, p);
        Ok(g.value(w).row(0).to_vec())
    }

    pub fn score(&self, features: &[f64], item: usize) -> f64 {
        score_candidate(features, self.item_embedding(item))
    }

    /// Overwrites parameters by name, e.g. from a checkpoint.
    pub fn load_params(&mut self, params: Vec<(String, Matrix)>) -> Result<(), ModelError> {
        if params.len() != self.store.len() {
            return Err(ModelError::Config(format!("checkpoint has {} parameters, model has {}", params.len(), self.store.len())));
        }
        for (name, value) in params {
            let id = self.store.id(&name).ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(ModelError::Config(format!("parameter {name} has shape {:?}, expected {:?}", value.shape(), self.store.get(id).shape())));
            }
            *self.store.get_mut(id) = value;
        }
        Ok(())
    }
}

fn nn_finite(g: &Graph<'_>, f: Var) -> Result<(), ModelError> {
    crate::nn::check_finite(g, f, || "alignment block".into())
}

/// `r = f · m_i`.
pub fn score_candidate(f: &[f64], m_i: &[f64]) -> f64 {
    assert_eq!(f.len(), m_i.len(), "feature and item widths differ");
    dot(f, m_i)
}
