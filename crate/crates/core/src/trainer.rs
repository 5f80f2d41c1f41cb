//! Training loop: one sampled negative per position, masked BCE, Adam, and
//! early stopping on validation NDCG@10.
//!
//! For a user with training prefix `s_1..s_L` the model reads `s_1..s_{L-1}`
//! and position `t` is trained to score `s_{t+1}` above a negative drawn from
//! items outside the prefix. Negatives are redrawn every epoch. Gradients of
//! a batch are computed in parallel over fixed-size chunks and summed in a
//! fixed order, so results do not depend on the thread count.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{log_sigmoid, Graph, Grads};
use crate::corpus::{build_fixed_sequence, PaddedSequence, SplitDataset};
use crate::evaluator::{evaluate_model, EvalError, EvalSplit};
use crate::model::LaneModel;
use crate::nn::ModelError;
use crate::optim::{Adam, AdamConfig};
use crate::Matrix;

/// Examples per gradient work unit.
const CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("negative sampling failed: {0}")]
    Sampling(String),
    #[error("user {user_id}: {source}")]
    Model { user_id: String, source: ModelError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("no user has a training sequence of two or more items")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform over `1..=item_count` minus `owned`.
pub fn sample_negative<R: Rng + ?Sized>(item_count: usize, owned: &HashSet<usize>, rng: &mut R) -> Result<usize, TrainError> {
    let owned_in_range = owned.iter().filter(|&&i| (1..=item_count).contains(&i)).count();
    if owned_in_range >= item_count {
        return Err(TrainError::Sampling(format!("all {item_count} items belong to the user")));
    }
    loop {
        let i = rng.gen_range(1..=item_count);
        if !owned.contains(&i) {
            return Ok(i);
        }
    }
}

/// `-Σ_valid [log σ(pos_t) + log(1 - σ(neg_t))]`.
pub fn sequence_bce_loss(pos: &[f64], neg: &[f64], mask: &[bool]) -> f64 {
    assert!(pos.len() == neg.len() && neg.len() == mask.len(), "length mismatch");
    pos.iter().zip(neg).zip(mask).filter(|(_, &m)| m).map(|((&p, &n), _)| -(log_sigmoid(p) + log_sigmoid(-n))).sum()
}

/// One user's fixed training input.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub user_id: String,
    pub seq: PaddedSequence,
    /// Next item per position, 0 at pads.
    pub positives: Vec<usize>,
    pub owned: HashSet<usize>,
}

impl TrainingExample {
    pub fn mask(&self) -> &[bool] {
        &self.seq.valid_mask
    }
}

/// Input `train[..L-1]`, targets `train[1..]`, both cut to the last `n`.
pub fn build_examples(data: &SplitDataset, n: usize) -> Vec<TrainingExample> {
    data.users
        .iter()
        .filter(|u| u.train.len() >= 2)
        .map(|u| {
            let input = &u.train[..u.train.len() - 1];
            let seq = build_fixed_sequence(input, n);
            let targets = &u.train[1..];
            let take = targets.len().min(n);
            let mut positives = vec![0; n - take];
            positives.extend_from_slice(&targets[targets.len() - take..]);
            TrainingExample { user_id: u.user_id.clone(), seq, positives, owned: u.train.iter().copied().collect() }
        })
        .collect()
}

fn derived_rng(seed: u64, tag: &str, epoch: usize, user: &str) -> ChaCha8Rng {
    let d = Sha256::new()
        .chain_update(tag.as_bytes())
        .chain_update(seed.to_le_bytes())
        .chain_update((epoch as u64).to_le_bytes())
        .chain_update(user.as_bytes())
        .finalize();
    ChaCha8Rng::from_seed(d.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per trained position.
    pub train_loss: f64,
    pub valid_ndcg10: f64,
    pub valid_hr10: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: LaneModel,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub history: Vec<EpochLog>,
    pub adam: AdamConfig,
}

/// Loss and gradients of one example.
fn example_grads(model: &LaneModel, ex: &TrainingExample, prefs: Option<&Matrix>, seed: u64, epoch: usize) -> Result<(f64, Grads), TrainError> {
    let item_count = model.item_count();
    let mut rng = derived_rng(seed, "negatives", epoch, &ex.user_id);
    let mut negatives = vec![0; ex.positives.len()];
    for (t, neg) in negatives.iter_mut().enumerate() {
        if ex.seq.valid_mask[t] {
            *neg = sample_negative(item_count, &ex.owned, &mut rng)?;
        }
    }
    let dropout_rng = derived_rng(seed, "dropout", epoch, &ex.user_id);
    let mut g = Graph::with_dropout(model.store(), dropout_rng);
    let loss = model
        .sequence_loss(&mut g, &ex.seq, &ex.positives, &negatives, ex.mask(), prefs)
        .map_err(|source| TrainError::Model { user_id: ex.user_id.clone(), source })?;
    let value = g.value(loss)[(0, 0)];
    Ok((value, g.backward(loss)))
}

/// Trains `model` on every user with a preference matrix (or every user when
/// the alignment block is off). `on_epoch` sees each epoch's log line.
pub fn train_model(
    mut model: LaneModel,
    data: &SplitDataset,
    prefs: &HashMap<String, Matrix>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n = model.config().backbone.n;
    let examples: Vec<TrainingExample> =
        build_examples(data, n).into_iter().filter(|e| !model.uses_alignment() || prefs.contains_key(&e.user_id)).collect();
    if examples.is_empty() {
        return Err(TrainError::NoData);
    }
    let positions: usize = examples.iter().map(|e| e.seq.valid_count()).sum();
    let adam_config = AdamConfig::with_learning_rate(config.learning_rate);
    let mut adam = Adam::new(adam_config, model.store());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, crate::autograd::ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut derived_rng(config.seed, "shuffle", epoch, ""));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let frozen = &model;
            let parts: Vec<(f64, Grads)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut total = Grads::zeros_like(frozen.store());
                    let mut loss = 0.0;
                    for &i in chunk {
                        let ex = &examples[i];
                        let (l, g) = example_grads(frozen, ex, prefs.get(&ex.user_id), config.seed, epoch)?;
                        loss += l;
                        total.merge(&g);
                    }
                    Ok((loss, total))
                })
                .collect::<Result<_, TrainError>>()?;
            let mut grads = Grads::zeros_like(model.store());
            let mut batch_loss = 0.0;
            for (l, g) in &parts {
                batch_loss += l;
                grads.merge(g);
            }
            if !batch_loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::Divergence { epoch, batch: b });
            }
            epoch_loss += batch_loss;
            adam.step(model.store_mut(), &grads);
            model.clear_pad_row();
        }
        let report = evaluate_model(&model, data, prefs, EvalSplit::Valid, &[10], config.seed)?;
        let m = report.at(10).expect("k = 10 requested");
        let log = EpochLog { epoch, train_loss: epoch_loss / positions.max(1) as f64, valid_ndcg10: m.ndcg_at_k, valid_hr10: m.hr_at_k };
        log::info!("epoch {epoch}: loss {:.6}, valid NDCG@10 {:.4}, HR@10 {:.4}", log.train_loss, log.valid_ndcg10, log.valid_hr10);
        on_epoch(&log);
        history.push(log.clone());
        if best.as_ref().is_none_or(|(_, score, _)| log.valid_ndcg10 > *score) {
            best = Some((epoch, log.valid_ndcg10, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_epoch, best_valid_ndcg10, params) = best.expect("at least one epoch ran");
    *model.store_mut() = params;
    Ok(TrainOutcome { model, best_epoch, best_valid_ndcg10, history, adam: adam_config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::UserSplit;

    #[test]
    fn negative_sampling_contract() {
        let owned: HashSet<usize> = [1].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_negative(2, &owned, &mut rng).unwrap(), 2);
        }
        let all: HashSet<usize> = [1, 2].into_iter().collect();
        assert!(matches!(sample_negative(2, &all, &mut rng), Err(TrainError::Sampling(_))));
    }

    #[test]
    fn negative_sampling_is_uniform() {
        let owned: HashSet<usize> = [3].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            let i = sample_negative(5, &owned, &mut rng).unwrap();
            assert!(i != 0 && i != 3);
            counts[i] += 1;
        }
        let p = 0.25;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for i in [1, 2, 4, 5] {
            assert!((counts[i] as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn bce_values() {
        assert!((sequence_bce_loss(&[0.0], &[0.0], &[true]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((sequence_bce_loss(&[0.0], &[0.0], &[true]) - 1.386294).abs() < 1e-6);
        assert_eq!(sequence_bce_loss(&[3.0, -1.0], &[0.5, 2.0], &[false, false]), 0.0);
        let (p, n): ([f64; 4], [f64; 4]) = ([0.3, -1.2, 2.5, 0.0], [-0.7, 0.4, 1.9, -3.0]);
        let mask = [true, false, true, true];
        let oracle: f64 = (0..4)
            .filter(|&t| mask[t])
            .map(|t| -((1.0 / (1.0 + (-p[t]).exp())).ln() + (1.0 - 1.0 / (1.0 + (-n[t]).exp())).ln()))
            .sum();
        assert!((sequence_bce_loss(&p, &n, &mask) - oracle).abs() < 1e-9);
        assert!(sequence_bce_loss(&[-800.0], &[800.0], &[true]).is_finite());
    }

    #[test]
    fn examples_shift_targets_by_one() {
        let data = SplitDataset {
            users: vec![
                UserSplit { user_id: "a".into(), train: vec![4, 5, 6, 7], valid: Some(8), test: Some(9) },
                UserSplit { user_id: "b".into(), train: vec![1], valid: None, test: None },
            ],
        };
        let ex = build_examples(&data, 5);
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].seq.indices, vec![0, 0, 4, 5, 6]);
        assert_eq!(ex[0].positives, vec![0, 0, 5, 6, 7]);
        let cut = build_examples(&data, 2);
        assert_eq!(cut[0].seq.indices, vec![5, 6]);
        assert_eq!(cut[0].positives, vec![6, 7]);
        // valid/test items never appear as inputs or positives
        assert!(!ex[0].positives.contains(&8) && !ex[0].seq.indices.contains(&9));
    }
}
