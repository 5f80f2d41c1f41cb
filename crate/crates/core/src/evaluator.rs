//! 101-candidate ranking protocol with HR@k and NDCG@k.
//!
//! Each evaluated user's held-out item is ranked against 100 negatives drawn
//! uniformly without replacement from items the user never interacted with.
//! The rank is `1 + #{candidates scoring strictly higher}`, so ties go in the
//! target's favour.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_fixed_sequence, SplitDataset, UserSplit};
use crate::model::LaneModel;
use crate::nn::ModelError;
use crate::Matrix;

pub const NEGATIVES_PER_USER: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("user {user_id}: only {eligible} items are eligible as negatives, need {needed}")]
    Protocol { user_id: String, eligible: usize, needed: usize },
    #[error("user {user_id}: {source}")]
    Model { user_id: String, source: ModelError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valid" | "validation" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected valid or test)")),
        }
    }
}

impl EvalSplit {
    /// `(model input, held-out target)` for a user, if the user has one.
    pub fn input_and_target(self, user: &UserSplit) -> Option<(Vec<usize>, usize)> {
        match self {
            Self::Valid => user.valid.map(|v| (user.train.clone(), v)),
            Self::Test => {
                let (v, t) = (user.valid?, user.test?);
                let mut input = user.train.clone();
                input.push(v);
                Some((input, t))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCandidates {
    pub target: usize,
    pub negatives: Vec<usize>,
}

impl EvalCandidates {
    /// Target first, then the negatives.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.target).chain(self.negatives.iter().copied())
    }
}

/// Generator for one user's candidates, fixed by `(seed, split, user)`.
pub fn eval_rng(seed: u64, split: EvalSplit, user_id: &str) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(b"eval")
        .chain_update(seed.to_le_bytes())
        .chain_update(split.to_string().as_bytes())
        .chain_update(user_id.as_bytes())
        .finalize();
    ChaCha8Rng::from_seed(digest.into())
}

/// Samples [`NEGATIVES_PER_USER`] distinct negatives from `1..=item_count`
/// minus `owned` and the target.
pub fn build_eval_candidates<R: Rng + ?Sized>(
    user_id: &str,
    target: usize,
    owned: &HashSet<usize>,
    item_count: usize,
    rng: &mut R,
) -> Result<EvalCandidates, EvalError> {
    let eligible: Vec<usize> = (1..=item_count).filter(|i| *i != target && !owned.contains(i)).collect();
    if eligible.len() < NEGATIVES_PER_USER {
        return Err(EvalError::Protocol { user_id: user_id.to_string(), eligible: eligible.len(), needed: NEGATIVES_PER_USER });
    }
    let negatives = sample(rng, eligible.len(), NEGATIVES_PER_USER).into_iter().map(|k| eligible[k]).collect();
    Ok(EvalCandidates { target, negatives })
}

/// `1 + #{items scoring strictly above the target}`; `None` if the target
/// has no score.
pub fn rank_of_target(scores: &[(usize, f64)], target: usize) -> Option<usize> {
    let t = scores.iter().find(|(i, _)| *i == target)?.1;
    Some(1 + scores.iter().filter(|(i, s)| *i != target && *s > t).count())
}

pub fn ndcg_term(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub user_count: usize,
    /// True when no user was ranked; the metric fields are then 0.
    pub undefined: bool,
}

pub fn compute_metrics(ranks: &[usize], k: usize) -> MetricsReport {
    assert!(ranks.iter().all(|&r| r >= 1), "ranks are 1-based");
    if ranks.is_empty() {
        return MetricsReport { k, hr_at_k: 0.0, ndcg_at_k: 0.0, user_count: 0, undefined: true };
    }
    let n = ranks.len() as f64;
    let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
    let ndcg: f64 = ranks.iter().map(|&r| ndcg_term(r, k)).sum();
    MetricsReport { k, hr_at_k: hits / n, ndcg_at_k: ndcg / n, user_count: ranks.len(), undefined: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user_id: String,
    pub target: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: EvalSplit,
    pub seed: u64,
    pub metrics: Vec<MetricsReport>,
    /// Users skipped because no preference embeddings were available.
    pub skipped_users: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_user: Option<Vec<UserRank>>,
}

impl EvaluationReport {
    pub fn at(&self, k: usize) -> Option<&MetricsReport> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn per_user_csv(&self) -> String {
        let mut s = String::from("user_id,target,rank\n");
        for r in self.per_user.iter().flatten() {
            s.push_str(&format!("{},{},{}\n", csv_field(&r.user_id), r.target, r.rank));
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Ranks every user that has a target for `split`. Users without preference
/// embeddings are skipped (and counted) when the model uses alignment.
pub fn evaluate_model(
    model: &LaneModel,
    data: &SplitDataset,
    prefs: &HashMap<String, Matrix>,
    split: EvalSplit,
    ks: &[usize],
    seed: u64,
) -> Result<EvaluationReport, EvalError> {
    let n = model.config().backbone.n;
    let item_count = model.item_count();
    let results: Vec<Option<UserRank>> = data
        .users
        .par_iter()
        .filter_map(|u| split.input_and_target(u).map(|it| (u, it)))
        .map(|(u, (input, target))| {
            let p = prefs.get(&u.user_id);
            if model.uses_alignment() && p.is_none() {
                return Ok(None);
            }
            let owned: HashSet<usize> = u.all_items().into_iter().collect();
            let mut rng = eval_rng(seed, split, &u.user_id);
            let cands = build_eval_candidates(&u.user_id, target, &owned, item_count, &mut rng)?;
            let seq = build_fixed_sequence(&input, n);
            let f = model.final_features(&seq, p).map_err(|source| EvalError::Model { user_id: u.user_id.clone(), source })?;
            let scores: Vec<(usize, f64)> = cands.all().map(|i| (i, model.score(&f, i))).collect();
            let rank = rank_of_target(&scores, target).expect("target is a candidate");
            Ok(Some(UserRank { user_id: u.user_id.clone(), target, rank }))
        })
        .collect::<Result<_, EvalError>>()?;
    let skipped_users = results.iter().filter(|r| r.is_none()).count();
    let per_user: Vec<UserRank> = results.into_iter().flatten().collect();
    if skipped_users > 0 {
        log::warn!("{skipped_users} users skipped: no preference embeddings");
    }
    let ranks: Vec<usize> = per_user.iter().map(|r| r.rank).collect();
    Ok(EvaluationReport { split, seed, metrics: ks.iter().map(|&k| compute_metrics(&ranks, k)).collect(), skipped_users, per_user: Some(per_user) })
}
