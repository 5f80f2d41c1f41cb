//! Pipeline commands and their artifact directories.
//!
//! Every command reads the directories of the commands before it and writes
//! one directory under `run_dir`:
//!
//! | command         | writes                                                   |
//! |-----------------|----------------------------------------------------------|
//! | `prepare`       | `prepare/{interactions,catalog,split}.jsonl`             |
//! | `extract-prefs` | `preferences/{preferences,dropped_users}.jsonl`          |
//! | `train`         | `train/{checkpoint.bin,checkpoint.json,train_log.jsonl}` |
//! | `evaluate`      | `evaluate/{metrics.json,per_user.csv}`                   |
//! | `explain`       | `explain/explanations.jsonl`                             |
//! | `sweep`         | `sweep/<key>=<value>/…`, `sweep/metrics.{csv,json}`, SVG |
//!
//! Each directory also gets a `manifest.json` holding the command, the config
//! hash, the code version and the seed.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, CheckpointManifest, FORMAT_VERSION};
use crate::config::{CorpusSource, RunConfig};
use crate::corpus::{self, kcore_filter, leave_one_out_split, load_interactions, InteractionLog, ItemCatalog, SplitDataset};
use crate::evaluator::{evaluate_model, EvaluationReport, MetricsReport};
use crate::explainer::{generate_explanation, ExplanationEntry, ExplanationSubject, ExplanationWriter};
use crate::llm::{HttpLlm, LlmClientHandle, LlmError, MockLlm};
use crate::model::LaneModel;
use crate::plot::{line_chart, Series};
use crate::preference::{extract_all, DroppedUser, PreferenceCache, PreferenceSet};
use crate::synthetic;
use crate::text_encoder::{encode_texts, encode_titles, EncoderHandle, MockEncoder, RemoteEncoder, TextEncoder};
use crate::trainer::{train_model, TrainError};
use crate::Matrix;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    Prepare,
    ExtractPrefs,
    Train,
    Evaluate,
    Explain,
    Sweep,
}

impl Command {
    pub const ALL: [Command; 6] = [Self::Prepare, Self::ExtractPrefs, Self::Train, Self::Evaluate, Self::Explain, Self::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prepare => "prepare",
            Self::ExtractPrefs => "extract-prefs",
            Self::Train => "train",
            Self::Evaluate => "evaluate",
            Self::Explain => "explain",
            Self::Sweep => "sweep",
        }
    }

    /// Artifact directory name under `run_dir`.
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::ExtractPrefs => "preferences",
            other => other.name(),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown command {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad input or missing prerequisites; exit code 1.
    #[error("{0}")]
    User(String),
    /// Anything else; exit code 2.
    #[error("internal error: {0}")]
    Internal(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Internal(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

fn internal(e: impl fmt::Display) -> HarnessError {
    HarnessError::Internal(e.to_string())
}

fn user(e: impl fmt::Display) -> HarnessError {
    HarnessError::User(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    /// Command-specific counts.
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn command_dir(config: &RunConfig, command: Command) -> PathBuf {
    config.run_dir.join(command.dir_name())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| internal(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| internal(format!("{}: {e}", path.display())))
}

fn write_manifest(config: &RunConfig, command: Command, summary: serde_json::Value) -> Result<()> {
    let m = Manifest { command: command.name().into(), config_hash: config.hash(), code_version: CODE_VERSION.into(), seed: config.seed, summary };
    write_file(&command_dir(config, command).join("manifest.json"), serde_json::to_string_pretty(&m).expect("serializable manifest") + "\n")
}

/// Fails with a pointer to `prereq` when its directory has no manifest.
fn require(config: &RunConfig, prereq: Command) -> Result<PathBuf> {
    let dir = command_dir(config, prereq);
    if dir.join("manifest.json").is_file() {
        Ok(dir)
    } else {
        Err(HarnessError::User(format!("{} not found; run `lane {prereq} --config <path>` first", dir.display())))
    }
}

pub fn run_command(command: Command, config: &RunConfig) -> Result<()> {
    config.validate().map_err(user)?;
    log::info!("{command}: run_dir {}", config.run_dir.display());
    match command {
        Command::Prepare => prepare(config),
        Command::ExtractPrefs => extract_prefs(config),
        Command::Train => train(config),
        Command::Evaluate => evaluate(config).map(|_| ()),
        Command::Explain => explain(config),
        Command::Sweep => sweep(config),
    }
}

/// Loads the config file, applies overrides and runs `command`.
pub fn run_from_path(command: Command, config_path: &Path, overrides: &[String], seed: Option<u64>) -> Result<()> {
    let config = RunConfig::load(config_path, overrides, seed).map_err(user)?;
    run_command(command, &config)
}

fn corpus_err(e: corpus::CorpusError) -> HarnessError {
    match e {
        corpus::CorpusError::Io { .. } => internal(e),
        other => user(other),
    }
}

fn prepare(config: &RunConfig) -> Result<()> {
    let c = &config.corpus;
    let (log, catalog) = match c.source {
        CorpusSource::File => {
            let path = c.path.as_ref().expect("validated");
            if !path.is_file() {
                return Err(HarnessError::User(format!("corpus file {} does not exist", path.display())));
            }
            load_interactions(path, c.format.parse().expect("validated")).map_err(corpus_err)?
        }
        CorpusSource::Synthetic => synthetic::generate(&c.synthetic),
    };
    let raw_events = log.len();
    let filtered = kcore_filter(&log, c.min_interactions);
    if filtered.is_empty() {
        return Err(HarnessError::User(format!("no interactions survive {}-core filtering", c.min_interactions)));
    }
    let catalog = if c.keep_cold_items { catalog } else { catalog.restrict_to(&filtered) };
    let split = leave_one_out_split(&filtered, &catalog);
    let dir = command_dir(config, Command::Prepare);
    filtered.write_jsonl(&dir.join("interactions.jsonl")).map_err(corpus_err)?;
    catalog.write_jsonl(&dir.join("catalog.jsonl")).map_err(corpus_err)?;
    split.write_jsonl(&dir.join("split.jsonl")).map_err(corpus_err)?;
    let summary = serde_json::json!({
        "raw_interactions": raw_events,
        "interactions": filtered.len(),
        "users": split.users.len(),
        "items": catalog.len(),
        "eval_users": split.users.iter().filter(|u| u.has_eval()).count(),
    });
    log::info!("prepare: {summary}");
    write_manifest(config, Command::Prepare, summary)
}

struct Prepared {
    catalog: ItemCatalog,
    split: SplitDataset,
}

fn load_prepared(config: &RunConfig) -> Result<Prepared> {
    let dir = require(config, Command::Prepare)?;
    let catalog = ItemCatalog::read_jsonl(&dir.join("catalog.jsonl")).map_err(corpus_err)?;
    let split = SplitDataset::read_jsonl(&dir.join("split.jsonl")).map_err(corpus_err)?;
    Ok(Prepared { catalog, split })
}

/// Reads back the filtered interaction log written by `prepare`.
pub fn load_prepared_log(config: &RunConfig) -> Result<InteractionLog> {
    let dir = require(config, Command::Prepare)?;
    Ok(InteractionLog { events: corpus::read_jsonl(&dir.join("interactions.jsonl")).map_err(corpus_err)? })
}

pub fn llm_client(config: &RunConfig) -> Result<LlmClientHandle> {
    let l = &config.llm;
    let timeout = Duration::from_secs(l.timeout_secs);
    let client: Arc<dyn crate::llm::LlmClient> = match l.name.as_str() {
        "mock" => Arc::new(MockLlm::new(l.seed)),
        _ => Arc::new(HttpLlm::from_env(l.endpoint.clone(), l.model.clone(), &l.api_key_env, timeout).map_err(|e| match e {
            LlmError::Credentials(_) => user(e),
            other => internal(other),
        })?),
    };
    Ok(LlmClientHandle::new(client, l.max_retries, timeout).with_rate_limit(l.rate_limit))
}

pub fn encoder(config: &RunConfig) -> Result<EncoderHandle> {
    let e = &config.encoder;
    let inner: Arc<dyn TextEncoder> = match e.name.as_str() {
        "mock" => return Ok(EncoderHandle::new(Arc::new(MockEncoder::new(e.dim, e.seed)))),
        _ => Arc::new(RemoteEncoder::from_env(e.model.clone(), e.dim, Duration::from_secs(e.timeout_secs)).map_err(user)?),
    };
    EncoderHandle::with_cache_dir(inner, &config.encoder_cache_dir()).map_err(internal)
}

fn extract_prefs(config: &RunConfig) -> Result<()> {
    let p = load_prepared(config)?;
    let client = llm_client(config)?;
    let cache = PreferenceCache::open(&config.preference_cache_path()).map_err(internal)?;
    // Preferences are drawn from the training part of each history so that
    // neither held-out item leaks into them.
    let users: Vec<(String, Vec<String>)> = p
        .split
        .users
        .iter()
        .filter(|u| !u.train.is_empty())
        .map(|u| (u.user_id.clone(), u.train.iter().map(|&i| p.catalog.title(i).expect("split items are cataloged").to_string()).collect()))
        .collect();
    let report = extract_all(&users, &client, config.preferences.m, Some(&cache)).map_err(|e| match e {
        crate::preference::PreferenceError::Client { .. } => user(e),
        other => internal(other),
    })?;
    let dir = command_dir(config, Command::ExtractPrefs);
    corpus::write_jsonl(&dir.join("preferences.jsonl"), &report.sets).map_err(corpus_err)?;
    corpus::write_jsonl(&dir.join("dropped_users.jsonl"), &report.dropped).map_err(corpus_err)?;
    if !report.dropped.is_empty() {
        log::warn!("{} users dropped: preferences could not be extracted", report.dropped.len());
    }
    let summary = serde_json::json!({
        "m": config.preferences.m,
        "client": client.name(),
        "users": report.sets.len(),
        "dropped": report.dropped.len(),
    });
    write_manifest(config, Command::ExtractPrefs, summary)
}

/// Preference sets and the users that were dropped during extraction.
pub struct PreferenceArtifacts {
    pub sets: Vec<PreferenceSet>,
    pub dropped: HashSet<String>,
}

pub fn load_preferences(config: &RunConfig) -> Result<PreferenceArtifacts> {
    let dir = require(config, Command::ExtractPrefs)?;
    let sets: Vec<PreferenceSet> = corpus::read_jsonl(&dir.join("preferences.jsonl")).map_err(corpus_err)?;
    let dropped: Vec<DroppedUser> = corpus::read_jsonl(&dir.join("dropped_users.jsonl")).map_err(corpus_err)?;
    if let Some(s) = sets.iter().find(|s| s.preferences.len() != config.preferences.m) {
        return Err(HarnessError::User(format!(
            "user {} has {} preferences but preferences.m = {}; rerun `lane extract-prefs`",
            s.user_id,
            s.preferences.len(),
            config.preferences.m
        )));
    }
    Ok(PreferenceArtifacts { sets, dropped: dropped.into_iter().map(|d| d.user_id).collect() })
}

/// user_id → `m × d` preference embeddings.
pub fn embed_preferences(sets: &[PreferenceSet], encoder: &EncoderHandle) -> Result<HashMap<String, Matrix>> {
    sets.iter().map(|s| Ok((s.user_id.clone(), encode_texts(&s.preferences, encoder).map_err(internal)?))).collect()
}

/// Split, preference embeddings and the preference sets a model consumes.
struct ModelInputs {
    prepared: Prepared,
    data: SplitDataset,
    prefs: HashMap<String, Matrix>,
    sets: Vec<PreferenceSet>,
}

fn model_inputs(config: &RunConfig, encoder: &EncoderHandle) -> Result<ModelInputs> {
    let prepared = load_prepared(config)?;
    if !config.alignment.enabled {
        return Ok(ModelInputs { data: prepared.split.clone(), prepared, prefs: HashMap::new(), sets: Vec::new() });
    }
    let artifacts = load_preferences(config)?;
    let data = prepared.split.without_users(&artifacts.dropped);
    let prefs = embed_preferences(&artifacts.sets, encoder)?;
    Ok(ModelInputs { prepared, data, prefs, sets: artifacts.sets })
}

fn train(config: &RunConfig) -> Result<()> {
    let enc = encoder(config)?;
    let inputs = model_inputs(config, &enc)?;
    let embeddings = encode_titles(&inputs.prepared.catalog, &enc).map_err(internal)?;
    let model = LaneModel::new(config.model_config(), &embeddings, config.seed).map_err(user)?;
    let dir = command_dir(config, Command::Train);
    let mut log_lines = String::new();
    let outcome = train_model(model, &inputs.data, &inputs.prefs, &config.train_config(), |e| {
        log_lines.push_str(&serde_json::to_string(e).expect("serializable log"));
        log_lines.push('\n');
    })
    .map_err(|e| match e {
        TrainError::Config(_) | TrainError::Divergence { .. } | TrainError::NoData | TrainError::Eval(_) => user(e),
        other => internal(other),
    })?;
    write_file(&dir.join("train_log.jsonl"), log_lines)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        code_version: CODE_VERSION.into(),
        model: outcome.model.config().clone(),
        train: config.train_config(),
        adam: outcome.adam,
        item_count: outcome.model.item_count(),
        best_epoch: outcome.best_epoch,
        best_valid_ndcg10: outcome.best_valid_ndcg10,
        history: outcome.history.clone(),
        config: serde_json::to_value(config).expect("serializable config"),
    };
    checkpoint::save(&dir, &outcome.model, &manifest).map_err(internal)?;
    let summary = serde_json::json!({
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_valid_ndcg10": outcome.best_valid_ndcg10,
        "train_users": inputs.data.users.len(),
    });
    write_manifest(config, Command::Train, summary)
}

fn load_checkpoint(config: &RunConfig) -> Result<(LaneModel, CheckpointManifest)> {
    let dir = require(config, Command::Train)?;
    let (model, manifest) = checkpoint::load(&dir).map_err(|e| match e {
        CheckpointError::Format { .. } => user(e),
        other => internal(other),
    })?;
    if manifest.model != config.model_config() {
        return Err(HarnessError::User(format!("checkpoint in {} was trained with a different model configuration; rerun `lane train`", dir.display())));
    }
    Ok((model, manifest))
}

/// The serialized form of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub split: String,
    pub seed: u64,
    pub users: usize,
    pub skipped_users: usize,
    pub metrics: Vec<MetricsReport>,
}

fn evaluate(config: &RunConfig) -> Result<EvaluationReport> {
    let (model, _) = load_checkpoint(config)?;
    let enc = encoder(config)?;
    let inputs = model_inputs(config, &enc)?;
    let report = evaluate_model(&model, &inputs.data, &inputs.prefs, config.evaluator.split, &config.evaluator.k, config.seed).map_err(user)?;
    let dir = command_dir(config, Command::Evaluate);
    let file = MetricsFile {
        split: report.split.to_string(),
        seed: report.seed,
        users: report.per_user.as_ref().map_or(0, Vec::len),
        skipped_users: report.skipped_users,
        metrics: report.metrics.clone(),
    };
    write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(&file).expect("serializable metrics") + "\n")?;
    write_file(&dir.join("per_user.csv"), report.per_user_csv())?;
    for m in &report.metrics {
        log::info!("{} HR@{k} {:.4} NDCG@{k} {:.4}", report.split, m.hr_at_k, m.ndcg_at_k, k = m.k);
    }
    write_manifest(config, Command::Evaluate, serde_json::to_value(&file).expect("serializable metrics"))?;
    Ok(report)
}

fn explain(config: &RunConfig) -> Result<()> {
    if !config.alignment.enabled {
        return Err(HarnessError::User("explanations need alignment.enabled = true".into()));
    }
    let (model, _) = load_checkpoint(config)?;
    let enc = encoder(config)?;
    let inputs = model_inputs(config, &enc)?;
    let client = llm_client(config)?;
    let sets: HashMap<&str, &PreferenceSet> = inputs.sets.iter().map(|s| (s.user_id.as_str(), s)).collect();
    let split = config.explain.split;
    let chosen: Vec<(&PreferenceSet, &Matrix, Vec<usize>, usize)> = inputs
        .data
        .users
        .iter()
        .filter_map(|u| {
            let (input, target) = split.input_and_target(u)?;
            let set = sets.get(u.user_id.as_str())?;
            Some((*set, inputs.prefs.get(&u.user_id)?, input, target))
        })
        .take(config.explain.users)
        .collect();
    let entries: Vec<ExplanationEntry> = chosen
        .par_iter()
        .map(|(set, emb, history, target)| {
            let subject = ExplanationSubject { user_id: &set.user_id, history, preferences: &set.preferences, preference_embeddings: emb };
            generate_explanation(&subject, &model, &inputs.prepared.catalog, *target, &client)
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(internal)?;
    let dir = command_dir(config, Command::Explain);
    let writer = ExplanationWriter::create(&dir.join("explanations.jsonl")).map_err(internal)?;
    for e in &entries {
        writer.append(e).map_err(internal)?;
    }
    let unavailable = entries.iter().filter(|e| !e.is_available()).count();
    if unavailable > 0 {
        log::warn!("{unavailable} explanations unavailable after retries");
    }
    write_manifest(config, Command::Explain, serde_json::json!({ "explanations": entries.len(), "unavailable": unavailable, "split": split.to_string() }))
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: Vec<MetricsReport>,
}

/// Runs prepare → extract-prefs → train → evaluate once per sweep value,
/// each in `sweep/<key>=<value>/` and sharing the parent's caches.
fn sweep(config: &RunConfig) -> Result<()> {
    let s = &config.sweep;
    if s.values.is_empty() {
        return Err(HarnessError::User("sweep.values is empty".into()));
    }
    let dir = command_dir(config, Command::Sweep);
    let mut rows = Vec::new();
    for v in &s.values {
        let label = value_label(v);
        let mut sub = config.with_override(&s.parameter, v.clone()).map_err(user)?;
        sub.run_dir = dir.join(format!("{}={}", s.parameter, label));
        sub.encoder.cache_dir = Some(config.encoder_cache_dir());
        sub.preferences.cache = Some(config.preference_cache_path());
        log::info!("sweep: {} = {label}", s.parameter);
        prepare(&sub)?;
        if sub.alignment.enabled {
            extract_prefs(&sub)?;
        }
        train(&sub)?;
        let report = evaluate(&sub)?;
        rows.push(SweepRow { value: label, metrics: report.metrics });
    }
    let ks = &config.evaluator.k;
    let mut csv = s.parameter.clone();
    for k in ks {
        csv.push_str(&format!(",hr@{k},ndcg@{k}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.value);
        for m in &r.metrics {
            csv.push_str(&format!(",{:.6},{:.6}", m.hr_at_k, m.ndcg_at_k));
        }
        csv.push('\n');
    }
    write_file(&dir.join("metrics.csv"), csv)?;
    write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(&rows).expect("serializable rows") + "\n")?;
    let labels: Vec<String> = rows.iter().map(|r| r.value.clone()).collect();
    let mut series = Vec::new();
    for (j, k) in ks.iter().enumerate() {
        series.push(Series { name: format!("HR@{k}"), points: rows.iter().map(|r| r.metrics[j].hr_at_k).collect() });
        series.push(Series { name: format!("NDCG@{k}"), points: rows.iter().map(|r| r.metrics[j].ndcg_at_k).collect() });
    }
    let plot = dir.join(format!("{}.svg", s.parameter));
    line_chart(&plot, &format!("Sensitivity to {}", s.parameter), &s.parameter, &labels, &series).map_err(internal)?;
    write_manifest(config, Command::Sweep, serde_json::json!({ "parameter": s.parameter, "values": labels }))
}
