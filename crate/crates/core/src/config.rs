//! Run configuration: a TOML file, dotted `key=value` overrides, and a seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alignment::AlignmentConfig;
use crate::backbone::{BackboneConfig, BackboneVariant};
use crate::evaluator::EvalSplit;
use crate::model::ModelConfig;
use crate::synthetic::SyntheticConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    File,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub path: Option<PathBuf>,
    /// `tsv` or `jsonl`.
    pub format: String,
    pub min_interactions: usize,
    /// Keep catalog items that have no surviving interactions.
    pub keep_cold_items: bool,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { source: CorpusSource::File, path: None, format: "tsv".into(), min_interactions: 5, keep_cold_items: false, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `mock` or `remote`.
    pub name: String,
    pub dim: usize,
    pub seed: u64,
    /// Defaults to `<run_dir>/cache/encoder`.
    pub cache_dir: Option<PathBuf>,
    /// Model name sent to a remote encoder.
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { name: "mock".into(), dim: 384, seed: 0, cache_dir: None, model: "all-MiniLM-L6-v2".into(), timeout_secs: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// `mock` or `http`.
    pub name: String,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Requests per second; 0 disables limiting.
    pub rate_limit: f64,
    /// Total attempts per prompt.
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub seed: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            name: "mock".into(),
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: crate::llm::LLM_API_KEY_ENV.into(),
            rate_limit: 0.0,
            max_retries: 2,
            timeout_secs: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferencesConfig {
    pub m: usize,
    /// Defaults to `<run_dir>/preferences/cache.jsonl`.
    pub cache: Option<PathBuf>,
}

impl Default for PreferencesConfig {
    fn default() -> Self {
        Self { m: 5, cache: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub n: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { n: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub variant: BackboneVariant,
    pub blocks: usize,
    pub heads: usize,
    /// Shared by the backbone and the alignment block.
    pub dropout: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { variant: BackboneVariant::SelfAttention, blocks: 2, heads: 1, dropout: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSection {
    pub enabled: bool,
    pub h: usize,
    pub d_k: usize,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self { enabled: true, h: 4, d_k: 384 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub freeze_embeddings: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self { learning_rate: 0.001, batch_size: 128, max_epochs: 200, patience: 20, freeze_embeddings: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorSection {
    pub k: Vec<usize>,
    pub split: EvalSplit,
}

impl Default for EvaluatorSection {
    fn default() -> Self {
        Self { k: vec![5, 10], split: EvalSplit::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// How many users to explain, in split order.
    pub users: usize,
    pub split: EvalSplit,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self { users: 20, split: EvalSplit::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted config key to vary.
    pub parameter: String,
    pub values: Vec<toml::Value>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { parameter: "preferences.m".into(), values: [1, 3, 5, 10, 15].into_iter().map(toml::Value::Integer).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Root of every artifact directory.
    pub run_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub llm: LlmConfig,
    pub preferences: PreferencesConfig,
    pub sequence: SequenceConfig,
    pub backbone: BackboneSection,
    pub alignment: AlignmentSection,
    pub trainer: TrainerSection,
    pub evaluator: EvaluatorSection,
    pub explain: ExplainSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            llm: LlmConfig::default(),
            preferences: PreferencesConfig::default(),
            sequence: SequenceConfig::default(),
            backbone: BackboneSection::default(),
            alignment: AlignmentSection::default(),
            trainer: TrainerSection::default(),
            evaluator: EvaluatorSection::default(),
            explain: ExplainSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside `root`, creating tables on the way.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(key.to_string()));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key}: {part} is not a table")))?;
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| ConfigError::Invalid(format!("{key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides (values are TOML
    /// literals; anything unparseable is taken as a string) and an optional
    /// seed, then validates.
    pub fn from_toml_str(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut root: toml::Value = toml::from_str::<toml::Table>(text).map(toml::Value::Table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            set_dotted(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(s) = seed {
            set_dotted(&mut root, "seed", toml::Value::Integer(s as i64))?;
        }
        let config: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, overrides, seed)
    }

    /// Returns a copy with one dotted key replaced.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self, ConfigError> {
        let mut root = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        set_dotted(&mut root, key, value)?;
        let config: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.corpus.source == CorpusSource::File && self.corpus.path.is_none() {
            return bad("corpus.path is required when corpus.source = \"file\"".into());
        }
        if self.corpus.format.parse::<crate::corpus::InputFormat>().is_err() {
            return bad(format!("corpus.format {:?} is not tsv or jsonl", self.corpus.format));
        }
        if self.corpus.min_interactions == 0 {
            return bad("corpus.min_interactions must be at least 1".into());
        }
        if !["mock", "remote"].contains(&self.encoder.name.as_str()) {
            return bad(format!("encoder.name {:?} is not mock or remote", self.encoder.name));
        }
        if !["mock", "http"].contains(&self.llm.name.as_str()) {
            return bad(format!("llm.name {:?} is not mock or http", self.llm.name));
        }
        if self.preferences.m == 0 {
            return bad("preferences.m must be positive".into());
        }
        if self.evaluator.k.is_empty() || self.evaluator.k.contains(&0) {
            return bad("evaluator.k must list positive cutoffs".into());
        }
        if !self.evaluator.k.contains(&10) {
            log::debug!("evaluator.k lacks 10; early stopping still uses NDCG@10");
        }
        self.model_config().backbone.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(a) = self.model_config().alignment {
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let d = self.encoder.dim;
        ModelConfig {
            backbone: BackboneConfig {
                variant: self.backbone.variant,
                n: self.sequence.n,
                d,
                blocks: self.backbone.blocks,
                heads: self.backbone.heads,
                dropout: self.backbone.dropout,
            },
            alignment: self.alignment.enabled.then_some(AlignmentConfig { d, h: self.alignment.h, d_k: self.alignment.d_k, dropout: self.backbone.dropout }),
            freeze_embeddings: self.trainer.freeze_embeddings,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.trainer.learning_rate,
            batch_size: self.trainer.batch_size,
            max_epochs: self.trainer.max_epochs,
            patience: self.trainer.patience,
            seed: self.seed,
        }
    }

    pub fn encoder_cache_dir(&self) -> PathBuf {
        self.encoder.cache_dir.clone().unwrap_or_else(|| self.run_dir.join("cache").join("encoder"))
    }

    pub fn preference_cache_path(&self) -> PathBuf {
        self.preferences.cache.clone().unwrap_or_else(|| self.run_dir.join("preferences").join("cache.jsonl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = "[corpus]\nsource = \"synthetic\"\n";

    #[test]
    fn shipped_example_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
        let c = RunConfig::load(&path, &[], None).unwrap();
        c.validate().unwrap();
        assert_eq!(c.corpus.source, CorpusSource::Synthetic);
        assert_eq!(c.model_config().backbone.n, 16);
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = RunConfig::from_toml_str(SYNTH, &[], None).unwrap();
        assert_eq!(c.encoder.dim, 384);
        assert_eq!((c.alignment.h, c.alignment.d_k), (4, 384));
        assert_eq!(c.preferences.m, 5);
        assert_eq!(c.trainer.learning_rate, 0.001);
        assert_eq!(c.trainer.batch_size, 128);
        assert_eq!(c.backbone.dropout, 0.5);
        assert_eq!(c.sequence.n, 50);
        assert_eq!(c.backbone.blocks, 2);
        assert_eq!(c.evaluator.k, vec![5, 10]);
        assert_eq!(c.corpus.min_interactions, 5);
    }

    #[test]
    fn overrides_and_seed_apply() {
        let c = RunConfig::from_toml_str(
            SYNTH,
            &["preferences.m=3".into(), "backbone.variant=gated_recurrent".into(), "run_dir=/tmp/x".into(), "evaluator.k=[1, 10]".into()],
            Some(7),
        )
        .unwrap();
        assert_eq!(c.preferences.m, 3);
        assert_eq!(c.backbone.variant, BackboneVariant::GatedRecurrent);
        assert_eq!(c.run_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.evaluator.k, vec![1, 10]);
        assert_eq!(c.seed, 7);
        let d = c.with_override("alignment.h", toml::Value::Integer(2)).unwrap();
        assert_eq!(d.alignment.h, 2);
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash(), c.clone().hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("", &[], None), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml_str(SYNTH, &["preferences.m=0".into()], None), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml_str(SYNTH, &["nokey".into()], None), Err(ConfigError::Override(_))));
        assert!(matches!(RunConfig::from_toml_str("[corpus]\nsorce = 1\n", &[], None), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_toml_str(SYNTH, &["trainer.patience=0".into()], None).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::from_toml_str(SYNTH, &["sweep.values=[\"a\", \"b\"]".into()], None).unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml(), &[], None).unwrap(), c);
    }
}
