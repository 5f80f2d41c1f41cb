//! Four-step chain-of-thought explanations.
//!
//! The prompt hands the LLM the interaction sequence, the user's preferences
//! with their attention weights, and the target item. The answer is expected
//! under the literal headers `Step 1:` … `Step 4:` with the field labels
//! `Preference i:`, `Analysis:`, `Target item introduction:`,
//! `Preference Fitness:`, `Reason:`, `Interaction probability:` and
//! `Recommendation:`. Markdown bold is ignored while parsing.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_fixed_sequence, ItemCatalog};
use crate::llm::{LlmClientHandle, LlmError};
use crate::model::LaneModel;
use crate::nn::ModelError;
use crate::preference::prompt_hash;
use crate::Matrix;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("{0}")]
    Validation(String),
    #[error("llm call for user {user_id} failed: {source}")]
    Client { user_id: String, source: LlmError },
    #[error("writing explanations: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionProbability {
    Low,
    Medium,
    High,
}

impl InteractionProbability {
    /// Thresholds used by the mock client on Σ ω_i · fitness_i.
    pub fn from_expected_fitness(x: f64) -> Self {
        if x >= 0.6 {
            Self::High
        } else if x >= 0.3 {
            Self::Medium
        } else {
            Self::Low
        }
    }
}

impl fmt::Display for InteractionProbability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Low => "Low",
            Self::Medium => "Medium",
            Self::High => "High",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceAnalysis {
    pub preference: String,
    pub analysis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessEntry {
    pub preference: String,
    pub fitness: f64,
    /// Set when the model answered outside [0, 1] and the value was clamped.
    pub clamped: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub step1: Vec<PreferenceAnalysis>,
    pub item_introduction: String,
    pub fitness: Vec<FitnessEntry>,
    pub probability: InteractionProbability,
    pub probability_reason: String,
    pub recommendation: String,
    pub echoed_weights: Vec<f64>,
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

impl ExplanationRecord {
    /// Renders the record in the exact layout [`parse_explanation`] reads.
    pub fn to_response_text(&self) -> String {
        let mut s = String::from("Step 1:\n");
        for (i, a) in self.step1.iter().enumerate() {
            match self.echoed_weights.get(i) {
                Some(w) => s.push_str(&format!("Preference {}: {} (weight {:.4})\n", i + 1, a.preference, w)),
                None => s.push_str(&format!("Preference {}: {}\n", i + 1, a.preference)),
            }
            s.push_str(&format!("Analysis: {}\n", a.analysis));
        }
        s.push_str("\nStep 2:\n");
        s.push_str(&format!("Target item introduction: {}\n", self.item_introduction));
        s.push_str("Preference Fitness:\n");
        for (i, e) in self.fitness.iter().enumerate() {
            s.push_str(&format!("{}. {}: {}\n", i + 1, e.preference, e.fitness));
            s.push_str(&format!("Reason: {}\n", e.reason));
        }
        s.push_str("\nStep 3:\n");
        s.push_str(&format!("Interaction probability: {}\n", self.probability));
        s.push_str(&format!("Reason: {}\n", self.probability_reason));
        s.push_str("\nStep 4:\n");
        s.push_str(&format!("Recommendation: {}\n", self.recommendation));
        s
    }
}

/// Everything the CoT prompt carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationRequest {
    pub titles: Vec<String>,
    pub preferences: Vec<String>,
    pub weights: Vec<f64>,
    pub target_title: String,
}

const COT_TASK: &str = "### Task";
const COT_SEQUENCE: &str = "### User Interaction Sequence";
const COT_PREFERENCES: &str = "### User Preferences and Attention Weights";
const COT_TARGET: &str = "### Target Item";
const COT_STEPS: &str = "### Steps";
const COT_FORMAT: &str = "### Output Format";

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_cot_prompt<S: AsRef<str>>(titles: &[S], preferences: &[String], omega: &[f64], target_title: &str) -> Result<String, ExplainError> {
    if preferences.len() != omega.len() {
        return Err(ExplainError::Validation(format!("{} preferences but {} weights", preferences.len(), omega.len())));
    }
    if preferences.is_empty() {
        return Err(ExplainError::Validation("no preferences to explain".into()));
    }
    let m = preferences.len();
    let mut p = String::new();
    p.push_str(COT_TASK);
    p.push_str(
        "\nA recommender has selected the target item below for this user. Explain the recommendation by \
         working through the four steps in order, using the user's history, the preferences and how much \
         weight the recommender gave to each of them.\n\n",
    );
    p.push_str(COT_SEQUENCE);
    p.push('\n');
    for (i, t) in titles.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, one_line(t.as_ref())));
    }
    p.push('\n');
    p.push_str(COT_PREFERENCES);
    p.push('\n');
    for (i, (pref, w)) in preferences.iter().zip(omega).enumerate() {
        p.push_str(&format!("{}. {} (weight {:.4})\n", i + 1, one_line(pref), w));
    }
    p.push('\n');
    p.push_str(COT_TARGET);
    p.push('\n');
    p.push_str(&one_line(target_title));
    p.push_str("\n\n");
    p.push_str(COT_STEPS);
    p.push_str(&format!(
        "\nStep 1: For each of the {m} preferences, point to titles in the history that show it and describe what the user gets from them.\n\
         Step 2: Introduce the target item, then rate how well it fits each preference with a number between 0 and 1 and give a reason.\n\
         Step 3: Combine the fitness ratings with the preference weights and judge whether the user will interact with the target item: Low, Medium or High. Give a reason.\n\
         Step 4: Write a short recommendation addressed to the user.\n\n"
    ));
    p.push_str(COT_FORMAT);
    p.push_str("\nStep 1:\n");
    for i in 1..=m {
        p.push_str(&format!("Preference {i}: <preference {i}> (weight <weight {i}>)\nAnalysis: <analysis>\n"));
    }
    p.push_str("Step 2:\nTarget item introduction: <introduction>\nPreference Fitness:\n");
    for i in 1..=m {
        p.push_str(&format!("{i}. <preference {i}>: <fitness between 0 and 1>\nReason: <reason>\n"));
    }
    p.push_str("Step 3:\nInteraction probability: <Low|Medium|High>\nReason: <reason>\nStep 4:\nRecommendation: <recommendation>\n");
    Ok(p)
}

fn prompt_section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n### ").map_or(rest.len(), |e| e + 1);
    Some(&rest[..end])
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn numbered(line: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    re(&RE, r"^\s*\d+\.\s+(.*)$").captures(line).map(|c| c[1].trim().to_string())
}

fn weight_suffix(text: &str) -> Option<(String, f64)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let c = re(&RE, r"^(.*?)\s*\(weight\s+([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\)\s*$").captures(text)?;
    Some((c[1].trim().to_string(), c[2].parse().ok()?))
}

/// Recovers the request from a prompt produced by [`render_cot_prompt`].
pub fn read_cot_prompt(prompt: &str) -> Option<ExplanationRequest> {
    if !prompt.starts_with(COT_TASK) || !prompt.contains(COT_FORMAT) {
        return None;
    }
    let titles = prompt_section(prompt, COT_SEQUENCE)?.lines().filter_map(numbered).collect();
    let mut preferences = Vec::new();
    let mut weights = Vec::new();
    for entry in prompt_section(prompt, COT_PREFERENCES)?.lines().filter_map(numbered) {
        let (p, w) = weight_suffix(&entry)?;
        preferences.push(p);
        weights.push(w);
    }
    let target_title = prompt_section(prompt, COT_TARGET)?.trim().to_string();
    (!preferences.is_empty() && !target_title.is_empty()).then_some(ExplanationRequest { titles, preferences, weights, target_title })
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3 && !w.chars().all(|c| c.is_ascii_digit()))
        .map(str::to_lowercase)
        .collect()
}

fn quoted_list(titles: &[&String]) -> String {
    titles.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", ")
}

/// Deterministic stand-in for the LLM. Fitness is the share of a
/// preference's words found in the target title (mapped into [0.1, 0.9])
/// plus a small seeded jitter; the label comes from Σ ω_i · fitness_i.
pub fn mock_explanation(req: &ExplanationRequest, seed: u64) -> ExplanationRecord {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(req.target_title.as_bytes()).finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let target_words = words(&req.target_title);
    let mut step1 = Vec::new();
    let mut fitness = Vec::new();
    for pref in &req.preferences {
        let pw = words(pref);
        let supporting: Vec<&String> = req.titles.iter().filter(|t| words(t).iter().any(|w| pw.contains(w))).take(3).collect();
        let analysis = if supporting.is_empty() {
            let recent: Vec<&String> = req.titles.iter().rev().take(2).collect();
            format!("No title names this directly; the taste is read from the overall history, e.g. {}.", quoted_list(&recent))
        } else {
            format!("Titles such as {} point to this taste.", quoted_list(&supporting))
        };
        step1.push(PreferenceAnalysis { preference: pref.clone(), analysis });
        let overlap = if pw.is_empty() { 0.0 } else { pw.iter().filter(|w| target_words.contains(w)).count() as f64 / pw.len() as f64 };
        let jitter: f64 = rng.gen_range(-0.1..=0.1);
        let f = ((0.1 + 0.8 * overlap + jitter).clamp(0.0, 1.0) * 10.0).round() / 10.0;
        let reason = if overlap > 0.0 {
            format!("'{}' shares themes with this preference.", req.target_title)
        } else {
            format!("'{}' has little in common with this preference.", req.target_title)
        };
        fitness.push(FitnessEntry { preference: pref.clone(), fitness: f, clamped: false, reason });
    }
    let expected: f64 = req.weights.iter().zip(&fitness).map(|(w, e)| w * e.fitness).sum();
    let probability = InteractionProbability::from_expected_fitness(expected);
    let top = req.weights.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
    ExplanationRecord {
        step1,
        item_introduction: format!("'{}' is the item the recommender ranked for this user.", req.target_title),
        probability,
        probability_reason: format!(
            "The weighted fitness is {:.4}; the heaviest preference, '{}' (weight {:.4}), rates {}.",
            expected, req.preferences[top], req.weights[top], fitness[top].fitness
        ),
        recommendation: format!("Since you enjoy {}, '{}' is worth a look.", req.preferences[top].to_lowercase(), req.target_title),
        fitness,
        echoed_weights: req.weights.iter().map(|&w| round4(w)).collect(),
    }
}

struct Line<'a> {
    label: Option<&'a str>,
    text: &'a str,
}

fn split_label(line: &str) -> Line<'_> {
    for label in ["Analysis", "Target item introduction", "Preference Fitness", "Reason", "Interaction probability", "Recommendation"] {
        if line.len() >= label.len() && line[..label.len()].eq_ignore_ascii_case(label) {
            let rest = line[label.len()..].trim_start();
            if let Some(rest) = rest.strip_prefix(':') {
                return Line { label: Some(label), text: rest.trim() };
            }
        }
    }
    Line { label: None, text: line }
}

fn clean(s: &str) -> String {
    s.trim().trim_matches(|c| c == '\'' || c == '"' || c == '`' || c == '‘' || c == '’').trim().to_string()
}

fn append(buf: &mut String, text: &str) {
    if text.is_empty() {
        return;
    }
    if !buf.is_empty() {
        buf.push(' ');
    }
    buf.push_str(text);
}

fn malformed(msg: impl Into<String>) -> ExplainError {
    ExplainError::MalformedResponse(msg.into())
}

fn parse_step1(lines: &[&str], m: usize) -> Result<(Vec<PreferenceAnalysis>, Vec<Option<f64>>), ExplainError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let header = re(&RE, r"(?i)^preference\s+(\d+)\s*:\s*(.*)$");
    let mut out: Vec<PreferenceAnalysis> = Vec::new();
    let mut weights = Vec::new();
    for line in lines {
        if let Some(c) = header.captures(line) {
            let (name, w) = match weight_suffix(&c[2]) {
                Some((n, w)) => (n, Some(w)),
                None => (c[2].trim().to_string(), None),
            };
            out.push(PreferenceAnalysis { preference: clean(&name), analysis: String::new() });
            weights.push(w);
            continue;
        }
        let Some(cur) = out.last_mut() else { continue };
        let l = split_label(line);
        append(&mut cur.analysis, l.text);
    }
    if out.len() != m {
        return Err(malformed(format!("Step 1: expected {m} preference analyses, found {}", out.len())));
    }
    if let Some(i) = out.iter().position(|a| a.preference.is_empty() || a.analysis.is_empty()) {
        return Err(malformed(format!("Step 1: preference {} lacks a name or analysis", i + 1)));
    }
    Ok((out, weights))
}

fn parse_step2(lines: &[&str], m: usize) -> Result<(String, Vec<FitnessEntry>), ExplainError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let entry = re(&RE, r"^\d+\s*[.)]\s*(.+):\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*$");
    let mut intro = String::new();
    let mut in_fitness = false;
    let mut entries: Vec<FitnessEntry> = Vec::new();
    for line in lines {
        let l = split_label(line);
        if l.label == Some("Preference Fitness") {
            in_fitness = true;
            continue;
        }
        if !in_fitness {
            append(&mut intro, l.text);
            continue;
        }
        if let Some(c) = entry.captures(line) {
            let raw: f64 = c[2].parse().map_err(|_| malformed(format!("Step 2: bad fitness in {line:?}")))?;
            let fitness = raw.clamp(0.0, 1.0);
            entries.push(FitnessEntry { preference: clean(&c[1]), fitness, clamped: fitness != raw, reason: String::new() });
        } else if let Some(cur) = entries.last_mut() {
            append(&mut cur.reason, l.text);
        }
    }
    if intro.is_empty() {
        return Err(malformed("Step 2: missing target item introduction"));
    }
    if entries.len() != m {
        return Err(malformed(format!("Step 2: expected {m} fitness entries, found {}", entries.len())));
    }
    Ok((intro, entries))
}

fn parse_step3(lines: &[&str]) -> Result<(InteractionProbability, String), ExplainError> {
    let mut label = None;
    let mut reason = String::new();
    for line in lines {
        let l = split_label(line);
        match l.label {
            Some("Interaction probability") => {
                let word = l.text.split(|c: char| !c.is_alphabetic()).find(|w| !w.is_empty()).unwrap_or("");
                label = Some(match word.to_ascii_lowercase().as_str() {
                    "low" => InteractionProbability::Low,
                    "medium" => InteractionProbability::Medium,
                    "high" => InteractionProbability::High,
                    _ => return Err(malformed(format!("Step 3: unknown probability label {:?}", l.text))),
                });
            }
            _ => append(&mut reason, l.text),
        }
    }
    let label = label.ok_or_else(|| malformed("Step 3: missing interaction probability"))?;
    Ok((label, reason))
}

/// Parses a four-step answer for `m` preferences. Weights echoed in Step 1
/// as `(weight x)` land in `echoed_weights`; when the answer echoes none the
/// vector is left empty for the caller to fill.
pub fn parse_explanation(raw: &str, m: usize) -> Result<ExplanationRecord, ExplainError> {
    static STEP: OnceLock<Regex> = OnceLock::new();
    let step = re(&STEP, r"(?i)^(?:#+\s*)?step\s*([1-4])\s*:?\s*(.*)$");
    if raw.trim().is_empty() {
        return Err(malformed("empty response"));
    }
    let text = raw.replace("**", "").replace("__", "");
    let mut sections: [Option<Vec<&str>>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(c) = step.captures(line) {
            let k: usize = c[1].parse().expect("digit");
            let body = sections[k - 1].get_or_insert_with(Vec::new);
            current = Some(k - 1);
            let rest = c.get(2).map_or("", |r| r.as_str()).trim();
            if !rest.is_empty() {
                body.push(rest);
            }
            continue;
        }
        if let Some(k) = current {
            sections[k].as_mut().expect("open section").push(line);
        }
    }
    for (k, s) in sections.iter().enumerate() {
        if s.is_none() {
            return Err(malformed(format!("Step {}", k + 1)));
        }
    }
    let [s1, s2, s3, s4] = sections.map(Option::unwrap_or_default);
    let (step1, weights) = parse_step1(&s1, m)?;
    let (item_introduction, fitness) = parse_step2(&s2, m)?;
    let (probability, probability_reason) = parse_step3(&s3)?;
    let mut recommendation = String::new();
    for line in &s4 {
        append(&mut recommendation, split_label(line).text);
    }
    if recommendation.is_empty() {
        return Err(malformed("Step 4: empty recommendation"));
    }
    let echoed_weights = if weights.iter().all(Option::is_some) { weights.into_iter().flatten().collect() } else { Vec::new() };
    Ok(ExplanationRecord { step1, item_introduction, fitness, probability, probability_reason, recommendation, echoed_weights })
}

/// One line of the explanations JSONL. `steps` is `None` when every attempt
/// failed to parse; nothing is fabricated in that case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEntry {
    pub user_id: String,
    pub target: String,
    pub target_title: String,
    pub omega: Vec<f64>,
    pub steps: Option<ExplanationRecord>,
    pub raw: String,
    pub prompt_hash: String,
    pub attempts: u32,
    pub error: Option<String>,
}

impl ExplanationEntry {
    pub fn is_available(&self) -> bool {
        self.steps.is_some()
    }
}

/// Render → client → parse, retrying on malformed answers and on answers
/// whose echoed weights disagree with `omega` by more than 1e-4.
#[allow(clippy::too_many_arguments)]
pub fn explain<S: AsRef<str>>(
    user_id: &str,
    titles: &[S],
    preferences: &[String],
    omega: &[f64],
    target: &str,
    target_title: &str,
    client: &LlmClientHandle,
) -> Result<ExplanationEntry, ExplainError> {
    let prompt = render_cot_prompt(titles, preferences, omega, target_title)?;
    let hash = prompt_hash(&prompt);
    let m = preferences.len();
    let mut entry = ExplanationEntry {
        user_id: user_id.to_string(),
        target: target.to_string(),
        target_title: target_title.to_string(),
        omega: omega.to_vec(),
        steps: None,
        raw: String::new(),
        prompt_hash: hash,
        attempts: 0,
        error: None,
    };
    for attempt in 1..=client.max_retries {
        entry.attempts = attempt;
        entry.raw = client.call(&prompt).map_err(|source| ExplainError::Client { user_id: user_id.to_string(), source })?;
        match parse_explanation(&entry.raw, m) {
            Ok(mut rec) => {
                if rec.echoed_weights.is_empty() {
                    rec.echoed_weights = omega.iter().map(|&w| round4(w)).collect();
                } else if rec.echoed_weights.iter().zip(omega).any(|(a, b)| (a - b).abs() > 1e-4) {
                    entry.error = Some("echoed weights disagree with the attention weights".into());
                    continue;
                }
                entry.steps = Some(rec);
                entry.error = None;
                return Ok(entry);
            }
            Err(e) => entry.error = Some(e.to_string()),
        }
    }
    Ok(entry)
}

/// What the explainer needs to know about one user.
#[derive(Debug, Clone)]
pub struct ExplanationSubject<'a> {
    pub user_id: &'a str,
    /// Catalog indices of the model input, oldest first.
    pub history: &'a [usize],
    pub preferences: &'a [String],
    /// Encoded `preferences`, one row each.
    pub preference_embeddings: &'a Matrix,
}

/// Computes ω from the trained model at the last history position, then runs
/// [`explain`] for `target`. The model is only read.
pub fn generate_explanation(
    subject: &ExplanationSubject<'_>,
    model: &LaneModel,
    catalog: &ItemCatalog,
    target: usize,
    client: &LlmClientHandle,
) -> Result<ExplanationEntry, ExplainError> {
    if subject.history.is_empty() {
        return Err(ExplainError::Validation(format!("user {} has an empty history", subject.user_id)));
    }
    if subject.preferences.len() != subject.preference_embeddings.rows() {
        return Err(ExplainError::Validation(format!(
            "{} preferences but {} preference embeddings",
            subject.preferences.len(),
            subject.preference_embeddings.rows()
        )));
    }
    let title = |i: usize| catalog.title(i).map(str::to_string).ok_or_else(|| ExplainError::Validation(format!("item index {i} is not in the catalog")));
    let seq = build_fixed_sequence(subject.history, model.config().backbone.n);
    let omega = model.preference_weights(&seq, subject.preference_embeddings)?;
    let titles: Vec<String> = subject.history.iter().map(|&i| title(i)).collect::<Result<_, _>>()?;
    let target_id = catalog.get(target).map(|c| c.item_id.clone()).ok_or_else(|| ExplainError::Validation(format!("item index {target} is not in the catalog")))?;
    explain(subject.user_id, &titles, subject.preferences, &omega, &target_id, &title(target)?, client)
}

/// Append-only JSONL sink shared by parallel workers.
pub struct ExplanationWriter {
    file: Mutex<std::fs::File>,
}

impl ExplanationWriter {
    pub fn create(path: &Path) -> Result<Self, ExplainError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn append(&self, entry: &ExplanationEntry) -> Result<(), ExplainError> {
        let mut line = serde_json::to_string(entry).expect("serializable entry");
        line.push('\n');
        self.file.lock().expect("writer lock").write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn read_explanations(path: &Path) -> Result<Vec<ExplanationEntry>, ExplainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| malformed(format!("{}: {e}", path.display()))))
        .collect()
}
