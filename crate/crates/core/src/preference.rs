//! Zero-shot multi-preference extraction.
//!
//! The prompt has five sections (Task, Role, Requirements, Standard Template,
//! Historical Interaction Sequence). The Standard Template pins the answer to
//! a numbered list `1. <preference>` … `m. <preference>`, and the parser
//! accepts exactly that shape.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{LlmClientHandle, LlmError};

pub const MAX_PREFERENCE_CHARS: usize = 200;

pub const SECTION_TASK: &str = "### Task";
pub const SECTION_ROLE: &str = "### Role";
pub const SECTION_REQUIREMENTS: &str = "### Requirements";
pub const SECTION_TEMPLATE: &str = "### Standard Template";
pub const SECTION_HISTORY: &str = "### Historical Interaction Sequence";

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("llm call for user {user_id} failed: {source}")]
    Client { user_id: String, source: LlmError },
    #[error("user {0} has no interaction titles")]
    EmptyHistory(String),
    #[error("preference cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferenceSource {
    Llm,
    Mock,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub user_id: String,
    pub preferences: Vec<String>,
    pub source: PreferenceSource,
    pub raw_response: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedUser {
    pub user_id: String,
    pub reason: String,
    pub attempts: u32,
    pub last_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtractionOutcome {
    Extracted(PreferenceSet),
    Dropped(DroppedUser),
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_preference_prompt<S: AsRef<str>>(titles: &[S], m: usize) -> String {
    assert!(m >= 1, "m must be positive");
    let mut p = String::new();
    p.push_str(SECTION_TASK);
    p.push_str(&format!(
        "\nRead the user's historical interaction sequence below and describe the user's tastes as exactly {m} \
         short, distinct preference statements.\n\n"
    ));
    p.push_str(SECTION_ROLE);
    p.push_str("\nYou are an experienced analyst who infers what people like from the items they have chosen.\n\n");
    p.push_str(SECTION_REQUIREMENTS);
    p.push_str(&format!(
        "\n1. Use what you know about each item (genre, theme, style, audience), not only its title.\n\
         2. Make the {m} preferences cover different aspects of the user's taste; do not repeat yourself.\n\
         3. Keep each preference under {MAX_PREFERENCE_CHARS} characters.\n\
         4. Answer with the Standard Template only: exactly {m} numbered lines and no other text.\n\n"
    ));
    p.push_str(SECTION_TEMPLATE);
    p.push('\n');
    for i in 1..=m {
        p.push_str(&format!("{i}. <preference {i}>\n"));
    }
    p.push('\n');
    p.push_str(SECTION_HISTORY);
    p.push('\n');
    for (i, t) in titles.iter().enumerate() {
        p.push_str(&format!("{}. {}\n", i + 1, one_line(t.as_ref())));
    }
    p
}

fn numbered_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*]\s*)?\**\s*(\d+)\s*[.)]\s*(.*)$").expect("valid regex"))
}

fn strip_markup(s: &str) -> String {
    let s = s.replace("**", "").replace("__", "");
    s.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`' || c == '*').trim().to_string()
}

/// Inverse of [`parse_preference_response`].
pub fn render_standard_response<S: AsRef<str>>(preferences: &[S]) -> String {
    preferences.iter().enumerate().map(|(i, p)| format!("{}. {}\n", i + 1, p.as_ref())).collect()
}

/// Extracts exactly `m` numbered preferences, numbered `1..=m` in order.
/// Lines without a leading number (preambles, blank lines) are ignored.
pub fn parse_preference_response(raw: &str, m: usize) -> Result<Vec<String>, PreferenceError> {
    if raw.trim().is_empty() {
        return Err(PreferenceError::MalformedResponse("empty response".into()));
    }
    let mut prefs = Vec::new();
    for line in raw.lines() {
        let Some(c) = numbered_line().captures(line) else { continue };
        let number: usize = c[1].parse().map_err(|_| PreferenceError::MalformedResponse(format!("bad number in {line:?}")))?;
        if number != prefs.len() + 1 {
            return Err(PreferenceError::MalformedResponse(format!("expected item {}, found {number}", prefs.len() + 1)));
        }
        let text = strip_markup(&c[2]);
        if text.is_empty() {
            return Err(PreferenceError::MalformedResponse(format!("preference {number} is blank")));
        }
        if text.chars().count() > MAX_PREFERENCE_CHARS {
            return Err(PreferenceError::MalformedResponse(format!("preference {number} exceeds {MAX_PREFERENCE_CHARS} characters")));
        }
        prefs.push(text);
    }
    if prefs.len() != m {
        return Err(PreferenceError::MalformedResponse(format!("expected {m} preferences, found {}", prefs.len())));
    }
    Ok(prefs)
}

fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n### ").map_or(rest.len(), |e| e + 1);
    Some(&rest[..end])
}

/// Recovers `(titles, m)` from a prompt produced by [`render_preference_prompt`].
pub fn read_preference_prompt(prompt: &str) -> Option<(Vec<String>, usize)> {
    if !prompt.starts_with(SECTION_TASK) || !prompt.contains(SECTION_ROLE) {
        return None;
    }
    let template = section(prompt, SECTION_TEMPLATE)?;
    let m = template.lines().filter(|l| numbered_line().is_match(l)).count();
    let history = section(prompt, SECTION_HISTORY)?;
    let titles = history
        .lines()
        .filter_map(|l| numbered_line().captures(l).map(|c| c[2].trim().to_string()))
        .collect::<Vec<_>>();
    (m > 0).then_some((titles, m))
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "that", "this", "you", "your", "are", "was", "edition", "version", "vol",
    "part", "new", "set", "pack", "not", "all", "its", "into", "out", "off", "our", "one", "two", "three",
];

fn content_words(title: &str) -> impl Iterator<Item = String> + '_ {
    title
        .split(|c: char| !c.is_alphanumeric())
        .map(str::to_lowercase)
        .filter(|w| w.chars().count() >= 3 && !w.chars().all(|c| c.is_ascii_digit()) && !STOPWORDS.contains(&w.as_str()))
}

const MOCK_TEMPLATES: &[&str] = &[
    "Enjoys {} titles",
    "Drawn to {}-themed items",
    "Keeps returning to {} experiences",
    "Strong interest in {}",
    "Favors anything featuring {}",
];

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

/// Offline preference generator: the `m` most frequent content words across
/// `titles` (ties broken by first appearance), each phrased with a template
/// chosen by a seeded hash. Short vocabularies are topped up with generic
/// statements so exactly `m` preferences always come back.
pub fn mock_preferences<S: AsRef<str>>(titles: &[S], m: usize, seed: u64) -> Vec<String> {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for t in titles {
        for w in content_words(t.as_ref()) {
            let e = counts.entry(w).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut words: Vec<(String, (usize, usize))> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    let mut out: Vec<String> = words
        .into_iter()
        .take(m)
        .map(|(w, _)| {
            let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(w.as_bytes()).finalize();
            let template = MOCK_TEMPLATES[h[0] as usize % MOCK_TEMPLATES.len()];
            template.replace("{}", &capitalize(&w))
        })
        .collect();
    let mut k = 1;
    while out.len() < m {
        out.push(format!("Broad curiosity beyond the usual picks (aspect {k})"));
        k += 1;
    }
    out
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// JSON-lines preference cache keyed by user; a hit also requires the stored
/// prompt hash to match, so changing `m` or the history re-extracts.
pub struct PreferenceCache {
    path: PathBuf,
    records: RwLock<HashMap<String, PreferenceSet>>,
    writer: Mutex<()>,
}

impl PreferenceCache {
    pub fn open(path: &Path) -> Result<Self, PreferenceError> {
        let cache_err = |message: String| PreferenceError::Cache { path: path.display().to_string(), message };
        let mut records = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| cache_err(e.to_string()))?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| cache_err(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: PreferenceSet = serde_json::from_str(&line).map_err(|e| cache_err(format!("line {}: {e}", n + 1)))?;
                records.insert(rec.user_id.clone(), rec);
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| cache_err(e.to_string()))?;
        }
        Ok(Self { path: path.to_path_buf(), records: RwLock::new(records), writer: Mutex::new(()) })
    }

    pub fn get(&self, user_id: &str, prompt_hash: &str) -> Option<PreferenceSet> {
        self.records.read().expect("cache lock").get(user_id).filter(|r| r.prompt_hash == prompt_hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.records.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, set: &PreferenceSet) -> Result<(), PreferenceError> {
        let _w = self.writer.lock().expect("cache writer lock");
        let cache_err = |e: std::io::Error| PreferenceError::Cache { path: self.path.display().to_string(), message: e.to_string() };
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path).map_err(cache_err)?;
        let mut line = serde_json::to_string(set).expect("serializable record");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(cache_err)?;
        self.records.write().expect("cache lock").insert(set.user_id.clone(), set.clone());
        Ok(())
    }
}

/// Prompt → client → strict parse, retried on malformed answers. A user whose
/// answers never parse is returned as [`ExtractionOutcome::Dropped`].
pub fn extract_preferences<S: AsRef<str>>(
    user_id: &str,
    titles: &[S],
    client: &LlmClientHandle,
    m: usize,
    cache: Option<&PreferenceCache>,
) -> Result<ExtractionOutcome, PreferenceError> {
    if titles.is_empty() {
        return Err(PreferenceError::EmptyHistory(user_id.to_string()));
    }
    let prompt = render_preference_prompt(titles, m);
    let hash = prompt_hash(&prompt);
    if let Some(hit) = cache.and_then(|c| c.get(user_id, &hash)) {
        return Ok(ExtractionOutcome::Extracted(hit));
    }
    let mut last_response = String::new();
    let mut last_error = String::new();
    for _ in 0..client.max_retries {
        let raw = client.call(&prompt).map_err(|source| PreferenceError::Client { user_id: user_id.to_string(), source })?;
        match parse_preference_response(&raw, m) {
            Ok(preferences) => {
                let set = PreferenceSet {
                    user_id: user_id.to_string(),
                    preferences,
                    source: if client.is_mock() { PreferenceSource::Mock } else { PreferenceSource::Llm },
                    raw_response: raw,
                    prompt_hash: hash,
                };
                if let Some(c) = cache {
                    c.insert(&set)?;
                }
                return Ok(ExtractionOutcome::Extracted(set));
            }
            Err(e) => {
                last_error = e.to_string();
                last_response = raw;
            }
        }
    }
    Ok(ExtractionOutcome::Dropped(DroppedUser {
        user_id: user_id.to_string(),
        reason: last_error,
        attempts: client.max_retries,
        last_response,
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtractionReport {
    pub sets: Vec<PreferenceSet>,
    pub dropped: Vec<DroppedUser>,
}

/// Runs [`extract_preferences`] for every `(user_id, titles)` in parallel.
/// Output order follows input order.
pub fn extract_all(
    users: &[(String, Vec<String>)],
    client: &LlmClientHandle,
    m: usize,
    cache: Option<&PreferenceCache>,
) -> Result<ExtractionReport, PreferenceError> {
    let outcomes: Vec<ExtractionOutcome> = users
        .par_iter()
        .map(|(u, titles)| extract_preferences(u, titles, client, m, cache))
        .collect::<Result<_, _>>()?;
    let mut report = ExtractionReport::default();
    for o in outcomes {
        match o {
            ExtractionOutcome::Extracted(s) => report.sets.push(s),
            ExtractionOutcome::Dropped(d) => report.dropped.push(d),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::LlmClient;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    const FIG3_STYLE: &str = "Here are the user's preferences:\n\n\
        1. **Action-oriented gameplay**\n\
        2. **Story-rich single-player adventures**\n\
        3. **Science-fiction and futuristic settings**\n\
        4. **Atmospheric indie titles**\n\
        5. **Puzzle-solving and exploration**\n";

    #[test]
    fn prompt_has_all_sections_and_titles_in_order() {
        let p = render_preference_prompt(&["Alan Wake", "Thief", "Borderlands"], 5);
        let positions: Vec<usize> =
            [SECTION_TASK, SECTION_ROLE, SECTION_REQUIREMENTS, SECTION_TEMPLATE, SECTION_HISTORY].iter().map(|h| p.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let (a, b, c) = (p.find("1. Alan Wake").unwrap(), p.find("2. Thief").unwrap(), p.find("3. Borderlands").unwrap());
        assert!(a < b && b < c);
        assert!(p.contains("5. <preference 5>"));
        assert_eq!(p, render_preference_prompt(&["Alan Wake", "Thief", "Borderlands"], 5));
    }

    #[test]
    fn single_slot_template() {
        let p = render_preference_prompt(&["X"], 1);
        assert!(p.contains("1. <preference 1>") && !p.contains("2. <preference"));
        assert_eq!(read_preference_prompt(&p), Some((vec!["X".to_string()], 1)));
    }

    #[test]
    fn parses_fig3_style_response() {
        let prefs = parse_preference_response(FIG3_STYLE, 5).unwrap();
        assert_eq!(prefs.len(), 5);
        assert_eq!(prefs[0], "Action-oriented gameplay");
    }

    #[test]
    fn wrong_counts_are_malformed() {
        let four = "1. a\n2. b\n3. c\n4. d\n";
        assert!(matches!(parse_preference_response(four, 5), Err(PreferenceError::MalformedResponse(_))));
        assert!(matches!(parse_preference_response("1. a\n2. b\n", 1), Err(PreferenceError::MalformedResponse(_))));
        assert!(matches!(parse_preference_response("   ", 1), Err(PreferenceError::MalformedResponse(_))));
        assert!(matches!(parse_preference_response("1. a\n3. b\n", 2), Err(PreferenceError::MalformedResponse(_))));
        let long = format!("1. {}\n", "x".repeat(201));
        assert!(parse_preference_response(&long, 1).is_err());
    }

    #[test]
    fn standard_response_round_trips() {
        let known = ["Action and Adventure Games", "Sci-Fi Themed Games", "Indie Games with Unique Storylines", "Puzzle and Platform Games", "Games with Strong Narrative Elements"];
        let rendered = render_standard_response(&known);
        assert_eq!(parse_preference_response(&rendered, 5).unwrap(), known);
    }

    #[test]
    fn mock_preferences_follow_title_keywords() {
        let titles = ["Crimson Harbor", "Crimson Orchard", "Harbor Lights", "Crimson Tide"];
        let p = mock_preferences(&titles, 3, 0);
        assert_eq!(p.len(), 3);
        assert!(p[0].contains("Crimson") && p[1].contains("Harbor") && p[2].contains("Orchard"), "{p:?}");
        assert_eq!(mock_preferences(&titles, 8, 0).len(), 8);
        assert_eq!(p, mock_preferences(&titles, 3, 0));
    }

    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl LlmClient for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn complete(&self, _: &str) -> Result<String, LlmError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[i.min(self.replies.len() - 1)].to_string())
        }
    }

    #[test]
    fn garbage_until_retries_run_out_drops_the_user() {
        let client = Arc::new(Scripted { replies: vec!["no idea", "still nothing", "1. a\n2. b\n"], calls: AtomicUsize::new(0) });
        let handle = LlmClientHandle::new(client.clone(), 2, Duration::from_secs(1));
        let out = extract_preferences("u1", &["T"], &handle, 2, None).unwrap();
        assert!(matches!(out, ExtractionOutcome::Dropped(ref d) if d.user_id == "u1" && d.attempts == 2));
        assert_eq!(client.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retry_recovers_after_one_bad_answer() {
        let client = Arc::new(Scripted { replies: vec!["no idea", "1. a\n2. b\n"], calls: AtomicUsize::new(0) });
        let handle = LlmClientHandle::new(client, 2, Duration::from_secs(1));
        let out = extract_preferences("u1", &["T"], &handle, 2, None).unwrap();
        assert!(matches!(out, ExtractionOutcome::Extracted(ref s) if s.preferences == ["a", "b"] && s.source == PreferenceSource::Llm));
    }

    struct Counting(AtomicUsize, crate::llm::MockLlm);

    impl LlmClient for Counting {
        fn name(&self) -> &str {
            "mock"
        }
        fn complete(&self, p: &str) -> Result<String, LlmError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            self.1.complete(p)
        }
    }

    #[test]
    fn second_call_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let client = Arc::new(Counting(AtomicUsize::new(0), crate::llm::MockLlm::new(1)));
        let handle = LlmClientHandle::new(client.clone(), 2, Duration::from_secs(1));
        let titles = ["Iron Lantern Saga", "Glass River"];
        let cache = PreferenceCache::open(&path).unwrap();
        let first = extract_preferences("u", &titles, &handle, 5, Some(&cache)).unwrap();
        let second = extract_preferences("u", &titles, &handle, 5, Some(&cache)).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.0.load(Ordering::SeqCst), 1);
        let reopened = PreferenceCache::open(&path).unwrap();
        let third = extract_preferences("u", &titles, &handle, 5, Some(&reopened)).unwrap();
        assert_eq!(third, first);
        assert_eq!(client.0.load(Ordering::SeqCst), 1);
        if let ExtractionOutcome::Extracted(s) = first {
            assert_eq!(s.source, PreferenceSource::Mock);
            assert_eq!(s.preferences.len(), 5);
        } else {
            panic!("mock extraction dropped");
        }
        // a different m is a different prompt
        extract_preferences("u", &titles, &handle, 3, Some(&reopened)).unwrap();
        assert_eq!(client.0.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn report_accounts_for_every_user() {
        let users: Vec<(String, Vec<String>)> = (0..12).map(|i| (format!("u{i}"), vec![format!("Title {i} Quest")])).collect();
        let handle = LlmClientHandle::mock(3);
        let report = extract_all(&users, &handle, 2, None).unwrap();
        assert_eq!(report.sets.len() + report.dropped.len(), users.len());
        let again = extract_all(&users, &handle, 2, None).unwrap();
        assert_eq!(report, again);
    }
}
