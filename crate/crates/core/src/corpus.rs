//! Interaction ingestion, k-core filtering, leave-one-out splitting and
//! fixed-length sequence construction.
//!
//! Item indices are 1-based; index 0 is reserved for padding everywhere.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_INDEX: usize = 0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("item {item_id} has conflicting titles {first:?} and {second:?}")]
    Integrity { item_id: String, first: String, second: String },
    #[error("unknown input format {0:?} (expected tsv or jsonl)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for InputFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Self::Tsv),
            "jsonl" | "json-lines" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Timestamped events in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub events: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Users in order of first appearance.
    pub fn users(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.events.iter().filter(|e| seen.insert(e.user_id.as_str())).map(|e| e.user_id.as_str()).collect()
    }

    /// Items in order of first appearance.
    pub fn items(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.events.iter().filter(|e| seen.insert(e.item_id.as_str())).map(|e| e.item_id.as_str()).collect()
    }

    /// Per-user item sequences sorted by timestamp, ties kept in input order.
    /// Users appear in order of first appearance.
    pub fn user_sequences(&self) -> Vec<(String, Vec<&Interaction>)> {
        let mut order: Vec<String> = Vec::new();
        let mut by_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
        for e in &self.events {
            by_user
                .entry(e.user_id.as_str())
                .or_insert_with(|| {
                    order.push(e.user_id.clone());
                    Vec::new()
                })
                .push(e);
        }
        order
            .into_iter()
            .map(|u| {
                let mut seq = by_user.remove(u.as_str()).unwrap_or_default();
                // sort_by_key is stable
                seq.sort_by_key(|e| e.timestamp);
                (u, seq)
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.events)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_index: usize,
    pub item_id: String,
    pub title: String,
}

/// Items with contiguous 1-based indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    by_id: HashMap<String, usize>,
}

impl ItemCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an item or checks it against an existing entry. Returns its index.
    pub fn insert(&mut self, item_id: &str, title: &str) -> Result<usize, CorpusError> {
        if let Some(&idx) = self.by_id.get(item_id) {
            let existing = &self.items[idx - 1].title;
            if existing != title {
                return Err(CorpusError::Integrity {
                    item_id: item_id.to_string(),
                    first: existing.clone(),
                    second: title.to_string(),
                });
            }
            return Ok(idx);
        }
        let idx = self.items.len() + 1;
        self.items.push(CatalogItem { item_index: idx, item_id: item_id.to_string(), title: title.to_string() });
        self.by_id.insert(item_id.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn get(&self, item_index: usize) -> Option<&CatalogItem> {
        item_index.checked_sub(1).and_then(|i| self.items.get(i))
    }

    pub fn title(&self, item_index: usize) -> Option<&str> {
        self.get(item_index).map(|i| i.title.as_str())
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    /// A catalog of only the items that occur in `log`, re-indexed in first-seen order.
    pub fn restrict_to(&self, log: &InteractionLog) -> ItemCatalog {
        let mut out = ItemCatalog::new();
        for id in log.items() {
            if let Some(item) = self.index_of(id).and_then(|i| self.get(i)) {
                out.insert(&item.item_id, &item.title).expect("titles are consistent within a catalog");
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.items)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let rows: Vec<CatalogItem> = read_jsonl(path)?;
        let mut out = ItemCatalog::new();
        for (line, row) in rows.iter().enumerate() {
            let idx = out.insert(&row.item_id, &row.title)?;
            if idx != row.item_index {
                return Err(CorpusError::Parse { line: line + 1, message: format!("item_index {} is not contiguous", row.item_index) });
            }
        }
        Ok(out)
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    user_id: Option<serde_json::Value>,
    item_id: Option<serde_json::Value>,
    title: Option<String>,
    timestamp: Option<i64>,
}

fn id_string(v: Option<serde_json::Value>, field: &str, line: usize) -> Result<String, CorpusError> {
    match v {
        Some(serde_json::Value::String(s)) if !s.is_empty() => Ok(s),
        Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
        _ => Err(CorpusError::Parse { line, message: format!("missing or invalid {field}") }),
    }
}

/// Reads a TSV (`user_id, item_id, title, timestamp`, optional header) or
/// JSON-lines file. Catalog indices follow first appearance.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<(InteractionLog, ItemCatalog), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut log = InteractionLog::default();
    let mut catalog = ItemCatalog::new();

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(io_err)?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        let (user_id, item_id, title, timestamp) = match format {
            InputFormat::Tsv => {
                if line_no == 1 && trimmed.starts_with("user_id\t") {
                    continue;
                }
                let cols: Vec<&str> = trimmed.split('\t').collect();
                if cols.len() != 4 {
                    return Err(CorpusError::Parse {
                        line: line_no,
                        message: format!("expected 4 tab-separated columns, found {}", cols.len()),
                    });
                }
                let ts = cols[3].trim();
                if ts.is_empty() {
                    return Err(CorpusError::Parse { line: line_no, message: "missing timestamp".into() });
                }
                let ts: i64 = ts
                    .parse()
                    .map_err(|_| CorpusError::Parse { line: line_no, message: format!("invalid timestamp {ts:?}") })?;
                (cols[0].trim().to_string(), cols[1].trim().to_string(), cols[2].trim().to_string(), ts)
            }
            InputFormat::Jsonl => {
                let rec: JsonRecord = serde_json::from_str(trimmed)
                    .map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
                let ts = rec.timestamp.ok_or(CorpusError::Parse { line: line_no, message: "missing timestamp".into() })?;
                let title = rec.title.ok_or(CorpusError::Parse { line: line_no, message: "missing title".into() })?;
                (id_string(rec.user_id, "user_id", line_no)?, id_string(rec.item_id, "item_id", line_no)?, title.trim().to_string(), ts)
            }
        };
        if user_id.is_empty() || item_id.is_empty() {
            return Err(CorpusError::Parse { line: line_no, message: "empty user_id or item_id".into() });
        }
        if title.is_empty() {
            return Err(CorpusError::Parse { line: line_no, message: "empty title".into() });
        }
        catalog.insert(&item_id, &title)?;
        log.events.push(Interaction { user_id, item_id, timestamp });
    }
    Ok((log, catalog))
}

/// Alternately drops users and items with fewer than `min_interactions`
/// events until nothing changes.
pub fn kcore_filter(log: &InteractionLog, min_interactions: usize) -> InteractionLog {
    assert!(min_interactions >= 1, "min_interactions must be positive");
    let mut events: Vec<Interaction> = log.events.clone();
    loop {
        let before = events.len();
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *user_counts.entry(&e.user_id).or_default() += 1;
        }
        let keep_user: HashSet<String> =
            user_counts.into_iter().filter(|&(_, c)| c >= min_interactions).map(|(u, _)| u.to_string()).collect();
        events.retain(|e| keep_user.contains(&e.user_id));

        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *item_counts.entry(&e.item_id).or_default() += 1;
        }
        let keep_item: HashSet<String> =
            item_counts.into_iter().filter(|&(_, c)| c >= min_interactions).map(|(i, _)| i.to_string()).collect();
        events.retain(|e| keep_item.contains(&e.item_id));

        if events.len() == before {
            return InteractionLog { events };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user_id: String,
    pub train: Vec<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

impl UserSplit {
    /// Every item the user interacted with, in time order.
    pub fn all_items(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.extend(self.valid);
        v.extend(self.test);
        v
    }

    pub fn has_eval(&self) -> bool {
        self.valid.is_some() && self.test.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
}

impl SplitDataset {
    pub fn user(&self, user_id: &str) -> Option<&UserSplit> {
        self.users.iter().find(|u| u.user_id == user_id)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.users)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        Ok(Self { users: read_jsonl(path)? })
    }

    /// Drops the named users entirely.
    pub fn without_users(&self, dropped: &HashSet<String>) -> SplitDataset {
        SplitDataset { users: self.users.iter().filter(|u| !dropped.contains(&u.user_id)).cloned().collect() }
    }
}

/// Most recent event to test, second most recent to validation, the rest to
/// training. Users with fewer than three events keep everything in training.
///
/// Panics if an event references an item missing from `catalog`.
pub fn leave_one_out_split(log: &InteractionLog, catalog: &ItemCatalog) -> SplitDataset {
    let users = log
        .user_sequences()
        .into_iter()
        .map(|(user_id, seq)| {
            let mut items: Vec<usize> = seq
                .iter()
                .map(|e| catalog.index_of(&e.item_id).unwrap_or_else(|| panic!("item {} not in catalog", e.item_id)))
                .collect();
            if items.len() >= 3 {
                let test = items.pop();
                let valid = items.pop();
                UserSplit { user_id, train: items, valid, test }
            } else {
                UserSplit { user_id, train: items, valid: None, test: None }
            }
        })
        .collect();
    SplitDataset { users }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub indices: Vec<usize>,
    pub valid_mask: Vec<bool>,
}

impl PaddedSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Position of the most recent real item.
    pub fn last_valid(&self) -> Option<usize> {
        self.valid_mask.iter().rposition(|&v| v)
    }
}

/// Keeps the last `n` indices, left-padding with [`PAD_INDEX`] when shorter.
pub fn build_fixed_sequence(indices: &[usize], n: usize) -> PaddedSequence {
    assert!(n > 0, "sequence length must be positive");
    let tail = &indices[indices.len().saturating_sub(n)..];
    let pad = n - tail.len();
    let mut out = vec![PAD_INDEX; pad];
    out.extend_from_slice(tail);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, tail.len()));
    PaddedSequence { indices: out, valid_mask: mask }
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("serializable row");
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: n + 1, message: e.to_string() })?);
    }
    Ok(out)
}
