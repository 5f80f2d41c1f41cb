use std::path::Path;

use lane::corpus::{kcore_filter, leave_one_out_split, load_interactions, InputFormat, ItemCatalog, SplitDataset};
use serde_json::{json, Value};

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures"))
}

fn run(tsv: &str, k: usize) -> (usize, ItemCatalog, SplitDataset) {
    let (log, catalog) = load_interactions(&fixtures().join(tsv), InputFormat::Tsv).unwrap();
    let filtered = kcore_filter(&log, k);
    let catalog = catalog.restrict_to(&filtered);
    let split = leave_one_out_split(&filtered, &catalog);
    (filtered.len(), catalog, split)
}

/// Renders the split in the oracle script's JSON shape.
fn as_oracle_json(k: usize, events: usize, catalog: &ItemCatalog, split: &SplitDataset) -> Value {
    let id = |i: usize| catalog.get(i).unwrap().item_id.clone();
    let mut items: Vec<String> = catalog.items().iter().map(|c| c.item_id.clone()).collect();
    items.sort();
    let per_user: serde_json::Map<String, Value> = split
        .users
        .iter()
        .map(|u| (u.user_id.clone(), json!({"train": u.train.iter().map(|&i| id(i)).collect::<Vec<_>>(), "valid": u.valid.map(id), "test": u.test.map(id)})))
        .collect();
    json!({
        "min_interactions": k,
        "event_count": events,
        "users": split.users.iter().map(|u| u.user_id.clone()).collect::<Vec<_>>(),
        "items": items,
        "split": per_user,
        "train_events": split.users.iter().map(|u| u.train.len()).sum::<usize>(),
        "eval_users": split.users.iter().filter(|u| u.has_eval()).count(),
    })
}

fn expected(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(name)).unwrap()).unwrap()
}

#[test]
fn ten_users_five_core_matches_the_oracle() {
    let (events, catalog, split) = run("ten_users.tsv", 5);
    assert_eq!(as_oracle_json(5, events, &catalog, &split), expected("ten_users_5core_expected.json"));
    assert_eq!((events, split.users.len(), catalog.len()), (45, 8, 8));
}

#[test]
fn ten_users_without_filtering_matches_the_oracle() {
    let (events, catalog, split) = run("ten_users.tsv", 1);
    assert_eq!(as_oracle_json(1, events, &catalog, &split), expected("ten_users_1core_expected.json"));
}

#[test]
fn cascading_removal_matches_the_oracle() {
    let (events, catalog, split) = run("cascade_6x6.tsv", 3);
    assert_eq!(as_oracle_json(3, events, &catalog, &split), expected("cascade_6x6_3core_expected.json"));
}
