use std::path::Path;

use lane::config::RunConfig;
use lane::corpus::SplitDataset;
use lane::harness::{embed_preferences, run_command, Command, Manifest, MetricsFile, SweepRow, CODE_VERSION};
use lane::preference::{PreferenceSet, PreferenceSource};
use lane::text_encoder::EncoderHandle;

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn synthetic_config(run_dir: &Path, extra: &[&str]) -> RunConfig {
    let toml = "seed = 3\n\
        [corpus]\nsource = \"synthetic\"\nkeep_cold_items = true\n\
        [corpus.synthetic]\nusers = 40\n\
        [encoder]\ndim = 12\n\
        [sequence]\nn = 12\n\
        [alignment]\nh = 2\nd_k = 6\n\
        [trainer]\nmax_epochs = 2\nbatch_size = 16\n";
    let mut overrides = vec![format!("run_dir = {:?}", run_dir.display().to_string())];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml_str(toml, &overrides, None).unwrap()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn prepare_on_the_ten_user_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!("[corpus]\npath = {:?}\nmin_interactions = 5\n", fixture("ten_users.tsv"));
    let config = RunConfig::from_toml_str(&toml, &[format!("run_dir = {:?}", dir.path().display().to_string())], None).unwrap();
    run_command(Command::Prepare, &config).unwrap();
    let split = SplitDataset::read_jsonl(&dir.path().join("prepare/split.jsonl")).unwrap();
    assert_eq!(split.users.len(), 8);
    assert_eq!(split.users.iter().map(|u| u.train.len()).sum::<usize>(), 29);
    assert_eq!(split.users.iter().filter(|u| u.has_eval()).count(), 8);
    let m = manifest(&dir.path().join("prepare"));
    assert_eq!(m.command, "prepare");
    assert_eq!(m.config_hash, config.hash());
    assert_eq!(m.code_version, CODE_VERSION);
    assert_eq!(m.summary["interactions"], 45);
    assert_eq!(m.summary["items"], 8);
}

#[test]
fn evaluate_without_a_checkpoint_points_at_train() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_config(dir.path(), &[]);
    run_command(Command::Prepare, &config).unwrap();
    run_command(Command::ExtractPrefs, &config).unwrap();
    let err = run_command(Command::Evaluate, &config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("`lane train"), "{err}");
}

#[test]
fn full_pipeline_writes_a_manifest_in_every_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_config(dir.path(), &[]);
    for c in [Command::Prepare, Command::ExtractPrefs, Command::Train, Command::Evaluate, Command::Explain] {
        run_command(c, &config).unwrap();
        let m = manifest(&dir.path().join(c.dir_name()));
        assert_eq!((m.command.as_str(), m.config_hash.as_str(), m.seed), (c.name(), config.hash().as_str(), 3));
    }
    let metrics: MetricsFile = serde_json::from_str(&std::fs::read_to_string(dir.path().join("evaluate/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.metrics.iter().map(|m| m.k).collect::<Vec<_>>(), [5, 10]);
    assert_eq!(metrics.users, 40);
    let per_user = std::fs::read_to_string(dir.path().join("evaluate/per_user.csv")).unwrap();
    assert_eq!(per_user.lines().count(), 41);
    let log = std::fs::read_to_string(dir.path().join("train/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let explanations = lane::explainer::read_explanations(&dir.path().join("explain/explanations.jsonl")).unwrap();
    assert_eq!(explanations.len(), 20);
    assert!(explanations.iter().all(|e| e.is_available()));
}

#[test]
fn changed_model_config_is_refused_at_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_config(dir.path(), &[]);
    for c in [Command::Prepare, Command::ExtractPrefs, Command::Train] {
        run_command(c, &config).unwrap();
    }
    let other = synthetic_config(dir.path(), &["backbone.blocks = 1"]);
    let err = run_command(Command::Evaluate, &other).unwrap_err();
    assert!(err.to_string().contains("rerun `lane train`"), "{err}");
}

#[test]
fn sweep_over_the_number_of_preferences() {
    let dir = tempfile::tempdir().unwrap();
    let config = synthetic_config(dir.path(), &[]);
    assert_eq!(config.sweep.parameter, "preferences.m");
    run_command(Command::Sweep, &config).unwrap();
    let sweep = dir.path().join("sweep");
    let rows: Vec<SweepRow> = serde_json::from_str(&std::fs::read_to_string(sweep.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["1", "3", "5", "10", "15"]);
    let csv = std::fs::read_to_string(sweep.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("preferences.m,hr@5,ndcg@5,hr@10,ndcg@10"));
    assert_eq!(csv.lines().count(), 6);
    assert!(std::fs::read_to_string(sweep.join("preferences.m.svg")).unwrap().starts_with("<svg"));
    let base = serde_json::to_value(&config).unwrap();
    for m in [1, 3, 5, 10, 15] {
        let sub = sweep.join(format!("preferences.m={m}"));
        let ckpt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sub.join("train/checkpoint.json")).unwrap()).unwrap();
        let mut used = ckpt["config"].clone();
        assert_eq!(used["preferences"]["m"], m);
        for key in ["m", "cache"] {
            used["preferences"][key] = base["preferences"][key].clone();
        }
        used["run_dir"] = base["run_dir"].clone();
        used["encoder"]["cache_dir"] = base["encoder"]["cache_dir"].clone();
        assert_eq!(used, base, "m = {m}: only the swept key may differ");
        let prefs: Vec<PreferenceSet> = std::fs::read_to_string(sub.join("preferences/preferences.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(prefs.iter().all(|p| p.preferences.len() == m));
    }
}

#[test]
fn preference_rows_follow_preference_order() {
    let encoder = EncoderHandle::mock(8, 1);
    let set = PreferenceSet {
        user_id: "u".into(),
        preferences: vec!["Slow strategy".into(), "Racing".into(), "Co-op puzzles".into()],
        source: PreferenceSource::Manual,
        raw_response: String::new(),
        prompt_hash: String::new(),
    };
    let map = embed_preferences(std::slice::from_ref(&set), &encoder).unwrap();
    let m = &map["u"];
    assert_eq!(m.rows(), 3);
    for (i, p) in set.preferences.iter().enumerate() {
        assert_eq!(m.row(i), encoder.encode_one(p).unwrap().as_slice());
    }
}
