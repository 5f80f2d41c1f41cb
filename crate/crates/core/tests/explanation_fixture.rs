use std::sync::Arc;
use std::time::Duration;

use lane::explainer::{explain, parse_explanation, read_cot_prompt, render_cot_prompt, InteractionProbability};
use lane::llm::{LlmClient, LlmClientHandle, LlmError};

const PREFERENCES: [&str; 5] =
    ["Action and Adventure Games", "Sci-Fi Themed Games", "Indie Games with Unique Storylines", "Puzzle and Platform Games", "Games with Strong Narrative Elements"];
const WEIGHTS: [f64; 5] = [0.3561, 0.3094, 0.1041, 0.108, 0.1225];
const TARGET: &str = "Far Cry® 2: Fortune's Edition";
const HISTORY: [&str; 6] = ["Alan Wake", "Mass Effect 2", "Machinarium", "The Talos Principle", "Call of Duty®", "The Novelist"];

fn sample() -> String {
    std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/explanation_sample.md")).unwrap()
}

fn prefs() -> Vec<String> {
    PREFERENCES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn sample_answer_parses_into_four_steps() {
    let rec = parse_explanation(&sample(), 5).unwrap();
    assert_eq!(rec.step1.len(), 5);
    assert_eq!(rec.step1.iter().map(|a| a.preference.as_str()).collect::<Vec<_>>(), PREFERENCES);
    assert!(rec.step1.iter().all(|a| !a.analysis.is_empty()));
    assert!(rec.item_introduction.starts_with("'Far Cry® 2: Fortune's Edition' is a first-person shooter"));
    let fitness: Vec<(&str, f64)> = rec.fitness.iter().map(|f| (f.preference.as_str(), f.fitness)).collect();
    assert_eq!(fitness[0], ("Action and Adventure Games", 0.9));
    assert_eq!(fitness.iter().map(|f| f.1).collect::<Vec<_>>(), [0.9, 0.2, 0.3, 0.1, 0.7]);
    assert!(rec.fitness.iter().all(|f| !f.clamped && !f.reason.is_empty()));
    assert_eq!(rec.probability, InteractionProbability::Medium);
    assert!(!rec.probability_reason.is_empty());
    assert!(rec.recommendation.contains(TARGET));
    assert!(rec.echoed_weights.is_empty());
}

#[test]
fn weighted_fitness_of_the_sample_lands_in_medium() {
    // 0.3561·0.9 + 0.3094·0.2 + 0.1041·0.3 + 0.108·0.1 + 0.1225·0.7
    let expected: f64 = WEIGHTS.iter().zip([0.9, 0.2, 0.3, 0.1, 0.7]).map(|(w, f)| w * f).sum();
    assert!((expected - 0.51015).abs() < 1e-12);
    assert_eq!(InteractionProbability::from_expected_fitness(expected), InteractionProbability::Medium);
}

#[test]
fn prompt_pairs_the_sample_preferences_with_their_weights() {
    let p = render_cot_prompt(&HISTORY, &prefs(), &WEIGHTS, TARGET).unwrap();
    for (i, (pref, w)) in PREFERENCES.iter().zip(WEIGHTS).enumerate() {
        assert!(p.contains(&format!("{}. {pref} (weight {w:.4})", i + 1)), "{pref}");
    }
    assert!(p.contains("4. Puzzle and Platform Games (weight 0.1080)"));
    assert!(p.contains(TARGET));
    for step in ["Step 1:", "Step 2:", "Step 3:", "Step 4:"] {
        assert!(p.contains(step));
    }
    let req = read_cot_prompt(&p).unwrap();
    assert_eq!(req.weights, WEIGHTS);
    assert_eq!(req.target_title, TARGET);
    assert_eq!(req.titles, HISTORY);
}

struct Canned(String);

impl LlmClient for Canned {
    fn name(&self) -> &str {
        "canned"
    }

    fn complete(&self, _: &str) -> Result<String, LlmError> {
        Ok(self.0.clone())
    }
}

#[test]
fn answer_without_echoed_weights_gets_omega() {
    let client = LlmClientHandle::new(Arc::new(Canned(sample())), 2, Duration::from_secs(1));
    let omega = [0.35612, 0.30938, 0.10414, 0.10796, 0.12246];
    let e = explain("u1", &HISTORY, &prefs(), &omega, "far_cry_2", TARGET, &client).unwrap();
    assert_eq!(e.attempts, 1);
    let steps = e.steps.unwrap();
    assert_eq!(steps.echoed_weights, WEIGHTS.to_vec());
    assert_eq!(steps.probability, InteractionProbability::Medium);
}
