//! Generated corpora with known structure.
//!
//! `Rule`: every user stays inside one theme of `items_per_theme` items and
//! the next item's position within the theme is `(prev + prev_prev) mod
//! items_per_theme`, so the next item is a fixed function of the last two.
//! Titles are "<Theme> <Noun>", which makes the theme word the dominant
//! keyword of every history. `Random`: histories of distinct items drawn
//! uniformly, with no structure at all.
//!
//! `cold_items` adds catalog entries nobody interacts with; they only serve
//! as extra negatives.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, InteractionLog, ItemCatalog};

const THEMES: &[&str] = &["Crimson", "Azure", "Emerald", "Golden", "Violet", "Silver", "Amber", "Ivory"];
const NOUNS: &[&str] =
    &["Lantern", "Harbor", "Orchard", "Compass", "Citadel", "Meadow", "Voyage", "Cipher", "Ember", "Glacier", "Canyon", "Falcon"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Rule,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub users: usize,
    pub themes: usize,
    pub items_per_theme: usize,
    pub cold_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { kind: SyntheticKind::Rule, users: 200, themes: 5, items_per_theme: 10, cold_items: 100, min_len: 8, max_len: 14, seed: 0 }
    }
}

fn title(theme: usize, local: usize) -> String {
    let t = THEMES[theme % THEMES.len()];
    let n = NOUNS[local % NOUNS.len()];
    let round = theme / THEMES.len() + (local / NOUNS.len()) * 100;
    if round == 0 {
        format!("{t} {n}")
    } else {
        format!("{t} {n} {round}")
    }
}

/// Item ids are `t<theme>_<local>` for themed items and `cold<k>` for cold ones.
pub fn generate(config: &SyntheticConfig) -> (InteractionLog, ItemCatalog) {
    assert!(config.themes > 0 && config.items_per_theme >= 2, "need at least one theme of two items");
    assert!(config.min_len >= 1 && config.min_len <= config.max_len, "bad length range");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut catalog = ItemCatalog::new();
    for theme in 0..config.themes {
        for local in 0..config.items_per_theme {
            catalog.insert(&format!("t{theme}_{local}"), &title(theme, local)).expect("unique synthetic ids");
        }
    }
    for k in 0..config.cold_items {
        catalog.insert(&format!("cold{k}"), &format!("Archive Shelf Entry {k}")).expect("unique synthetic ids");
    }
    let themed = config.themes * config.items_per_theme;
    let mut events = Vec::new();
    for u in 0..config.users {
        let user_id = format!("user{u:04}");
        let len = rng.gen_range(config.min_len..=config.max_len);
        let items: Vec<String> = match config.kind {
            SyntheticKind::Rule => {
                let theme = u % config.themes;
                let k = config.items_per_theme;
                let (mut a, mut b) = loop {
                    let pair = (rng.gen_range(0..k), rng.gen_range(0..k));
                    if pair != (0, 0) {
                        break pair;
                    }
                };
                let mut seq = vec![a, b];
                while seq.len() < len {
                    let c = (a + b) % k;
                    seq.push(c);
                    (a, b) = (b, c);
                }
                seq.truncate(len);
                seq.into_iter().map(|l| format!("t{theme}_{l}")).collect()
            }
            SyntheticKind::Random => {
                let len = len.min(themed);
                sample(&mut rng, themed, len).into_iter().map(|i| format!("t{}_{}", i / config.items_per_theme, i % config.items_per_theme)).collect()
            }
        };
        for (t, item_id) in items.into_iter().enumerate() {
            events.push(Interaction { user_id: user_id.clone(), item_id, timestamp: 1_000 + t as i64 });
        }
    }
    (InteractionLog { events }, catalog)
}
