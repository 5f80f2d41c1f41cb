//! Central-difference gradient checking against the tape's analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Every trainable `(param, index)` pair in `store`.
pub fn all_entries(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.get(id).data().len()).map(move |k| (id, k)))
        .collect()
}

/// `count` entries drawn without replacement, at least one from every
/// trainable parameter when `count` allows it.
pub fn sample_entries(store: &ParamStore, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        if picked.len() < count {
            let len = store.get(id).data().len();
            picked.push((id, rand::Rng::gen_range(&mut rng, 0..len)));
        }
    }
    let mut rest: Vec<_> = all_entries(store).into_iter().filter(|e| !picked.contains(e)).collect();
    rest.shuffle(&mut rng);
    picked.extend(rest.into_iter().take(count.saturating_sub(picked.len())));
    picked
}

/// Compares analytic and central-difference gradients of the scalar `f` at
/// the given entries. `f` must be deterministic (no dropout).
pub fn check<F>(store: &mut ParamStore, entries: &[(ParamId, usize)], eps: f64, f: F) -> Vec<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out)
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.value(out)[(0, 0)]
    };
    entries
        .iter()
        .map(|&(id, k)| {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            GradCheck { param: store.name(id).to_string(), index: k, analytic: analytic.entry(id, k), numeric: (up - down) / (2.0 * eps) }
        })
        .collect()
}
