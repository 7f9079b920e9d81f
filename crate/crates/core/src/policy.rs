//! Next-concept selection by education value, and baseline policies.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{infer, Difficulty, EngineError, Kt2Params, PosteriorState, StudentHistory};
use crate::tree::{KcId, KcTree, TreeError};

/// Total posterior mastery after a hypothetical correct medium answer on
/// `kc` (`value`), next to the current total (`baseline`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EducationValue {
    pub kc: KcId,
    pub value: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub selected: KcId,
    pub per_candidate: Vec<EducationValue>,
    pub mastery_rank: usize,
}

impl SelectionOutcome {
    pub fn value_of(&self, kc: &KcId) -> Option<f64> {
        self.per_candidate.iter().find(|e| &e.kc == kc).map(|e| e.value)
    }
}

fn hypothetical_total(
    params: &Kt2Params,
    tree: &KcTree,
    history: &StudentHistory,
    candidate: &KcId,
) -> Result<f64, EngineError> {
    let next = history.append_observation(tree, candidate, true, Difficulty::Medium)?;
    Ok(infer(params, tree, &next)?.marginal.iter().sum())
}

pub fn education_value(
    params: &Kt2Params,
    tree: &KcTree,
    history: &StudentHistory,
    candidate: &KcId,
) -> Result<EducationValue, EngineError> {
    let baseline = infer(params, tree, history)?.marginal.iter().sum();
    let value = hypothetical_total(params, tree, history, candidate)?;
    Ok(EducationValue { kc: candidate.clone(), value, baseline })
}

/// Exhaustive search over leaves; ties go to the first leaf in document order.
pub fn select_best_kc(
    params: &Kt2Params,
    tree: &KcTree,
    history: &StudentHistory,
) -> Result<SelectionOutcome, EngineError> {
    let current = infer(params, tree, history)?;
    let state = current.to_state(tree);
    let baseline: f64 = current.marginal.iter().sum();
    let leaves = tree.leaves();
    let values: Vec<f64> = leaves
        .par_iter()
        .map(|kc| hypothetical_total(params, tree, history, kc))
        .collect::<Result<_, _>>()?;
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let selected = leaves[best].clone();
    let mastery_rank = mastery_rank(&state, &leaves, &selected)?;
    let per_candidate = leaves
        .into_iter()
        .zip(values)
        .map(|(kc, value)| EducationValue { kc, value, baseline })
        .collect();
    Ok(SelectionOutcome { selected, per_candidate, mastery_rank })
}

/// 1-based rank of `selected` among `leaves` by descending mastery; ties
/// rank the earlier leaf first.
pub fn mastery_rank(state: &PosteriorState, leaves: &[KcId], selected: &KcId) -> Result<usize, EngineError> {
    let pos = leaves
        .iter()
        .position(|k| k == selected)
        .ok_or_else(|| TreeError::UnknownKc(selected.clone()))?;
    let m = |k: &KcId| state.get(k.as_str()).ok_or_else(|| TreeError::UnknownKc(k.clone()));
    let mine = m(selected)?;
    let mut rank = 1;
    for (i, k) in leaves.iter().enumerate() {
        let v = m(k)?;
        if v > mine || (v == mine && i < pos) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Uniform choice over leaves from a seeded stream.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next(&mut self, tree: &KcTree) -> KcId {
        let leaves = tree.leaves();
        leaves[self.rng.gen_range(0..leaves.len())].clone()
    }
}

/// The `draw`-th pick of the random policy seeded with `seed`.
pub fn random_policy(tree: &KcTree, seed: u64, draw: usize) -> KcId {
    let mut p = RandomPolicy::new(seed);
    for _ in 0..draw {
        p.next(tree);
    }
    p.next(tree)
}

/// Serialized selection, one object per line in analysis output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub student_id: String,
    pub history_len: usize,
    pub selected: KcId,
    pub mastery_rank: usize,
    pub values: IndexMap<KcId, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_mastery: Option<f64>,
}

impl SelectionRecord {
    pub fn new(history: &StudentHistory, outcome: &SelectionOutcome) -> Self {
        SelectionRecord {
            student_id: history.student_id.clone(),
            history_len: history.len(),
            selected: outcome.selected.clone(),
            mastery_rank: outcome.mastery_rank,
            values: outcome.per_candidate.iter().map(|e| (e.kc.clone(), e.value)).collect(),
            initial_mastery: None,
        }
    }
}
