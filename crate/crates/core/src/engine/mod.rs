//! Hidden Markov tree knowledge tracer.
//!
//! Latent binary mastery `K_c` per concept, coupled along the tree (a
//! mastered parent implies mastered children; otherwise the child is
//! mastered with probability `gamma_c`). Each answer depends only on the
//! mastery of its concept: correct with `r_d` when mastered (by difficulty),
//! with `epsilon` otherwise.

mod em;
mod inference;
mod params;

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{KcId, KcTree, TreeError};

pub use em::{fit_em, EmConfig, EmFit};
pub use inference::{infer, infer_posteriors, log_likelihood, prior_marginals, Inference};
pub use params::Kt2Params;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("missing gamma entry for concept {0:?}")]
    MissingGamma(KcId),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("concept {0:?} is not a leaf")]
    NotLeaf(KcId),
    #[error("history has zero probability under the parameters")]
    ImpossibleEvidence,
    #[error("degenerate cohort: no observations")]
    DegenerateCohort,
    #[error("log-likelihood became non-finite at iteration {0}")]
    NonFinite(usize),
    #[error("line {line}: malformed history record: {source}")]
    MalformedHistory {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    #[default]
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub(crate) fn slot(self) -> usize {
        match self {
            Difficulty::Easy => 0,
            Difficulty::Medium => 1,
            Difficulty::Hard => 2,
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub kc: KcId,
    pub correct: bool,
    #[serde(default)]
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudentHistory {
    pub student_id: String,
    pub records: Vec<InteractionRecord>,
}

impl StudentHistory {
    pub fn new(student_id: impl Into<String>) -> Self {
        StudentHistory { student_id: student_id.into(), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Length-`t` prefix (the whole history when `t` exceeds its length).
    pub fn prefix(&self, t: usize) -> StudentHistory {
        StudentHistory {
            student_id: self.student_id.clone(),
            records: self.records[..t.min(self.records.len())].to_vec(),
        }
    }

    /// Returns a new history with one more record; `self` is untouched.
    pub fn append_observation(
        &self,
        tree: &KcTree,
        kc: &KcId,
        correct: bool,
        difficulty: Difficulty,
    ) -> Result<StudentHistory, EngineError> {
        if !tree.contains(kc.as_str()) {
            return Err(TreeError::UnknownKc(kc.clone()).into());
        }
        if !tree.is_leaf(kc.as_str()) {
            return Err(EngineError::NotLeaf(kc.clone()));
        }
        let mut next = self.clone();
        next.records.push(InteractionRecord { kc: kc.clone(), correct, difficulty });
        Ok(next)
    }
}

/// One line of the history file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryLine {
    pub student_id: String,
    pub kc: KcId,
    pub correct: bool,
    #[serde(default)]
    pub difficulty: Difficulty,
}

/// Parses line-delimited history records, grouping by student in order of
/// first appearance. Records without a difficulty are treated as medium.
pub fn load_histories(source: &str) -> Result<Vec<StudentHistory>, EngineError> {
    let mut out: Vec<StudentHistory> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HistoryLine = serde_json::from_str(line)
            .map_err(|source| EngineError::MalformedHistory { line: i + 1, source })?;
        let idx = *slot.entry(rec.student_id.clone()).or_insert_with(|| {
            out.push(StudentHistory::new(rec.student_id.clone()));
            out.len() - 1
        });
        out[idx].records.push(InteractionRecord {
            kc: rec.kc,
            correct: rec.correct,
            difficulty: rec.difficulty,
        });
    }
    Ok(out)
}

pub fn histories_to_jsonl(histories: &[StudentHistory]) -> String {
    let mut out = String::new();
    for h in histories {
        for r in &h.records {
            let line = HistoryLine {
                student_id: h.student_id.clone(),
                kc: r.kc.clone(),
                correct: r.correct,
                difficulty: r.difficulty,
            };
            out.push_str(&serde_json::to_string(&line).expect("history line serializes"));
            out.push('\n');
        }
    }
    out
}

/// Checks that every record references a leaf of `tree`.
pub fn check_history(tree: &KcTree, history: &StudentHistory) -> Result<(), EngineError> {
    for r in &history.records {
        if !tree.contains(r.kc.as_str()) {
            return Err(TreeError::UnknownKc(r.kc.clone()).into());
        }
        if !tree.is_leaf(r.kc.as_str()) {
            return Err(EngineError::NotLeaf(r.kc.clone()));
        }
    }
    Ok(())
}

/// Posterior mastery `p(K_c = 1 | history)` for every node, in tree order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PosteriorState {
    pub mastery: IndexMap<KcId, f64>,
}

impl PosteriorState {
    pub fn get(&self, kc: &str) -> Option<f64> {
        self.mastery.get(kc).copied()
    }

    /// Sum of mastery over all nodes, internal and leaf.
    pub fn total(&self) -> f64 {
        self.mastery.values().sum()
    }

    /// Mastery of the given concepts, in the given order.
    pub fn restricted(&self, kcs: &[KcId]) -> Vec<(KcId, f64)> {
        kcs.iter().filter_map(|k| self.get(k.as_str()).map(|m| (k.clone(), m))).collect()
    }
}

/// `p(correct | history)` on `kc` at `difficulty`.
pub fn predict_correctness(
    state: &PosteriorState,
    params: &Kt2Params,
    kc: &KcId,
    difficulty: Difficulty,
) -> Result<f64, EngineError> {
    let m = state.get(kc.as_str()).ok_or_else(|| TreeError::UnknownKc(kc.clone()))?;
    Ok((1.0 - m) * params.epsilon + m * params.r(difficulty))
}
