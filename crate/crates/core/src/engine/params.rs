use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Difficulty, EngineError};
use crate::tree::{KcId, KcTree};

/// Transition and emission parameters.
///
/// Serializes to the params file format:
/// `{"gamma": {id: number}, "epsilon", "r_easy", "r_med", "r_hard"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kt2Params {
    pub gamma: BTreeMap<KcId, f64>,
    pub epsilon: f64,
    pub r_easy: f64,
    pub r_med: f64,
    pub r_hard: f64,
}

impl Kt2Params {
    /// Same `gamma` on every node of `tree`.
    pub fn uniform(tree: &KcTree, gamma: f64, epsilon: f64, r_easy: f64, r_med: f64, r_hard: f64) -> Self {
        Kt2Params {
            gamma: tree.nodes().iter().map(|n| (n.id.clone(), gamma)).collect(),
            epsilon,
            r_easy,
            r_med,
            r_hard,
        }
    }

    pub fn r(&self, d: Difficulty) -> f64 {
        match d {
            Difficulty::Easy => self.r_easy,
            Difficulty::Medium => self.r_med,
            Difficulty::Hard => self.r_hard,
        }
    }

    pub(crate) fn r_slots(&self) -> [f64; 3] {
        [self.r_easy, self.r_med, self.r_hard]
    }

    /// Dense gamma vector aligned with the tree's node order.
    pub(crate) fn dense_gamma(&self, tree: &KcTree) -> Result<Vec<f64>, EngineError> {
        tree.nodes()
            .iter()
            .map(|n| self.gamma.get(&n.id).copied().ok_or_else(|| EngineError::MissingGamma(n.id.clone())))
            .collect()
    }

    /// Every invariant: coverage, open-interval values, strict emission order.
    pub fn validate(&self, tree: &KcTree) -> Result<(), EngineError> {
        self.dense_gamma(tree)?;
        let open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(EngineError::InvalidParams(format!("{name} = {v} outside (0, 1)")))
            }
        };
        for (k, &g) in &self.gamma {
            open(&format!("gamma[{k}]"), g)?;
        }
        open("epsilon", self.epsilon)?;
        open("r_hard", self.r_hard)?;
        open("r_med", self.r_med)?;
        open("r_easy", self.r_easy)?;
        if !(self.epsilon < self.r_hard && self.r_hard < self.r_med && self.r_med < self.r_easy) {
            return Err(EngineError::InvalidParams(format!(
                "ordering epsilon < r_hard < r_med < r_easy violated ({} , {}, {}, {})",
                self.epsilon, self.r_hard, self.r_med, self.r_easy
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }
}
