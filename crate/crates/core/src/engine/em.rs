//! Expectation-maximization for [`Kt2Params`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{infer, EngineError, Kt2Params, StudentHistory};
use crate::tree::KcTree;

/// Minimum spacing enforced between epsilon, r_hard, r_med and r_easy.
pub const ORDER_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub ll_tolerance: f64,
    pub min_prob: f64,
    pub max_prob: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iters: 200, ll_tolerance: 1e-6, min_prob: 1e-3, max_prob: 0.999, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_iters == 0 {
            return Err(EngineError::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.ll_tolerance >= 0.0) {
            return Err(EngineError::InvalidConfig("ll_tolerance must be nonnegative".into()));
        }
        if !(0.0 < self.min_prob && self.min_prob < self.max_prob && self.max_prob < 1.0) {
            return Err(EngineError::InvalidConfig("need 0 < min_prob < max_prob < 1".into()));
        }
        if self.max_prob - self.min_prob <= 3.0 * ORDER_GAP {
            return Err(EngineError::InvalidConfig("probability range too narrow for ordering gap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmFit {
    pub params: Kt2Params,
    /// Log-likelihood before each M-step, plus the value at the returned params.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
struct Stats {
    on_off: Vec<f64>,
    parent_off: Vec<f64>,
    root_on: f64,
    students: f64,
    // Per difficulty slot: mastery-weighted correct count and attempt count.
    r_num: [f64; 3],
    r_den: [f64; 3],
    e_num: f64,
    e_den: f64,
    ll: f64,
}

impl Stats {
    fn zero(n: usize) -> Self {
        Stats {
            on_off: vec![0.0; n],
            parent_off: vec![0.0; n],
            root_on: 0.0,
            students: 0.0,
            r_num: [0.0; 3],
            r_den: [0.0; 3],
            e_num: 0.0,
            e_den: 0.0,
            ll: 0.0,
        }
    }

    fn add(&mut self, o: &Stats) {
        for (a, b) in self.on_off.iter_mut().zip(&o.on_off) {
            *a += b;
        }
        for (a, b) in self.parent_off.iter_mut().zip(&o.parent_off) {
            *a += b;
        }
        self.root_on += o.root_on;
        self.students += o.students;
        for k in 0..3 {
            self.r_num[k] += o.r_num[k];
            self.r_den[k] += o.r_den[k];
        }
        self.e_num += o.e_num;
        self.e_den += o.e_den;
        self.ll += o.ll;
    }
}

fn e_step(params: &Kt2Params, tree: &KcTree, histories: &[StudentHistory]) -> Result<Stats, EngineError> {
    let root = tree.root_index();
    let per: Vec<Stats> = histories
        .par_iter()
        .map(|h| {
            let inf = infer(params, tree, h)?;
            let mut s = Stats::zero(tree.len());
            s.on_off.copy_from_slice(&inf.child_on_parent_off);
            s.parent_off.copy_from_slice(&inf.parent_off);
            s.root_on = inf.marginal[root];
            s.students = 1.0;
            for r in &h.records {
                let q = inf.marginal[tree.index_of(r.kc.as_str())?];
                let a = if r.correct { 1.0 } else { 0.0 };
                let k = r.difficulty.slot();
                s.r_num[k] += q * a;
                s.r_den[k] += q;
                s.e_num += (1.0 - q) * a;
                s.e_den += 1.0 - q;
            }
            s.ll = inf.log_likelihood;
            Ok(s)
        })
        .collect::<Result<_, EngineError>>()?;
    // Fixed reduction order keeps results bit-identical across thread counts.
    let mut total = Stats::zero(tree.len());
    for s in &per {
        total.add(s);
    }
    Ok(total)
}

fn ratio_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den > 1e-12 {
        num / den
    } else {
        fallback
    }
}

/// Projects `(epsilon, r_hard, r_med, r_easy)` onto the ordered set with
/// spacing [`ORDER_GAP`] inside `[min_prob, max_prob]`: clamp, then pool
/// adjacent violators on gap-shifted values.
pub fn project_emissions(values: [f64; 4], min_prob: f64, max_prob: f64) -> [f64; 4] {
    let mut shifted = [0.0; 4];
    for i in 0..4 {
        let lo = min_prob + i as f64 * ORDER_GAP;
        let hi = max_prob - (3 - i) as f64 * ORDER_GAP;
        shifted[i] = values[i].clamp(lo, hi) - i as f64 * ORDER_GAP;
    }
    // Pool-adjacent-violators for a non-decreasing fit with unit weights.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(4);
    for &v in &shifted {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().expect("two blocks");
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    let mut out = [0.0; 4];
    let mut i = 0;
    for (v, n) in blocks {
        for _ in 0..n {
            out[i] = v + i as f64 * ORDER_GAP;
            i += 1;
        }
    }
    out
}

fn m_step(prev: &Kt2Params, tree: &KcTree, s: &Stats, cfg: &EmConfig) -> Kt2Params {
    let clamp = |v: f64| v.clamp(cfg.min_prob, cfg.max_prob);
    let root = tree.root_index();
    let mut gamma = prev.gamma.clone();
    for (i, node) in tree.nodes().iter().enumerate() {
        let old = prev.gamma[&node.id];
        let v = if i == root {
            ratio_or(s.root_on, s.students, old)
        } else {
            ratio_or(s.on_off[i], s.parent_off[i], old)
        };
        gamma.insert(node.id.clone(), clamp(v));
    }
    let [r_easy, r_med, r_hard] = prev.r_slots();
    let eps = ratio_or(s.e_num, s.e_den, prev.epsilon);
    let r_easy = ratio_or(s.r_num[0], s.r_den[0], r_easy);
    let r_med = ratio_or(s.r_num[1], s.r_den[1], r_med);
    let r_hard = ratio_or(s.r_num[2], s.r_den[2], r_hard);
    let [epsilon, r_hard, r_med, r_easy] =
        project_emissions([eps, r_hard, r_med, r_easy], cfg.min_prob, cfg.max_prob);
    Kt2Params { gamma, epsilon, r_easy, r_med, r_hard }
}

/// Seeded starting point around fixed defaults.
pub fn initial_params(tree: &KcTree, cfg: &EmConfig) -> Kt2Params {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jitter = || rng.gen_range(-0.02..=0.02);
    let gamma = tree.nodes().iter().map(|n| (n.id.clone(), 0.5 + jitter())).collect();
    let eps = 0.25 + jitter();
    let r_hard = 0.6 + jitter();
    let r_med = 0.75 + jitter();
    let r_easy = 0.9 + jitter();
    let [epsilon, r_hard, r_med, r_easy] =
        project_emissions([eps, r_hard, r_med, r_easy], cfg.min_prob, cfg.max_prob);
    Kt2Params { gamma, epsilon, r_easy, r_med, r_hard }
}

/// Fits parameters to a cohort by EM from the seeded initialization.
pub fn fit_em(tree: &KcTree, histories: &[StudentHistory], cfg: &EmConfig) -> Result<EmFit, EngineError> {
    cfg.validate()?;
    if histories.iter().all(|h| h.records.is_empty()) {
        return Err(EngineError::DegenerateCohort);
    }
    let mut params = initial_params(tree, cfg);
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.max_iters + 1);
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let stats = e_step(&params, tree, histories)?;
        if !stats.ll.is_finite() {
            return Err(EngineError::NonFinite(iterations));
        }
        if let Some(&last) = trace.last() {
            if (stats.ll - last).abs() <= cfg.ll_tolerance {
                trace.push(stats.ll);
                converged = true;
                break;
            }
        }
        trace.push(stats.ll);
        if iterations == cfg.max_iters {
            break;
        }
        params = m_step(&params, tree, &stats, cfg);
        iterations += 1;
    }
    Ok(EmFit { params, trace, iterations, converged })
}
