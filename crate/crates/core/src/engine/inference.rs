//! Exact upward-downward inference in log space.

use indexmap::IndexMap;

use super::{check_history, EngineError, Kt2Params, PosteriorState, StudentHistory};
use crate::tree::KcTree;

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
fn ln(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else {
        x.ln()
    }
}

/// Full result of one upward-downward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    /// `p(K_c = 1 | h)` per node, in tree order.
    pub marginal: Vec<f64>,
    /// `p(K_c = 1, K_parent = 0 | h)` per node (0 for the root).
    pub child_on_parent_off: Vec<f64>,
    /// `p(K_parent = 0 | h)` per node (0 for the root).
    pub parent_off: Vec<f64>,
    /// `log p(answers)`.
    pub log_likelihood: f64,
}

impl Inference {
    pub fn to_state(&self, tree: &KcTree) -> PosteriorState {
        let mastery: IndexMap<_, _> =
            tree.nodes().iter().zip(&self.marginal).map(|(n, &m)| (n.id.clone(), m)).collect();
        PosteriorState { mastery }
    }
}

/// Runs inference on `history`; records must reference leaves of `tree`.
pub fn infer(params: &Kt2Params, tree: &KcTree, history: &StudentHistory) -> Result<Inference, EngineError> {
    check_history(tree, history)?;
    let gamma = params.dense_gamma(tree)?;
    let n = tree.len();

    // Per-node log evidence for K = 0 / K = 1.
    let mut log_e = vec![[0.0f64; 2]; n];
    let r = params.r_slots();
    let (ln_eps, ln_not_eps) = (ln(params.epsilon), ln(1.0 - params.epsilon));
    let ln_r: Vec<(f64, f64)> = r.iter().map(|&x| (ln(x), ln(1.0 - x))).collect();
    for rec in &history.records {
        let i = tree.index_of(rec.kc.as_str())?;
        let (lr, lnr) = ln_r[rec.difficulty.slot()];
        if rec.correct {
            log_e[i][0] += ln_eps;
            log_e[i][1] += lr;
        } else {
            log_e[i][0] += ln_not_eps;
            log_e[i][1] += lnr;
        }
    }

    let ln_gamma: Vec<(f64, f64)> = gamma.iter().map(|&g| (ln(1.0 - g), ln(g))).collect();
    let topo = tree.topo_order();

    // Upward: log_beta = normalized log p(subtree evidence | K_c), msg = what c sends its parent.
    let mut log_beta = log_e;
    let mut log_msg = vec![[0.0f64; 2]; n];
    let mut log_scale = 0.0;
    for &c in topo.iter().rev() {
        let b = log_beta[c];
        let z = lse2(b[0], b[1]);
        if z == f64::NEG_INFINITY {
            return Err(EngineError::ImpossibleEvidence);
        }
        let b = [b[0] - z, b[1] - z];
        log_beta[c] = b;
        log_scale += z;
        if let Some(p) = tree.parent_index(c) {
            let (l_off, l_on) = ln_gamma[c];
            // Parent mastered: child mastered with certainty.
            let m1 = b[1];
            let m0 = lse2(l_off + b[0], l_on + b[1]);
            log_msg[c] = [m0, m1];
            log_beta[p][0] += m0;
            log_beta[p][1] += m1;
        }
    }

    let root = tree.root_index();
    let (l_off, l_on) = ln_gamma[root];
    let joint = [l_off + log_beta[root][0], l_on + log_beta[root][1]];
    let z = lse2(joint[0], joint[1]);
    if z == f64::NEG_INFINITY {
        return Err(EngineError::ImpossibleEvidence);
    }
    let log_likelihood = z + log_scale;

    let mut marginal = vec![0.0; n];
    let mut child_on_parent_off = vec![0.0; n];
    let mut parent_off = vec![0.0; n];
    marginal[root] = (joint[1] - z).exp();
    let mut off = vec![0.0; n];
    off[root] = (joint[0] - z).exp();

    // Downward: p(K_c, K_p | h) = p(K_p | h) * T(K_c | K_p) * beta_c(K_c) / msg_c(K_p).
    for &c in topo.iter().skip(1) {
        let p = tree.parent_index(c).expect("non-root has a parent");
        let (l_off, l_on) = ln_gamma[c];
        let (p_on, p_off) = (marginal[p], off[p]);
        let b = log_beta[c];
        let msg = log_msg[c];
        let (on_given_off, off_given_off) = if p_off > 0.0 {
            ((l_on + b[1] - msg[0]).exp(), (l_off + b[0] - msg[0]).exp())
        } else {
            (0.0, 0.0)
        };
        let joint_on_off = p_off * on_given_off;
        marginal[c] = p_on + joint_on_off;
        off[c] = p_off * off_given_off;
        child_on_parent_off[c] = joint_on_off;
        parent_off[c] = p_off;
    }

    Ok(Inference { marginal, child_on_parent_off, parent_off, log_likelihood })
}

/// Exact posterior mastery for every node given `history`.
pub fn infer_posteriors(
    params: &Kt2Params,
    tree: &KcTree,
    history: &StudentHistory,
) -> Result<PosteriorState, EngineError> {
    Ok(infer(params, tree, history)?.to_state(tree))
}

/// Prior mastery, computed top-down from the transition law.
pub fn prior_marginals(params: &Kt2Params, tree: &KcTree) -> Result<PosteriorState, EngineError> {
    let gamma = params.dense_gamma(tree)?;
    let mut m = vec![0.0; tree.len()];
    for &c in tree.topo_order() {
        m[c] = match tree.parent_index(c) {
            None => gamma[c],
            Some(p) => m[p] + (1.0 - m[p]) * gamma[c],
        };
    }
    let mastery = tree.nodes().iter().zip(m).map(|(n, v)| (n.id.clone(), v)).collect();
    Ok(PosteriorState { mastery })
}

/// Sum over students of `log p(answers)`, reduced in input order.
pub fn log_likelihood(
    params: &Kt2Params,
    tree: &KcTree,
    histories: &[StudentHistory],
) -> Result<f64, EngineError> {
    use rayon::prelude::*;
    let per: Vec<f64> = histories
        .par_iter()
        .map(|h| infer(params, tree, h).map(|i| i.log_likelihood))
        .collect::<Result<_, _>>()?;
    Ok(per.iter().sum())
}
