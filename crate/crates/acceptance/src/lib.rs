//! Independent oracles and a small reporting harness for the acceptance run.

use std::collections::HashMap;
use std::time::Instant;

use kctutor_core::engine::InteractionRecord;
use kctutor_core::tree::NodeRecord;
use kctutor_core::{Difficulty, KcId, KcTree, Kt2Params, StudentHistory};
use rand::Rng;

/// Posterior marginals by brute force over all `2^n` mastery assignments,
/// keyed by node id.
pub fn enumerate_marginals(tree: &KcTree, params: &Kt2Params, history: &StudentHistory) -> HashMap<String, f64> {
    let nodes = tree.nodes();
    let n = nodes.len();
    assert!(n <= 20, "enumeration is exponential");
    let pos: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, x)| (x.id.as_str(), i)).collect();
    let mut mass = vec![0.0f64; n];
    let mut total = 0.0f64;
    for assignment in 0u32..(1 << n) {
        let on = |i: usize| assignment >> i & 1 == 1;
        let mut p = 1.0;
        for (i, node) in nodes.iter().enumerate() {
            let g = params.gamma[&node.id];
            let parent_on = node.parent.as_ref().map(|q| on(pos[q.as_str()])).unwrap_or(false);
            p *= match (parent_on, on(i)) {
                (true, true) => 1.0,
                (true, false) => 0.0,
                (false, true) => g,
                (false, false) => 1.0 - g,
            };
        }
        if p == 0.0 {
            continue;
        }
        for r in &history.records {
            let pc = if on(pos[r.kc.as_str()]) { params.r(r.difficulty) } else { params.epsilon };
            p *= if r.correct { pc } else { 1.0 - pc };
        }
        total += p;
        for (i, m) in mass.iter_mut().enumerate() {
            if on(i) {
                *m += p;
            }
        }
    }
    nodes.iter().zip(&mass).map(|(x, m)| (x.id.0.clone(), m / total)).collect()
}

/// Node `i` attaches to a uniformly chosen earlier node.
pub fn random_tree(rng: &mut impl Rng, n: usize) -> KcTree {
    let mut recs = vec![NodeRecord { id: "n0".into(), name: "n0".into(), parent: None }];
    for i in 1..n {
        let p = rng.gen_range(0..i);
        recs.push(NodeRecord { id: format!("n{i}"), name: format!("n{i}"), parent: Some(format!("n{p}")) });
    }
    KcTree::from_records(&recs).expect("random tree is valid")
}

pub fn random_params(rng: &mut impl Rng, tree: &KcTree) -> Kt2Params {
    let gamma = tree.nodes().iter().map(|n| (n.id.clone(), rng.gen_range(0.05..0.95))).collect();
    let mut e: Vec<f64> = (0..4).map(|_| rng.gen_range(0.02..0.98)).collect();
    e.sort_by(f64::total_cmp);
    Kt2Params { gamma, epsilon: e[0], r_hard: e[1], r_med: e[2], r_easy: e[3] }
}

pub fn random_history(rng: &mut impl Rng, tree: &KcTree, len: usize) -> StudentHistory {
    let leaves = tree.leaves();
    let mut h = StudentHistory::new("s");
    for _ in 0..len {
        let kc = leaves[rng.gen_range(0..leaves.len())].clone();
        let difficulty = Difficulty::ALL[rng.gen_range(0..3)];
        h.records.push(InteractionRecord { kc, correct: rng.gen_bool(0.6), difficulty });
    }
    h
}

/// R(0.5) with leaves L1, L2 (0.4); eps 0.2, r = 0.9 / 0.8 / 0.7.
pub fn three_node() -> (KcTree, Kt2Params) {
    let tree = kctutor_core::load_tree(
        "{\"id\":\"R\",\"name\":\"root\",\"parent\":null}\n\
         {\"id\":\"L1\",\"name\":\"left\",\"parent\":\"R\"}\n\
         {\"id\":\"L2\",\"name\":\"right\",\"parent\":\"R\"}\n",
    )
    .expect("valid tree");
    let mut params = Kt2Params::uniform(&tree, 0.4, 0.2, 0.9, 0.8, 0.7);
    params.gamma.insert(KcId::from("R"), 0.5);
    (tree, params)
}

/// Collects one PASS/FAIL line per criterion.
#[derive(Default)]
pub struct Harness {
    failures: Vec<u32>,
}

impl Harness {
    /// Runs `check`, which returns whether it passed and a detail line.
    pub fn run(&mut self, id: u32, title: &str, check: impl FnOnce() -> Result<String, String>) {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(panic_message(e)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {title}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {title}: {detail} [{secs:.2}s]");
                self.failures.push(id);
            }
        }
    }

    pub fn finish(self) -> ! {
        if self.failures.is_empty() {
            println!("acceptance: all criteria passed");
            std::process::exit(0);
        }
        println!("acceptance: failed criteria {:?}", self.failures);
        std::process::exit(1);
    }
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = e.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".into()
    }
}

/// `Ok(detail)` when `cond` holds, `Err(detail)` otherwise.
pub fn verdict(cond: bool, detail: String) -> Result<String, String> {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}
