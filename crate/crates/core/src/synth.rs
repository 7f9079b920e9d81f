//! Synthetic cohorts drawn from the tracer's own generative model, plus
//! matching question banks and verifier corpora.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::Question;
use crate::engine::{Difficulty, InteractionRecord, Kt2Params, StudentHistory};
use crate::generator::TemplateLibrary;
use crate::tree::{KcId, KcTree, NodeRecord};
use crate::verifier::CorpusPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Children per node at each depth; `[5, 6]` gives 5 groups of 6 leaves.
    pub branching: Vec<usize>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub epsilon: f64,
    pub r_easy: f64,
    pub r_med: f64,
    pub r_hard: f64,
    pub students: usize,
    pub records_per_student: usize,
    /// Relative frequency of easy / medium / hard practice.
    pub difficulty_weights: [f64; 3],
    pub questions_per_kc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            branching: vec![5, 6],
            gamma_min: 0.2,
            gamma_max: 0.6,
            epsilon: 0.2,
            r_easy: 0.9,
            r_med: 0.8,
            r_hard: 0.65,
            students: 500,
            records_per_student: 50,
            difficulty_weights: [0.25, 0.5, 0.25],
            questions_per_kc: 5,
            seed: 0,
        }
    }
}

/// Everything needed to exercise the full pipeline offline.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub tree: KcTree,
    pub params: Kt2Params,
    pub histories: Vec<StudentHistory>,
    pub questions: Vec<Question>,
    pub corpus: Vec<CorpusPair>,
    pub templates: TemplateLibrary,
}

/// Balanced tree: root `ROOT`, internal nodes `U-<i>`, leaves `KC-<j>`
/// numbered in document order. Leaf names come from the template library.
pub fn balanced_tree(branching: &[usize]) -> (KcTree, TemplateLibrary) {
    let mut records = vec![NodeRecord { id: "ROOT".into(), name: "all concepts".into(), parent: None }];
    let mut frontier = vec!["ROOT".to_string()];
    let (mut internal, mut leaf) = (0usize, 0usize);
    let mut leaf_ids = Vec::new();
    for (depth, &b) in branching.iter().enumerate() {
        let last = depth + 1 == branching.len();
        let mut next = Vec::new();
        for parent in &frontier {
            for _ in 0..b {
                let id = if last {
                    leaf += 1;
                    format!("KC-{}", leaf - 1)
                } else {
                    internal += 1;
                    format!("U-{}", internal - 1)
                };
                records.push(NodeRecord { id: id.clone(), name: format!("unit {id}"), parent: Some(parent.clone()) });
                if last {
                    leaf_ids.push(KcId::new(id.clone()));
                }
                next.push(id);
            }
        }
        frontier = next;
    }
    let templates = TemplateLibrary::synthetic(&leaf_ids);
    for r in records.iter_mut() {
        if let Some(f) = templates.family(&KcId::new(r.id.clone())) {
            r.name = f.name.clone();
        }
    }
    (KcTree::from_records(&records).expect("balanced tree is valid"), templates)
}

pub fn sample_params(tree: &KcTree, cfg: &SynthConfig, rng: &mut impl Rng) -> Kt2Params {
    let gamma = tree
        .nodes()
        .iter()
        .map(|n| (n.id.clone(), rng.gen_range(cfg.gamma_min..=cfg.gamma_max)))
        .collect();
    Kt2Params { gamma, epsilon: cfg.epsilon, r_easy: cfg.r_easy, r_med: cfg.r_med, r_hard: cfg.r_hard }
}

/// Draws one latent mastery assignment top-down, in tree node order.
pub fn sample_mastery(tree: &KcTree, params: &Kt2Params, rng: &mut impl Rng) -> Vec<bool> {
    let mut on = vec![false; tree.len()];
    for &i in tree.topo_order() {
        let node = &tree.nodes()[i];
        let parent_on = tree.parent_index(i).map(|p| on[p]).unwrap_or(false);
        on[i] = parent_on || rng.gen_bool(params.gamma[&node.id]);
    }
    on
}

/// Simulated practice: each record picks a uniform leaf and a weighted
/// difficulty, and its correctness follows the emission law.
pub fn simulate_cohort(
    tree: &KcTree,
    params: &Kt2Params,
    students: usize,
    records: usize,
    difficulty_weights: [f64; 3],
    rng: &mut impl Rng,
) -> Vec<StudentHistory> {
    let leaves = tree.leaves();
    let dist = WeightedIndex::new(difficulty_weights).expect("difficulty weights");
    (0..students)
        .map(|s| {
            let on = sample_mastery(tree, params, rng);
            let mut h = StudentHistory::new(format!("stu-{s:04}"));
            for _ in 0..records {
                let kc = leaves[rng.gen_range(0..leaves.len())].clone();
                let difficulty = Difficulty::ALL[dist.sample(rng)];
                let mastered = on[tree.index_of(kc.as_str()).expect("leaf")];
                let p = if mastered { params.r(difficulty) } else { params.epsilon };
                h.records.push(InteractionRecord { kc, correct: rng.gen_bool(p), difficulty });
            }
            h
        })
        .collect()
}

/// `per_kc` templated questions per leaf.
pub fn template_questions(tree: &KcTree, templates: &TemplateLibrary, per_kc: usize, seed: u64) -> Vec<Question> {
    let mut out = Vec::new();
    for kc in tree.leaves() {
        for j in 0..per_kc {
            let g = templates.generate(&kc, seed.wrapping_mul(1_000_003).wrapping_add(j as u64)).expect("registered");
            out.push(Question {
                id: format!("q-{}-{j}", kc.as_str()),
                kc: kc.clone(),
                text: g.question_text,
                difficulty: Difficulty::Medium,
            });
        }
    }
    out
}

pub fn template_corpus(tree: &KcTree, templates: &TemplateLibrary, per_kc: usize, seed: u64) -> Vec<CorpusPair> {
    template_questions(tree, templates, per_kc, seed)
        .into_iter()
        .map(|q| CorpusPair { kc: q.kc, question: q.text })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tree, templates) = balanced_tree(&cfg.branching);
    let params = sample_params(&tree, cfg, &mut rng);
    let histories =
        simulate_cohort(&tree, &params, cfg.students, cfg.records_per_student, cfg.difficulty_weights, &mut rng);
    let questions = template_questions(&tree, &templates, cfg.questions_per_kc, cfg.seed);
    let corpus = template_corpus(&tree, &templates, cfg.questions_per_kc, cfg.seed.wrapping_add(1));
    SynthDataset { tree, params, histories, questions, corpus, templates }
}
