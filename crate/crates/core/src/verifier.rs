//! Question/concept alignment verifier.
//!
//! Questions and concept names are embedded by an [`EmbeddingProvider`],
//! projected by two linear maps into a shared space, and compared by inner
//! product. Training minimizes an InfoNCE objective over in-batch and
//! sibling negatives with plain SGD. Scores standardize a question's logits
//! across the candidate set before a temperature-scaled sigmoid.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::fnv1a;
use crate::tree::{KcId, KcTree, TreeError};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("candidate set needs at least {need} concepts, got {got}")]
    TooFewCandidates { need: usize, got: usize },
    #[error("concept {0:?} is not in the candidate set")]
    NotCandidate(KcId),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("corpus pair {index}: concept {kc:?} is not a leaf of the tree")]
    NotLeaf { index: usize, kc: KcId },
    #[error("no negatives available for {0:?}")]
    NoNegatives(KcId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("line {line}: malformed corpus record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Deterministic text encoder with a fixed output dimension.
pub trait EmbeddingProvider: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
    fn spec(&self) -> ProviderSpec;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderSpec {
    NgramHash { n: usize, dim: usize },
}

impl ProviderSpec {
    pub fn build(&self) -> Arc<dyn EmbeddingProvider> {
        match *self {
            ProviderSpec::NgramHash { n, dim } => Arc::new(NgramHashEmbedder { n, dim }),
        }
    }
}

/// Character n-grams hashed into signed buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgramHashEmbedder {
    pub n: usize,
    pub dim: usize,
}

impl Default for NgramHashEmbedder {
    fn default() -> Self {
        NgramHashEmbedder { n: 3, dim: 256 }
    }
}

impl EmbeddingProvider for NgramHashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let padded: Vec<char> =
            std::iter::once(' ').chain(text.to_lowercase().chars()).chain(std::iter::once(' ')).collect();
        if text.trim().is_empty() || padded.len() < self.n {
            return v;
        }
        let mut buf = String::new();
        for w in padded.windows(self.n) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a(buf.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    fn spec(&self) -> ProviderSpec {
        ProviderSpec::NgramHash { n: self.n, dim: self.dim }
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { rows: n, cols: n, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| dot(row, x)).collect()
    }

    fn apply_sparse(&self, x: &[(usize, f64)]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| x.iter().map(|&(j, v)| row[j] * v).sum())
            .collect()
    }

    /// `self += scale * a b^T` with sparse `b`.
    fn add_outer_sparse(&mut self, scale: f64, a: &[f64], b: &[(usize, f64)]) {
        for (row, &ai) in self.data.chunks_exact_mut(self.cols).zip(a) {
            let s = scale * ai;
            for &(j, v) in b {
                row[j] += s * v;
            }
        }
    }

    fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks_exact(self.cols).map(<[f64]>::to_vec).collect()
    }

    fn from_rows(rows: &[Vec<f64>]) -> Result<Self, VerifierError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(VerifierError::InvalidModel("ragged projection matrix".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct VerifierModel {
    pub provider: Arc<dyn EmbeddingProvider>,
    pub q_proj: Matrix,
    pub c_proj: Matrix,
    pub tau: f64,
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierFile {
    pub dim: usize,
    pub tau: f64,
    pub q_proj: Vec<Vec<f64>>,
    pub c_proj: Vec<Vec<f64>>,
    pub provider: ProviderSpec,
}

impl VerifierModel {
    /// Identity projections over `provider`'s space.
    pub fn identity(provider: Arc<dyn EmbeddingProvider>, tau: f64) -> Self {
        let d = provider.dim();
        VerifierModel { provider, q_proj: Matrix::identity(d), c_proj: Matrix::identity(d), tau }
    }

    pub fn new(
        provider: Arc<dyn EmbeddingProvider>,
        q_proj: Matrix,
        c_proj: Matrix,
        tau: f64,
    ) -> Result<Self, VerifierError> {
        let d = provider.dim();
        if q_proj.cols != d || c_proj.cols != d {
            return Err(VerifierError::InvalidModel("projection input dimension differs from provider".into()));
        }
        if q_proj.rows != c_proj.rows || q_proj.rows == 0 {
            return Err(VerifierError::InvalidModel("projection output dimensions differ".into()));
        }
        if !(tau > 0.0) {
            return Err(VerifierError::InvalidModel(format!("tau must be positive, got {tau}")));
        }
        Ok(VerifierModel { provider, q_proj, c_proj, tau })
    }

    pub fn to_file(&self) -> VerifierFile {
        VerifierFile {
            dim: self.q_proj.rows,
            tau: self.tau,
            q_proj: self.q_proj.to_rows(),
            c_proj: self.c_proj.to_rows(),
            provider: self.provider.spec(),
        }
    }

    pub fn from_file(f: &VerifierFile) -> Result<Self, VerifierError> {
        let q = Matrix::from_rows(&f.q_proj)?;
        let c = Matrix::from_rows(&f.c_proj)?;
        if q.rows != f.dim {
            return Err(VerifierError::InvalidModel(format!("dim {} but {} projection rows", f.dim, q.rows)));
        }
        Self::new(f.provider.build(), q, c, f.tau)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VerifierError> {
        let f: VerifierFile =
            serde_json::from_str(text).map_err(|e| VerifierError::InvalidModel(e.to_string()))?;
        Self::from_file(&f)
    }

    pub fn project_question(&self, text: &str) -> Result<Vec<f64>, VerifierError> {
        if text.trim().is_empty() {
            return Err(VerifierError::EmptyQuestion);
        }
        Ok(self.q_proj.apply(&self.provider.embed(text)))
    }

    pub fn project_concept(&self, name: &str) -> Vec<f64> {
        self.c_proj.apply(&self.provider.embed(name))
    }

    /// Raw compatibility `g(x, c)`: projected question . projected concept name.
    pub fn logit(&self, question: &str, concept_name: &str) -> Result<f64, VerifierError> {
        Ok(dot(&self.project_question(question)?, &self.project_concept(concept_name)))
    }

    fn logits_for(&self, tree: &KcTree, question: &str, candidates: &[KcId]) -> Result<Vec<f64>, VerifierError> {
        let u = self.project_question(question)?;
        candidates
            .iter()
            .map(|k| {
                let name = tree.name(k.as_str()).ok_or_else(|| TreeError::UnknownKc(k.clone()))?;
                Ok(dot(&u, &self.project_concept(name)))
            })
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Below this spread every candidate scores 0.5.
pub const DEGENERATE_STD: f64 = 1e-9;

/// Standardized sigmoid scores: `sigmoid((g - mean) / (tau * std))` with
/// the population standard deviation over `logits`.
pub fn standardized_scores(logits: &[f64], tau: f64) -> Vec<f64> {
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let std = (logits.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return vec![0.5; logits.len()];
    }
    logits.iter().map(|g| sigmoid((g - mean) / (tau * std))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub kc: KcId,
    pub raw_logit: f64,
    pub mean: f64,
    pub std: f64,
    pub score: f64,
}

/// Alignment of `question` with `kc`, standardized over `candidates`.
pub fn alignment_score(
    model: &VerifierModel,
    tree: &KcTree,
    question: &str,
    kc: &KcId,
    candidates: &[KcId],
) -> Result<AlignmentScore, VerifierError> {
    alignment_scores(model, tree, question, candidates)?
        .into_iter()
        .find(|s| &s.kc == kc)
        .ok_or_else(|| VerifierError::NotCandidate(kc.clone()))
}

/// Scores for every candidate at once.
pub fn alignment_scores(
    model: &VerifierModel,
    tree: &KcTree,
    question: &str,
    candidates: &[KcId],
) -> Result<Vec<AlignmentScore>, VerifierError> {
    if candidates.len() < 2 {
        return Err(VerifierError::TooFewCandidates { need: 2, got: candidates.len() });
    }
    let logits = model.logits_for(tree, question, candidates)?;
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let std = (logits.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n).sqrt();
    let scores = standardized_scores(&logits, model.tau);
    Ok(candidates
        .iter()
        .zip(logits)
        .zip(scores)
        .map(|((kc, raw_logit), score)| AlignmentScore { kc: kc.clone(), raw_logit, mean, std, score })
        .collect())
}

/// First index attaining the maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Candidate with the largest raw logit; ties go to the earlier candidate.
pub fn identify_kc(
    model: &VerifierModel,
    tree: &KcTree,
    question: &str,
    candidates: &[KcId],
) -> Result<KcId, VerifierError> {
    if candidates.is_empty() {
        return Err(VerifierError::TooFewCandidates { need: 1, got: 0 });
    }
    let logits = model.logits_for(tree, question, candidates)?;
    Ok(candidates[argmax(&logits).expect("non-empty")].clone())
}

/// `-log softmax(positive)` over `[positive] ++ negatives`, max-shifted.
pub fn infonce_from_logits(positive: f64, negatives: &[f64]) -> f64 {
    let m = negatives.iter().copied().fold(positive, f64::max);
    let z: f64 = (positive - m).exp() + negatives.iter().map(|g| (g - m).exp()).sum::<f64>();
    m + z.ln() - positive
}

/// One training pair, also the line format of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub kc: KcId,
    pub question: String,
}

pub fn load_corpus(source: &str) -> Result<Vec<CorpusPair>, VerifierError> {
    source
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|source| VerifierError::Malformed { line: i + 1, source }))
        .collect()
}

pub fn corpus_to_jsonl(corpus: &[CorpusPair]) -> String {
    corpus.iter().map(|p| serde_json::to_string(p).expect("pair serializes") + "\n").collect()
}

/// Negatives per pair: distinct in-batch concepts other than its own, then
/// its hard negatives not already present.
fn batch_negatives(batch: &[&CorpusPair], hard: &[Vec<KcId>]) -> Vec<Vec<KcId>> {
    let mut in_batch: Vec<&KcId> = Vec::new();
    for p in batch {
        if !in_batch.contains(&&p.kc) {
            in_batch.push(&p.kc);
        }
    }
    batch
        .iter()
        .zip(hard)
        .map(|(p, h)| {
            let mut negs: Vec<KcId> = in_batch.iter().filter(|k| ***k != p.kc).map(|k| (*k).clone()).collect();
            for k in h {
                if *k != p.kc && !negs.contains(k) {
                    negs.push(k.clone());
                }
            }
            negs
        })
        .collect()
}

/// Mean InfoNCE loss of a batch, logits scaled by `1 / model.tau`.
pub fn infonce_loss(
    model: &VerifierModel,
    tree: &KcTree,
    batch: &[CorpusPair],
    hard_negatives: &[Vec<KcId>],
) -> Result<f64, VerifierError> {
    if batch.is_empty() {
        return Err(VerifierError::EmptyCorpus);
    }
    let refs: Vec<&CorpusPair> = batch.iter().collect();
    let hard: Vec<Vec<KcId>> = (0..batch.len()).map(|i| hard_negatives.get(i).cloned().unwrap_or_default()).collect();
    let negs = batch_negatives(&refs, &hard);
    let mut total = 0.0;
    for (p, n) in batch.iter().zip(&negs) {
        if n.is_empty() {
            return Err(VerifierError::NoNegatives(p.kc.clone()));
        }
        let mut ids = vec![p.kc.clone()];
        ids.extend(n.iter().cloned());
        let g: Vec<f64> = model.logits_for(tree, &p.question, &ids)?.iter().map(|x| x / model.tau).collect();
        total += infonce_from_logits(g[0], &g[1..]);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub seed: u64,
    pub hard_negatives_per_pair: usize,
}

impl Default for VerifierTrainConfig {
    fn default() -> Self {
        VerifierTrainConfig {
            epochs: 70,
            batch_size: 64,
            learning_rate: 1e-3,
            tau: 0.07,
            seed: 0,
            hard_negatives_per_pair: 1,
        }
    }
}

impl VerifierTrainConfig {
    pub fn validate(&self) -> Result<(), VerifierError> {
        if self.epochs == 0 {
            return Err(VerifierError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(VerifierError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tau > 0.0) {
            return Err(VerifierError::InvalidConfig("learning_rate and tau must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVerifier {
    pub model: VerifierModel,
    /// Mean loss over each epoch's pairs.
    pub loss_trace: Vec<f64>,
}

/// Trains identity-initialized projections over the default provider.
pub fn train_verifier(
    corpus: &[CorpusPair],
    tree: &KcTree,
    config: &VerifierTrainConfig,
) -> Result<TrainedVerifier, VerifierError> {
    train_verifier_with(Arc::new(NgramHashEmbedder::default()), corpus, tree, config)
}

pub fn train_verifier_with(
    provider: Arc<dyn EmbeddingProvider>,
    corpus: &[CorpusPair],
    tree: &KcTree,
    config: &VerifierTrainConfig,
) -> Result<TrainedVerifier, VerifierError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(VerifierError::EmptyCorpus);
    }
    for (index, p) in corpus.iter().enumerate() {
        if !tree.is_leaf(p.kc.as_str()) {
            return Err(VerifierError::NotLeaf { index, kc: p.kc.clone() });
        }
        if p.question.trim().is_empty() {
            return Err(VerifierError::EmptyQuestion);
        }
    }
    let mut siblings: HashMap<KcId, Vec<KcId>> = HashMap::new();
    for p in corpus {
        if !siblings.contains_key(&p.kc) {
            siblings.insert(p.kc.clone(), tree.siblings(p.kc.as_str())?);
        }
    }
    let distinct = siblings.len();
    if distinct < 2 && (config.hard_negatives_per_pair == 0 || siblings.values().all(Vec::is_empty)) {
        let kc = corpus[0].kc.clone();
        return Err(VerifierError::NoNegatives(kc));
    }

    let mut model = VerifierModel::identity(provider.clone(), config.tau);
    let sparse = |v: Vec<f64>| -> Vec<(usize, f64)> {
        v.into_iter().enumerate().filter(|(_, x)| *x != 0.0).collect()
    };
    let q_emb: Vec<Vec<(usize, f64)>> = corpus.iter().map(|p| sparse(provider.embed(&p.question))).collect();
    let mut c_emb: HashMap<KcId, Vec<(usize, f64)>> = HashMap::new();
    for node in tree.nodes() {
        c_emb.insert(node.id.clone(), sparse(provider.embed(&node.name)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let scale = 1.0 / config.tau;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_pairs) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&CorpusPair> = chunk.iter().map(|&i| &corpus[i]).collect();
            let hard: Vec<Vec<KcId>> = batch
                .iter()
                .map(|p| {
                    let sib = &siblings[&p.kc];
                    sib.choose_multiple(&mut rng, config.hard_negatives_per_pair.min(sib.len())).cloned().collect()
                })
                .collect();
            let negs = batch_negatives(&batch, &hard);

            // Projected concepts used anywhere in this batch.
            let mut v: HashMap<&KcId, Vec<f64>> = HashMap::new();
            for (p, n) in batch.iter().zip(&negs) {
                for k in std::iter::once(&p.kc).chain(n) {
                    if !v.contains_key(k) {
                        v.insert(k, model.c_proj.apply_sparse(&c_emb[k]));
                    }
                }
            }
            let dim = model.q_proj.rows;
            let mut grad_v: HashMap<&KcId, Vec<f64>> = HashMap::new();
            let mut grad_u: Vec<(Vec<f64>, usize)> = Vec::new();
            let mut used = 0usize;
            for ((&qi, p), n) in chunk.iter().zip(&batch).zip(&negs) {
                if n.is_empty() {
                    continue;
                }
                used += 1;
                let u = model.q_proj.apply_sparse(&q_emb[qi]);
                let ids: Vec<&KcId> = std::iter::once(&p.kc).chain(n.iter()).collect();
                let g: Vec<f64> = ids.iter().map(|k| scale * dot(&u, &v[k])).collect();
                epoch_loss += infonce_from_logits(g[0], &g[1..]);
                let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = g.iter().map(|x| (x - m).exp()).sum();
                let mut du = vec![0.0; dim];
                for (j, k) in ids.iter().enumerate() {
                    let delta = (g[j] - m).exp() / z - if j == 0 { 1.0 } else { 0.0 };
                    for (a, b) in du.iter_mut().zip(&v[k]) {
                        *a += scale * delta * b;
                    }
                    let gv = grad_v.entry(k).or_insert_with(|| vec![0.0; dim]);
                    for (a, b) in gv.iter_mut().zip(&u) {
                        *a += scale * delta * b;
                    }
                }
                grad_u.push((du, qi));
            }
            if used == 0 {
                continue;
            }
            epoch_pairs += used;
            let step = -config.learning_rate / used as f64;
            for (du, qi) in &grad_u {
                model.q_proj.add_outer_sparse(step, du, &q_emb[*qi]);
            }
            // Deterministic order for the concept-side update.
            let mut keys: Vec<&&KcId> = grad_v.keys().collect();
            keys.sort();
            for k in keys {
                model.c_proj.add_outer_sparse(step, &grad_v[*k], &c_emb[*k]);
            }
        }
        loss_trace.push(if epoch_pairs > 0 { epoch_loss / epoch_pairs as f64 } else { 0.0 });
    }
    Ok(TrainedVerifier { model, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Fixed(HashMap<String, Vec<f64>>);

    impl EmbeddingProvider for Fixed {
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Vec<f64> {
            self.0.get(text).cloned().unwrap_or(vec![0.0, 0.0])
        }
        fn spec(&self) -> ProviderSpec {
            ProviderSpec::NgramHash { n: 0, dim: 2 }
        }
    }

    #[test]
    fn toy_inner_product() {
        let p = Fixed([("q".to_string(), vec![1.0, 0.0]), ("c".to_string(), vec![1.0, 0.0])].into());
        let m = VerifierModel::identity(Arc::new(p), 1.0);
        assert_eq!(m.logit("q", "c").unwrap(), 1.0);
        let mut z = m.clone();
        z.q_proj = Matrix::zeros(2, 2);
        z.c_proj = Matrix::zeros(2, 2);
        assert_eq!(z.logit("q", "c").unwrap(), 0.0);
        assert!(matches!(m.logit("  ", "c"), Err(VerifierError::EmptyQuestion)));
    }

    #[test]
    fn self_similarity_nonnegative_and_deterministic() {
        let e = NgramHashEmbedder::default();
        let m = VerifierModel::identity(Arc::new(e), 0.07);
        let t = "How many marbles are in the jar?";
        assert!(m.logit(t, t).unwrap() >= 0.0);
        assert_eq!(e.embed(t), e.embed(t));
        assert!((dot(&e.embed(t), &e.embed(t)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardized_examples() {
        let s = standardized_scores(&[1.0, 2.0, 3.0], 1.0);
        assert_eq!(s[1], 0.5);
        assert!((s[2] - sigmoid(1.0 / (2.0f64 / 3.0).sqrt())).abs() < 1e-15);
        assert!((s[2] - 0.7729).abs() < 1e-4);
        assert_eq!(standardized_scores(&[4.0, 4.0, 4.0], 0.07), vec![0.5; 3]);
    }

    #[test]
    fn infonce_closed_forms() {
        assert!((infonce_from_logits(0.3, &[0.3, 0.3]) - 3f64.ln()).abs() < 1e-12);
        assert!(infonce_from_logits(1e4, &[0.0, 1.0]) < 1e-12);
        let a = infonce_from_logits(0.1, &[0.5, -2.0]);
        let b = infonce_from_logits(100.1, &[100.5, 98.0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn model_file_roundtrip() {
        let m = VerifierModel::identity(Arc::new(NgramHashEmbedder { n: 3, dim: 8 }), 0.07);
        let back = VerifierModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.q_proj, m.q_proj);
        assert_eq!(back.provider.spec(), m.provider.spec());
        assert!(VerifierModel::from_json("{\"dim\":2}").is_err());
    }

    #[test]
    fn config_rejects_tiny_batch() {
        let c = VerifierTrainConfig { batch_size: 1, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
