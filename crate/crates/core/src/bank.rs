//! Question storage, exam sampling, history truncation and student splits.

use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Difficulty, StudentHistory};
use crate::tree::{KcId, KcTree};

#[derive(Debug, Error)]
pub enum BankError {
    #[error("line {line}: malformed question record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("question {id:?}: unknown concept {kc:?}")]
    UnknownKc { id: String, kc: KcId },
    #[error("question {id:?}: concept {kc:?} is not a leaf")]
    NotLeaf { id: String, kc: KcId },
    #[error("question {id:?}: empty text")]
    EmptyText { id: String },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("no concept has any question to sample from")]
    EmptyPool,
    #[error("exam size must be positive")]
    EmptyExam,
    #[error("split ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("need at least two students to split, got {0}")]
    TooFewStudents(usize),
    #[error("cut points must be positive and strictly increasing")]
    BadCutPoints,
}

/// One line of the question file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub kc: KcId,
    pub text: String,
    #[serde(default)]
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, Default)]
pub struct QuestionBank {
    questions: IndexMap<String, Question>,
    by_kc: IndexMap<KcId, Vec<String>>,
}

impl QuestionBank {
    /// Validates every question against `tree` (leaf-only attachment).
    pub fn new(questions: Vec<Question>, tree: &KcTree) -> Result<Self, BankError> {
        let mut bank = QuestionBank::default();
        for q in questions {
            if q.text.trim().is_empty() {
                return Err(BankError::EmptyText { id: q.id });
            }
            if !tree.contains(q.kc.as_str()) {
                return Err(BankError::UnknownKc { id: q.id, kc: q.kc });
            }
            if !tree.is_leaf(q.kc.as_str()) {
                return Err(BankError::NotLeaf { id: q.id, kc: q.kc });
            }
            if bank.questions.contains_key(&q.id) {
                return Err(BankError::DuplicateId(q.id));
            }
            bank.by_kc.entry(q.kc.clone()).or_default().push(q.id.clone());
            bank.questions.insert(q.id.clone(), q);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.get(id)
    }

    pub fn questions(&self) -> impl Iterator<Item = &Question> {
        self.questions.values()
    }

    pub fn for_kc(&self, kc: &KcId) -> &[String] {
        self.by_kc.get(kc).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parses the line-delimited question file against `tree`.
pub fn load_bank(source: &str, tree: &KcTree) -> Result<QuestionBank, BankError> {
    let mut qs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Question =
            serde_json::from_str(line).map_err(|source| BankError::Malformed { line: i + 1, source })?;
        qs.push(q);
    }
    QuestionBank::new(qs, tree)
}

pub fn bank_to_jsonl(bank: &QuestionBank) -> String {
    bank.questions()
        .map(|q| serde_json::to_string(q).expect("question serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamEntry {
    pub kc: KcId,
    pub question: String,
}

/// Fixed exam, serialized as `{"seed", "entries": [{"kc", "question"}]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamSet {
    pub seed: u64,
    pub entries: Vec<ExamEntry>,
}

/// Draws `n` leaves uniformly with replacement from those that have
/// questions, then one question uniformly per draw.
pub fn sample_exam_set(bank: &QuestionBank, tree: &KcTree, n: usize, seed: u64) -> Result<ExamSet, BankError> {
    if n == 0 {
        return Err(BankError::EmptyExam);
    }
    let pool: Vec<KcId> = tree.leaves().into_iter().filter(|k| !bank.for_kc(k).is_empty()).collect();
    if pool.is_empty() {
        return Err(BankError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|_| {
            let kc = pool[rng.gen_range(0..pool.len())].clone();
            let ids = bank.for_kc(&kc);
            let question = ids[rng.gen_range(0..ids.len())].clone();
            ExamEntry { kc, question }
        })
        .collect();
    Ok(ExamSet { seed, entries })
}

pub const DEFAULT_CUT_POINTS: [usize; 5] = [10, 20, 30, 40, 50];

/// A length-`t` prefix of one student's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedHistory {
    pub student_id: String,
    pub t: usize,
    pub history: StudentHistory,
}

/// Every prefix at each cut point not exceeding the student's length.
pub fn truncate_histories(
    histories: &[StudentHistory],
    cut_points: &[usize],
) -> Result<Vec<TruncatedHistory>, BankError> {
    if cut_points.first() == Some(&0) || cut_points.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BankError::BadCutPoints);
    }
    let mut out = Vec::new();
    for h in histories {
        for &t in cut_points.iter().take_while(|&&t| t <= h.len()) {
            out.push(TruncatedHistory { student_id: h.student_id.clone(), t, history: h.prefix(t) });
        }
    }
    Ok(out)
}

/// Anything that belongs to a student.
pub trait StudentKeyed {
    fn student_id(&self) -> &str;
}

impl StudentKeyed for StudentHistory {
    fn student_id(&self) -> &str {
        &self.student_id
    }
}

impl StudentKeyed for TruncatedHistory {
    fn student_id(&self) -> &str {
        &self.student_id
    }
}

/// Student-level split: `round(ratio * students)` students go to train,
/// and every item of a student lands on the same side.
pub fn split_students<T: StudentKeyed + Clone>(
    items: &[T],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), BankError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(BankError::BadRatio(ratio));
    }
    let mut students: Vec<&str> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for it in items {
        if seen.insert(it.student_id(), ()).is_none() {
            students.push(it.student_id());
        }
    }
    if students.len() < 2 {
        return Err(BankError::TooFewStudents(students.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    students.shuffle(&mut rng);
    let n_train = ((ratio * students.len() as f64).round() as usize).clamp(1, students.len() - 1);
    let train_ids: BTreeSet<&str> = students[..n_train].iter().copied().collect();
    let (train, test) = items.iter().cloned().partition(|it| train_ids.contains(it.student_id()));
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::InteractionRecord;
    use crate::testutil::three_node;

    fn q(id: &str, kc: &str) -> String {
        format!("{{\"id\":\"{id}\",\"kc\":\"{kc}\",\"text\":\"text {id}\",\"difficulty\":\"medium\"}}\n")
    }

    #[test]
    fn load_cases() {
        let (tree, _) = three_node();
        assert!(load_bank("", &tree).unwrap().is_empty());
        let bank = load_bank(&(q("a", "L1") + &q("b", "L2") + &q("c", "L1")), &tree).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.for_kc(&"L1".into()), ["a", "c"]);
        let err = load_bank(&(q("a", "L1") + &q("bad", "R")), &tree).unwrap_err();
        assert!(err.to_string().contains("\"bad\""), "{err}");
        assert!(matches!(load_bank(&q("x", "ZZ"), &tree), Err(BankError::UnknownKc { .. })));
        assert!(matches!(load_bank("{", &tree), Err(BankError::Malformed { .. })));
        assert_eq!(load_bank(&bank_to_jsonl(&bank), &tree).unwrap().len(), 3);
    }

    #[test]
    fn exam_sampling() {
        let (tree, _) = three_node();
        let bank = load_bank(&q("a", "L1"), &tree).unwrap();
        let exam = sample_exam_set(&bank, &tree, 5, 9).unwrap();
        assert_eq!(exam.entries.len(), 5);
        assert!(exam.entries.iter().all(|e| e.kc.as_str() == "L1" && e.question == "a"));
        let bank = load_bank(&(q("a", "L1") + &q("b", "L2") + &q("c", "L2")), &tree).unwrap();
        assert_eq!(sample_exam_set(&bank, &tree, 20, 4).unwrap(), sample_exam_set(&bank, &tree, 20, 4).unwrap());
        assert!(matches!(sample_exam_set(&QuestionBank::default(), &tree, 3, 0), Err(BankError::EmptyPool)));
        assert!(matches!(sample_exam_set(&bank, &tree, 0, 0), Err(BankError::EmptyExam)));
    }

    fn student(id: &str, len: usize) -> StudentHistory {
        StudentHistory {
            student_id: id.into(),
            records: (0..len)
                .map(|i| InteractionRecord { kc: "L1".into(), correct: i % 2 == 0, difficulty: Difficulty::Medium })
                .collect(),
        }
    }

    #[test]
    fn truncation_counts() {
        let t = truncate_histories(&[student("a", 50)], &DEFAULT_CUT_POINTS).unwrap();
        assert_eq!(t.iter().map(|x| x.t).collect::<Vec<_>>(), [10, 20, 30, 40, 50]);
        let t = truncate_histories(&[student("a", 25)], &DEFAULT_CUT_POINTS).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].history.records[..], student("a", 25).records[..20]);
        let many: Vec<_> = (0..300).map(|i| student(&format!("s{i}"), 50)).collect();
        assert_eq!(truncate_histories(&many, &DEFAULT_CUT_POINTS).unwrap().len(), 1500);
        assert!(truncate_histories(&many, &[10, 10]).is_err());
        assert!(truncate_histories(&many, &[0, 10]).is_err());
    }

    #[test]
    fn split_sizes_and_leakage() {
        let ten: Vec<_> = (0..10).map(|i| student(&format!("s{i}"), 3)).collect();
        let (tr, te) = split_students(&ten, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let many: Vec<_> = (0..300).map(|i| student(&format!("s{i}"), 50)).collect();
        let trunc = truncate_histories(&many, &DEFAULT_CUT_POINTS).unwrap();
        let (tr, te) = split_students(&trunc, 0.8, 5).unwrap();
        let a: BTreeSet<_> = tr.iter().map(|x| x.student_id.clone()).collect();
        let b: BTreeSet<_> = te.iter().map(|x| x.student_id.clone()).collect();
        assert_eq!((a.len(), b.len()), (240, 60));
        assert!(a.is_disjoint(&b));
        assert_eq!(tr.len() + te.len(), 1500);
        assert!(matches!(split_students(&ten[..1], 0.8, 1), Err(BankError::TooFewStudents(1))));
        assert!(split_students(&ten, 1.0, 1).is_err());
    }
}
