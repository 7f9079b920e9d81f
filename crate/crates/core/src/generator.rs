//! Question sources: prompt rendering, output parsing and the offline
//! template generator.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tree::KcId;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generation request has no candidate concepts")]
    NoCandidates,
    #[error("oracle concept {0:?} is not among the candidates")]
    OracleNotCandidate(KcId),
    #[error("generator output is empty after removing the concept field")]
    EmptyOutput,
    #[error("no template family registered for concept {0:?}")]
    UnregisteredKc(KcId),
    #[error("remote generator: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryEntry {
    pub kc: KcId,
    pub name: String,
    pub mastery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Mastery shown to the generator, in candidate order.
    pub mastery: Vec<MasteryEntry>,
    pub candidates: Vec<KcId>,
    /// Concept fixed by the selector (the "+oracle" mode).
    pub oracle_kc: Option<KcId>,
}

impl GenerationRequest {
    pub fn new(
        mastery: Vec<MasteryEntry>,
        candidates: Vec<KcId>,
        oracle_kc: Option<KcId>,
    ) -> Result<Self, GeneratorError> {
        if candidates.is_empty() {
            return Err(GeneratorError::NoCandidates);
        }
        if let Some(k) = &oracle_kc {
            if !candidates.contains(k) {
                return Err(GeneratorError::OracleNotCandidate(k.clone()));
            }
        }
        Ok(GenerationRequest { mastery, candidates, oracle_kc })
    }

    pub fn name_of(&self, kc: &KcId) -> Option<&str> {
        self.mastery.iter().find(|m| &m.kc == kc).map(|m| m.name.as_str())
    }

    /// `(id, display name)` for every candidate; the id doubles as name when unknown.
    pub fn candidate_names(&self) -> Vec<(KcId, String)> {
        self.candidates
            .iter()
            .map(|k| (k.clone(), self.name_of(k).unwrap_or(k.as_str()).to_string()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub intended_kc: Option<KcId>,
    pub question_text: String,
    pub raw: String,
}

/// Anything that can propose a question for a student.
pub trait QuestionSource: Send + Sync {
    fn generate(&self, request: &GenerationRequest, seed: u64) -> Result<GenerationResult, GeneratorError>;
}

/// Audience framing for the generator prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStyle {
    pub language: String,
    /// Plural audience, e.g. "third grade students".
    pub audience: String,
    /// Singular audience, e.g. "a third grade student".
    pub audience_one: String,
}

impl Default for PromptStyle {
    fn default() -> Self {
        PromptStyle {
            language: "English".into(),
            audience: "third grade students".into(),
            audience_one: "a third grade student".into(),
        }
    }
}

/// Renders the generator prompt with the default framing.
pub fn render_prompt(request: &GenerationRequest) -> String {
    render_prompt_with(request, &PromptStyle::default())
}

pub fn render_prompt_with(request: &GenerationRequest, style: &PromptStyle) -> String {
    let PromptStyle { language, audience, audience_one } = style;
    let fixed = request
        .oracle_kc
        .as_ref()
        .map(|k| request.name_of(k).unwrap_or(k.as_str()).to_string());
    let mut p = String::new();
    p.push_str(&format!(
        "You are a helpful assistant that generates {language} questions for {audience} to support learning.\n\n"
    ));
    p.push_str("You are given a set of candidate knowledge concepts and the student's current mastery levels. Your task is:\n");
    match &fixed {
        None => p.push_str(
            "1) Select ONE knowledge concept that would be most helpful for the student to practice next, given their current mastery.\n",
        ),
        Some(name) => p.push_str(&format!(
            "1) Use the knowledge concept \"{name}\", which has already been selected for this student to practice next.\n"
        )),
    }
    p.push_str(&format!(
        "2) Generate exactly ONE {language} question for {audience_one} that directly targets the selected knowledge concept.\n\n"
    ));
    p.push_str("You must output a single JSON object following the format:\n{\n\"knowledge_concept\": \"...\",\n\"question_text\": \"...\"\n}\n\n");
    p.push_str("Rules:\n");
    p.push_str("- Output MUST be a valid JSON object with exactly these two fields.\n");
    p.push_str("- Field names must match exactly: \"knowledge_concept\", \"question_text\".\n");
    p.push_str("- \"knowledge_concept\" must be chosen from the provided list.\n");
    p.push_str(&format!(
        "- \"question_text\" must be in {language}, contain no answer, and match the knowledge_concept.\n"
    ));
    p.push_str("- Do not output anything outside the JSON object.\n\n");
    p.push_str("Knowledge Concepts and Student's Mastery Level:\n\n");
    for m in &request.mastery {
        p.push_str(&format!("- {}: {:.4}\n", m.name, m.mastery));
    }
    p.push('\n');
    match &fixed {
        None => p.push_str("Choose exactly one knowledge concept from above for this student to practice.\n"),
        Some(name) => p.push_str(&format!(
            "The knowledge concept is fixed to \"{name}\"; set \"knowledge_concept\" to exactly this value.\n"
        )),
    }
    p.push_str("Respond with the JSON object described in the instructions.\n");
    p
}

fn match_candidate(label: &str, candidates: &[(KcId, String)]) -> Option<KcId> {
    let label = label.trim();
    candidates
        .iter()
        .find(|(id, name)| name == label || id.as_str() == label)
        .or_else(|| {
            candidates.iter().find(|(id, name)| {
                name.eq_ignore_ascii_case(label) || id.as_str().eq_ignore_ascii_case(label)
            })
        })
        .map(|(id, _)| id.clone())
}

fn try_structured(raw: &str) -> Option<(Option<String>, String)> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end < start {
        return None;
    }
    let v: Value = serde_json::from_str(&raw[start..=end]).ok()?;
    let obj = v.as_object()?;
    let q = obj.get("question_text")?.as_str()?.trim().to_string();
    if q.is_empty() {
        return None;
    }
    let kc = obj.get("knowledge_concept").and_then(Value::as_str).map(str::to_string);
    Some((kc, q))
}

/// Parses a generator completion against `(id, name)` candidates.
///
/// Structured output yields its `question_text` and matched concept. Any
/// other output has every line mentioning the concept field or a candidate
/// name removed, and the rest becomes the question with no intended concept.
pub fn parse_generation(raw: &str, candidates: &[(KcId, String)]) -> Result<GenerationResult, GeneratorError> {
    if let Some((kc, question_text)) = try_structured(raw) {
        let intended_kc = kc.as_deref().and_then(|k| match_candidate(k, candidates));
        return Ok(GenerationResult { intended_kc, question_text, raw: raw.to_string() });
    }
    let lowered: Vec<String> = candidates
        .iter()
        .flat_map(|(id, name)| [id.as_str().to_lowercase(), name.to_lowercase()])
        .filter(|s| !s.trim().is_empty())
        .collect();
    let mut kept = Vec::new();
    for line in raw.lines() {
        let l = line.trim();
        let lower = l.to_lowercase();
        if l.is_empty() || l.chars().all(|c| "{}[]`,".contains(c)) || l.starts_with("```") {
            continue;
        }
        if lower.contains("knowledge_concept") || lowered.iter().any(|c| contains_phrase(&lower, c)) {
            continue;
        }
        let body = strip_field_prefix(l, "question_text");
        let body = body.trim().trim_end_matches(',').trim().trim_matches('"').trim();
        if !body.is_empty() {
            kept.push(body.to_string());
        }
    }
    if kept.is_empty() {
        return Err(GeneratorError::EmptyOutput);
    }
    Ok(GenerationResult { intended_kc: None, question_text: kept.join(" "), raw: raw.to_string() })
}

/// `needle` occurs in `hay` delimited by non-alphanumeric characters.
fn contains_phrase(hay: &str, needle: &str) -> bool {
    hay.match_indices(needle).any(|(i, m)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

fn strip_field_prefix<'a>(line: &'a str, field: &str) -> &'a str {
    let t = line.trim_start().trim_start_matches(['{', ' ']);
    let t2 = t.trim_start_matches('"');
    if let Some(rest) = t2.strip_prefix(field) {
        let rest = rest.trim_start_matches('"').trim_start();
        if let Some(rest) = rest.strip_prefix(':') {
            return rest;
        }
    }
    line
}

/// Concept-specific vocabulary for templated questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateFamily {
    pub name: String,
    pub vocab: Vec<String>,
}

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "nu", "pe", "ri", "so", "ta", "vu", "ze", "bo", "da", "fi", "gu", "ha", "je"];

const FRAMES: [&str; 8] = [
    "How many {0} are needed when each {1} holds three {2}?",
    "If the {0} has twelve {1}, how many {2} remain after four are used?",
    "A {0} and a {1} share ten {2}. How many does each get?",
    "What is the total number of {0} when two {1} each bring five {2}?",
    "There are eight {0} beside the {1}. How many {2} are there in all?",
    "Each {0} needs two {1}. How many {2} make six of them?",
    "The {0} is twice the {1}. If there are nine {2}, what is the {0}?",
    "Find the {0} when the {1} grows by seven {2} every day.",
];

/// Words per family.
pub const VOCAB_SIZE: usize = 8;

/// Templates keyed by concept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary {
    pub families: IndexMap<KcId, TemplateFamily>,
}

impl TemplateLibrary {
    /// Deterministic pseudo-word families; the leading two syllables encode
    /// the concept's position so families never share a word.
    pub fn synthetic(kcs: &[KcId]) -> Self {
        assert!(kcs.len() <= SYLLABLES.len() * SYLLABLES.len(), "too many concepts for synthetic vocabulary");
        let families = kcs
            .iter()
            .enumerate()
            .map(|(i, kc)| {
                let stem = format!("{}{}", SYLLABLES[i % 16], SYLLABLES[(i / 16) % 16]);
                let vocab: Vec<String> = (0..VOCAB_SIZE)
                    .map(|j| format!("{stem}{}{}", SYLLABLES[(j * 5 + 3) % 16], SYLLABLES[(j * 7 + 1) % 16]))
                    .collect();
                let name = format!("{} {}", vocab[0], vocab[1]);
                (kc.clone(), TemplateFamily { name, vocab })
            })
            .collect();
        TemplateLibrary { families }
    }

    pub fn family(&self, kc: &KcId) -> Option<&TemplateFamily> {
        self.families.get(kc)
    }

    /// Deterministic templated question for `kc`.
    pub fn generate(&self, kc: &KcId, seed: u64) -> Result<GenerationResult, GeneratorError> {
        let fam = self.families.get(kc).ok_or_else(|| GeneratorError::UnregisteredKc(kc.clone()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(kc.as_str().as_bytes()));
        let frame = FRAMES[rng.gen_range(0..FRAMES.len())];
        let words: Vec<&String> = fam.vocab.choose_multiple(&mut rng, 3).collect();
        let text = frame.replace("{0}", words[0]).replace("{1}", words[1]).replace("{2}", words[2]);
        let raw = serde_json::json!({ "knowledge_concept": fam.name, "question_text": text }).to_string();
        Ok(GenerationResult { intended_kc: Some(kc.clone()), question_text: text, raw })
    }
}

/// Offline substitute for a trained generator.
pub fn template_generate(library: &TemplateLibrary, kc: &KcId, seed: u64) -> Result<GenerationResult, GeneratorError> {
    library.generate(kc, seed)
}

/// FNV-1a, 64-bit. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Template-backed question source. Without a fixed concept it practices
/// the candidate with the lowest shown mastery.
#[derive(Debug, Clone)]
pub struct TemplateSource {
    pub library: TemplateLibrary,
}

impl QuestionSource for TemplateSource {
    fn generate(&self, request: &GenerationRequest, seed: u64) -> Result<GenerationResult, GeneratorError> {
        let kc = match &request.oracle_kc {
            Some(k) => k.clone(),
            None => {
                let mastery = |k: &KcId| {
                    request.mastery.iter().find(|m| &m.kc == k).map(|m| m.mastery).unwrap_or(0.0)
                };
                let mut best = request.candidates.first().ok_or(GeneratorError::NoCandidates)?;
                for k in &request.candidates[1..] {
                    if mastery(k) < mastery(best) {
                        best = k;
                    }
                }
                best.clone()
            }
        };
        self.library.generate(&kc, seed)
    }
}
