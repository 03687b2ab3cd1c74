//! Prompt corpus and assembly for zero-shot VQA, zero-shot image synthesis
//! and few-shot classification, plus parsing of ranked label answers.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{image_part, ChatRequest, Part};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot read image {path}: {source}")]
    Image { path: PathBuf, source: std::io::Error },
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("transcript has no question-answer pairs")]
    EmptyTranscript,
    #[error("prompt id {0} appears twice in one transcript")]
    DuplicatePromptId(u8),
    #[error("prompt id {0} outside 1..=10")]
    BadPromptId(u8),
    #[error("empty answer for prompt {0}")]
    EmptyAnswer(u8),
    #[error("no known label in response: {raw:?}")]
    Unparseable { raw: String },
    #[error("malformed few-shot request: {0}")]
    MalformedFewShot(String),
    #[error("malformed transcript record: {0}")]
    Record(String),
}

/// The ten chain-of-thought questions, in order.
pub const COT_PROMPTS: [&str; 10] = [
    "**Basics** - What type of nanomaterial is depicted in the image? - What is the scale of the image? (e.g., what does one unit of measurement represent?)",
    "**Morphology and Structure** - What is the general shape or morphology of the nanomaterials in the image? - Are there distinct layers, phases, or domains visible? - Do the nanomaterials appear uniform in size and shape or are they varied?",
    "**Size and Distribution** - What is the approximate size or size range of the individual nanostructures? - How are the nanomaterials distributed throughout the image? (e.g., evenly spaced, clustered, random) - Is there any evidence of aggregation or bundling?",
    "**Surface Characteristics** - Does the nanomaterial appear smooth, rough, or have any specific textures? - Are there any visible defects, pores, or impurities on the surface?",
    "**Composition and Elements** - Is there evidence of compositional variations in the image (e.g., different colors, brightness, or contrasts)? - Are there any labels or markers indicating specific elements or compounds present?",
    "**Interactions and Boundaries** - How do individual nanostructures interact with one another? (e.g., are they touching, fused, or separate?) - Are there clear boundaries between different structures or phases?",
    "**External Environment** - Is there any evidence of the nanomaterial interacting with its surrounding environment or matrix (e.g., solvents, polymers, or other materials)? - Are there other structures or objects in the image that are not nanomaterials? If so, what are they?",
    "**Image Technique and Modifications** - What imaging technique was used to capture this image? (e.g., SEM, TEM) - Were there any post-processing or modifications made to the image (e.g., false coloring, 3D rendering)?",
    "**Functional Features** - If applicable, are there any functional features visible (e.g., active sites, regions with distinct properties)? - Are there dynamic processes captured in the image or is it a static representation?",
    "**Context and Application** - What is the intended application or use of the nanomaterial being depicted? - Is this a experimental sample, or a theoretical or simulation-based representation?",
];

/// Short titles of the ten questions.
pub const COT_TITLES: [&str; 10] = [
    "Basics",
    "Morphology and Structure",
    "Size and Distribution",
    "Surface Characteristics",
    "Composition and Elements",
    "Interactions and Boundaries",
    "External Environment",
    "Image Technique and Modifications",
    "Functional Features",
    "Context and Application",
];

pub const SYNTHESIS_INSTRUCTION: &str = "Please generate multiple synthetic images based on the textual information provided below in the form of question-answer pairs for a given nanomaterial.";

pub const FEWSHOT_INSTRUCTION: &str = "Below are the provided image-label pairs for the nanomaterial identification task. Based on these pairs, predict the nanomaterial category for the given query image.";

const VQA_PREAMBLE: &str = "Please answer the following questions based on the provided input image";

/// The ten SEM micrograph categories.
pub const SEM_CATEGORIES: [&str; 10] = [
    "biological",
    "fibers",
    "films",
    "MEMS",
    "nanowires",
    "particles",
    "patterned surface",
    "porous sponges",
    "powder",
    "tips",
];

const LABEL_PREFIX: &str = "Label: ";
const CANDIDATES_HEADER: &str = "Candidate categories:";
const RANKING_REQUEST: &str = "Return a ranked list of up to 5 candidate categories for the query image, most likely first, one per line in the form \"1. <category>\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CotPromptSet(pub [&'static str; 10]);

impl CotPromptSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Prompt by 1-based id.
    pub fn get(&self, prompt_id: u8) -> Option<&'static str> {
        (1..=10).contains(&prompt_id).then(|| self.0[prompt_id as usize - 1])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &'static str)> + '_ {
        self.0.iter().enumerate().map(|(i, p)| (i as u8 + 1, *p))
    }

    /// 1-based id of a prompt given its exact text.
    pub fn id_of(&self, text: &str) -> Option<u8> {
        self.0.iter().position(|p| *p == text).map(|i| i as u8 + 1)
    }
}

pub fn cot_prompts() -> CotPromptSet {
    CotPromptSet(COT_PROMPTS)
}

pub fn vqa_preamble(category_hint: Option<&str>) -> String {
    match category_hint {
        Some(h) => format!("{VQA_PREAMBLE} belonging to the {h} nanomaterial category."),
        None => format!("{VQA_PREAMBLE}."),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub prompt_id: u8,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaTranscript {
    pub image_id: String,
    pub pairs: Vec<QaPair>,
    pub backend: String,
    pub ts: u64,
}

/// One line of the transcript JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub image_id: String,
    pub prompt_id: u8,
    pub question: String,
    pub answer: String,
    pub backend: String,
    pub ts: u64,
}

impl VqaTranscript {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.pairs.is_empty() {
            return Err(PromptError::EmptyTranscript);
        }
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if !(1..=10).contains(&p.prompt_id) {
                return Err(PromptError::BadPromptId(p.prompt_id));
            }
            if !seen.insert(p.prompt_id) {
                return Err(PromptError::DuplicatePromptId(p.prompt_id));
            }
            if p.answer.trim().is_empty() {
                return Err(PromptError::EmptyAnswer(p.prompt_id));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.pairs
            .iter()
            .map(|p| TranscriptRecord {
                image_id: self.image_id.clone(),
                prompt_id: p.prompt_id,
                question: p.question.clone(),
                answer: p.answer.clone(),
                backend: self.backend.clone(),
                ts: self.ts,
            })
            .collect()
    }
}

pub fn transcripts_to_jsonl(transcripts: &[VqaTranscript]) -> String {
    let mut out = String::new();
    for t in transcripts {
        for r in t.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serialises"));
            out.push('\n');
        }
    }
    out
}

/// Groups consecutive records by image id back into transcripts.
pub fn transcripts_from_jsonl(text: &str) -> Result<Vec<VqaTranscript>, PromptError> {
    let mut out: Vec<VqaTranscript> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: TranscriptRecord =
            serde_json::from_str(line).map_err(|e| PromptError::Record(format!("line {}: {e}", n + 1)))?;
        let pair = QaPair { prompt_id: r.prompt_id, question: r.question, answer: r.answer };
        match out.last_mut() {
            Some(t) if t.image_id == r.image_id => t.pairs.push(pair),
            _ => out.push(VqaTranscript { image_id: r.image_id, pairs: vec![pair], backend: r.backend, ts: r.ts }),
        }
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<Vec<u8>, PromptError> {
    fs::read(path).map_err(|source| PromptError::Image { path: path.to_path_buf(), source })
}

pub fn vqa_request_from_bytes(image: Vec<u8>, prompt: &str, category_hint: Option<&str>) -> ChatRequest {
    ChatRequest::new(vec![Part::text(vqa_preamble(category_hint)), image_part(image), Part::text(prompt)])
}

pub fn build_vqa_request(image: &Path, prompt: &str, category_hint: Option<&str>) -> Result<ChatRequest, PromptError> {
    Ok(vqa_request_from_bytes(read_image(image)?, prompt, category_hint))
}

pub fn build_synthesis_prompt(transcript: &VqaTranscript) -> Result<String, PromptError> {
    if transcript.pairs.is_empty() {
        return Err(PromptError::EmptyTranscript);
    }
    let mut pairs: Vec<&QaPair> = transcript.pairs.iter().collect();
    pairs.sort_by_key(|p| p.prompt_id);
    let mut s = String::from(SYNTHESIS_INSTRUCTION);
    for p in pairs {
        s.push_str("\n\nQ: ");
        s.push_str(&p.question);
        s.push_str("\nA: ");
        s.push_str(&p.answer);
    }
    Ok(s)
}

/// A labelled example shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub image: Vec<u8>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotPrompt {
    pub instruction: String,
    pub demonstrations: Vec<Demonstration>,
    pub query: Vec<u8>,
    pub label_set: Vec<String>,
}

impl FewShotPrompt {
    pub fn new(
        demonstrations: Vec<Demonstration>,
        query: Vec<u8>,
        label_set: Vec<String>,
    ) -> Result<Self, PromptError> {
        if let Some(d) = demonstrations.iter().find(|d| !label_set.contains(&d.label)) {
            return Err(PromptError::UnknownLabel(d.label.clone()));
        }
        Ok(Self { instruction: FEWSHOT_INSTRUCTION.to_string(), demonstrations, query, label_set })
    }

    pub fn to_request(&self) -> ChatRequest {
        let mut parts = Vec::with_capacity(3 + 2 * self.demonstrations.len());
        parts.push(Part::text(self.instruction.clone()));
        for d in &self.demonstrations {
            parts.push(image_part(d.image.clone()));
            parts.push(Part::text(format!("{LABEL_PREFIX}{}", d.label)));
        }
        parts.push(image_part(self.query.clone()));
        let mut closing = String::from(CANDIDATES_HEADER);
        for l in &self.label_set {
            closing.push_str("\n- ");
            closing.push_str(l);
        }
        closing.push('\n');
        closing.push_str(RANKING_REQUEST);
        parts.push(Part::text(closing));
        ChatRequest::new(parts)
    }

    /// Inverse of [`FewShotPrompt::to_request`].
    pub fn from_request(req: &ChatRequest) -> Result<Self, PromptError> {
        let bad = |m: &str| PromptError::MalformedFewShot(m.to_string());
        let (first, rest) = req.parts.split_first().ok_or_else(|| bad("no parts"))?;
        let instruction = first.as_text().ok_or_else(|| bad("first part is not text"))?.to_string();
        let (last, body) = rest.split_last().ok_or_else(|| bad("missing closing text"))?;
        let closing = last.as_text().ok_or_else(|| bad("last part is not text"))?;
        let (query, demo_parts) = body.split_last().ok_or_else(|| bad("missing query image"))?;
        let query = query.as_image().ok_or_else(|| bad("query is not an image"))?.to_vec();
        if demo_parts.len() % 2 != 0 {
            return Err(bad("demonstrations are not image-label pairs"));
        }
        let mut demonstrations = Vec::with_capacity(demo_parts.len() / 2);
        for pair in demo_parts.chunks(2) {
            let image = pair[0].as_image().ok_or_else(|| bad("demonstration without image"))?.to_vec();
            let label = pair[1]
                .as_text()
                .and_then(|t| t.strip_prefix(LABEL_PREFIX))
                .ok_or_else(|| bad("demonstration without label"))?
                .to_string();
            demonstrations.push(Demonstration { image, label });
        }
        let label_set: Vec<String> = closing
            .lines()
            .skip_while(|l| *l != CANDIDATES_HEADER)
            .filter_map(|l| l.strip_prefix("- "))
            .map(str::to_string)
            .collect();
        if label_set.is_empty() {
            return Err(bad("no candidate categories"));
        }
        let mut p = Self::new(demonstrations, query, label_set)?;
        p.instruction = instruction;
        Ok(p)
    }
}

/// Reads the demo and query images and assembles the classification request.
pub fn build_fewshot_prompt(
    demos: &[(PathBuf, String)],
    query: &Path,
    label_set: &[String],
) -> Result<ChatRequest, PromptError> {
    if let Some((_, l)) = demos.iter().find(|(_, l)| !label_set.contains(l)) {
        return Err(PromptError::UnknownLabel(l.clone()));
    }
    let demonstrations = demos
        .iter()
        .map(|(p, l)| Ok(Demonstration { image: read_image(p)?, label: l.clone() }))
        .collect::<Result<Vec<_>, PromptError>>()?;
    Ok(FewShotPrompt::new(demonstrations, read_image(query)?, label_set.to_vec())?.to_request())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub labels: Vec<String>,
    pub raw: String,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Scans `text` for whole-phrase, case-insensitive mentions of the labels.
/// Longer labels claim their span first so "films" cannot match inside
/// "films and coated surfaces".
pub fn parse_ranked_labels(text: &str, label_set: &[String]) -> Result<RankedPrediction, PromptError> {
    let hay: Vec<char> = text.to_lowercase().chars().collect();
    let mut order: Vec<usize> = (0..label_set.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(label_set[i].chars().count()));
    let mut claimed = vec![false; hay.len()];
    let mut hits: Vec<(usize, usize)> = Vec::new();
    for i in order {
        let needle: Vec<char> = label_set[i].to_lowercase().chars().collect();
        if needle.is_empty() || needle.len() > hay.len() {
            continue;
        }
        let mut first = None;
        for start in 0..=hay.len() - needle.len() {
            let end = start + needle.len();
            if hay[start..end] != needle[..] || claimed[start..end].iter().any(|&c| c) {
                continue;
            }
            let left_ok = start == 0 || !is_word_char(hay[start - 1]);
            let right_ok = end == hay.len() || !is_word_char(hay[end]);
            if left_ok && right_ok {
                claimed[start..end].iter_mut().for_each(|c| *c = true);
                first.get_or_insert(start);
            }
        }
        if let Some(pos) = first {
            hits.push((pos, i));
        }
    }
    if hits.is_empty() {
        return Err(PromptError::Unparseable { raw: text.to_string() });
    }
    hits.sort();
    Ok(RankedPrediction {
        labels: hits.into_iter().map(|(_, i)| label_set[i].clone()).collect(),
        raw: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prompt_set_shape() {
        let set = cot_prompts();
        assert_eq!(set.len(), 10);
        assert!(set.get(1).unwrap().starts_with("**Basics**"));
        assert!(set
            .get(10)
            .unwrap()
            .contains("experimental sample, or a theoretical or simulation-based representation"));
        for (i, title) in COT_TITLES.iter().enumerate() {
            assert!(COT_PROMPTS[i].starts_with(&format!("**{title}** - ")));
        }
        assert_eq!(set.id_of(COT_PROMPTS[4]), Some(5));
        assert_eq!(set.get(0), None);
    }

    #[test]
    fn preamble_with_and_without_hint() {
        assert!(vqa_preamble(Some("patterned surface"))
            .contains("belonging to the patterned surface nanomaterial category"));
        assert!(!vqa_preamble(None).contains("belonging"));
    }

    #[test]
    fn ranked_parsing() {
        let set = labels(&["nanowires", "particles", "films", "films and coated surfaces"]);
        assert_eq!(
            parse_ranked_labels("1. nanowires 2. particles", &set).unwrap().labels,
            labels(&["nanowires", "particles"])
        );
        assert_eq!(parse_ranked_labels("The answer is Particles.", &set).unwrap().labels, labels(&["particles"]));
        let p = parse_ranked_labels("1. Films and coated surfaces\n2. particles\n3. films and coated surfaces", &set)
            .unwrap();
        assert_eq!(p.labels, labels(&["films and coated surfaces", "particles"]));
        let p = parse_ranked_labels("films, then films and coated surfaces", &set).unwrap();
        assert_eq!(p.labels, labels(&["films", "films and coated surfaces"]));
        assert!(parse_ranked_labels("nanowiresque", &set).is_err());
        assert!(matches!(parse_ranked_labels("no idea", &set), Err(PromptError::Unparseable { .. })));
    }

    #[test]
    fn fewshot_round_trip() {
        let set = labels(&["a", "b", "c"]);
        let demos = vec![
            Demonstration { image: vec![0x89, 1], label: "b".into() },
            Demonstration { image: vec![0x89, 2], label: "a".into() },
        ];
        let p = FewShotPrompt::new(demos, vec![0x89, 3], set.clone()).unwrap();
        let req = p.to_request();
        assert_eq!(req.parts.len(), 7);
        assert_eq!(FewShotPrompt::from_request(&req).unwrap(), p);
        let zero = FewShotPrompt::new(vec![], vec![0x89, 3], set.clone()).unwrap().to_request();
        assert_eq!(zero.parts.len(), 3);
        assert!(matches!(
            FewShotPrompt::new(vec![Demonstration { image: vec![1], label: "z".into() }], vec![1], set),
            Err(PromptError::UnknownLabel(_))
        ));
    }

    #[test]
    fn transcript_validation() {
        let pair = |id: u8, a: &str| QaPair { prompt_id: id, question: "q".into(), answer: a.into() };
        let mut t =
            VqaTranscript { image_id: "x".into(), pairs: vec![pair(1, "a"), pair(2, "b")], backend: "m".into(), ts: 0 };
        t.validate().unwrap();
        t.pairs.push(pair(2, "c"));
        assert!(matches!(t.validate(), Err(PromptError::DuplicatePromptId(2))));
        t.pairs.pop();
        t.pairs.push(pair(3, " "));
        assert!(matches!(t.validate(), Err(PromptError::EmptyAnswer(3))));
    }
}
