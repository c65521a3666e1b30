//! Deterministic offline backend. It echoes keyword-bearing sentences from
//! the note for extraction prompts and applies fixed cue rules for framing
//! prompts, so whole pipeline runs can be reproduced without a model.

use std::sync::OnceLock;

use regex::Regex;
use serde_json::json;

use crate::backend::{BackendError, GenerationBackend, GenerationParams};
use crate::corpus::split_sentences;
use crate::extraction::{NOTE_CLOSE, NOTE_OPEN};
use crate::framing::{FramingCategory, SEGMENT_CLOSE, SEGMENT_OPEN};

/// Emitted when a note has no incision sentence; never verbatim.
pub const ABSENCE_STATEMENT: &str = "incision type not specified";

const INCISION_CUES: &[&str] = &[
    "incision",
    "ltcs",
    "low transverse",
    "pfannenstiel",
    "classical",
    "kerr",
    "t-shaped",
    "j-shaped",
];
const CONTRAINDICATION_CUES: &[&str] = &["placenta previa", "uterine rupture", "myomectomy", "contraindicat"];
const DELIVERY_CUES: &[&str] = &["svd", "nsvd", "vaginal delivery", "delivered vaginally", "prior vbac"];

fn abbreviation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(?:hx|Hx|HX)\b").expect("static pattern"))
}

/// The mock's only paraphrase: it spells out "hx".
pub fn echo_rewrite(sentence: &str) -> String {
    abbreviation()
        .replace_all(sentence, |c: &regex::Captures| {
            if c[0].starts_with('h') { "history" } else { "History" }
        })
        .into_owned()
}

fn has_cue(lower: &str, cues: &[&str]) -> bool {
    cues.iter().any(|cue| {
        lower.match_indices(cue).any(|(i, _)| {
            let before = lower[..i].chars().next_back();
            before.is_none_or(|c| !c.is_alphanumeric())
        })
    })
}

fn between<'a>(prompt: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = prompt.find(open)? + open.len();
    let end = prompt[start..].find(close)? + start;
    Some(&prompt[start..end])
}

fn extraction_reply(note: &str) -> String {
    let mut incision = Vec::new();
    let mut contra = Vec::new();
    let mut delivery = Vec::new();
    for (s, e) in split_sentences(note, 0, note.len()) {
        let sentence = &note[s..e];
        let lower = sentence.to_lowercase();
        if has_cue(&lower, INCISION_CUES) {
            incision.push(echo_rewrite(sentence));
        }
        if has_cue(&lower, CONTRAINDICATION_CUES) {
            contra.push(echo_rewrite(sentence));
        }
        if has_cue(&lower, DELIVERY_CUES) {
            delivery.push(echo_rewrite(sentence));
        }
    }
    if incision.is_empty() {
        incision.push(ABSENCE_STATEMENT.to_string());
    }
    let list = |v: Vec<String>| if v.is_empty() { json!(null) } else { json!(v) };
    json!({
        "incision_types": incision,
        "contraindications": list(contra),
        "previous_delivery_modes": list(delivery),
    })
    .to_string()
}

/// Ordered cue rules; the first that fires decides.
pub fn mock_framing(segment: &str) -> (FramingCategory, &'static str) {
    use FramingCategory::*;
    let s = segment.to_lowercase();
    let any = |cues: &[&str]| cues.iter().any(|c| s.contains(c));
    if any(&["risk"]) && any(&["benefit"]) {
        (BalancedInformation, "Weighs risks against benefits.")
    } else if any(&["reassur"]) {
        (Reassuring, "Offers reassurance.")
    } else if any(&["recommend"]) {
        (Directive, "States a recommendation.")
    } else if any(&["%", "calculator"]) {
        (StatisticalEvidence, "Quotes a number or calculator result.")
    } else if any(&["desire", "preference", "offered", "let us know"]) {
        (SharedDecisionMaking, "Records the patient's choice.")
    } else if any(&["benefit", "improve"]) {
        (BenefitFocused, "Emphasizes advantages.")
    } else if any(&["risk"]) {
        (RiskFocused, "Emphasizes possible harms.")
    } else {
        (NotCounseling, "No counseling content.")
    }
}

#[derive(Debug, Clone, Default)]
pub struct EchoMockBackend;

impl GenerationBackend for EchoMockBackend {
    fn name(&self) -> &str {
        "echo-mock"
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        if let Some(note) = between(prompt, NOTE_OPEN, NOTE_CLOSE) {
            return Ok(extraction_reply(note));
        }
        if let Some(segment) = between(prompt, SEGMENT_OPEN, SEGMENT_CLOSE) {
            let (category, rationale) = mock_framing(segment);
            return Ok(json!({"category": category.name(), "rationale": rationale}).to_string());
        }
        Err(BackendError::Malformed("mock cannot recognize the prompt".into()))
    }
}
