//! Zero-shot framing classification of counseling segments.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{locate_json_object, BackendError, GenerationBackend, GenerationParams};
use crate::corpus::{DeliveryGroup, RecordId, Segment};
use crate::util::{half_up_tenths, sha256_hex};

pub const SEGMENT_OPEN: &str = "<<<SEGMENT\n";
pub const SEGMENT_CLOSE: &str = "\nSEGMENT>>>";
pub const FRAMING_PROMPT_VERSION: &str = "framing-v1";

/// Declared in the alphabetical order of their names so that tables sort the
/// same way everywhere; `NotCounseling` comes last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FramingCategory {
    BalancedInformation,
    BenefitFocused,
    Directive,
    Reassuring,
    RiskFocused,
    SharedDecisionMaking,
    StatisticalEvidence,
    NotCounseling,
}

impl FramingCategory {
    pub const ALL: [FramingCategory; 8] = [
        FramingCategory::BalancedInformation,
        FramingCategory::BenefitFocused,
        FramingCategory::Directive,
        FramingCategory::Reassuring,
        FramingCategory::RiskFocused,
        FramingCategory::SharedDecisionMaking,
        FramingCategory::StatisticalEvidence,
        FramingCategory::NotCounseling,
    ];

    pub const COUNSELING: [FramingCategory; 7] = [
        FramingCategory::BalancedInformation,
        FramingCategory::BenefitFocused,
        FramingCategory::Directive,
        FramingCategory::Reassuring,
        FramingCategory::RiskFocused,
        FramingCategory::SharedDecisionMaking,
        FramingCategory::StatisticalEvidence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FramingCategory::BalancedInformation => "Balanced Information",
            FramingCategory::BenefitFocused => "Benefit-Focused",
            FramingCategory::Directive => "Directive",
            FramingCategory::Reassuring => "Reassuring",
            FramingCategory::RiskFocused => "Risk-Focused",
            FramingCategory::SharedDecisionMaking => "Shared Decision-Making",
            FramingCategory::StatisticalEvidence => "Statistical Evidence",
            FramingCategory::NotCounseling => "Not Counseling",
        }
    }

    pub fn is_counseling(self) -> bool {
        self != FramingCategory::NotCounseling
    }

    fn definition(self) -> &'static str {
        match self {
            FramingCategory::BalancedInformation => "presents both the risks and the benefits of the delivery options without favoring one",
            FramingCategory::BenefitFocused => "emphasizes advantages or positive outcomes of an option",
            FramingCategory::Directive => "the clinician recommends or instructs a specific course of action",
            FramingCategory::Reassuring => "aims to reduce worry or build confidence about the plan or its outcome",
            FramingCategory::RiskFocused => "emphasizes complications, dangers or adverse outcomes of an option",
            FramingCategory::SharedDecisionMaking => "records the patient's preferences, values or participation in choosing the plan",
            FramingCategory::StatisticalEvidence => "cites numbers, probabilities, percentages or calculator results",
            FramingCategory::NotCounseling => "the excerpt contains no counseling content (orders, procedures, logistics, follow-up)",
        }
    }
}

impl fmt::Display for FramingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FramingCategory {
    type Err = String;

    /// Canonical names only, compared case-insensitively after trimming.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        FramingCategory::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| format!("unknown framing category {s:?}"))
    }
}

impl Serialize for FramingCategory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FramingCategory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn prompt_head() -> &'static str {
    static HEAD: OnceLock<String> = OnceLock::new();
    HEAD.get_or_init(|| {
        let mut head = String::from(
            "You label how clinical counseling is framed in a short excerpt from the plan section of an obstetric note.\n\
Choose the single best-fitting label for the excerpt. Use exactly one of these labels:\n",
        );
        for c in FramingCategory::ALL {
            head.push_str(&format!("- {}: {}.\n", c.name(), c.definition()));
        }
        head.push_str(
            "If the excerpt mixes cues, pick the one that dominates. \
Use Not Counseling for text that does not counsel the patient.\n\
Reply with one JSON object and nothing else:\n\
{\"category\": \"<label>\", \"rationale\": \"<one or two sentences grounded in the excerpt>\"}\n\nExcerpt:\n",
        );
        head
    })
}

pub fn build_framing_prompt(segment_text: &str) -> String {
    let mut prompt = String::with_capacity(prompt_head().len() + segment_text.len() + 32);
    prompt.push_str(prompt_head());
    prompt.push_str(SEGMENT_OPEN);
    prompt.push_str(segment_text);
    prompt.push_str(SEGMENT_CLOSE);
    prompt.push('\n');
    prompt
}

/// Identifies the prompt template (not the segment) a label came from.
pub fn framing_prompt_hash() -> String {
    sha256_hex(format!("{FRAMING_PROMPT_VERSION}\n{}", prompt_head()))
}

fn repair_prompt(original: &str, problem: &str) -> String {
    format!(
        "{original}\nYour previous reply could not be used: {problem}.\n\
Reply again with {{\"category\": ..., \"rationale\": ...}} using one of the listed labels exactly.\n"
    )
}

pub fn parse_framing_response(raw: &str) -> Result<(FramingCategory, String), String> {
    let object = locate_json_object(raw).ok_or("no JSON object in response")?;
    let value: Value = serde_json::from_str(object).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("response is not a JSON object".into());
    };
    if let Some(extra) = map.keys().find(|k| *k != "category" && *k != "rationale") {
        return Err(format!("unexpected key {extra}"));
    }
    let category = match map.get("category") {
        Some(Value::String(s)) => s.parse::<FramingCategory>()?,
        _ => return Err("category must be a string".into()),
    };
    let rationale = match map.get("rationale") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        _ => return Err("rationale must be a non-empty string".into()),
    };
    Ok((category, rationale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramingConfig {
    pub model_name: String,
    pub decode_temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for FramingConfig {
    fn default() -> Self {
        FramingConfig {
            model_name: "mock".into(),
            decode_temperature: 0.0,
            max_output_tokens: 256,
            seed: Some(0),
        }
    }
}

impl FramingConfig {
    fn params(&self) -> GenerationParams {
        GenerationParams {
            model: self.model_name.clone(),
            temperature: self.decode_temperature,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingLabel {
    pub note_id: RecordId,
    pub index: usize,
    pub group: DeliveryGroup,
    pub category: FramingCategory,
    pub rationale: String,
    pub model_name: String,
    pub prompt_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedSegment {
    pub note_id: RecordId,
    pub index: usize,
    pub group: DeliveryGroup,
    pub reason: String,
    pub raw_responses: Vec<String>,
    pub model_name: String,
    pub prompt_hash: String,
}

/// One persisted line of framing output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StoredFraming {
    Ok(FramingLabel),
    Rejected(RejectedSegment),
}

impl StoredFraming {
    pub fn key(&self) -> (&RecordId, usize) {
        match self {
            StoredFraming::Ok(l) => (&l.note_id, l.index),
            StoredFraming::Rejected(r) => (&r.note_id, r.index),
        }
    }

    pub fn group(&self) -> DeliveryGroup {
        match self {
            StoredFraming::Ok(l) => l.group,
            StoredFraming::Rejected(r) => r.group,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FramingError {
    #[error("segment {note_id}#{index}: backend failure: {source}")]
    Backend {
        note_id: RecordId,
        index: usize,
        #[source]
        source: BackendError,
    },
}

/// Classify one segment, re-asking once on an unusable reply. A second
/// unusable reply yields a rejected entry rather than an error.
pub fn classify_segment(
    segment: &Segment,
    group: DeliveryGroup,
    backend: &dyn GenerationBackend,
    config: &FramingConfig,
) -> Result<StoredFraming, FramingError> {
    let prompt = build_framing_prompt(&segment.text);
    let params = config.params();
    let call = |p: &str| {
        backend.complete(p, &params).map_err(|source| FramingError::Backend {
            note_id: segment.note_id.clone(),
            index: segment.index,
            source,
        })
    };
    let first = call(&prompt)?;
    let parsed = match parse_framing_response(&first) {
        Ok(parsed) => Ok(parsed),
        Err(problem) => {
            let second = call(&repair_prompt(&prompt, &problem))?;
            parse_framing_response(&second).map_err(|reason| (reason, vec![first, second]))
        }
    };
    Ok(match parsed {
        Ok((category, rationale)) => StoredFraming::Ok(FramingLabel {
            note_id: segment.note_id.clone(),
            index: segment.index,
            group,
            category,
            rationale,
            model_name: config.model_name.clone(),
            prompt_hash: framing_prompt_hash(),
        }),
        Err((reason, raw_responses)) => StoredFraming::Rejected(RejectedSegment {
            note_id: segment.note_id.clone(),
            index: segment.index,
            group,
            reason,
            raw_responses,
            model_name: config.model_name.clone(),
            prompt_hash: framing_prompt_hash(),
        }),
    })
}

/// Classify segments in parallel; output is sorted by (note_id, index).
pub fn classify_batch(
    segments: &[(Segment, DeliveryGroup)],
    backend: &dyn GenerationBackend,
    config: &FramingConfig,
    parallelism: usize,
) -> Result<Vec<StoredFraming>, FramingError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    let mut out: Vec<StoredFraming> = pool.install(|| {
        segments
            .par_iter()
            .map(|(s, g)| classify_segment(s, *g, backend, config))
            .collect::<Result<_, _>>()
    })?;
    out.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCoverage {
    pub total_segments: usize,
    pub counseling: usize,
    pub not_counseling: usize,
    pub rejected: usize,
    /// Counseling share of all segments, in tenths of a percent.
    pub counseling_tenths: u64,
}

impl GroupCoverage {
    pub fn counseling_percent(&self) -> f64 {
        self.counseling_tenths as f64 / 10.0
    }
}

pub fn coverage_tenths(counseling: usize, total: usize) -> u64 {
    half_up_tenths(counseling as u64, total as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounselingSubset {
    pub labels: Vec<FramingLabel>,
    pub coverage: BTreeMap<DeliveryGroup, GroupCoverage>,
}

/// Drop Not Counseling and rejected segments, keeping per-group tallies.
pub fn filter_counseling(stored: &[StoredFraming]) -> CounselingSubset {
    let mut coverage: BTreeMap<DeliveryGroup, GroupCoverage> = BTreeMap::new();
    let mut labels = Vec::new();
    for s in stored {
        let c = coverage.entry(s.group()).or_default();
        c.total_segments += 1;
        match s {
            StoredFraming::Ok(l) if l.category.is_counseling() => {
                c.counseling += 1;
                labels.push(l.clone());
            }
            StoredFraming::Ok(_) => c.not_counseling += 1,
            StoredFraming::Rejected(_) => c.rejected += 1,
        }
    }
    for c in coverage.values_mut() {
        c.counseling_tenths = coverage_tenths(c.counseling, c.total_segments);
    }
    CounselingSubset { labels, coverage }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;

    fn segment(text: &str) -> Segment {
        Segment {
            note_id: "n1".into(),
            index: 0,
            text: text.into(),
            section_header: Some("Plan".into()),
            start: 0,
            end: text.len(),
        }
    }

    #[test]
    fn eight_categories_round_trip_by_name() {
        assert_eq!(FramingCategory::ALL.len(), 8);
        for c in FramingCategory::ALL {
            assert_eq!(c.name().parse::<FramingCategory>(), Ok(c));
            assert_eq!(format!("  {}  ", c.name().to_uppercase()).parse::<FramingCategory>(), Ok(c));
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<FramingCategory>(&json).unwrap(), c);
        }
        // No near-miss mapping.
        assert!("Risk focused".parse::<FramingCategory>().is_err());
        assert!("SDM".parse::<FramingCategory>().is_err());
        assert_eq!(FramingCategory::COUNSELING.iter().filter(|c| c.is_counseling()).count(), 7);
    }

    #[test]
    fn prompt_contains_every_label_and_the_segment_once() {
        let text = "Risks of RCS include bleeding.";
        let p = build_framing_prompt(text);
        for c in FramingCategory::ALL {
            assert!(p.contains(c.name()), "{c}");
        }
        assert_eq!(p.matches(text).count(), 1);
        assert_eq!(p, build_framing_prompt(text));
        assert!(p.contains("single best-fitting label"));
        assert!(p.contains("\"rationale\""));
    }

    #[test]
    fn parse_accepts_schema_and_rejects_unknowns() {
        let (c, r) = parse_framing_response(r#"{"category": "statistical evidence", "rationale": "Cites 74%."}"#).unwrap();
        assert_eq!(c, FramingCategory::StatisticalEvidence);
        assert_eq!(r, "Cites 74%.");
        assert!(parse_framing_response(r#"{"category": "Persuasive", "rationale": "x"}"#).is_err());
        assert!(parse_framing_response(r#"{"category": "Directive", "rationale": " "}"#).is_err());
        assert!(parse_framing_response(r#"{"category": "Directive", "rationale": "x", "confidence": 1}"#).is_err());
    }

    #[test]
    fn unknown_label_is_reasked_then_rejected() {
        let seg = segment("Plan reviewed.");
        let backend = ScriptedBackend::new([
            r#"{"category": "Informative", "rationale": "x"}"#,
            r#"{"category": "Directive", "rationale": "Plan stated."}"#,
        ]);
        let out = classify_segment(&seg, DeliveryGroup::Rcs, &backend, &FramingConfig::default()).unwrap();
        assert!(matches!(out, StoredFraming::Ok(ref l) if l.category == FramingCategory::Directive));
        assert_eq!(backend.prompts().len(), 2);

        let backend = ScriptedBackend::new(["nope", "still nope"]);
        let out = classify_segment(&seg, DeliveryGroup::Rcs, &backend, &FramingConfig::default()).unwrap();
        match out {
            StoredFraming::Rejected(r) => assert_eq!(r.raw_responses.len(), 2),
            other => panic!("{other:?}"),
        }

        let backend = ScriptedBackend::failing(BackendError::Timeout(std::time::Duration::from_secs(1)));
        assert!(classify_segment(&seg, DeliveryGroup::Rcs, &backend, &FramingConfig::default()).is_err());
    }

    fn stored(group: DeliveryGroup, index: usize, category: Option<FramingCategory>) -> StoredFraming {
        match category {
            Some(category) => StoredFraming::Ok(FramingLabel {
                note_id: "n".into(),
                index,
                group,
                category,
                rationale: "r".into(),
                model_name: "m".into(),
                prompt_hash: "h".into(),
            }),
            None => StoredFraming::Rejected(RejectedSegment {
                note_id: "n".into(),
                index,
                group,
                reason: "bad".into(),
                raw_responses: vec![],
                model_name: "m".into(),
                prompt_hash: "h".into(),
            }),
        }
    }

    #[test]
    fn filter_conserves_segments() {
        use FramingCategory::*;
        let items = [
            stored(DeliveryGroup::Rcs, 0, Some(RiskFocused)),
            stored(DeliveryGroup::Rcs, 1, Some(NotCounseling)),
            stored(DeliveryGroup::Rcs, 2, None),
            stored(DeliveryGroup::Vbac, 3, Some(NotCounseling)),
        ];
        let subset = filter_counseling(&items);
        assert_eq!(subset.labels.len(), 1);
        let rcs = &subset.coverage[&DeliveryGroup::Rcs];
        assert_eq!(rcs.counseling + rcs.not_counseling + rcs.rejected, rcs.total_segments);
        assert_eq!(rcs.counseling_tenths, 333);
        let vbac = &subset.coverage[&DeliveryGroup::Vbac];
        assert_eq!(vbac.counseling_percent(), 0.0);
        assert!(subset.labels.iter().all(|l| l.category.is_counseling()));
    }

    #[test]
    fn coverage_fractions_round_half_up() {
        assert_eq!(coverage_tenths(722, 3848), 188);
        assert_eq!(coverage_tenths(1285, 6904), 186);
    }

    #[test]
    fn stored_lines_are_tagged() {
        let line = serde_json::to_string(&stored(DeliveryGroup::Vbac, 0, Some(FramingCategory::Reassuring))).unwrap();
        assert!(line.contains(r#""status":"ok""#));
        assert!(line.contains(r#""category":"Reassuring""#));
        assert!(line.contains(r#""group":"VBAC""#));
    }
}
