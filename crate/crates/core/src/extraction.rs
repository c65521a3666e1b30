//! Schema-constrained eligibility-evidence extraction.
//!
//! Two prompt variants share one three-field JSON schema. Model output goes
//! through fence stripping, object location and strict validation; a schema
//! violation earns exactly one structured re-ask before the record is marked
//! unparseable.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{locate_json_object, BackendError, GenerationBackend, GenerationParams};
use crate::corpus::{PatientRecord, RecordId};

pub const NOTE_OPEN: &str = "<<<NOTE\n";
pub const NOTE_CLOSE: &str = "\nNOTE>>>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Short,
    Long,
}

impl PromptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Short => "short",
            PromptVariant::Long => "long",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(PromptVariant::Short),
            "long" => Ok(PromptVariant::Long),
            other => Err(format!("unknown prompt variant {other:?} (expected short or long)")),
        }
    }
}

/// The three evidence fields of the extraction schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceField {
    IncisionTypes,
    Contraindications,
    PreviousDeliveryModes,
}

impl EvidenceField {
    pub const ALL: [EvidenceField; 3] = [
        EvidenceField::IncisionTypes,
        EvidenceField::Contraindications,
        EvidenceField::PreviousDeliveryModes,
    ];

    pub fn key(self) -> &'static str {
        match self {
            EvidenceField::IncisionTypes => "incision_types",
            EvidenceField::Contraindications => "contraindications",
            EvidenceField::PreviousDeliveryModes => "previous_delivery_modes",
        }
    }
}

impl fmt::Display for EvidenceField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub variant: PromptVariant,
    pub model_name: String,
    pub decode_temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            variant: PromptVariant::Short,
            model_name: "mock".into(),
            decode_temperature: 0.0,
            max_output_tokens: 1024,
            seed: Some(0),
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.decode_temperature) {
            return Err(format!("decode_temperature {} outside [0, 1]", self.decode_temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            model: self.model_name.clone(),
            temperature: self.decode_temperature,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub record_id: RecordId,
    pub model_name: String,
    pub prompt_variant: PromptVariant,
    pub incision_types: Option<Vec<String>>,
    pub contraindications: Option<Vec<String>>,
    pub previous_delivery_modes: Option<Vec<String>>,
    pub raw_response: String,
    /// The accepted response came from the re-ask.
    #[serde(default)]
    pub retried: bool,
}

impl ExtractionResult {
    pub fn field(&self, field: EvidenceField) -> Option<&[String]> {
        match field {
            EvidenceField::IncisionTypes => self.incision_types.as_deref(),
            EvidenceField::Contraindications => self.contraindications.as_deref(),
            EvidenceField::PreviousDeliveryModes => self.previous_delivery_modes.as_deref(),
        }
    }

    /// All three fields null.
    pub fn is_incomplete(&self) -> bool {
        EvidenceField::ALL.iter().all(|f| self.field(*f).is_none())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("record {record_id}: backend failure: {source}")]
    Backend {
        record_id: RecordId,
        #[source]
        source: BackendError,
    },
    #[error("record {record_id}: prompt of {prompt_chars} chars exceeds backend limit of {limit}")]
    ContextOverflow {
        record_id: RecordId,
        prompt_chars: usize,
        limit: usize,
    },
    #[error("record {record_id}: unparseable after re-ask: {reason}")]
    Unparseable {
        record_id: RecordId,
        reason: String,
        raw_responses: Vec<String>,
    },
}

const SCHEMA_BLOCK: &str = r#"{"incision_types": [...]/null,
 "contraindications": [...]/null,
 "previous_delivery_modes": [...]/null}"#;

const SHORT_HEAD: &str = "You extract VBAC eligibility evidence from an obstetric history and physical note.\n\
Targets: incision type; contraindications; prior delivery modes (past only).\n\
Constraints: verbatim sentences only; no paraphrase/inference; if absent/uncertain -> null; JSON only.\n\
Schema:\n";

const LONG_DECOMPOSITION: &str = "\n\nWork through the note one target at a time.\n\
1. Incision: sentences that state the uterine or skin incision used at a prior cesarean.\n\
2. Contraindications: sentences documenting conditions that rule out a trial of labor, for example a prior classical or T-shaped incision, a prior uterine rupture, extensive transfundal uterine surgery, or placenta previa.\n\
3. Prior delivery: sentences describing how earlier pregnancies were delivered. Past deliveries only; ignore the plan for the current delivery.\n\
\n\
Examples of acceptable mentions:\n\
- Incision types: \"low transverse\", \"LTCS\", \"Kerr\", \"Pfannenstiel\", \"classical\", \"vertical\", \"T-shaped\", \"J-shaped\".\n\
- Delivery-mode synonyms: \"SVD\", \"NSVD\", \"vaginal delivery\", \"VBAC\", \"primary cesarean\", \"repeat cesarean\", \"C/S\".\n\
\n\
Reminder: copy each sentence exactly as written in the note. Do not paraphrase, expand abbreviations or correct spelling.\n\
Reminder: if a target is not documented, return null for it. Do not write statements such as \"not documented\".";

const LONG_TAIL: &str = "\nFinal reminder: every string must appear verbatim in the note above. Output the JSON object only.";

/// Deterministic prompt text; the narrative is embedded once, unmodified.
pub fn build_prompt(variant: PromptVariant, narrative: &str) -> String {
    let mut prompt = String::with_capacity(narrative.len() + 2048);
    prompt.push_str(SHORT_HEAD);
    prompt.push_str(SCHEMA_BLOCK);
    if variant == PromptVariant::Long {
        prompt.push_str(LONG_DECOMPOSITION);
    }
    prompt.push_str("\n\nNote:\n");
    prompt.push_str(NOTE_OPEN);
    prompt.push_str(narrative);
    prompt.push_str(NOTE_CLOSE);
    if variant == PromptVariant::Long {
        prompt.push_str(LONG_TAIL);
    }
    prompt.push('\n');
    prompt
}

fn repair_prompt(original: &str, problem: &str) -> String {
    format!(
        "{original}\nYour previous reply could not be used: {problem}.\n\
Reply again with a single JSON object with exactly the keys incision_types, contraindications and previous_delivery_modes, \
each either null or a list of verbatim sentences from the note.\n"
    )
}

/// Parsed but not yet attributed fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFields {
    pub incision_types: Option<Vec<String>>,
    pub contraindications: Option<Vec<String>>,
    pub previous_delivery_modes: Option<Vec<String>>,
}

fn parse_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Option<Vec<String>>, String> {
    match obj.get(key) {
        None => Err(format!("missing key {key}")),
        Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                match item {
                    Value::String(s) if s.trim().is_empty() => {}
                    Value::String(s) => out.push(s.clone()),
                    other => return Err(format!("{key} contains a non-string element {other}")),
                }
            }
            Ok(if out.is_empty() { None } else { Some(out) })
        }
        Some(other) => Err(format!("{key} must be a list or null, got {other}")),
    }
}

/// Fence strip, locate the first balanced object, validate keys and types.
pub fn parse_extraction_response(raw: &str) -> Result<ParsedFields, String> {
    let object = locate_json_object(raw).ok_or("no JSON object in response")?;
    let value: Value = serde_json::from_str(object).map_err(|e| format!("invalid JSON: {e}"))?;
    let Value::Object(map) = value else {
        return Err("response is not a JSON object".into());
    };
    if let Some(extra) = map
        .keys()
        .find(|k| !EvidenceField::ALL.iter().any(|f| f.key() == k.as_str()))
    {
        return Err(format!("unexpected key {extra}"));
    }
    Ok(ParsedFields {
        incision_types: parse_list(&map, EvidenceField::IncisionTypes.key())?,
        contraindications: parse_list(&map, EvidenceField::Contraindications.key())?,
        previous_delivery_modes: parse_list(&map, EvidenceField::PreviousDeliveryModes.key())?,
    })
}

pub fn extract(
    record: &PatientRecord,
    backend: &dyn GenerationBackend,
    config: &PromptConfig,
) -> Result<ExtractionResult, ExtractionError> {
    let prompt = build_prompt(config.variant, &record.narrative);
    if let Some(limit) = backend.max_prompt_chars() {
        let prompt_chars = prompt.chars().count();
        if prompt_chars > limit {
            return Err(ExtractionError::ContextOverflow {
                record_id: record.record_id.clone(),
                prompt_chars,
                limit,
            });
        }
    }
    let params = config.params();
    let call = |p: &str| {
        backend.complete(p, &params).map_err(|source| ExtractionError::Backend {
            record_id: record.record_id.clone(),
            source,
        })
    };
    let first = call(&prompt)?;
    let (raw, parsed, retried) = match parse_extraction_response(&first) {
        Ok(parsed) => (first, parsed, false),
        Err(problem) => {
            let second = call(&repair_prompt(&prompt, &problem))?;
            match parse_extraction_response(&second) {
                Ok(parsed) => (second, parsed, true),
                Err(reason) => {
                    return Err(ExtractionError::Unparseable {
                        record_id: record.record_id.clone(),
                        reason,
                        raw_responses: vec![first, second],
                    })
                }
            }
        }
    };
    Ok(ExtractionResult {
        record_id: record.record_id.clone(),
        model_name: config.model_name.clone(),
        prompt_variant: config.variant,
        incision_types: parsed.incision_types,
        contraindications: parsed.contraindications,
        previous_delivery_modes: parsed.previous_delivery_modes,
        raw_response: raw,
        retried,
    })
}

/// Extract for many records with bounded parallelism; output follows input order.
pub fn extract_batch(
    records: &[&PatientRecord],
    backend: &dyn GenerationBackend,
    config: &PromptConfig,
    parallelism: usize,
) -> Vec<Result<ExtractionResult, ExtractionError>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| records.par_iter().map(|r| extract(r, backend, config)).collect())
}

/// Per-record file content: the validated object or the unparseable marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StoredExtraction {
    Ok(ExtractionResult),
    Unparseable {
        record_id: RecordId,
        model_name: String,
        prompt_variant: PromptVariant,
        reason: String,
        raw_responses: Vec<String>,
    },
}

impl StoredExtraction {
    pub fn record_id(&self) -> &RecordId {
        match self {
            StoredExtraction::Ok(r) => &r.record_id,
            StoredExtraction::Unparseable { record_id, .. } => record_id,
        }
    }

    pub fn result(&self) -> Option<&ExtractionResult> {
        match self {
            StoredExtraction::Ok(r) => Some(r),
            StoredExtraction::Unparseable { .. } => None,
        }
    }
}

pub fn extraction_path(dir: &Path, record_id: &RecordId) -> io::Result<PathBuf> {
    if !record_id.is_file_safe() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("record_id {record_id:?} cannot be used as a file name"),
        ));
    }
    Ok(dir.join(format!("{}.json", record_id.as_str())))
}

pub fn write_extraction(dir: &Path, stored: &StoredExtraction) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = extraction_path(dir, stored.record_id())?;
    crate::util::write_json(&path, stored)?;
    Ok(path)
}

pub fn read_extraction(dir: &Path, record_id: &RecordId) -> io::Result<StoredExtraction> {
    crate::util::read_json(&extraction_path(dir, record_id)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::corpus::DeliveryGroup;
    use proptest::prelude::*;

    fn record(narrative: &str) -> PatientRecord {
        PatientRecord {
            record_id: "p7".into(),
            narrative: narrative.into(),
            group: DeliveryGroup::Rcs,
            prior_cesarean: true,
            age: None,
            bmi: None,
            delivery_date: None,
        }
    }

    #[test]
    fn short_prompt_has_schema_and_note() {
        let p = build_prompt(PromptVariant::Short, "note A");
        for key in ["incision_types", "contraindications", "previous_delivery_modes"] {
            assert!(p.contains(key), "{key}");
        }
        assert!(p.contains("note A"));
        assert!(p.contains("verbatim sentences only"));
    }

    #[test]
    fn long_prompt_extends_short() {
        let short = build_prompt(PromptVariant::Short, "note A");
        let long = build_prompt(PromptVariant::Long, "note A");
        assert!(long.len() > short.len());
        assert!(long.contains("Examples of acceptable mentions"));
        assert_eq!(long.matches("Reminder").count() + long.matches("reminder").count(), 3);
        assert_eq!(build_prompt(PromptVariant::Long, "note A"), long);
    }

    #[test]
    fn narrative_embedded_once() {
        let note = "Pt is a 31yo G3P2 with prior LTCS x2, desires TOLAC (zq-unique).";
        for v in [PromptVariant::Short, PromptVariant::Long] {
            assert_eq!(build_prompt(v, note).matches(note).count(), 1);
        }
    }

    #[test]
    fn all_null_passthrough() {
        let b = ScriptedBackend::new([
            r#"{"incision_types": null, "contraindications": null, "previous_delivery_modes": null}"#,
        ]);
        let r = extract(&record("n"), &b, &PromptConfig::default()).unwrap();
        assert!(r.is_incomplete());
        assert!(!r.retried);
    }

    #[test]
    fn fenced_response_single_incision() {
        let raw = "```json\n{\"incision_types\": [\"Prior LTCS x1.\"], \"contraindications\": [], \"previous_delivery_modes\": null}\n```";
        let b = ScriptedBackend::new([raw]);
        let r = extract(&record("Prior LTCS x1."), &b, &PromptConfig::default()).unwrap();
        assert_eq!(r.incision_types, Some(vec!["Prior LTCS x1.".to_string()]));
        // An empty list is normalized to null.
        assert_eq!(r.contraindications, None);
        assert_eq!(r.raw_response, raw);
    }

    #[test]
    fn prose_twice_is_unparseable() {
        let b = ScriptedBackend::new(["Sorry, no data.", "Still nothing."]);
        match extract(&record("n"), &b, &PromptConfig::default()) {
            Err(ExtractionError::Unparseable { raw_responses, record_id, .. }) => {
                assert_eq!(raw_responses, ["Sorry, no data.", "Still nothing."]);
                assert_eq!(record_id.as_str(), "p7");
            }
            other => panic!("{other:?}"),
        }
        let prompts = b.prompts();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].contains("could not be used: no JSON object"));
    }

    #[test]
    fn reask_recovers() {
        let b = ScriptedBackend::new([
            r#"{"incision_types": "low transverse"}"#,
            r#"{"incision_types": ["low transverse"], "contraindications": null, "previous_delivery_modes": null}"#,
        ]);
        let r = extract(&record("low transverse"), &b, &PromptConfig::default()).unwrap();
        assert!(r.retried);
        assert_eq!(r.incision_types.unwrap(), ["low transverse"]);
    }

    #[test]
    fn schema_violations() {
        let base = |extra: &str| {
            format!(r#"{{"incision_types": null, "contraindications": null, "previous_delivery_modes": null{extra}}}"#)
        };
        assert!(parse_extraction_response(&base("")).is_ok());
        assert!(parse_extraction_response(&base(r#", "notes": "x""#)).unwrap_err().contains("unexpected key"));
        assert!(parse_extraction_response(r#"{"incision_types": null}"#).unwrap_err().contains("missing key"));
        assert!(parse_extraction_response(
            r#"{"incision_types": [1], "contraindications": null, "previous_delivery_modes": null}"#
        )
        .unwrap_err()
        .contains("non-string"));
        assert!(parse_extraction_response("[1,2]").is_err());
    }

    #[test]
    fn backend_failure_and_context_limit() {
        let b = ScriptedBackend::failing(BackendError::Timeout(std::time::Duration::from_secs(3)));
        assert!(matches!(
            extract(&record("n"), &b, &PromptConfig::default()),
            Err(ExtractionError::Backend { .. })
        ));
        let b = ScriptedBackend::new(["{}"]).with_max_prompt_chars(50);
        match extract(&record("long note"), &b, &PromptConfig::default()) {
            Err(ExtractionError::ContextOverflow { record_id, limit, .. }) => {
                assert_eq!(record_id.as_str(), "p7");
                assert_eq!(limit, 50);
            }
            other => panic!("{other:?}"),
        }
        assert!(b.prompts().is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = PromptConfig::default();
        assert!(c.validate().is_ok());
        c.decode_temperature = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stored_extraction_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = ScriptedBackend::new([
            r#"{"incision_types": ["Kerr incision."], "contraindications": null, "previous_delivery_modes": null}"#,
        ]);
        let r = extract(&record("Kerr incision."), &b, &PromptConfig::default()).unwrap();
        let path = write_extraction(dir.path(), &StoredExtraction::Ok(r.clone())).unwrap();
        assert!(path.ends_with("p7.json"));
        assert_eq!(read_extraction(dir.path(), &"p7".into()).unwrap(), StoredExtraction::Ok(r));
        assert!(extraction_path(dir.path(), &"../x".into()).is_err());
    }

    proptest! {
        #[test]
        fn prompt_is_injective(a in "[ -~]{1,40}", b in "[ -~]{1,40}") {
            prop_assume!(a != b);
            prop_assert_ne!(build_prompt(PromptVariant::Short, &a), build_prompt(PromptVariant::Short, &b));
            prop_assert_ne!(build_prompt(PromptVariant::Long, &a), build_prompt(PromptVariant::Long, &b));
        }

        #[test]
        fn parsed_strings_are_substrings_of_raw(
            items in proptest::collection::vec("[A-Za-z0-9 ,.;:()/-]{1,30}", 0..4),
            noise in "[a-z ]{0,20}",
        ) {
            let body = serde_json::json!({
                "incision_types": items.clone(),
                "contraindications": null,
                "previous_delivery_modes": items,
            });
            let raw = format!("{noise}\n```json\n{body}\n```");
            let parsed = parse_extraction_response(&raw).unwrap();
            for list in [parsed.incision_types, parsed.previous_delivery_modes].into_iter().flatten() {
                for s in list {
                    prop_assert!(raw.contains(&s));
                }
            }
        }
    }
}
