//! Hallucination auditing of extracted evidence.
//!
//! Every extracted element is checked for a contiguous match against the
//! note after both are normalized. Unmatched elements are flagged, logged per
//! patient and later assigned one of six review categories by a human.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RecordId;
use crate::extraction::{EvidenceField, ExtractionResult, PromptVariant};

/// Case-fold, strip ASCII punctuation, collapse whitespace runs, trim.
///
/// Characters whose lowercase form is more than one character are kept as
/// they are, so the output never has more characters than the input.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_ascii_punctuation() {
            continue;
        }
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        let mut lower = c.to_lowercase();
        match (lower.next(), lower.next()) {
            (Some(l), None) => out.push(l),
            _ => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReviewCategory {
    ParaphraseAccurate,
    TypoInOriginal,
    TypoInGenerated,
    UnsupportedAddition,
    Hallucination,
    PartialHallucination,
}

impl ReviewCategory {
    pub const ALL: [ReviewCategory; 6] = [
        ReviewCategory::ParaphraseAccurate,
        ReviewCategory::TypoInOriginal,
        ReviewCategory::TypoInGenerated,
        ReviewCategory::UnsupportedAddition,
        ReviewCategory::PartialHallucination,
        ReviewCategory::Hallucination,
    ];

    pub fn outcome_group(self) -> OutcomeGroup {
        match self {
            ReviewCategory::ParaphraseAccurate
            | ReviewCategory::TypoInOriginal
            | ReviewCategory::TypoInGenerated => OutcomeGroup::NoHallucinationVariant,
            ReviewCategory::UnsupportedAddition
            | ReviewCategory::Hallucination
            | ReviewCategory::PartialHallucination => OutcomeGroup::HallucinationVariant,
        }
    }

    /// Column heading used in the error-type table.
    pub fn short_label(self) -> &'static str {
        match self {
            ReviewCategory::ParaphraseAccurate => "Para",
            ReviewCategory::TypoInOriginal => "Typo-O",
            ReviewCategory::TypoInGenerated => "Typo-G",
            ReviewCategory::UnsupportedAddition => "Extra",
            ReviewCategory::PartialHallucination => "Part.",
            ReviewCategory::Hallucination => "Hall.",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ReviewCategory::ParaphraseAccurate => "No hallucination: meaning preserved, wording differs from the note",
            ReviewCategory::TypoInOriginal => "No hallucination: the model corrected a typo present in the note",
            ReviewCategory::TypoInGenerated => "No hallucination: matches the note apart from a typo the model introduced",
            ReviewCategory::UnsupportedAddition => "Correct but non-verbatim absence or normalization statement",
            ReviewCategory::Hallucination => "No supporting evidence in the note",
            ReviewCategory::PartialHallucination => "Mix of supported and fabricated content",
        }
    }
}

impl fmt::Display for ReviewCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for ReviewCategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReviewCategory::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown review category {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeGroup {
    VerbatimMatch,
    NoHallucinationVariant,
    HallucinationVariant,
}

impl OutcomeGroup {
    pub const ALL: [OutcomeGroup; 3] = [
        OutcomeGroup::VerbatimMatch,
        OutcomeGroup::NoHallucinationVariant,
        OutcomeGroup::HallucinationVariant,
    ];

    /// Retained for adjudication.
    pub fn is_supported(self) -> bool {
        self != OutcomeGroup::HallucinationVariant
    }
}

/// Outcome of a matched or reviewed element; `None` while a flag awaits review.
pub fn outcome_group(verbatim_match: bool, review: Option<ReviewCategory>) -> Option<OutcomeGroup> {
    if verbatim_match {
        Some(OutcomeGroup::VerbatimMatch)
    } else {
        review.map(ReviewCategory::outcome_group)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub record_id: RecordId,
    pub model_name: String,
    pub prompt_variant: PromptVariant,
    pub field: EvidenceField,
    /// Position within the field's list.
    pub index: usize,
    pub extracted: String,
    pub verbatim_match: bool,
    #[serde(default)]
    pub review_category: Option<ReviewCategory>,
}

impl AuditRecord {
    pub fn outcome_group(&self) -> Option<OutcomeGroup> {
        outcome_group(self.verbatim_match, self.review_category)
    }

    /// Stable key shared with review tasks.
    pub fn audit_id(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.record_id, self.model_name, self.prompt_variant, self.field, self.index
        )
    }

    pub fn is_flagged(&self) -> bool {
        !self.verbatim_match
    }

    /// Set the reviewer's decision; verbatim matches never carry one.
    pub fn set_review(&mut self, category: ReviewCategory) {
        if !self.verbatim_match {
            self.review_category = Some(category);
        }
    }
}

/// Normalized substring test used by the audit.
pub fn is_verbatim(extracted: &str, normalized_note: &str) -> bool {
    normalized_note.contains(&normalize(extracted))
}

pub fn verify_verbatim(result: &ExtractionResult, narrative: &str) -> Vec<AuditRecord> {
    let note = normalize(narrative);
    let mut out = Vec::new();
    for field in EvidenceField::ALL {
        for (index, extracted) in result.field(field).unwrap_or_default().iter().enumerate() {
            out.push(AuditRecord {
                record_id: result.record_id.clone(),
                model_name: result.model_name.clone(),
                prompt_variant: result.prompt_variant,
                field,
                index,
                extracted: extracted.clone(),
                verbatim_match: is_verbatim(extracted, &note),
                review_category: None,
            });
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("flag log for {expected} received a record for {found}")]
    MixedRecords { expected: RecordId, found: RecordId },
    #[error("flagged items without a review decision: {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-patient flag file with exactly three arrays of flagged strings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagLog {
    pub hallucinated_incision_types: Vec<String>,
    pub hallucinated_contraindications: Vec<String>,
    pub hallucinated_previous_delivery_modes: Vec<String>,
}

impl FlagLog {
    pub fn from_records(record_id: &RecordId, records: &[AuditRecord]) -> Result<Self, GroundingError> {
        let mut log = FlagLog::default();
        for r in records {
            if &r.record_id != record_id {
                return Err(GroundingError::MixedRecords {
                    expected: record_id.clone(),
                    found: r.record_id.clone(),
                });
            }
            if !r.is_flagged() {
                continue;
            }
            let bucket = match r.field {
                EvidenceField::IncisionTypes => &mut log.hallucinated_incision_types,
                EvidenceField::Contraindications => &mut log.hallucinated_contraindications,
                EvidenceField::PreviousDeliveryModes => &mut log.hallucinated_previous_delivery_modes,
            };
            bucket.push(r.extracted.clone());
        }
        Ok(log)
    }
}

/// Write `<dir>/<record_id>.json`.
pub fn write_flag_log(dir: &Path, record_id: &RecordId, records: &[AuditRecord]) -> Result<PathBuf, GroundingError> {
    let log = FlagLog::from_records(record_id, records)?;
    let path = crate::extraction::extraction_path(dir, record_id)?;
    crate::util::write_json(&path, &log)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditCell {
    pub model_name: String,
    pub prompt_variant: PromptVariant,
    pub field: EvidenceField,
    pub total: usize,
    pub group_counts: BTreeMap<OutcomeGroup, usize>,
    /// Percent of all extracted elements per outcome group.
    pub group_percent: BTreeMap<OutcomeGroup, f64>,
    pub flagged: usize,
    pub category_counts: BTreeMap<ReviewCategory, usize>,
    /// Percent of flagged elements per review category.
    pub category_percent: BTreeMap<ReviewCategory, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditAggregate {
    pub cells: Vec<AuditCell>,
}

fn percent_map<K: Ord + Copy>(keys: &[K], counts: &BTreeMap<K, usize>, total: usize) -> BTreeMap<K, f64> {
    keys.iter()
        .map(|k| {
            let c = counts.get(k).copied().unwrap_or(0);
            let p = if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 };
            (*k, p)
        })
        .collect()
}

/// Outcome-group and review-category distributions per (model, prompt, field).
pub fn aggregate_audit(records: &[AuditRecord]) -> Result<AuditAggregate, GroundingError> {
    let unresolved: Vec<String> = records
        .iter()
        .filter(|r| r.outcome_group().is_none())
        .map(|r| format!("{} ({})", r.record_id, r.audit_id()))
        .collect();
    if !unresolved.is_empty() {
        return Err(GroundingError::Unresolved(unresolved));
    }
    let mut grouped: BTreeMap<(String, PromptVariant, EvidenceField), Vec<&AuditRecord>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.model_name.clone(), r.prompt_variant, r.field))
            .or_default()
            .push(r);
    }
    let cells = grouped
        .into_iter()
        .map(|((model_name, prompt_variant, field), rs)| {
            let mut group_counts = BTreeMap::new();
            let mut category_counts = BTreeMap::new();
            for r in &rs {
                *group_counts.entry(r.outcome_group().expect("checked above")).or_insert(0) += 1;
                if let Some(c) = r.review_category.filter(|_| r.is_flagged()) {
                    *category_counts.entry(c).or_insert(0) += 1;
                }
            }
            let flagged = rs.iter().filter(|r| r.is_flagged()).count();
            for g in OutcomeGroup::ALL {
                group_counts.entry(g).or_insert(0);
            }
            for c in ReviewCategory::ALL {
                category_counts.entry(c).or_insert(0);
            }
            AuditCell {
                model_name,
                prompt_variant,
                field,
                total: rs.len(),
                group_percent: percent_map(&OutcomeGroup::ALL, &group_counts, rs.len()),
                group_counts,
                flagged,
                category_percent: percent_map(&ReviewCategory::ALL, &category_counts, flagged),
                category_counts,
            }
        })
        .collect();
    Ok(AuditAggregate { cells })
}

impl AuditAggregate {
    /// Error-type table: model-prompt × field rows, six category columns.
    pub fn render_text(&self) -> String {
        let mut out = format!("{:<28}{:<26}", "Model-Prompt", "Field");
        for c in ReviewCategory::ALL {
            out.push_str(&format!("{:>8}", c.short_label()));
        }
        out.push_str(&format!("{:>9}{:>9}{:>9}{:>9}\n", "Flagged", "Verb.%", "NoHal.%", "Hal.%"));
        for cell in &self.cells {
            out.push_str(&format!(
                "{:<28}{:<26}",
                format!("{} {}", cell.model_name, cell.prompt_variant),
                cell.field.key()
            ));
            for c in ReviewCategory::ALL {
                out.push_str(&format!("{:>8.1}", cell.category_percent[&c]));
            }
            out.push_str(&format!("{:>9}", cell.flagged));
            for g in OutcomeGroup::ALL {
                out.push_str(&format!("{:>9.1}", cell.group_percent[&g]));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(field: EvidenceField, items: &[&str]) -> ExtractionResult {
        let list = Some(items.iter().map(|s| s.to_string()).collect());
        let mut r = ExtractionResult {
            record_id: "p1".into(),
            model_name: "m".into(),
            prompt_variant: PromptVariant::Short,
            incision_types: None,
            contraindications: None,
            previous_delivery_modes: None,
            raw_response: String::new(),
            retried: false,
        };
        match field {
            EvidenceField::IncisionTypes => r.incision_types = list,
            EvidenceField::Contraindications => r.contraindications = list,
            EvidenceField::PreviousDeliveryModes => r.previous_delivery_modes = list,
        }
        r
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Low-Transverse  C/S."), "lowtransverse cs");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("lowtransverse cs"), "lowtransverse cs");
        assert_eq!(normalize("  Hx:\tLTCS \n x2 "), "hx ltcs x2");
        assert_eq!(normalize("Café ÉTÉ"), "café été");
    }

    #[test]
    fn case_fold_match() {
        let audits = verify_verbatim(&result(EvidenceField::IncisionTypes, &["low transverse"]), "Prior Low transverse C/S.");
        assert_eq!(audits.len(), 1);
        assert!(audits[0].verbatim_match);
        assert_eq!(audits[0].outcome_group(), Some(OutcomeGroup::VerbatimMatch));
    }

    #[test]
    fn abbreviation_expansion_is_flagged_then_paraphrase() {
        let mut audits = verify_verbatim(
            &result(EvidenceField::PreviousDeliveryModes, &["history of cesarean"]),
            "Pt with hx of cesarean in 2015.",
        );
        assert!(!audits[0].verbatim_match);
        assert_eq!(audits[0].outcome_group(), None);
        audits[0].set_review(ReviewCategory::ParaphraseAccurate);
        assert_eq!(audits[0].outcome_group(), Some(OutcomeGroup::NoHallucinationVariant));
    }

    #[test]
    fn absence_statement_is_flagged_then_unsupported() {
        let mut audits = verify_verbatim(
            &result(EvidenceField::IncisionTypes, &["incision type not specified"]),
            "Prior cesarean x1. Desires repeat.",
        );
        assert!(audits[0].is_flagged());
        audits[0].set_review(ReviewCategory::UnsupportedAddition);
        assert_eq!(audits[0].outcome_group(), Some(OutcomeGroup::HallucinationVariant));
    }

    #[test]
    fn null_fields_produce_no_records() {
        let mut r = result(EvidenceField::IncisionTypes, &[]);
        r.incision_types = None;
        assert!(verify_verbatim(&r, "anything").is_empty());
    }

    #[test]
    fn outcome_mapping_table() {
        use ReviewCategory::*;
        for c in [ParaphraseAccurate, TypoInOriginal, TypoInGenerated] {
            assert_eq!(outcome_group(false, Some(c)), Some(OutcomeGroup::NoHallucinationVariant));
            assert_eq!(outcome_group(true, Some(c)), Some(OutcomeGroup::VerbatimMatch));
        }
        for c in [UnsupportedAddition, Hallucination, PartialHallucination] {
            assert_eq!(outcome_group(false, Some(c)), Some(OutcomeGroup::HallucinationVariant));
        }
        assert_eq!(outcome_group(false, None), None);
        assert_eq!(ReviewCategory::ALL.len(), 6);
        assert_eq!("hallucination".parse::<ReviewCategory>(), Ok(Hallucination));
    }

    fn flagged(field: EvidenceField, text: &str, index: usize) -> AuditRecord {
        AuditRecord {
            record_id: "p1".into(),
            model_name: "m".into(),
            prompt_variant: PromptVariant::Short,
            field,
            index,
            extracted: text.into(),
            verbatim_match: false,
            review_category: None,
        }
    }

    #[test]
    fn flag_log_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_flag_log(dir.path(), &"p1".into(), &[]).unwrap();
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(
            keys,
            ["hallucinated_contraindications", "hallucinated_incision_types", "hallucinated_previous_delivery_modes"]
        );
        assert!(value.as_object().unwrap().values().all(|v| v.as_array().unwrap().is_empty()));

        let mut matched = flagged(EvidenceField::IncisionTypes, "ok", 2);
        matched.verbatim_match = true;
        let records = [
            flagged(EvidenceField::IncisionTypes, "first", 0),
            flagged(EvidenceField::Contraindications, "contra", 0),
            flagged(EvidenceField::IncisionTypes, "second", 1),
            matched,
            flagged(EvidenceField::PreviousDeliveryModes, "svd", 0),
        ];
        let log = FlagLog::from_records(&"p1".into(), &records).unwrap();
        assert_eq!(log.hallucinated_incision_types, ["first", "second"]);
        assert_eq!(log.hallucinated_contraindications, ["contra"]);
        assert_eq!(log.hallucinated_previous_delivery_modes, ["svd"]);

        let mut other = flagged(EvidenceField::IncisionTypes, "x", 0);
        other.record_id = "p2".into();
        assert!(matches!(
            write_flag_log(dir.path(), &"p1".into(), &[other]),
            Err(GroundingError::MixedRecords { .. })
        ));
    }

    #[test]
    fn aggregate_all_verbatim() {
        let mut r = flagged(EvidenceField::IncisionTypes, "a", 0);
        r.verbatim_match = true;
        let agg = aggregate_audit(&[r.clone(), r]).unwrap();
        let cell = &agg.cells[0];
        assert_eq!(cell.group_percent[&OutcomeGroup::VerbatimMatch], 100.0);
        assert_eq!(cell.group_percent[&OutcomeGroup::HallucinationVariant], 0.0);
        assert_eq!(cell.flagged, 0);
    }

    #[test]
    fn aggregate_fine_split() {
        let records: Vec<_> = (0..10)
            .map(|i| {
                let mut r = flagged(EvidenceField::Contraindications, "x", i);
                r.set_review(if i < 8 { ReviewCategory::ParaphraseAccurate } else { ReviewCategory::Hallucination });
                r
            })
            .collect();
        let agg = aggregate_audit(&records).unwrap();
        let cell = &agg.cells[0];
        let split: Vec<f64> = ReviewCategory::ALL.iter().map(|c| cell.category_percent[c]).collect();
        // Para, Typo-O, Typo-G, Extra, Part., Hall.
        assert_eq!(split, [80.0, 0.0, 0.0, 0.0, 0.0, 20.0]);
        assert_eq!(cell.group_percent[&OutcomeGroup::NoHallucinationVariant], 80.0);
        assert!(agg.render_text().contains("80.0"));
    }

    #[test]
    fn aggregate_requires_reviews() {
        let mut r = flagged(EvidenceField::IncisionTypes, "x", 0);
        r.record_id = "p9".into();
        match aggregate_audit(&[r]) {
            Err(GroundingError::Unresolved(ids)) => assert!(ids[0].starts_with("p9")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn normalize_idempotent_and_shrinking(s in "\\PC{0,60}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert!(once.chars().count() <= s.chars().count());
        }

        #[test]
        fn aggregated_percentages_sum_to_hundred(reviews in proptest::collection::vec(proptest::option::of(0usize..6), 1..40)) {
            let records: Vec<_> = reviews.iter().enumerate().map(|(i, r)| {
                let mut a = flagged(EvidenceField::IncisionTypes, "x", i);
                match r {
                    Some(c) => a.set_review(ReviewCategory::ALL[*c]),
                    None => a.verbatim_match = true,
                }
                a
            }).collect();
            let agg = aggregate_audit(&records).unwrap();
            for cell in agg.cells {
                let g: f64 = cell.group_percent.values().sum();
                prop_assert!((g - 100.0).abs() <= 0.1);
                if cell.flagged > 0 {
                    let c: f64 = cell.category_percent.values().sum();
                    prop_assert!((c - 100.0).abs() <= 0.1);
                }
            }
        }
    }
}
