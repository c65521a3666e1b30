//! Structured VBAC-eligibility classification for repeat-cesarean patients.
//!
//! Rules are evaluated in a fixed order: missing history, classical-family
//! incisions, non-ideal factors (many prior cesareans or a short interval),
//! then the eligible and potentially eligible definitions.

use std::collections::BTreeMap;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DeliveryMode, IncisionType, PatientRecord, PregnancyHistoryEntry, RecordId};
use crate::util::largest_remainder_tenths;

/// 18 months expressed in days (365.25 × 1.5, rounded).
pub const SHORT_INTERVAL_DAYS: i64 = 548;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EligibilityCategory {
    Eligible,
    PotentiallyEligible,
    LimitedEligibility,
    Contraindicated,
    Unknown,
}

impl EligibilityCategory {
    pub const ALL: [EligibilityCategory; 5] = [
        EligibilityCategory::Eligible,
        EligibilityCategory::PotentiallyEligible,
        EligibilityCategory::LimitedEligibility,
        EligibilityCategory::Contraindicated,
        EligibilityCategory::Unknown,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EligibilityCategory::Eligible => "Eligible",
            EligibilityCategory::PotentiallyEligible => "Potentially Eligible",
            EligibilityCategory::LimitedEligibility => "Limited Eligibility",
            EligibilityCategory::Contraindicated => "Contraindicated",
            EligibilityCategory::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for EligibilityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityInputs {
    pub n_prior_cesareans: u32,
    /// One entry per prior cesarean.
    pub incision_types: Vec<IncisionType>,
    pub has_prior_vaginal_birth: bool,
    /// A vaginal birth dated after a cesarean.
    pub has_prior_vbac: bool,
    pub interdelivery_interval_days: Option<i64>,
    pub has_history_data: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EligibilityError {
    #[error("current delivery {current} precedes prior delivery {prior}")]
    NegativeInterval { current: NaiveDate, prior: NaiveDate },
    #[error("record {0}: {1}")]
    Inconsistent(RecordId, String),
}

pub fn compute_interdelivery_interval(
    current_delivery: NaiveDate,
    last_prior_delivery: NaiveDate,
) -> Result<i64, EligibilityError> {
    let days = (current_delivery - last_prior_delivery).num_days();
    if days < 0 {
        return Err(EligibilityError::NegativeInterval {
            current: current_delivery,
            prior: last_prior_delivery,
        });
    }
    Ok(days)
}

impl EligibilityInputs {
    /// Summarize a patient's pregnancy history relative to the index delivery.
    pub fn from_history(
        record: &PatientRecord,
        history: &[&PregnancyHistoryEntry],
    ) -> Result<Self, EligibilityError> {
        let mut entries: Vec<&PregnancyHistoryEntry> = history.to_vec();
        entries.sort_by_key(|e| e.delivery_date);
        let cesareans: Vec<&&PregnancyHistoryEntry> =
            entries.iter().filter(|e| e.mode == DeliveryMode::Cesarean).collect();
        let first_cesarean = cesareans.iter().filter_map(|e| e.delivery_date).min();
        let vaginal = entries.iter().filter(|e| e.mode == DeliveryMode::Vaginal);
        let has_prior_vbac = match first_cesarean {
            Some(first) => vaginal
                .clone()
                .any(|e| e.delivery_date.is_some_and(|d| d > first)),
            None => false,
        };
        let last_prior = entries.iter().filter_map(|e| e.delivery_date).max();
        let interval = match (record.delivery_date, last_prior) {
            (Some(current), Some(prior)) => Some(compute_interdelivery_interval(current, prior)?),
            _ => None,
        };
        Ok(EligibilityInputs {
            n_prior_cesareans: cesareans.len() as u32,
            incision_types: cesareans.iter().map(|e| e.incision_type).collect(),
            has_prior_vaginal_birth: vaginal.count() > 0,
            has_prior_vbac,
            interdelivery_interval_days: interval,
            has_history_data: !entries.is_empty(),
        })
    }

    fn short_interval(&self) -> bool {
        self.interdelivery_interval_days
            .is_some_and(|d| d < SHORT_INTERVAL_DAYS)
    }
}

/// Total classification over valid inputs.
pub fn classify_structured(inputs: &EligibilityInputs) -> EligibilityCategory {
    use EligibilityCategory::*;
    // A history table with no cesarean rows carries no usable scar data.
    if !inputs.has_history_data || inputs.n_prior_cesareans == 0 {
        return Unknown;
    }
    if inputs.incision_types.iter().any(|i| i.is_classical_family()) {
        return Contraindicated;
    }
    let n = inputs.n_prior_cesareans;
    if (n > 2 && !inputs.has_prior_vbac) || inputs.short_interval() {
        return LimitedEligibility;
    }
    if n > 2 {
        return Eligible;
    }
    let all_low_transverse = inputs.incision_types.len() as u32 == n
        && inputs
            .incision_types
            .iter()
            .all(|i| *i == IncisionType::LowTransverse);
    if all_low_transverse || inputs.has_prior_vaginal_birth {
        Eligible
    } else {
        PotentiallyEligible
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityAssessment {
    pub record_id: RecordId,
    pub category: EligibilityCategory,
    pub inputs: EligibilityInputs,
    /// Classified without a dated prior delivery.
    pub interval_unknown: bool,
}

pub fn assess(
    record: &PatientRecord,
    history: &[&PregnancyHistoryEntry],
) -> Result<EligibilityAssessment, EligibilityError> {
    let inputs = EligibilityInputs::from_history(record, history)?;
    let category = classify_structured(&inputs);
    Ok(EligibilityAssessment {
        record_id: record.record_id.clone(),
        category,
        interval_unknown: inputs.has_history_data && inputs.interdelivery_interval_days.is_none(),
        inputs,
    })
}

/// Condition rows of the eligibility cross-tab.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionRow {
    OnePriorCs,
    TwoPriorCs,
    ThreeOrMorePriorCs,
    LowTransverseIncision,
    UnknownIncision,
    LowTransversePlusUnknown,
    ClassicalFamilyIncision,
    IntervalUnder18Months,
    IntervalAtLeast18Months,
    IntervalUnknown,
}

impl ConditionRow {
    pub const ALL: [ConditionRow; 10] = [
        ConditionRow::OnePriorCs,
        ConditionRow::TwoPriorCs,
        ConditionRow::ThreeOrMorePriorCs,
        ConditionRow::LowTransverseIncision,
        ConditionRow::UnknownIncision,
        ConditionRow::LowTransversePlusUnknown,
        ConditionRow::ClassicalFamilyIncision,
        ConditionRow::IntervalUnder18Months,
        ConditionRow::IntervalAtLeast18Months,
        ConditionRow::IntervalUnknown,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ConditionRow::OnePriorCs => "1 prior CS",
            ConditionRow::TwoPriorCs => "2 prior CS",
            ConditionRow::ThreeOrMorePriorCs => ">=3 prior CS",
            ConditionRow::LowTransverseIncision => "Low-transverse incision",
            ConditionRow::UnknownIncision => "Unknown incision",
            ConditionRow::LowTransversePlusUnknown => "Low-transverse + unknown",
            ConditionRow::ClassicalFamilyIncision => "Classical/T/J incision",
            ConditionRow::IntervalUnder18Months => "Interdelivery interval <18 mo",
            ConditionRow::IntervalAtLeast18Months => "Interdelivery interval >=18 mo",
            ConditionRow::IntervalUnknown => "Interdelivery interval unknown",
        }
    }

    /// Rows that describe this input (one per condition group).
    pub fn of(inputs: &EligibilityInputs) -> Vec<ConditionRow> {
        let mut rows = Vec::new();
        match inputs.n_prior_cesareans {
            0 => {}
            1 => rows.push(ConditionRow::OnePriorCs),
            2 => rows.push(ConditionRow::TwoPriorCs),
            _ => rows.push(ConditionRow::ThreeOrMorePriorCs),
        }
        let classical = inputs.incision_types.iter().any(|i| i.is_classical_family());
        let lt = inputs.incision_types.iter().any(|i| *i == IncisionType::LowTransverse);
        let unknown = inputs.incision_types.iter().any(|i| *i == IncisionType::Unknown);
        if classical {
            rows.push(ConditionRow::ClassicalFamilyIncision);
        } else if lt && unknown {
            rows.push(ConditionRow::LowTransversePlusUnknown);
        } else if lt {
            rows.push(ConditionRow::LowTransverseIncision);
        } else if unknown {
            rows.push(ConditionRow::UnknownIncision);
        }
        rows.push(match inputs.interdelivery_interval_days {
            Some(d) if d < SHORT_INTERVAL_DAYS => ConditionRow::IntervalUnder18Months,
            Some(_) => ConditionRow::IntervalAtLeast18Months,
            None => ConditionRow::IntervalUnknown,
        });
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: EligibilityCategory,
    pub count: usize,
    /// Largest-remainder rounding to one decimal, so the column sums to 100.0.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilitySummary {
    pub total: usize,
    pub distribution: Vec<CategoryShare>,
    /// Condition row → category → count; the Unknown category is omitted.
    pub conditions: BTreeMap<ConditionRow, BTreeMap<EligibilityCategory, usize>>,
    pub interval_unknown: usize,
}

pub fn summarize_cohort(assessments: &[EligibilityAssessment]) -> EligibilitySummary {
    let total = assessments.len();
    let counts: Vec<usize> = EligibilityCategory::ALL
        .iter()
        .map(|c| assessments.iter().filter(|a| a.category == *c).count())
        .collect();
    let tenths = largest_remainder_tenths(&counts);
    let distribution = EligibilityCategory::ALL
        .iter()
        .zip(counts.iter().zip(tenths))
        .map(|(&category, (&count, t))| CategoryShare {
            category,
            count,
            percent: t as f64 / 10.0,
        })
        .collect();
    let mut conditions: BTreeMap<ConditionRow, BTreeMap<EligibilityCategory, usize>> = ConditionRow::ALL
        .iter()
        .map(|row| {
            let cols = EligibilityCategory::ALL
                .iter()
                .filter(|c| **c != EligibilityCategory::Unknown)
                .map(|c| (*c, 0))
                .collect();
            (*row, cols)
        })
        .collect();
    for a in assessments.iter().filter(|a| a.category != EligibilityCategory::Unknown) {
        for row in ConditionRow::of(&a.inputs) {
            *conditions
                .get_mut(&row)
                .and_then(|cols| cols.get_mut(&a.category))
                .expect("all rows and columns seeded") += 1;
        }
    }
    EligibilitySummary {
        total,
        distribution,
        conditions,
        interval_unknown: assessments.iter().filter(|a| a.interval_unknown).count(),
    }
}

impl EligibilitySummary {
    /// Plain-text rendering: category distribution then the condition cross-tab.
    pub fn render_text(&self) -> String {
        let mut out = format!("Eligibility categories (N={})\n", self.total);
        for share in &self.distribution {
            out.push_str(&format!(
                "  {:<22} {:>6} {:>6.1}%\n",
                share.category.label(),
                share.count,
                share.percent
            ));
        }
        out.push_str(&format!(
            "\n{:<32}{:>8}{:>8}{:>8}{:>8}\n",
            "Condition type", "Elig.", "Pot.", "Lim.", "Contra."
        ));
        for (row, cols) in &self.conditions {
            out.push_str(&format!("{:<32}", row.label()));
            for count in cols.values() {
                out.push_str(&format!("{count:>8}"));
            }
            out.push('\n');
        }
        if self.interval_unknown > 0 {
            out.push_str(&format!(
                "\n{} patient(s) classified with an unknown interdelivery interval\n",
                self.interval_unknown
            ));
        }
        out
    }
}
