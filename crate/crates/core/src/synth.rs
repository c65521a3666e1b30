//! Seeded synthetic corpus with a ground-truth sidecar.
//!
//! Notes are built from short templates: a PHI line that the scrubber must
//! mask, obstetric history sentences carrying planted eligibility evidence,
//! and a plan section mixing framing cues with procedural text.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjudication::{Concept, FinalStatus};
use crate::corpus::{DeliveryGroup, DeliveryMode, IncisionType, PatientRecord, PregnancyHistoryEntry, RecordId};
use crate::eligibility::EligibilityCategory;
use crate::extraction::EvidenceField;
use crate::framing::FramingCategory;
use crate::grounding::ReviewCategory;
use crate::mock::{echo_rewrite, ABSENCE_STATEMENT};
use crate::util::{write_json, write_jsonl};

/// What the history section of a Potentially Eligible note documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedEvidence {
    LowTransverse,
    PriorVaginalBirth,
    Classical,
    PlacentaPrevia,
    Myomectomy,
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_rcs: usize,
    pub n_vbac: usize,
    /// Relative weights of structured eligibility categories among RCS patients.
    pub eligibility_mix: BTreeMap<EligibilityCategory, u32>,
    /// Relative weights of note evidence among Potentially Eligible patients.
    pub pe_evidence_mix: BTreeMap<PlantedEvidence, u32>,
    /// Relative weights of counseling cues per delivery group.
    pub framing_mix: BTreeMap<DeliveryGroup, BTreeMap<FramingCategory, u32>>,
    pub counseling_sentences: (usize, usize),
    pub procedural_sentences: (usize, usize),
    /// Chance that a planted sentence uses the "Hx" abbreviation.
    pub abbreviation_rate: f64,
    /// Chance that an expert label set carries a second category.
    pub expert_second_label_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        use EligibilityCategory::*;
        use FramingCategory::*;
        let rcs_framing = [
            (RiskFocused, 12),
            (BalancedInformation, 2),
            (Directive, 2),
            (SharedDecisionMaking, 1),
            (StatisticalEvidence, 1),
            (BenefitFocused, 1),
            (Reassuring, 1),
        ];
        let vbac_framing = [
            (RiskFocused, 6),
            (BalancedInformation, 2),
            (Directive, 1),
            (SharedDecisionMaking, 3),
            (StatisticalEvidence, 2),
            (BenefitFocused, 2),
            (Reassuring, 1),
        ];
        SyntheticCorpusSpec {
            n_rcs: 40,
            n_vbac: 20,
            eligibility_mix: [(Eligible, 26), (PotentiallyEligible, 47), (LimitedEligibility, 20), (Contraindicated, 5), (Unknown, 2)]
                .into_iter()
                .collect(),
            pe_evidence_mix: [
                (PlantedEvidence::LowTransverse, 5),
                (PlantedEvidence::PriorVaginalBirth, 2),
                (PlantedEvidence::Classical, 1),
                (PlantedEvidence::PlacentaPrevia, 1),
                (PlantedEvidence::Myomectomy, 1),
                (PlantedEvidence::NoEvidence, 2),
            ]
            .into_iter()
            .collect(),
            framing_mix: [
                (DeliveryGroup::Rcs, rcs_framing.into_iter().collect()),
                (DeliveryGroup::Vbac, vbac_framing.into_iter().collect()),
            ]
            .into_iter()
            .collect(),
            counseling_sentences: (1, 3),
            procedural_sentences: (1, 3),
            abbreviation_rate: 0.3,
            expert_second_label_rate: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |m: &mut dyn Iterator<Item = u32>| m.sum::<u32>() > 0;
        if self.n_rcs > 0 && !positive(&mut self.eligibility_mix.values().copied()) {
            return Err("eligibility_mix needs a positive weight".into());
        }
        if self.eligibility_mix.get(&EligibilityCategory::PotentiallyEligible).copied().unwrap_or(0) > 0
            && !positive(&mut self.pe_evidence_mix.values().copied())
        {
            return Err("pe_evidence_mix needs a positive weight".into());
        }
        for g in DeliveryGroup::ALL {
            let n = if g == DeliveryGroup::Rcs { self.n_rcs } else { self.n_vbac };
            let ok = self
                .framing_mix
                .get(&g)
                .is_some_and(|m| m.iter().any(|(c, w)| c.is_counseling() && *w > 0));
            if n > 0 && !ok {
                return Err(format!("framing_mix for {g} needs a positive counseling weight"));
            }
            if self.framing_mix.get(&g).is_some_and(|m| m.contains_key(&FramingCategory::NotCounseling)) {
                return Err("framing_mix must not weight Not Counseling; use procedural_sentences".into());
            }
        }
        for (name, (lo, hi)) in [("counseling_sentences", self.counseling_sentences), ("procedural_sentences", self.procedural_sentences)] {
            if lo > hi {
                return Err(format!("{name}: minimum exceeds maximum"));
            }
        }
        if self.counseling_sentences.0 == 0 {
            return Err("counseling_sentences minimum must be at least 1".into());
        }
        for (name, p) in [("abbreviation_rate", self.abbreviation_rate), ("expert_second_label_rate", self.expert_second_label_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub record_id: RecordId,
    pub field: EvidenceField,
    /// Sentence exactly as written in the note.
    pub text: String,
    pub concept: Concept,
    /// False when the sentence contains an abbreviation the mock spells out.
    pub echoed_verbatim: bool,
}

/// What a reviewer should answer for a flagged string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewAnswer {
    pub record_id: RecordId,
    pub extracted: String,
    pub category: ReviewCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingTruth {
    pub record_id: RecordId,
    pub index: usize,
    pub text: String,
    pub category: FramingCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub note_id: RecordId,
    pub index: usize,
    /// First entry is the primary label.
    pub labels: Vec<FramingCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticCorpusSpec,
    pub planted: Vec<PlantedTruth>,
    pub review_answers: Vec<ReviewAnswer>,
    pub consult_decisions: BTreeMap<RecordId, FinalStatus>,
    pub expected_category: BTreeMap<RecordId, EligibilityCategory>,
    pub expected_final: BTreeMap<RecordId, FinalStatus>,
    pub framing: Vec<FramingTruth>,
}

impl GroundTruth {
    pub fn answer_for(&self, record_id: &RecordId, extracted: &str) -> Option<ReviewCategory> {
        self.review_answers
            .iter()
            .find(|a| &a.record_id == record_id && a.extracted == extracted)
            .map(|a| a.category)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<PatientRecord>,
    pub history: Vec<PregnancyHistoryEntry>,
    pub truth: GroundTruth,
    pub expert_labels: Vec<ExpertLabel>,
}

pub const NOTES_FILE: &str = "notes.jsonl";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const EXPERT_FILE: &str = "expert_labels.jsonl";

impl SyntheticCorpus {
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        write_jsonl(&dir.join(NOTES_FILE), &self.records)?;
        write_jsonl(&dir.join(HISTORY_FILE), &self.history)?;
        write_json(&dir.join(TRUTH_FILE), &self.truth)?;
        write_jsonl(&dir.join(EXPERT_FILE), &self.expert_labels)
    }
}

const FIRST_NAMES: &[&str] = &["Maria", "Aisha", "Emily", "Grace", "Hannah", "Priya", "Sofia", "Laura"];
const LAST_NAMES: &[&str] = &["Lopez", "Nguyen", "Carter", "Okafor", "Schmidt", "Patel", "Reyes", "Brooks"];
const CREDENTIALS: &[&str] = &["MD", "CNM", "APRN"];

const LOW_TRANSVERSE: &[&str] = &[
    "Prior LTCS in {year} for arrest of dilation.",
    "Low transverse uterine incision documented in the {year} operative report.",
    "Prior cesarean via Pfannenstiel incision in {year}.",
    "Kerr hysterotomy at prior cesarean in {year}.",
];
const LOW_TRANSVERSE_ABBREVIATED: &[&str] = &["Hx of LTCS in {year} for breech presentation."];
const VAGINAL: &[&str] = &["NSVD in {year} before her cesarean.", "SVD at term in {year} with no complications."];
const VAGINAL_ABBREVIATED: &[&str] = &["Hx of vaginal delivery in {year}."];
const CLASSICAL: &[&str] = &[
    "Prior classical cesarean in {year}; TOLAC contraindicated.",
    "Vertical uterine incision at prior cesarean, trial of labor contraindicated.",
    "T-shaped hysterotomy in {year}; trial of labor contraindicated.",
];
const PREVIA: &[&str] = &["Complete placenta previa on ultrasound at 32 weeks.", "Placenta previa noted on anatomy scan."];
const MYOMECTOMY: &[&str] = &["History of myomectomy in {year}, cavity status unclear."];

fn cue_templates(category: FramingCategory) -> &'static [&'static str] {
    use FramingCategory::*;
    match category {
        RiskFocused => &[
            "Risks of RCS include bleeding, infection and damage to nearby organs.",
            "Discussed risk of hemorrhage and need for transfusion with repeat surgery.",
            "Risk of scar separation with labor was reviewed.",
        ],
        BenefitFocused => &[
            "Benefits of TOLAC include shorter recovery and fewer surgical complications.",
            "A successful VBAC would improve recovery time.",
        ],
        Directive => &["We recommend proceeding with repeat cesarean section.", "Recommend TOLAC given favorable history."],
        SharedDecisionMaking => &[
            "Patient desires TOLAC after discussion of options.",
            "She was offered TOLAC and will let us know her decision.",
            "Her preference is a repeat cesarean, which we support.",
        ],
        BalancedInformation => &[
            "Risks and benefits of TOLAC versus RCS were discussed in detail.",
            "Reviewed benefits and risks of both delivery options.",
        ],
        StatisticalEvidence => &[
            "Using MFMU calculator she has a 74% sucess rate of VBAC.",
            "Estimated chance of successful TOLAC is 65% by calculator.",
        ],
        Reassuring => &[
            "She was reassured that her chance of success is good.",
            "Patient reassured regarding the safety of the plan.",
        ],
        NotCounseling => &[
            "Admit to labor and delivery.",
            "Type and screen ordered.",
            "Continue fetal monitoring.",
            "Discharge home with routine follow-up.",
            "Consent signed and placed in chart.",
        ],
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn weighted<K: Copy>(rng: &mut ChaCha8Rng, mix: &BTreeMap<K, u32>) -> K {
    let keys: Vec<K> = mix.keys().copied().collect();
    let dist = WeightedIndex::new(mix.values().copied()).expect("validated weights");
    keys[dist.sample(rng)]
}

fn slash_date(d: NaiveDate) -> String {
    d.format("%m/%d/%Y").to_string()
}

struct NoteBuilder<'a> {
    record_id: RecordId,
    history_lines: Vec<String>,
    planted: &'a mut Vec<PlantedTruth>,
}

impl NoteBuilder<'_> {
    fn plant(&mut self, field: EvidenceField, concept: Concept, text: String) {
        self.planted.push(PlantedTruth {
            record_id: self.record_id.clone(),
            field,
            echoed_verbatim: echo_rewrite(&text) == text,
            concept,
            text: text.clone(),
        });
        self.history_lines.push(text);
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut history = Vec::new();
    let mut planted = Vec::new();
    let mut review_answers = Vec::new();
    let mut consult_decisions = BTreeMap::new();
    let mut expected_category = BTreeMap::new();
    let mut expected_final = BTreeMap::new();
    let mut framing = Vec::new();
    let mut expert_labels = Vec::new();
    let base = NaiveDate::from_ymd_opt(2021, 1, 1).expect("valid date");

    let patients = (0..spec.n_rcs)
        .map(|i| (DeliveryGroup::Rcs, i))
        .chain((0..spec.n_vbac).map(|i| (DeliveryGroup::Vbac, i)));
    for (group, i) in patients {
        let record_id = RecordId::new(format!("{}-{:03}", group.as_str().to_lowercase(), i + 1));
        let delivery_date = base + Duration::days(rng.random_range(0..730));
        let age: u32 = rng.random_range(22..43);
        let dob = delivery_date - Duration::days(age as i64 * 365 + rng.random_range(0..365));
        let bmi = (rng.random_range(210..420) as f64) / 10.0;
        let gravida: u32 = rng.random_range(2..5);
        let year = |rng: &mut ChaCha8Rng, back: std::ops::Range<i64>| {
            (delivery_date - Duration::days(rng.random_range(back))).format("%Y").to_string()
        };

        let category = match group {
            DeliveryGroup::Rcs => weighted(&mut rng, &spec.eligibility_mix),
            DeliveryGroup::Vbac => EligibilityCategory::Eligible,
        };
        let mut builder = NoteBuilder {
            record_id: record_id.clone(),
            history_lines: vec![format!("OB history: G{gravida}P{} with one prior cesarean.", gravida - 1)],
            planted: &mut planted,
        };
        let cesarean = |incision: IncisionType, days_back: i64| PregnancyHistoryEntry {
            record_id: record_id.clone(),
            mode: DeliveryMode::Cesarean,
            incision_type: incision,
            delivery_date: Some(delivery_date - Duration::days(days_back)),
        };
        let abbreviate = |rng: &mut ChaCha8Rng| rng.random_bool(spec.abbreviation_rate);
        let mut has_incision_sentence = false;
        match category {
            EligibilityCategory::Eligible => {
                history.push(cesarean(IncisionType::LowTransverse, rng.random_range(900..2200)));
                let text = pick(&mut rng, LOW_TRANSVERSE).replace("{year}", &year(&mut rng, 900..2200));
                builder.plant(EvidenceField::IncisionTypes, Concept::LowTransverseEvidence, text);
                has_incision_sentence = true;
            }
            EligibilityCategory::LimitedEligibility => {
                history.push(cesarean(IncisionType::LowTransverse, rng.random_range(270..540)));
                let text = pick(&mut rng, LOW_TRANSVERSE).replace("{year}", &year(&mut rng, 270..540));
                builder.plant(EvidenceField::IncisionTypes, Concept::LowTransverseEvidence, text);
                has_incision_sentence = true;
            }
            EligibilityCategory::Contraindicated => {
                history.push(cesarean(IncisionType::Classical, rng.random_range(900..2200)));
                let text = pick(&mut rng, CLASSICAL).replace("{year}", &year(&mut rng, 900..2200));
                builder.plant(EvidenceField::Contraindications, Concept::ClassicalFamilyEvidence, text);
                has_incision_sentence = true;
            }
            EligibilityCategory::Unknown => {}
            EligibilityCategory::PotentiallyEligible => {
                history.push(cesarean(IncisionType::Unknown, rng.random_range(900..2200)));
                let evidence = weighted(&mut rng, &spec.pe_evidence_mix);
                let y = year(&mut rng, 900..3000);
                let final_status = match evidence {
                    PlantedEvidence::LowTransverse => {
                        let pool = if abbreviate(&mut rng) { LOW_TRANSVERSE_ABBREVIATED } else { LOW_TRANSVERSE };
                        let text = pick(&mut rng, pool).replace("{year}", &y);
                        builder.plant(EvidenceField::IncisionTypes, Concept::LowTransverseEvidence, text);
                        has_incision_sentence = true;
                        FinalStatus::ConfirmedEligible
                    }
                    PlantedEvidence::PriorVaginalBirth => {
                        let pool = if abbreviate(&mut rng) { VAGINAL_ABBREVIATED } else { VAGINAL };
                        let text = pick(&mut rng, pool).replace("{year}", &y);
                        builder.plant(EvidenceField::PreviousDeliveryModes, Concept::VaginalBirthEvidence, text);
                        FinalStatus::ConfirmedEligible
                    }
                    PlantedEvidence::Classical => {
                        let text = pick(&mut rng, CLASSICAL).replace("{year}", &y);
                        builder.plant(EvidenceField::Contraindications, Concept::ClassicalFamilyEvidence, text);
                        has_incision_sentence = true;
                        FinalStatus::Excluded
                    }
                    PlantedEvidence::PlacentaPrevia => {
                        let text = pick(&mut rng, PREVIA).to_string();
                        builder.plant(EvidenceField::Contraindications, Concept::VbacContraindicationEvidence, text);
                        FinalStatus::Excluded
                    }
                    PlantedEvidence::Myomectomy => {
                        let text = pick(&mut rng, MYOMECTOMY).replace("{year}", &y);
                        builder.plant(EvidenceField::Contraindications, Concept::NonInformative, text);
                        let decision = if rng.random_bool(0.5) { FinalStatus::ConfirmedEligible } else { FinalStatus::Excluded };
                        consult_decisions.insert(record_id.clone(), decision);
                        decision
                    }
                    PlantedEvidence::NoEvidence => FinalStatus::Excluded,
                };
                expected_final.insert(record_id.clone(), final_status);
            }
        }
        if group == DeliveryGroup::Rcs {
            expected_category.insert(record_id.clone(), category);
        }
        let history_lines = std::mem::take(&mut builder.history_lines);
        for t in planted.iter().filter(|t| t.record_id == record_id && !t.echoed_verbatim) {
            review_answers.push(ReviewAnswer {
                record_id: record_id.clone(),
                extracted: echo_rewrite(&t.text),
                category: ReviewCategory::ParaphraseAccurate,
            });
        }
        if !has_incision_sentence {
            review_answers.push(ReviewAnswer {
                record_id: record_id.clone(),
                extracted: ABSENCE_STATEMENT.to_string(),
                category: ReviewCategory::UnsupportedAddition,
            });
        }

        // Plan section.
        let mix = &spec.framing_mix[&group];
        let n_cues = rng.random_range(spec.counseling_sentences.0..=spec.counseling_sentences.1);
        let n_proc = rng.random_range(spec.procedural_sentences.0..=spec.procedural_sentences.1);
        let mut plan: Vec<(FramingCategory, String)> = Vec::new();
        for _ in 0..n_cues {
            let c = weighted(&mut rng, mix);
            plan.push((c, pick(&mut rng, cue_templates(c)).to_string()));
        }
        for _ in 0..n_proc {
            plan.push((FramingCategory::NotCounseling, pick(&mut rng, cue_templates(FramingCategory::NotCounseling)).to_string()));
        }
        plan.shuffle(&mut rng);
        for (index, (category, text)) in plan.iter().enumerate() {
            framing.push(FramingTruth {
                record_id: record_id.clone(),
                index,
                text: text.clone(),
                category: *category,
            });
            if category.is_counseling() {
                let mut labels = vec![*category];
                if rng.random_bool(spec.expert_second_label_rate) {
                    let other = *pick(&mut rng, &FramingCategory::COUNSELING);
                    if other != *category {
                        labels.push(other);
                    }
                }
                expert_labels.push(ExpertLabel {
                    note_id: record_id.clone(),
                    index,
                    labels,
                });
            }
        }

        let provider = format!(
            "Seen by {} {}, {} on {}. DOB: {}.",
            pick(&mut rng, FIRST_NAMES),
            pick(&mut rng, LAST_NAMES),
            pick(&mut rng, CREDENTIALS),
            slash_date(delivery_date),
            slash_date(dob)
        );
        let admission = match group {
            DeliveryGroup::Rcs => "admitted for scheduled repeat cesarean",
            DeliveryGroup::Vbac => "admitted in labor for TOLAC",
        };
        let ga = rng.random_range(37..41);
        let mut narrative = format!("HPI: {age} yo G{gravida}P{} at {ga} weeks {admission}.\n{provider}\n", gravida - 1);
        for line in history_lines {
            narrative.push_str(&line);
            narrative.push('\n');
        }
        narrative.push_str("Assessment and Plan: ");
        narrative.push_str(&plan.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" "));

        records.push(PatientRecord {
            record_id,
            narrative,
            group,
            prior_cesarean: true,
            age: Some(age as f64),
            bmi: Some(bmi),
            delivery_date: Some(delivery_date),
        });
    }
    Ok(SyntheticCorpus {
        records,
        history,
        truth: GroundTruth {
            spec: spec.clone(),
            planted,
            review_answers,
            consult_decisions,
            expected_category,
            expected_final,
            framing,
        },
        expert_labels,
    })
}

/// Expert label sets and primaries aligned to `keys`; None for unlabeled items.
pub fn expert_lookup(labels: &[ExpertLabel]) -> BTreeMap<(RecordId, usize), (BTreeSet<FramingCategory>, FramingCategory)> {
    labels
        .iter()
        .filter(|l| !l.labels.is_empty())
        .map(|l| ((l.note_id.clone(), l.index), (l.labels.iter().copied().collect(), l.labels[0])))
        .collect()
}
