//! Human review of flagged extractions, synonym normalization of evidence,
//! and finalization of the analytic cohort.
//!
//! Review state lives in an append-only line-delimited event log; the
//! current state of every task is a fold over its events.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_sentences, DeliveryGroup, PatientRecord, RecordId};
use crate::eligibility::{EligibilityAssessment, EligibilityCategory};
use crate::extraction::EvidenceField;
use crate::grounding::{normalize, AuditRecord, OutcomeGroup, ReviewCategory};

pub const EVENT_LOG_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Concept normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    LowTransverseEvidence,
    ClassicalFamilyEvidence,
    VaginalBirthEvidence,
    VbacContraindicationEvidence,
    NonInformative,
}

impl Concept {
    pub const ALL: [Concept; 5] = [
        Concept::LowTransverseEvidence,
        Concept::ClassicalFamilyEvidence,
        Concept::VaginalBirthEvidence,
        Concept::VbacContraindicationEvidence,
        Concept::NonInformative,
    ];

    /// Higher wins when one string mentions several concepts.
    fn priority(self) -> u8 {
        match self {
            Concept::VbacContraindicationEvidence => 4,
            Concept::ClassicalFamilyEvidence => 3,
            Concept::LowTransverseEvidence => 2,
            Concept::VaginalBirthEvidence => 1,
            Concept::NonInformative => 0,
        }
    }

    pub fn excludes(self) -> bool {
        matches!(self, Concept::ClassicalFamilyEvidence | Concept::VbacContraindicationEvidence)
    }

    pub fn supports(self) -> bool {
        matches!(self, Concept::LowTransverseEvidence | Concept::VaginalBirthEvidence)
    }
}

const NEGATION_CUES: &[&str] = &["no", "not", "denies", "without", "negative"];
const NEGATION_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMap {
    pub version: String,
    /// Normalized surface form → concept.
    pub entries: BTreeMap<String, Concept>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMatch {
    pub concept: Concept,
    pub surface_form: Option<String>,
}

impl Default for ConceptMap {
    fn default() -> Self {
        use Concept::*;
        let entries = [
            ("pfannenstiel", LowTransverseEvidence),
            ("ltcs", LowTransverseEvidence),
            ("low transverse", LowTransverseEvidence),
            ("lowtransverse", LowTransverseEvidence),
            ("kerr", LowTransverseEvidence),
            ("classical", ClassicalFamilyEvidence),
            ("vertical", ClassicalFamilyEvidence),
            ("t-shaped", ClassicalFamilyEvidence),
            ("j-shaped", ClassicalFamilyEvidence),
            ("t incision", ClassicalFamilyEvidence),
            ("svd", VaginalBirthEvidence),
            ("nsvd", VaginalBirthEvidence),
            ("vaginal delivery", VaginalBirthEvidence),
            ("vbac", VaginalBirthEvidence),
            ("placenta previa", VbacContraindicationEvidence),
            ("prior uterine rupture", VbacContraindicationEvidence),
            ("cesarean", NonInformative),
            ("c-section", NonInformative),
        ];
        ConceptMap::new("default-1", entries.iter().map(|(k, v)| (k.to_string(), *v)))
            .expect("default concept map is complete")
    }
}

impl ConceptMap {
    pub fn new(
        version: impl Into<String>,
        entries: impl IntoIterator<Item = (String, Concept)>,
    ) -> Result<Self, AdjudicationError> {
        let entries: BTreeMap<String, Concept> = entries
            .into_iter()
            .map(|(k, v)| (normalize(&k), v))
            .filter(|(k, _)| !k.is_empty())
            .collect();
        let missing: Vec<Concept> = Concept::ALL
            .into_iter()
            .filter(|c| !entries.values().any(|v| v == c))
            .collect();
        if !missing.is_empty() {
            return Err(AdjudicationError::IncompleteConceptMap(missing));
        }
        Ok(ConceptMap {
            version: version.into(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, AdjudicationError> {
        let raw: ConceptMap = crate::util::read_json(path)?;
        ConceptMap::new(raw.version, raw.entries)
    }

    /// Strongest concept whose surface form occurs as whole words, skipping
    /// occurrences shortly after a negation cue.
    pub fn classify(&self, text: &str) -> ConceptMatch {
        let tokens: Vec<String> = normalize(text).split(' ').map(str::to_string).collect();
        let mut best = ConceptMatch {
            concept: Concept::NonInformative,
            surface_form: None,
        };
        for (form, concept) in &self.entries {
            let form_tokens: Vec<&str> = form.split(' ').collect();
            let n = form_tokens.len();
            if n > tokens.len() {
                continue;
            }
            let hit = (0..=tokens.len() - n).any(|i| {
                tokens[i..i + n].iter().zip(&form_tokens).all(|(a, b)| a == b)
                    && !tokens[i.saturating_sub(NEGATION_WINDOW)..i]
                        .iter()
                        .any(|t| NEGATION_CUES.contains(&t.as_str()))
            });
            let better = best.surface_form.is_none() || concept.priority() > best.concept.priority();
            if hit && better {
                best = ConceptMatch {
                    concept: *concept,
                    surface_form: Some(form.clone()),
                };
            }
        }
        best
    }
}

/// Terms marking surgical histories that always go to a clinical consult.
pub fn default_ambiguity_terms() -> Vec<String> {
    vec!["myomectomy".into(), "transfundal".into()]
}

pub fn needs_consult(narrative: &str, terms: &[String]) -> Option<String> {
    let note = normalize(narrative);
    terms
        .iter()
        .find(|t| !normalize(t).is_empty() && note.contains(&normalize(t)))
        .cloned()
}

// ---------------------------------------------------------------------------
// Review tasks and the event log

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FinalStatus {
    ConfirmedEligible,
    Excluded,
}

impl fmt::Display for FinalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A reviewer's answer: a review category for flagged extractions or a final
/// status for clinical consults. Serialized as the bare variant name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Decision {
    Review(ReviewCategory),
    Eligibility(FinalStatus),
}

impl std::str::FromStr for Decision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(c) = s.parse::<ReviewCategory>() {
            return Ok(Decision::Review(c));
        }
        match s.to_ascii_lowercase().as_str() {
            "confirmedeligible" => Ok(Decision::Eligibility(FinalStatus::ConfirmedEligible)),
            "excluded" => Ok(Decision::Eligibility(FinalStatus::Excluded)),
            _ => Err(format!("unknown decision {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSubject {
    Flag { audit: AuditRecord },
    Consult { record_id: RecordId, reason: String },
}

impl TaskSubject {
    pub fn record_id(&self) -> &RecordId {
        match self {
            TaskSubject::Flag { audit } => &audit.record_id,
            TaskSubject::Consult { record_id, .. } => record_id,
        }
    }

    fn accepts(&self, decision: Decision) -> bool {
        matches!(
            (self, decision),
            (TaskSubject::Flag { .. }, Decision::Review(_)) | (TaskSubject::Consult { .. }, Decision::Eligibility(_))
        )
    }
}

/// Byte range inside `note_context`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locus {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub decision: Decision,
    pub reviewer_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub subject: TaskSubject,
    pub note_context: String,
    pub locus: Option<Locus>,
    pub status: TaskStatus,
    pub decision: Option<Decision>,
    pub reviewer_note: String,
    pub history: Vec<DecisionRecord>,
}

impl ReviewTask {
    pub fn record_id(&self) -> &RecordId {
        self.subject.record_id()
    }

    /// The audit record with this task's decision applied.
    pub fn reviewed_audit(&self) -> Option<AuditRecord> {
        let TaskSubject::Flag { audit } = &self.subject else { return None };
        let mut audit = audit.clone();
        if let Some(Decision::Review(c)) = self.decision {
            audit.set_review(c);
        }
        Some(audit)
    }

    pub fn outcome_group(&self) -> Option<OutcomeGroup> {
        self.reviewed_audit().and_then(|a| a.outcome_group())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub subject: TaskSubject,
    pub note_context: String,
    pub locus: Option<Locus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Enqueued {
        version: u32,
        seq: u64,
        timestamp: DateTime<Utc>,
        task: TaskSpec,
    },
    Resolved {
        version: u32,
        seq: u64,
        timestamp: DateTime<Utc>,
        task_id: String,
        decision: Decision,
        reviewer_note: String,
    },
}

impl ReviewEvent {
    pub fn seq(&self) -> u64 {
        match self {
            ReviewEvent::Enqueued { seq, .. } | ReviewEvent::Resolved { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {task_id} cannot take decision {decision:?}")]
    WrongDecisionKind { task_id: String, decision: Decision },
    #[error("event log {path}:{line}: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },
    #[error("event log version {found} is not supported (expected {EVENT_LOG_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("record {record_id} is {category}, only Potentially Eligible records are adjudicated")]
    NotPotentiallyEligible { record_id: RecordId, category: EligibilityCategory },
    #[error("record {record_id}: evidence {audit_id} is not supported by the note ({group:?})")]
    UnsupportedEvidence { record_id: RecordId, audit_id: String, group: Option<OutcomeGroup> },
    #[error("records awaiting adjudication: {}", .0.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(", "))]
    Unadjudicated(Vec<RecordId>),
    #[error("concept map lacks surface forms for {0:?}")]
    IncompleteConceptMap(Vec<Concept>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Sentences around the best fuzzy locus of `extracted`, or the note head.
pub fn context_window(narrative: &str, extracted: &str) -> (String, Option<Locus>) {
    const RADIUS: usize = 2;
    let sentences = split_sentences(narrative, 0, narrative.len());
    if sentences.is_empty() {
        return (narrative.to_string(), None);
    }
    let target: BTreeSet<String> = normalize(extracted).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
    let score = |&(s, e): &(usize, usize)| {
        let tokens: BTreeSet<String> = normalize(&narrative[s..e]).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect();
        let inter = tokens.intersection(&target).count();
        let union = tokens.union(&target).count();
        if union == 0 { 0.0 } else { inter as f64 / union as f64 }
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, span) in sentences.iter().enumerate() {
        let s = score(span);
        if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (centre, locus) = match best {
        Some((i, _)) => (i, true),
        None => (0, false),
    };
    let first = centre.saturating_sub(RADIUS);
    let last = (centre + RADIUS).min(sentences.len() - 1);
    let start = sentences[first].0;
    let end = sentences[last].1;
    let locus = locus.then(|| Locus {
        start: sentences[centre].0 - start,
        end: sentences[centre].1 - start,
    });
    (narrative[start..end].to_string(), locus)
}

/// In-memory fold of the event log, optionally backed by a file.
#[derive(Debug, Default)]
pub struct ReviewStore {
    path: Option<PathBuf>,
    events: Vec<ReviewEvent>,
    tasks: BTreeMap<String, ReviewTask>,
}

impl ReviewStore {
    pub fn in_memory() -> Self {
        ReviewStore::default()
    }

    /// Open (or start) the log at `path` and replay it.
    pub fn open(path: &Path) -> Result<Self, AdjudicationError> {
        let mut store = ReviewStore {
            path: Some(path.to_path_buf()),
            ..Default::default()
        };
        if path.exists() {
            let text = fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: ReviewEvent = serde_json::from_str(line).map_err(|e| AdjudicationError::CorruptLog {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                let version = match &event {
                    ReviewEvent::Enqueued { version, .. } | ReviewEvent::Resolved { version, .. } => *version,
                };
                if version != EVENT_LOG_VERSION {
                    return Err(AdjudicationError::UnsupportedVersion { found: version });
                }
                store.apply(event)?;
            }
        }
        Ok(store)
    }

    fn apply(&mut self, event: ReviewEvent) -> Result<(), AdjudicationError> {
        match &event {
            ReviewEvent::Enqueued { task, .. } => {
                self.tasks.entry(task.task_id.clone()).or_insert_with(|| ReviewTask {
                    task_id: task.task_id.clone(),
                    subject: task.subject.clone(),
                    note_context: task.note_context.clone(),
                    locus: task.locus,
                    status: TaskStatus::Pending,
                    decision: None,
                    reviewer_note: String::new(),
                    history: Vec::new(),
                });
            }
            ReviewEvent::Resolved {
                seq,
                timestamp,
                task_id,
                decision,
                reviewer_note,
                ..
            } => {
                let task = self
                    .tasks
                    .get_mut(task_id)
                    .ok_or_else(|| AdjudicationError::UnknownTask(task_id.clone()))?;
                task.status = TaskStatus::Resolved;
                task.decision = Some(*decision);
                task.reviewer_note = reviewer_note.clone();
                task.history.push(DecisionRecord {
                    seq: *seq,
                    timestamp: *timestamp,
                    decision: *decision,
                    reviewer_note: reviewer_note.clone(),
                });
            }
        }
        self.events.push(event);
        Ok(())
    }

    fn append(&mut self, event: ReviewEvent) -> Result<(), AdjudicationError> {
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut line = serde_json::to_string(&event).map_err(io::Error::from)?;
            line.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.apply(event)
    }

    fn next_seq(&self) -> u64 {
        self.events.last().map(|e| e.seq() + 1).unwrap_or(0)
    }

    /// Add a task unless one with the same id exists. Returns whether it was new.
    pub fn enqueue(&mut self, spec: TaskSpec, timestamp: DateTime<Utc>) -> Result<bool, AdjudicationError> {
        if self.tasks.contains_key(&spec.task_id) {
            return Ok(false);
        }
        let event = ReviewEvent::Enqueued {
            version: EVENT_LOG_VERSION,
            seq: self.next_seq(),
            timestamp,
            task: spec,
        };
        self.append(event)?;
        Ok(true)
    }

    /// Record a decision. Re-resolving appends another event; the latest wins.
    pub fn resolve_task(
        &mut self,
        task_id: &str,
        decision: Decision,
        reviewer_note: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<&ReviewTask, AdjudicationError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| AdjudicationError::UnknownTask(task_id.to_string()))?;
        if !task.subject.accepts(decision) {
            return Err(AdjudicationError::WrongDecisionKind {
                task_id: task_id.to_string(),
                decision,
            });
        }
        let event = ReviewEvent::Resolved {
            version: EVENT_LOG_VERSION,
            seq: self.next_seq(),
            timestamp,
            task_id: task_id.to_string(),
            decision,
            reviewer_note: reviewer_note.to_string(),
        };
        self.append(event)?;
        Ok(&self.tasks[task_id])
    }

    pub fn task(&self, task_id: &str) -> Option<&ReviewTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &ReviewTask> {
        self.tasks.values()
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewTask> {
        self.tasks.values().filter(|t| t.status == TaskStatus::Pending)
    }

    pub fn events(&self) -> &[ReviewEvent] {
        &self.events
    }
}

pub fn flag_task_id(audit: &AuditRecord) -> String {
    format!("flag:{}", audit.audit_id())
}

pub fn consult_task_id(record_id: &RecordId) -> String {
    format!("consult:{record_id}")
}

/// One pending task per flagged, unreviewed audit; existing tasks are kept.
pub fn enqueue_flags(
    store: &mut ReviewStore,
    audits: &[AuditRecord],
    narratives: &HashMap<RecordId, String>,
    timestamp: DateTime<Utc>,
) -> Result<Vec<String>, AdjudicationError> {
    let mut ids = Vec::new();
    for audit in audits.iter().filter(|a| a.is_flagged() && a.review_category.is_none()) {
        let narrative = narratives.get(&audit.record_id).map(String::as_str).unwrap_or("");
        let (note_context, locus) = context_window(narrative, &audit.extracted);
        let task_id = flag_task_id(audit);
        store.enqueue(
            TaskSpec {
                task_id: task_id.clone(),
                subject: TaskSubject::Flag { audit: audit.clone() },
                note_context,
                locus,
            },
            timestamp,
        )?;
        ids.push(task_id);
    }
    Ok(ids)
}

pub fn enqueue_consult(
    store: &mut ReviewStore,
    record: &PatientRecord,
    reason: &str,
    timestamp: DateTime<Utc>,
) -> Result<String, AdjudicationError> {
    let task_id = consult_task_id(&record.record_id);
    let (note_context, locus) = context_window(&record.narrative, reason);
    store.enqueue(
        TaskSpec {
            task_id: task_id.clone(),
            subject: TaskSubject::Consult {
                record_id: record.record_id.clone(),
                reason: reason.to_string(),
            },
            note_context,
            locus,
        },
        timestamp,
    )?;
    Ok(task_id)
}

// ---------------------------------------------------------------------------
// Eligibility adjudication

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedEvidence {
    pub field: EvidenceField,
    pub text: String,
    pub concept: Concept,
    pub surface_form: Option<String>,
    pub audit_id: String,
    pub outcome_group: Option<OutcomeGroup>,
}

impl VerifiedEvidence {
    /// Map an audited string through the concept map.
    pub fn from_audit(audit: &AuditRecord, map: &ConceptMap) -> Self {
        let m = map.classify(&audit.extracted);
        VerifiedEvidence {
            field: audit.field,
            text: audit.extracted.clone(),
            concept: m.concept,
            surface_form: m.surface_form,
            audit_id: audit.audit_id(),
            outcome_group: audit.outcome_group(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualDecision {
    pub task_id: String,
    pub status: FinalStatus,
    pub reviewer_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BasisItem {
    StructuredRule {
        category: EligibilityCategory,
    },
    VerifiedExtraction {
        audit_id: String,
        field: EvidenceField,
        text: String,
        concept: Concept,
        outcome_group: OutcomeGroup,
    },
    ManualDecision {
        task_id: String,
        status: FinalStatus,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    ClassicalFamilyIncision,
    VbacContraindication,
    InsufficientDocumentedEvidence,
    ManualExclusion,
}

impl ReasonCode {
    pub fn description(self) -> &'static str {
        match self {
            ReasonCode::ClassicalFamilyIncision => "classical/T/J incision documented",
            ReasonCode::VbacContraindication => "contraindication to vaginal delivery",
            ReasonCode::InsufficientDocumentedEvidence => "insufficient documented evidence",
            ReasonCode::ManualExclusion => "excluded by clinical consult",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalEligibility {
    pub record_id: RecordId,
    pub final_status: FinalStatus,
    pub basis: Vec<BasisItem>,
    pub reason_codes: Vec<ReasonCode>,
    pub concept_map_version: String,
}

/// Decide a Potentially Eligible record from supported evidence. A manual
/// consult decision overrides everything else; exclusion evidence beats
/// supportive evidence.
pub fn adjudicate_eligibility(
    record_id: &RecordId,
    structured_category: EligibilityCategory,
    evidence: &[VerifiedEvidence],
    manual: Option<&ManualDecision>,
    concept_map_version: &str,
) -> Result<FinalEligibility, AdjudicationError> {
    if structured_category != EligibilityCategory::PotentiallyEligible {
        return Err(AdjudicationError::NotPotentiallyEligible {
            record_id: record_id.clone(),
            category: structured_category,
        });
    }
    let mut supported = Vec::with_capacity(evidence.len());
    for e in evidence {
        match e.outcome_group {
            Some(group) if group.is_supported() => supported.push((e, group)),
            group => {
                return Err(AdjudicationError::UnsupportedEvidence {
                    record_id: record_id.clone(),
                    audit_id: e.audit_id.clone(),
                    group,
                })
            }
        }
    }
    let item = |e: &VerifiedEvidence, group: OutcomeGroup| BasisItem::VerifiedExtraction {
        audit_id: e.audit_id.clone(),
        field: e.field,
        text: e.text.clone(),
        concept: e.concept,
        outcome_group: group,
    };
    let mut basis = vec![BasisItem::StructuredRule {
        category: structured_category,
    }];
    let mut reasons = Vec::new();
    let status = if let Some(m) = manual {
        basis.push(BasisItem::ManualDecision {
            task_id: m.task_id.clone(),
            status: m.status,
        });
        if m.status == FinalStatus::Excluded {
            reasons.push(ReasonCode::ManualExclusion);
        }
        m.status
    } else {
        let excluding: Vec<_> = supported.iter().filter(|(e, _)| e.concept.excludes()).collect();
        if !excluding.is_empty() {
            for (e, g) in &excluding {
                basis.push(item(e, *g));
                let code = match e.concept {
                    Concept::ClassicalFamilyEvidence => ReasonCode::ClassicalFamilyIncision,
                    _ => ReasonCode::VbacContraindication,
                };
                if !reasons.contains(&code) {
                    reasons.push(code);
                }
            }
            FinalStatus::Excluded
        } else {
            let supporting: Vec<_> = supported.iter().filter(|(e, _)| e.concept.supports()).collect();
            if supporting.is_empty() {
                reasons.push(ReasonCode::InsufficientDocumentedEvidence);
                FinalStatus::Excluded
            } else {
                basis.extend(supporting.iter().map(|(e, g)| item(e, *g)));
                FinalStatus::ConfirmedEligible
            }
        }
    };
    Ok(FinalEligibility {
        record_id: record_id.clone(),
        final_status: status,
        basis,
        reason_codes: reasons,
        concept_map_version: concept_map_version.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSource {
    Vbac,
    StructuralEligible,
    ConfirmedFromPotentiallyEligible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortMember {
    pub record_id: RecordId,
    pub group: DeliveryGroup,
    pub source: CohortSource,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub vbac: usize,
    pub structural_eligible: usize,
    pub confirmed_from_potentially_eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub members: Vec<CohortMember>,
    pub counts: SourceCounts,
    /// Reason → number of records left out.
    pub excluded: BTreeMap<String, usize>,
}

impl CohortManifest {
    pub fn contains(&self, id: &RecordId) -> bool {
        self.members.iter().any(|m| &m.record_id == id)
    }
}

/// All VBAC records, structurally Eligible RCS records and RCS records
/// confirmed by adjudication.
pub fn finalize_cohort(
    records: &[PatientRecord],
    assessments: &[EligibilityAssessment],
    adjudications: &[FinalEligibility],
) -> Result<CohortManifest, AdjudicationError> {
    let by_id: HashMap<&RecordId, &EligibilityAssessment> = assessments.iter().map(|a| (&a.record_id, a)).collect();
    let decided: HashMap<&RecordId, &FinalEligibility> = adjudications.iter().map(|a| (&a.record_id, a)).collect();
    let mut members = Vec::new();
    let mut counts = SourceCounts::default();
    let mut excluded: BTreeMap<String, usize> = BTreeMap::new();
    let mut pending = Vec::new();
    for r in records {
        if r.is_excluded() {
            *excluded.entry("no prior cesarean".into()).or_default() += 1;
            continue;
        }
        let source = match r.group {
            DeliveryGroup::Vbac => Some(CohortSource::Vbac),
            DeliveryGroup::Rcs => match by_id.get(&r.record_id).map(|a| a.category) {
                Some(EligibilityCategory::Eligible) => Some(CohortSource::StructuralEligible),
                Some(EligibilityCategory::PotentiallyEligible) => match decided.get(&r.record_id) {
                    Some(f) if f.final_status == FinalStatus::ConfirmedEligible => {
                        Some(CohortSource::ConfirmedFromPotentiallyEligible)
                    }
                    Some(f) => {
                        let reason = f
                            .reason_codes
                            .first()
                            .map(|c| c.description())
                            .unwrap_or("excluded");
                        *excluded.entry(format!("adjudicated: {reason}")).or_default() += 1;
                        None
                    }
                    None => {
                        pending.push(r.record_id.clone());
                        None
                    }
                },
                Some(other) => {
                    *excluded.entry(other.label().to_string()).or_default() += 1;
                    None
                }
                None => {
                    pending.push(r.record_id.clone());
                    None
                }
            },
        };
        if let Some(source) = source {
            match source {
                CohortSource::Vbac => counts.vbac += 1,
                CohortSource::StructuralEligible => counts.structural_eligible += 1,
                CohortSource::ConfirmedFromPotentiallyEligible => counts.confirmed_from_potentially_eligible += 1,
            }
            members.push(CohortMember {
                record_id: r.record_id.clone(),
                group: r.group,
                source,
            });
        }
    }
    if !pending.is_empty() {
        return Err(AdjudicationError::Unadjudicated(pending));
    }
    Ok(CohortManifest {
        members,
        counts,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eligibility::EligibilityInputs;
    use crate::extraction::PromptVariant;

    fn ts(secs: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(secs, 0).unwrap()
    }

    fn audit(record: &str, field: EvidenceField, text: &str, index: usize, verbatim: bool) -> AuditRecord {
        AuditRecord {
            record_id: record.into(),
            model_name: "m".into(),
            prompt_variant: PromptVariant::Short,
            field,
            index,
            extracted: text.into(),
            verbatim_match: verbatim,
            review_category: None,
        }
    }

    fn evidence(text: &str, group: OutcomeGroup) -> VerifiedEvidence {
        let mut a = audit("p", EvidenceField::IncisionTypes, text, 0, group == OutcomeGroup::VerbatimMatch);
        if group != OutcomeGroup::VerbatimMatch {
            a.set_review(match group {
                OutcomeGroup::NoHallucinationVariant => ReviewCategory::ParaphraseAccurate,
                _ => ReviewCategory::Hallucination,
            });
        }
        VerifiedEvidence::from_audit(&a, &ConceptMap::default())
    }

    #[test]
    fn concept_map_defaults() {
        let map = ConceptMap::default();
        assert_eq!(map.classify("Pfannenstiel incision").concept, Concept::LowTransverseEvidence);
        assert_eq!(map.classify("Prior LTCS x1.").concept, Concept::LowTransverseEvidence);
        assert_eq!(map.classify("Low-transverse uterine incision").concept, Concept::LowTransverseEvidence);
        assert_eq!(map.classify("prior classical cesarean").concept, Concept::ClassicalFamilyEvidence);
        assert_eq!(map.classify("T-shaped hysterotomy").concept, Concept::ClassicalFamilyEvidence);
        assert_eq!(map.classify("NSVD in 2014").concept, Concept::VaginalBirthEvidence);
        assert_eq!(map.classify("complete placenta previa").concept, Concept::VbacContraindicationEvidence);
        assert_eq!(map.classify("no placenta previa").concept, Concept::NonInformative);
        assert_eq!(map.classify("repeat cesarean planned").concept, Concept::NonInformative);
        assert_eq!(map.classify("classical and LTCS").concept, Concept::ClassicalFamilyEvidence);
        // Substrings inside words do not count.
        assert_eq!(map.classify("svdx").surface_form, None);
    }

    #[test]
    fn concept_map_must_cover_every_concept() {
        let err = ConceptMap::new("v", [("ltcs".to_string(), Concept::LowTransverseEvidence)]).unwrap_err();
        assert!(matches!(err, AdjudicationError::IncompleteConceptMap(ref m) if m.len() == 4));
    }

    #[test]
    fn concept_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        crate::util::write_json(&path, &ConceptMap::default()).unwrap();
        assert_eq!(ConceptMap::load(&path).unwrap(), ConceptMap::default());
    }

    #[test]
    fn context_window_around_locus() {
        let note = "S1 intro. S2 more. S3 stuff. Hx of LTCS in 2015. S5 end. S6 tail. S7 last.";
        let (ctx, locus) = context_window(note, "history of LTCS in 2015");
        assert_eq!(ctx, "S2 more. S3 stuff. Hx of LTCS in 2015. S5 end. S6 tail.");
        let l = locus.unwrap();
        assert_eq!(&ctx[l.start..l.end], "Hx of LTCS in 2015.");
        let (head, none) = context_window(note, "zzz");
        assert_eq!(head, "S1 intro. S2 more. S3 stuff.");
        assert!(none.is_none());
    }

    #[test]
    fn enqueue_is_idempotent_and_keyed_by_note() {
        let mut store = ReviewStore::in_memory();
        let narratives = HashMap::from([(RecordId::from("n1"), "Prior cesarean. Hx of LTCS.".to_string())]);
        assert!(enqueue_flags(&mut store, &[], &narratives, ts(0)).unwrap().is_empty());
        let audits = [
            audit("n1", EvidenceField::IncisionTypes, "history of LTCS", 0, false),
            audit("n1", EvidenceField::IncisionTypes, "incision not specified", 1, false),
            audit("n1", EvidenceField::Contraindications, "none", 0, false),
            audit("n1", EvidenceField::PreviousDeliveryModes, "Prior cesarean.", 0, true),
        ];
        let ids = enqueue_flags(&mut store, &audits, &narratives, ts(1)).unwrap();
        assert_eq!(ids.len(), 3);
        assert!(store.tasks().all(|t| t.record_id().as_str() == "n1"));
        enqueue_flags(&mut store, &audits, &narratives, ts(2)).unwrap();
        assert_eq!(store.tasks().count(), 3);
        assert_eq!(store.events().len(), 3);
    }

    #[test]
    fn resolve_recomputes_outcome_and_keeps_history() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let mut store = ReviewStore::open(&log).unwrap();
        let a = audit("n1", EvidenceField::IncisionTypes, "history of cesarean", 0, false);
        let narratives = HashMap::from([(RecordId::from("n1"), "hx of cesarean.".to_string())]);
        let id = enqueue_flags(&mut store, &[a], &narratives, ts(0)).unwrap().remove(0);

        let t = store
            .resolve_task(&id, Decision::Review(ReviewCategory::ParaphraseAccurate), "hx", ts(5))
            .unwrap();
        assert_eq!(t.status, TaskStatus::Resolved);
        assert_eq!(t.outcome_group(), Some(OutcomeGroup::NoHallucinationVariant));
        let t = store
            .resolve_task(&id, Decision::Review(ReviewCategory::PartialHallucination), "second look", ts(6))
            .unwrap();
        assert_eq!(t.outcome_group(), Some(OutcomeGroup::HallucinationVariant));
        assert_eq!(t.history.len(), 2);

        // Replay from disk reproduces the same state.
        let replayed = ReviewStore::open(&log).unwrap();
        assert_eq!(replayed.task(&id), store.task(&id));
        assert_eq!(replayed.events().len(), 3);

        assert!(matches!(
            store.resolve_task("nope", Decision::Review(ReviewCategory::Hallucination), "", ts(7)),
            Err(AdjudicationError::UnknownTask(_))
        ));
        assert!(matches!(
            store.resolve_task(&id, Decision::Eligibility(FinalStatus::Excluded), "", ts(7)),
            Err(AdjudicationError::WrongDecisionKind { .. })
        ));
    }

    #[test]
    fn event_log_rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("events.jsonl");
        let mut store = ReviewStore::open(&log).unwrap();
        let narratives = HashMap::new();
        enqueue_flags(&mut store, &[audit("n", EvidenceField::IncisionTypes, "x", 0, false)], &narratives, ts(0)).unwrap();
        let text = fs::read_to_string(&log).unwrap().replace("\"version\":1", "\"version\":9");
        fs::write(&log, text).unwrap();
        assert!(matches!(ReviewStore::open(&log), Err(AdjudicationError::UnsupportedVersion { found: 9 })));
        fs::write(&log, "not json\n").unwrap();
        assert!(matches!(ReviewStore::open(&log), Err(AdjudicationError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn decision_parsing_and_wire_form() {
        assert_eq!("ParaphraseAccurate".parse(), Ok(Decision::Review(ReviewCategory::ParaphraseAccurate)));
        assert_eq!("excluded".parse(), Ok(Decision::Eligibility(FinalStatus::Excluded)));
        assert_eq!(serde_json::to_string(&Decision::Review(ReviewCategory::TypoInOriginal)).unwrap(), "\"TypoInOriginal\"");
        let d: Decision = serde_json::from_str("\"ConfirmedEligible\"").unwrap();
        assert_eq!(d, Decision::Eligibility(FinalStatus::ConfirmedEligible));
    }

    #[test]
    fn adjudication_examples() {
        let id = RecordId::from("pe1");
        let pe = EligibilityCategory::PotentiallyEligible;
        let f = adjudicate_eligibility(&id, pe, &[evidence("pfannenstiel", OutcomeGroup::VerbatimMatch)], None, "v1").unwrap();
        assert_eq!(f.final_status, FinalStatus::ConfirmedEligible);
        assert!(f.basis.iter().any(|b| matches!(b, BasisItem::VerifiedExtraction { concept: Concept::LowTransverseEvidence, .. })));
        assert_eq!(f.concept_map_version, "v1");

        let f = adjudicate_eligibility(&id, pe, &[evidence("classical cesarean", OutcomeGroup::VerbatimMatch)], None, "v1").unwrap();
        assert_eq!(f.final_status, FinalStatus::Excluded);
        assert_eq!(f.reason_codes, [ReasonCode::ClassicalFamilyIncision]);

        let f = adjudicate_eligibility(&id, pe, &[], None, "v1").unwrap();
        assert_eq!(f.final_status, FinalStatus::Excluded);
        assert_eq!(f.reason_codes, [ReasonCode::InsufficientDocumentedEvidence]);
        assert_eq!(f.reason_codes[0].description(), "insufficient documented evidence");
    }

    #[test]
    fn paraphrase_evidence_is_usable_hallucination_is_not() {
        let id = RecordId::from("pe1");
        let pe = EligibilityCategory::PotentiallyEligible;
        let f = adjudicate_eligibility(&id, pe, &[evidence("history of LTCS", OutcomeGroup::NoHallucinationVariant)], None, "v").unwrap();
        assert_eq!(f.final_status, FinalStatus::ConfirmedEligible);
        let err = adjudicate_eligibility(&id, pe, &[evidence("LTCS", OutcomeGroup::HallucinationVariant)], None, "v").unwrap_err();
        assert!(matches!(err, AdjudicationError::UnsupportedEvidence { .. }));
        let mut unresolved = evidence("LTCS", OutcomeGroup::VerbatimMatch);
        unresolved.outcome_group = None;
        assert!(adjudicate_eligibility(&id, pe, &[unresolved], None, "v").is_err());
    }

    #[test]
    fn classical_evidence_overrides_confirmation() {
        let id = RecordId::from("pe1");
        let pe = EligibilityCategory::PotentiallyEligible;
        let lt = evidence("LTCS", OutcomeGroup::VerbatimMatch);
        assert_eq!(adjudicate_eligibility(&id, pe, &[lt.clone()], None, "v").unwrap().final_status, FinalStatus::ConfirmedEligible);
        let both = [lt, evidence("vertical uterine incision", OutcomeGroup::VerbatimMatch)];
        assert_eq!(adjudicate_eligibility(&id, pe, &both, None, "v").unwrap().final_status, FinalStatus::Excluded);
    }

    #[test]
    fn manual_decision_has_precedence() {
        let id = RecordId::from("pe1");
        let manual = ManualDecision {
            task_id: "consult:pe1".into(),
            status: FinalStatus::ConfirmedEligible,
            reviewer_note: "myomectomy did not enter cavity".into(),
        };
        let ev = [evidence("placenta previa", OutcomeGroup::VerbatimMatch)];
        let f = adjudicate_eligibility(&id, EligibilityCategory::PotentiallyEligible, &ev, Some(&manual), "v").unwrap();
        assert_eq!(f.final_status, FinalStatus::ConfirmedEligible);
        assert!(f.basis.iter().any(|b| matches!(b, BasisItem::ManualDecision { .. })));
        assert!(matches!(
            adjudicate_eligibility(&id, EligibilityCategory::Eligible, &[], None, "v"),
            Err(AdjudicationError::NotPotentiallyEligible { .. })
        ));
    }

    #[test]
    fn consult_trigger() {
        let terms = default_ambiguity_terms();
        assert_eq!(needs_consult("s/p Myomectomy 2016.", &terms).as_deref(), Some("myomectomy"));
        assert_eq!(needs_consult("Prior LTCS.", &terms), None);
    }

    fn patient(id: &str, group: DeliveryGroup) -> PatientRecord {
        PatientRecord {
            record_id: id.into(),
            narrative: "n".into(),
            group,
            prior_cesarean: true,
            age: None,
            bmi: None,
            delivery_date: None,
        }
    }

    fn assessed(id: &str, category: EligibilityCategory) -> EligibilityAssessment {
        EligibilityAssessment {
            record_id: id.into(),
            category,
            inputs: EligibilityInputs {
                n_prior_cesareans: 1,
                incision_types: vec![],
                has_prior_vaginal_birth: false,
                has_prior_vbac: false,
                interdelivery_interval_days: None,
                has_history_data: true,
            },
            interval_unknown: true,
        }
    }

    fn final_status(id: &str, status: FinalStatus) -> FinalEligibility {
        FinalEligibility {
            record_id: id.into(),
            final_status: status,
            basis: vec![],
            reason_codes: if status == FinalStatus::Excluded { vec![ReasonCode::InsufficientDocumentedEvidence] } else { vec![] },
            concept_map_version: "v".into(),
        }
    }

    #[test]
    fn finalize_counts_by_source() {
        use EligibilityCategory::*;
        let mut records: Vec<_> = (0..5).map(|i| patient(&format!("v{i}"), DeliveryGroup::Vbac)).collect();
        let mut assessments = Vec::new();
        for i in 0..3 {
            records.push(patient(&format!("e{i}"), DeliveryGroup::Rcs));
            assessments.push(assessed(&format!("e{i}"), Eligible));
        }
        let mut adjudications = Vec::new();
        for i in 0..3 {
            records.push(patient(&format!("p{i}"), DeliveryGroup::Rcs));
            assessments.push(assessed(&format!("p{i}"), PotentiallyEligible));
            let status = if i < 2 { FinalStatus::ConfirmedEligible } else { FinalStatus::Excluded };
            adjudications.push(final_status(&format!("p{i}"), status));
        }
        records.push(patient("c0", DeliveryGroup::Rcs));
        assessments.push(assessed("c0", Contraindicated));
        let mut skipped = patient("x0", DeliveryGroup::Vbac);
        skipped.prior_cesarean = false;
        records.push(skipped);

        let m = finalize_cohort(&records, &assessments, &adjudications).unwrap();
        assert_eq!(m.members.len(), 10);
        assert_eq!(
            m.counts,
            SourceCounts { vbac: 5, structural_eligible: 3, confirmed_from_potentially_eligible: 2 }
        );
        assert_eq!(m.excluded["Contraindicated"], 1);
        assert_eq!(m.excluded["no prior cesarean"], 1);
        assert_eq!(m.excluded["adjudicated: insufficient documented evidence"], 1);

        // Zero confirmed.
        let none: Vec<_> = adjudications.iter().map(|a| final_status(a.record_id.as_str(), FinalStatus::Excluded)).collect();
        let m = finalize_cohort(&records, &assessments, &none).unwrap();
        assert_eq!(m.members.len(), 8);
        assert_eq!(m.counts.confirmed_from_potentially_eligible, 0);

        // A pending record blocks.
        match finalize_cohort(&records, &assessments, &adjudications[..2]) {
            Err(AdjudicationError::Unadjudicated(ids)) => assert_eq!(ids, [RecordId::from("p2")]),
            other => panic!("{other:?}"),
        }
    }
}
