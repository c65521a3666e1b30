//! Reviewer-facing view over a run's event log. The HTTP layer in the CLI
//! crate is a thin wrapper around this.

use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudication::{
    AdjudicationError, ConceptMap, Decision, FinalStatus, ReviewEvent, ReviewStore, ReviewTask, TaskStatus, TaskSubject,
};
use crate::eligibility::{EligibilityAssessment, EligibilityCategory};
use crate::extraction::EvidenceField;
use crate::grounding::{aggregate_audit, AuditAggregate, AuditRecord, ReviewCategory};
use crate::pipeline::{adjudicate_from_state, apply_reviews, event_log_path, files, stage_file, ExtractionSelection, Stage};
use crate::util::read_jsonl;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no review queue in {0}: run the pipeline through the review stage first")]
    NotReady(PathBuf),
    #[error(transparent)]
    Adjudication(#[from] AdjudicationError),
    #[error("reading {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{0}")]
    BadQuery(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    /// Value to post back as the decision.
    pub value: String,
    pub label: String,
    pub description: String,
}

pub fn candidates(subject: &TaskSubject) -> Vec<Candidate> {
    match subject {
        TaskSubject::Flag { .. } => ReviewCategory::ALL
            .into_iter()
            .map(|c| Candidate {
                value: c.to_string(),
                label: c.short_label().to_string(),
                description: c.description().to_string(),
            })
            .collect(),
        TaskSubject::Consult { .. } => vec![
            Candidate {
                value: FinalStatus::ConfirmedEligible.to_string(),
                label: "Eligible".into(),
                description: "Documented history supports a trial of labor".into(),
            },
            Candidate {
                value: FinalStatus::Excluded.to_string(),
                label: "Excluded".into(),
                description: "Documented history rules out a trial of labor".into(),
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    #[serde(flatten)]
    pub task: ReviewTask,
    pub candidates: Vec<Candidate>,
}

impl From<&ReviewTask> for TaskView {
    fn from(task: &ReviewTask) -> Self {
        TaskView {
            candidates: candidates(&task.subject),
            task: task.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Flag,
    Consult,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskQuery {
    pub status: Option<TaskStatus>,
    pub kind: Option<TaskKind>,
    pub field: Option<EvidenceField>,
    /// Prompt variant, or "model:variant".
    pub model_variant: Option<String>,
    pub record_id: Option<String>,
    /// 1-based.
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

impl TaskQuery {
    fn matches(&self, t: &ReviewTask) -> bool {
        if self.status.is_some_and(|s| s != t.status) {
            return false;
        }
        if self.record_id.as_deref().is_some_and(|r| r != t.record_id().as_str()) {
            return false;
        }
        let audit = match &t.subject {
            TaskSubject::Flag { audit } => Some(audit),
            TaskSubject::Consult { .. } => None,
        };
        match self.kind {
            Some(TaskKind::Flag) if audit.is_none() => return false,
            Some(TaskKind::Consult) if audit.is_some() => return false,
            _ => {}
        }
        if let Some(f) = self.field {
            if audit.is_none_or(|a| a.field != f) {
                return false;
            }
        }
        if let Some(mv) = &self.model_variant {
            let ok = audit.is_some_and(|a| {
                let variant = a.prompt_variant.as_str();
                mv == variant || *mv == format!("{}:{}", a.model_name, variant)
            });
            if !ok {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPage {
    pub tasks: Vec<TaskView>,
    pub page: usize,
    pub page_size: usize,
    /// Matching tasks across all pages.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortStatus {
    pub pending_tasks: usize,
    pub resolved_tasks: usize,
    pub potentially_eligible: usize,
    /// Potentially Eligible records whose tasks are all resolved.
    pub adjudicated: usize,
    pub awaiting: usize,
    pub confirmed_eligible: usize,
    pub excluded: usize,
    /// Records already eligible from structured history alone.
    pub structural_eligible: usize,
    /// True when finalize can run.
    pub ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditStatus {
    /// Over verbatim matches and reviewed flags.
    pub aggregate: AuditAggregate,
    pub pending_flags: usize,
}

pub struct ReviewService {
    out: PathBuf,
    store: ReviewStore,
    concept_map: ConceptMap,
}

impl ReviewService {
    pub fn open(output_dir: &Path, concept_map: ConceptMap) -> Result<Self, ReviewError> {
        let log = event_log_path(output_dir);
        if !log.exists() {
            return Err(ReviewError::NotReady(output_dir.to_path_buf()));
        }
        Ok(ReviewService {
            out: output_dir.to_path_buf(),
            store: ReviewStore::open(&log)?,
            concept_map,
        })
    }

    /// Re-read the log, picking up tasks enqueued by a later pipeline run.
    pub fn reload(&mut self) -> Result<(), ReviewError> {
        self.store = ReviewStore::open(&event_log_path(&self.out))?;
        Ok(())
    }

    pub fn store(&self) -> &ReviewStore {
        &self.store
    }

    pub fn list(&self, query: &TaskQuery) -> Result<TaskPage, ReviewError> {
        let page_size = query.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ReviewError::BadQuery(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
        }
        let page = query.page.unwrap_or(1);
        if page == 0 {
            return Err(ReviewError::BadQuery("page is 1-based".into()));
        }
        let matching: Vec<&ReviewTask> = self.store.tasks().filter(|t| query.matches(t)).collect();
        let tasks = matching
            .iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|t| TaskView::from(*t))
            .collect();
        Ok(TaskPage {
            tasks,
            page,
            page_size,
            total: matching.len(),
        })
    }

    pub fn get(&self, task_id: &str) -> Option<TaskView> {
        self.store.task(task_id).map(TaskView::from)
    }

    pub fn resolve(&mut self, task_id: &str, decision: Decision, reviewer_note: &str) -> Result<TaskView, ReviewError> {
        let task = self.store.resolve_task(task_id, decision, reviewer_note, Utc::now())?;
        Ok(TaskView::from(task))
    }

    pub fn events(&self, since: Option<u64>) -> Vec<ReviewEvent> {
        self.store
            .events()
            .iter()
            .filter(|e| since.is_none_or(|s| e.seq() >= s))
            .cloned()
            .collect()
    }

    fn read<T: serde::de::DeserializeOwned>(&self, stage: Stage, name: &str) -> Result<Vec<T>, ReviewError> {
        let path = stage_file(&self.out, stage, name);
        read_jsonl(&path).map_err(|e| ReviewError::Read {
            message: e.to_string(),
            path,
        })
    }

    pub fn cohort_status(&self) -> Result<CohortStatus, ReviewError> {
        let assessments: Vec<EligibilityAssessment> = self.read(Stage::Eligibility, files::ASSESSMENTS)?;
        let selection: Vec<ExtractionSelection> = self.read(Stage::Extract, files::SELECTION)?;
        let audits: Vec<AuditRecord> = self.read(Stage::Audit, files::AUDITS)?;
        let pe: Vec<_> = assessments
            .iter()
            .filter(|a| a.category == EligibilityCategory::PotentiallyEligible)
            .map(|a| a.record_id.clone())
            .collect();
        let (decided, waiting) = adjudicate_from_state(&pe, &selection, &audits, &self.store, &self.concept_map)?;
        let pending = self.store.pending().count();
        let total = self.store.tasks().count();
        let confirmed = decided.iter().filter(|d| d.final_status == FinalStatus::ConfirmedEligible).count();
        Ok(CohortStatus {
            pending_tasks: pending,
            resolved_tasks: total - pending,
            potentially_eligible: pe.len(),
            adjudicated: decided.len(),
            awaiting: waiting.len(),
            confirmed_eligible: confirmed,
            excluded: decided.len() - confirmed,
            structural_eligible: assessments.iter().filter(|a| a.category == EligibilityCategory::Eligible).count(),
            ready: pending == 0 && waiting.is_empty(),
        })
    }

    pub fn audit_aggregates(&self) -> Result<AuditStatus, ReviewError> {
        let audits: Vec<AuditRecord> = self.read(Stage::Audit, files::AUDITS)?;
        let reviewed = apply_reviews(&audits, &self.store);
        let (done, pending): (Vec<_>, Vec<_>) = reviewed.into_iter().partition(|a| a.outcome_group().is_some());
        let aggregate = aggregate_audit(&done).expect("only resolved records");
        Ok(AuditStatus {
            aggregate,
            pending_flags: pending.len(),
        })
    }
}
