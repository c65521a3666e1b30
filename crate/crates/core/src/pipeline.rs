//! Stage orchestration. Every stage reads only the persisted outputs of
//! earlier stages and records its own outputs, with content hashes, in
//! `run_manifest.json`, so a run can stop (for instance to wait for human
//! review) and resume later.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudication::{
    adjudicate_eligibility, consult_task_id, enqueue_consult, enqueue_flags, finalize_cohort, flag_task_id,
    needs_consult, CohortManifest, ConceptMap, Decision, FinalEligibility, ManualDecision, ReviewStore, TaskStatus,
    TaskSubject, VerifiedEvidence,
};
use crate::backend::{ChatCompletionBackend, GenerationBackend};
use crate::corpus::{load_corpus, scrub_custom_phi, DeliveryGroup, PatientRecord, PregnancyHistoryEntry, RecordId, Segment, SegmentationConfig, Segmenter, Placeholder};
use crate::eligibility::{assess, summarize_cohort, EligibilityAssessment, EligibilityCategory};
use crate::extraction::{extract_batch, read_extraction, write_extraction, ExtractionError, PromptConfig, PromptVariant, StoredExtraction};
use crate::framing::{classify_batch, filter_counseling, FramingConfig, StoredFraming};
use crate::grounding::{verify_verbatim, write_flag_log, AuditRecord};
use crate::mock::EchoMockBackend;
use crate::stats::{agreement_metrics, build_table, chi_square, distribution_report};
use crate::synth::{expert_lookup, ExpertLabel, GroundTruth};
use crate::util::{read_json, read_jsonl, sha256_hex, write_json, write_jsonl};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub notes: PathBuf,
    pub history: PathBuf,
    pub output_dir: PathBuf,
    /// Ground-truth sidecar of a synthetic corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    ChatCompletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub parallelism: usize,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "echo-mock".into(),
            token_env: "COUNSEL_API_TOKEN".into(),
            parallelism: 4,
            temperature: 0.0,
            timeout_secs: 120,
            max_retries: 3,
            max_prompt_chars: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionSettings {
    pub variant: PromptVariant,
    /// Tried when the primary output is incomplete (all fields null) or unparseable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback_variant: Option<PromptVariant>,
    pub max_output_tokens: u32,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        ExtractionSettings {
            variant: PromptVariant::Short,
            fallback_variant: None,
            max_output_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FramingSettings {
    pub max_output_tokens: u32,
}

impl Default for FramingSettings {
    fn default() -> Self {
        FramingSettings { max_output_tokens: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewPolicy {
    Manual,
    /// Answer review tasks from a synthetic corpus sidecar. Test use only.
    AutoResolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdjudicationSettings {
    pub policy: ReviewPolicy,
    pub ambiguity_terms: Vec<String>,
}

impl Default for AdjudicationSettings {
    fn default() -> Self {
        AdjudicationSettings {
            policy: ReviewPolicy::Manual,
            ambiguity_terms: crate::adjudication::default_ambiguity_terms(),
        }
    }
}

fn default_seed() -> u64 {
    0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub extraction: ExtractionSettings,
    #[serde(default)]
    pub framing: FramingSettings,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub adjudication: AdjudicationSettings,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that need no file system access.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| Err(PipelineError::Config(m));
        for (name, p) in [("notes", &self.paths.notes), ("history", &self.paths.history), ("output_dir", &self.paths.output_dir)] {
            if p.as_os_str().is_empty() {
                return cfg(format!("paths.{name} is empty"));
            }
        }
        let b = &self.backend;
        if b.model.trim().is_empty() {
            return cfg("backend.model is empty".into());
        }
        if b.parallelism == 0 {
            return cfg("backend.parallelism must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&b.temperature) {
            return cfg(format!("backend.temperature {} outside [0, 1]", b.temperature));
        }
        if b.kind == BackendKind::ChatCompletion {
            if b.endpoint.as_deref().is_none_or(|e| e.trim().is_empty()) {
                return cfg("backend.endpoint is required for chat_completion".into());
            }
            if b.token_env.trim().is_empty() {
                return cfg("backend.token_env is empty".into());
            }
        }
        if self.extraction.max_output_tokens == 0 || self.framing.max_output_tokens == 0 {
            return cfg("max_output_tokens must be positive".into());
        }
        if self.extraction.fallback_variant == Some(self.extraction.variant) {
            return cfg("extraction.fallback_variant equals the primary variant".into());
        }
        if self.segmentation.header_patterns.iter().all(|h| h.trim().is_empty()) {
            return cfg("segmentation.header_patterns is empty".into());
        }
        Segmenter::new(&self.segmentation).map_err(|e| PipelineError::Config(format!("segmentation.header_patterns: {e}")))?;
        if self.adjudication.policy == ReviewPolicy::AutoResolve && self.paths.truth.is_none() {
            return cfg("auto_resolve needs paths.truth (a synthetic corpus sidecar); real data must be reviewed by a person".into());
        }
        Ok(())
    }

    /// Hash of everything that affects results. The output location does not.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = PathBuf::new();
        sha256_hex(c.to_toml())
    }

    fn prompt_config(&self, variant: PromptVariant) -> PromptConfig {
        PromptConfig {
            variant,
            model_name: self.backend.model.clone(),
            decode_temperature: self.backend.temperature,
            max_output_tokens: self.extraction.max_output_tokens,
            seed: Some(self.seed),
        }
    }

    fn framing_config(&self) -> FramingConfig {
        FramingConfig {
            model_name: self.backend.model.clone(),
            decode_temperature: self.backend.temperature,
            max_output_tokens: self.framing.max_output_tokens,
            seed: Some(self.seed),
        }
    }
}

// ---------------------------------------------------------------------------
// Stages and manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Scrub,
    Eligibility,
    Extract,
    Audit,
    Review,
    Finalize,
    Segment,
    Frame,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Scrub,
        Stage::Eligibility,
        Stage::Extract,
        Stage::Audit,
        Stage::Review,
        Stage::Finalize,
        Stage::Segment,
        Stage::Frame,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Scrub => "scrub",
            Stage::Eligibility => "eligibility",
            Stage::Extract => "extract",
            Stage::Audit => "audit",
            Stage::Review => "review",
            Stage::Finalize => "finalize",
            Stage::Segment => "segment",
            Stage::Frame => "frame",
            Stage::Stats => "stats",
        }
    }

    pub fn dir(self) -> String {
        let pos = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        format!("{:02}_{}", pos + 1, self.name())
    }

    fn previous(self) -> Option<Stage> {
        let pos = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        pos.checked_sub(1).map(|p| Stage::ALL[p])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    /// Waiting on human review.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory, with forward slashes.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub outputs: Vec<OutputFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn complete_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.status == StageStatus::Complete).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutcome {
    Ran,
    Reused,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub outcomes: Vec<(Stage, StageOutcome)>,
    pub manifest: RunManifest,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stage {stage} needs the output of {missing}, which is missing or stale")]
    MissingOutput { stage: Stage, missing: Stage },
    #[error("{} review task(s) pending; resolve them and rerun", .task_ids.len())]
    PendingReview { task_ids: Vec<String> },
}

impl PipelineError {
    /// Process exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } | PipelineError::MissingOutput { .. } => 3,
            PipelineError::PendingReview { .. } => 4,
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Files written by one stage run.
struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn hashed(&self) -> std::io::Result<Vec<OutputFile>> {
        let mut out = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            out.push(OutputFile {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: sha256_hex(fs::read(f)?),
            });
        }
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }
}

enum StageResult {
    Done(Outputs),
    Blocked(Outputs, Vec<String>),
}

// ---------------------------------------------------------------------------
// Interchange rows

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrubRow {
    pub record_id: RecordId,
    pub start: usize,
    pub end: usize,
    pub placeholder: Placeholder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionSelection {
    pub record_id: RecordId,
    /// Variant whose output is used as evidence.
    pub variant: PromptVariant,
    pub tried: Vec<PromptVariant>,
    pub parsed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedSegment {
    #[serde(flatten)]
    pub segment: Segment,
    pub group: DeliveryGroup,
}

pub mod files {
    pub const RECORDS: &str = "records.jsonl";
    pub const HISTORY: &str = "history.jsonl";
    pub const REPLACEMENTS: &str = "replacements.jsonl";
    pub const ASSESSMENTS: &str = "assessments.jsonl";
    pub const ELIGIBILITY_SUMMARY: &str = "summary.json";
    pub const SELECTION: &str = "selection.jsonl";
    pub const AUDITS: &str = "audits.jsonl";
    pub const EVENTS: &str = "events.jsonl";
    pub const REVIEWED_AUDITS: &str = "reviewed_audits.jsonl";
    pub const FINAL_ELIGIBILITY: &str = "final_eligibility.jsonl";
    pub const COHORT: &str = "cohort.json";
    pub const SEGMENTS: &str = "segments.jsonl";
    pub const LABELS: &str = "labels.jsonl";
    pub const COVERAGE: &str = "coverage.json";
    pub const TABLE: &str = "table.json";
    pub const CHI_SQUARE: &str = "chi_square.json";
    pub const DISTRIBUTION: &str = "distribution.json";
    pub const AGREEMENT: &str = "agreement.json";
}

pub fn stage_file(out: &Path, stage: Stage, name: &str) -> PathBuf {
    out.join(stage.dir()).join(name)
}

pub fn event_log_path(out: &Path) -> PathBuf {
    stage_file(out, Stage::Review, files::EVENTS)
}

// ---------------------------------------------------------------------------
// Shared adjudication over persisted state

/// Adjudicate every Potentially Eligible record whose review tasks are all
/// resolved. Returns decisions and the records still waiting.
pub fn adjudicate_from_state(
    pe: &[RecordId],
    selection: &[ExtractionSelection],
    audits: &[AuditRecord],
    store: &ReviewStore,
    map: &ConceptMap,
) -> Result<(Vec<FinalEligibility>, Vec<RecordId>), crate::adjudication::AdjudicationError> {
    let chosen: HashMap<&RecordId, PromptVariant> = selection.iter().map(|s| (&s.record_id, s.variant)).collect();
    let mut by_record: HashMap<RecordId, Vec<AuditRecord>> = HashMap::new();
    for a in apply_reviews(audits, store) {
        if chosen.get(&a.record_id) == Some(&a.prompt_variant) {
            by_record.entry(a.record_id.clone()).or_default().push(a);
        }
    }
    let mut decided = Vec::new();
    let mut waiting = Vec::new();
    for id in pe {
        let empty = Vec::new();
        let record_audits = by_record.get(id).unwrap_or(&empty);
        let consult = store.task(&consult_task_id(id));
        let unresolved = record_audits.iter().any(|a| a.outcome_group().is_none())
            || consult.is_some_and(|t| t.status == TaskStatus::Pending);
        if unresolved {
            waiting.push(id.clone());
            continue;
        }
        let evidence: Vec<VerifiedEvidence> = record_audits
            .iter()
            .filter(|a| a.outcome_group().is_some_and(|g| g.is_supported()))
            .map(|a| VerifiedEvidence::from_audit(a, map))
            .collect();
        let manual = consult.and_then(|t| match t.decision {
            Some(Decision::Eligibility(status)) => Some(ManualDecision {
                task_id: t.task_id.clone(),
                status,
                reviewer_note: t.reviewer_note.clone(),
            }),
            _ => None,
        });
        decided.push(adjudicate_eligibility(
            id,
            EligibilityCategory::PotentiallyEligible,
            &evidence,
            manual.as_ref(),
            &map.version,
        )?);
    }
    Ok((decided, waiting))
}

/// Audits with the current review decisions applied.
pub fn apply_reviews(audits: &[AuditRecord], store: &ReviewStore) -> Vec<AuditRecord> {
    audits
        .iter()
        .map(|a| {
            let mut a = a.clone();
            if let Some(Decision::Review(c)) = store.task(&flag_task_id(&a)).and_then(|t| t.decision) {
                a.set_review(c);
            }
            a
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    backend: Arc<dyn GenerationBackend>,
    concept_map: ConceptMap,
    truth: Option<GroundTruth>,
}

impl Pipeline {
    /// Validate the configuration and build the configured backend. Fails
    /// before touching the file system when the token is missing.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let backend: Arc<dyn GenerationBackend> = match config.backend.kind {
            BackendKind::Mock => Arc::new(EchoMockBackend),
            BackendKind::ChatCompletion => {
                let token = std::env::var(&config.backend.token_env)
                    .ok()
                    .filter(|t| !t.trim().is_empty())
                    .ok_or_else(|| PipelineError::Config(format!("environment variable {} is not set", config.backend.token_env)))?;
                let endpoint = config.backend.endpoint.clone().expect("validated");
                Arc::new(
                    ChatCompletionBackend::new(endpoint, token, Duration::from_secs(config.backend.timeout_secs))
                        .with_retries(config.backend.max_retries, Duration::from_millis(500))
                        .with_max_prompt_chars(config.backend.max_prompt_chars),
                )
            }
        };
        Self::with_backend(config, backend)
    }

    pub fn with_backend(config: PipelineConfig, backend: Arc<dyn GenerationBackend>) -> Result<Self, PipelineError> {
        config.validate()?;
        let concept_map = match &config.paths.concept_map {
            Some(p) => ConceptMap::load(p).map_err(|e| PipelineError::Config(format!("concept map: {e}")))?,
            None => ConceptMap::default(),
        };
        let truth = match (&config.paths.truth, config.adjudication.policy) {
            (Some(p), ReviewPolicy::AutoResolve) => {
                if !p.exists() {
                    return Err(PipelineError::Config(format!(
                        "auto_resolve refused: corpus sidecar {} does not exist",
                        p.display()
                    )));
                }
                Some(read_json(p).map_err(|e| PipelineError::Config(format!("sidecar: {e}")))?)
            }
            _ => None,
        };
        Ok(Pipeline {
            out: config.paths.output_dir.clone(),
            config,
            backend,
            concept_map,
            truth,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn read_manifest(&self) -> Option<RunManifest> {
        read_json(&self.out.join(MANIFEST_FILE)).ok()
    }

    fn write_manifest(&self, m: &RunManifest) -> Result<(), PipelineError> {
        write_json(&self.out.join(MANIFEST_FILE), m).map_err(|e| PipelineError::Stage {
            stage: Stage::Ingest,
            message: format!("writing manifest: {e}"),
        })
    }

    /// Current manifest, reset if it was produced under another configuration.
    fn current_manifest(&self) -> RunManifest {
        let hash = self.config.content_hash();
        match self.read_manifest() {
            Some(m) if m.config_hash == hash && m.version == MANIFEST_VERSION => m,
            _ => RunManifest {
                version: MANIFEST_VERSION,
                config_hash: hash,
                stages: Vec::new(),
            },
        }
    }

    fn outputs_intact(&self, record: &StageRecord) -> bool {
        record.outputs.iter().all(|o| {
            fs::read(self.out.join(&o.path))
                .map(|bytes| sha256_hex(bytes) == o.sha256)
                .unwrap_or(false)
        })
    }

    fn is_reusable(&self, manifest: &RunManifest, stage: Stage) -> bool {
        manifest
            .stage(stage)
            .is_some_and(|r| r.status == StageStatus::Complete && self.outputs_intact(r))
    }

    fn snapshot_config(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.out).map_err(|e| stage_err(Stage::Ingest)(&e))?;
        fs::write(self.out.join(SNAPSHOT_FILE), self.config.to_toml()).map_err(|e| stage_err(Stage::Ingest)(&e))
    }

    /// Run all stages, reusing intact outputs from an earlier run.
    pub fn run(&self) -> Result<RunSummary, PipelineError> {
        self.run_through(Stage::Stats)
    }

    pub fn run_through(&self, last: Stage) -> Result<RunSummary, PipelineError> {
        self.snapshot_config()?;
        let mut manifest = self.current_manifest();
        let mut outcomes = Vec::new();
        let mut fresh = false;
        for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
            if !fresh && self.is_reusable(&manifest, stage) {
                outcomes.push((stage, StageOutcome::Reused));
                continue;
            }
            fresh = true;
            match self.execute(stage, &mut manifest)? {
                StageOutcome::Blocked => {
                    let task_ids = manifest
                        .stage(stage)
                        .and_then(|r| r.note.clone())
                        .map(|n| n.split(',').map(str::to_string).collect())
                        .unwrap_or_default();
                    return Err(PipelineError::PendingReview { task_ids });
                }
                outcome => outcomes.push((stage, outcome)),
            }
        }
        Ok(RunSummary { outcomes, manifest })
    }

    /// Run one stage on the persisted outputs of the earlier ones.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        self.snapshot_config()?;
        let mut manifest = self.current_manifest();
        if let Some(prev) = stage.previous() {
            for s in Stage::ALL.into_iter().filter(|s| *s <= prev) {
                if !self.is_reusable(&manifest, s) {
                    return Err(PipelineError::MissingOutput { stage, missing: s });
                }
            }
        }
        match self.execute(stage, &mut manifest)? {
            StageOutcome::Blocked => {
                let task_ids = manifest
                    .stage(stage)
                    .and_then(|r| r.note.clone())
                    .map(|n| n.split(',').map(str::to_string).collect())
                    .unwrap_or_default();
                Err(PipelineError::PendingReview { task_ids })
            }
            outcome => Ok(outcome),
        }
    }

    fn execute(&self, stage: Stage, manifest: &mut RunManifest) -> Result<StageOutcome, PipelineError> {
        // Later stages are stale once this one reruns.
        manifest.stages.retain(|r| r.stage < stage);
        let result = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Scrub => self.scrub(),
            Stage::Eligibility => self.eligibility(),
            Stage::Extract => self.extract(),
            Stage::Audit => self.audit(),
            Stage::Review => self.review(),
            Stage::Finalize => self.finalize(),
            Stage::Segment => self.segment(),
            Stage::Frame => self.frame(),
            Stage::Stats => self.stats(),
        };
        let result = match result {
            Ok(r) => r,
            Err(e) => {
                self.write_manifest(manifest)?;
                return Err(e);
            }
        };
        let (status, outputs, note) = match &result {
            StageResult::Done(o) => (StageStatus::Complete, o, None),
            StageResult::Blocked(o, ids) => (StageStatus::Blocked, o, Some(ids.join(","))),
        };
        manifest.stages.push(StageRecord {
            stage,
            status,
            outputs: outputs.hashed().map_err(|e| stage_err(stage)(&e))?,
            note,
        });
        self.write_manifest(manifest)?;
        log::info!("stage {stage}: {status:?}");
        Ok(match status {
            StageStatus::Complete => StageOutcome::Ran,
            StageStatus::Blocked => StageOutcome::Blocked,
        })
    }

    fn path(&self, stage: Stage, name: &str) -> PathBuf {
        stage_file(&self.out, stage, name)
    }

    fn read_rows<T: serde::de::DeserializeOwned>(&self, stage: Stage, from: Stage, name: &str) -> Result<Vec<T>, PipelineError> {
        read_jsonl(&self.path(from, name)).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("reading {} output: {e}", from.name()),
        })
    }

    fn ingest(&self) -> Result<StageResult, PipelineError> {
        let err = stage_err(Stage::Ingest);
        let corpus = load_corpus(&self.config.paths.notes, &self.config.paths.history).map_err(|e| err(&e))?;
        let mut out = Outputs::new(&self.out);
        let records = self.path(Stage::Ingest, files::RECORDS);
        write_jsonl(&records, &corpus.records).map_err(|e| err(&e))?;
        out.add(records);
        let history = self.path(Stage::Ingest, files::HISTORY);
        write_jsonl(&history, &corpus.history).map_err(|e| err(&e))?;
        out.add(history);
        Ok(StageResult::Done(out))
    }

    fn scrub(&self) -> Result<StageResult, PipelineError> {
        let err = stage_err(Stage::Scrub);
        let records: Vec<PatientRecord> = self.read_rows(Stage::Scrub, Stage::Ingest, files::RECORDS)?;
        let mut scrubbed = Vec::with_capacity(records.len());
        let mut rows = Vec::new();
        for r in records {
            let (text, spans) = scrub_custom_phi(&r.narrative);
            rows.extend(spans.into_iter().map(|s| ScrubRow {
                record_id: r.record_id.clone(),
                start: s.start,
                end: s.end,
                placeholder: s.placeholder,
            }));
            scrubbed.push(PatientRecord { narrative: text, ..r });
        }
        let mut out = Outputs::new(&self.out);
        let p = self.path(Stage::Scrub, files::RECORDS);
        write_jsonl(&p, &scrubbed).map_err(|e| err(&e))?;
        out.add(p);
        let p = self.path(Stage::Scrub, files::REPLACEMENTS);
        write_jsonl(&p, &rows).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn eligibility(&self) -> Result<StageResult, PipelineError> {
        let err = stage_err(Stage::Eligibility);
        let records: Vec<PatientRecord> = self.read_rows(Stage::Eligibility, Stage::Scrub, files::RECORDS)?;
        let history: Vec<PregnancyHistoryEntry> = self.read_rows(Stage::Eligibility, Stage::Ingest, files::HISTORY)?;
        let mut by_id: HashMap<&RecordId, Vec<&PregnancyHistoryEntry>> = HashMap::new();
        for h in &history {
            by_id.entry(&h.record_id).or_default().push(h);
        }
        // Eligibility applies to the repeat-cesarean group only.
        let mut assessments = Vec::new();
        for r in records.iter().filter(|r| r.group == DeliveryGroup::Rcs && !r.is_excluded()) {
            let h = by_id.get(&r.record_id).cloned().unwrap_or_default();
            assessments.push(assess(r, &h).map_err(|e| err(&e))?);
        }
        let summary = summarize_cohort(&assessments);
        let mut out = Outputs::new(&self.out);
        let p = self.path(Stage::Eligibility, files::ASSESSMENTS);
        write_jsonl(&p, &assessments).map_err(|e| err(&e))?;
        out.add(p);
        let p = self.path(Stage::Eligibility, files::ELIGIBILITY_SUMMARY);
        write_json(&p, &summary).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn potentially_eligible(&self, stage: Stage) -> Result<Vec<RecordId>, PipelineError> {
        let assessments: Vec<EligibilityAssessment> = self.read_rows(stage, Stage::Eligibility, files::ASSESSMENTS)?;
        Ok(assessments
            .into_iter()
            .filter(|a| a.category == EligibilityCategory::PotentiallyEligible)
            .map(|a| a.record_id)
            .collect())
    }

    fn variant_dir(&self, variant: PromptVariant) -> PathBuf {
        self.out.join(Stage::Extract.dir()).join(variant.as_str())
    }

    fn extract(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Extract;
        let err = stage_err(stage);
        let records: Vec<PatientRecord> = self.read_rows(stage, Stage::Scrub, files::RECORDS)?;
        let pe = self.potentially_eligible(stage)?;
        let by_id: HashMap<&RecordId, &PatientRecord> = records.iter().map(|r| (&r.record_id, r)).collect();
        let targets: Vec<&PatientRecord> = pe.iter().filter_map(|id| by_id.get(id).copied()).collect();

        let primary = self.config.extraction.variant;
        let mut out = Outputs::new(&self.out);
        let run_variant = |variant: PromptVariant, targets: &[&PatientRecord], out: &mut Outputs| -> Result<Vec<StoredExtraction>, PipelineError> {
            let config = self.config.prompt_config(variant);
            let results = extract_batch(targets, self.backend.as_ref(), &config, self.config.backend.parallelism);
            let mut stored = Vec::with_capacity(results.len());
            for (r, res) in targets.iter().zip(results) {
                let s = match res {
                    Ok(result) => StoredExtraction::Ok(result),
                    Err(ExtractionError::Backend { .. }) => return Err(err(&res.unwrap_err())),
                    Err(e) => StoredExtraction::Unparseable {
                        record_id: r.record_id.clone(),
                        model_name: config.model_name.clone(),
                        prompt_variant: variant,
                        reason: e.to_string(),
                        raw_responses: match e {
                            ExtractionError::Unparseable { raw_responses, .. } => raw_responses,
                            _ => Vec::new(),
                        },
                    },
                };
                out.add(write_extraction(&self.variant_dir(variant), &s).map_err(|e| err(&e))?);
                stored.push(s);
            }
            Ok(stored)
        };

        let first = run_variant(primary, &targets, &mut out)?;
        let needs_fallback = |s: &StoredExtraction| s.result().is_none_or(|r| r.is_incomplete());
        let mut selection: Vec<ExtractionSelection> = first
            .iter()
            .map(|s| ExtractionSelection {
                record_id: s.record_id().clone(),
                variant: primary,
                tried: vec![primary],
                parsed: s.result().is_some(),
            })
            .collect();
        if let Some(fallback) = self.config.extraction.fallback_variant {
            let retry: Vec<&PatientRecord> = targets
                .iter()
                .zip(&first)
                .filter(|(_, s)| needs_fallback(s))
                .map(|(r, _)| *r)
                .collect();
            let second = run_variant(fallback, &retry, &mut out)?;
            let second: HashMap<&RecordId, &StoredExtraction> = second.iter().map(|s| (s.record_id(), s)).collect();
            for sel in &mut selection {
                if let Some(s) = second.get(&sel.record_id) {
                    sel.tried.push(fallback);
                    if !needs_fallback(s) {
                        sel.variant = fallback;
                        sel.parsed = true;
                    }
                }
            }
        }
        let p = self.path(stage, files::SELECTION);
        write_jsonl(&p, &selection).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn audit(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Audit;
        let err = stage_err(stage);
        let records: Vec<PatientRecord> = self.read_rows(stage, Stage::Scrub, files::RECORDS)?;
        let selection: Vec<ExtractionSelection> = self.read_rows(stage, Stage::Extract, files::SELECTION)?;
        let narratives: HashMap<&RecordId, &str> = records.iter().map(|r| (&r.record_id, r.narrative.as_str())).collect();
        let mut audits = Vec::new();
        let mut out = Outputs::new(&self.out);
        for sel in &selection {
            for variant in &sel.tried {
                let stored = read_extraction(&self.variant_dir(*variant), &sel.record_id).map_err(|e| err(&e))?;
                let Some(result) = stored.result() else { continue };
                let narrative = narratives.get(&sel.record_id).copied().unwrap_or("");
                let records = verify_verbatim(result, narrative);
                let dir = self.out.join(stage.dir()).join("flags").join(variant.as_str());
                out.add(write_flag_log(&dir, &sel.record_id, &records).map_err(|e| err(&e))?);
                audits.extend(records);
            }
        }
        let p = self.path(stage, files::AUDITS);
        write_jsonl(&p, &audits).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn clock(&self, store: &ReviewStore) -> DateTime<Utc> {
        match self.config.adjudication.policy {
            // A logical clock keeps auto-resolved logs reproducible.
            ReviewPolicy::AutoResolve => {
                DateTime::from_timestamp(946_684_800 + store.events().len() as i64, 0).expect("valid timestamp")
            }
            ReviewPolicy::Manual => Utc::now(),
        }
    }

    fn review(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Review;
        let err = stage_err(stage);
        let records: Vec<PatientRecord> = self.read_rows(stage, Stage::Scrub, files::RECORDS)?;
        let audits: Vec<AuditRecord> = self.read_rows(stage, Stage::Audit, files::AUDITS)?;
        let selection: Vec<ExtractionSelection> = self.read_rows(stage, Stage::Extract, files::SELECTION)?;
        let pe = self.potentially_eligible(stage)?;
        let mut store = ReviewStore::open(&event_log_path(&self.out)).map_err(|e| err(&e))?;

        let narratives: HashMap<RecordId, String> = records.iter().map(|r| (r.record_id.clone(), r.narrative.clone())).collect();
        let ts = self.clock(&store);
        enqueue_flags(&mut store, &audits, &narratives, ts).map_err(|e| err(&e))?;
        let by_id: HashMap<&RecordId, &PatientRecord> = records.iter().map(|r| (&r.record_id, r)).collect();
        for id in &pe {
            let Some(r) = by_id.get(id) else { continue };
            if let Some(term) = needs_consult(&r.narrative, &self.config.adjudication.ambiguity_terms) {
                let ts = self.clock(&store);
                enqueue_consult(&mut store, r, &format!("ambiguous surgical history: {term}"), ts).map_err(|e| err(&e))?;
            }
        }
        if let Some(truth) = &self.truth {
            self.auto_resolve(&mut store, truth).map_err(|e| err(&e))?;
        }

        let mut out = Outputs::new(&self.out);
        out.add(event_log_path(&self.out));
        let pending: Vec<String> = store.pending().map(|t| t.task_id.clone()).collect();
        if !pending.is_empty() {
            return Ok(StageResult::Blocked(out, pending));
        }
        let (decided, waiting) =
            adjudicate_from_state(&pe, &selection, &audits, &store, &self.concept_map).map_err(|e| err(&e))?;
        if !waiting.is_empty() {
            return Err(err(&format!("records still waiting after all tasks resolved: {waiting:?}")));
        }
        let p = self.path(stage, files::FINAL_ELIGIBILITY);
        write_jsonl(&p, &decided).map_err(|e| err(&e))?;
        out.add(p);
        let p = self.path(stage, files::REVIEWED_AUDITS);
        write_jsonl(&p, &apply_reviews(&audits, &store)).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn auto_resolve(&self, store: &mut ReviewStore, truth: &GroundTruth) -> Result<(), crate::adjudication::AdjudicationError> {
        let pending: Vec<(String, TaskSubject)> = store.pending().map(|t| (t.task_id.clone(), t.subject.clone())).collect();
        for (task_id, subject) in pending {
            let decision = match &subject {
                TaskSubject::Flag { audit } => truth.answer_for(&audit.record_id, &audit.extracted).map(Decision::Review),
                TaskSubject::Consult { record_id, .. } => truth.consult_decisions.get(record_id).copied().map(Decision::Eligibility),
            };
            if let Some(d) = decision {
                let ts = self.clock(store);
                store.resolve_task(&task_id, d, "auto-resolved from corpus sidecar", ts)?;
            }
        }
        Ok(())
    }

    fn finalize(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Finalize;
        let err = stage_err(stage);
        let records: Vec<PatientRecord> = self.read_rows(stage, Stage::Scrub, files::RECORDS)?;
        let assessments: Vec<EligibilityAssessment> = self.read_rows(stage, Stage::Eligibility, files::ASSESSMENTS)?;
        let decided: Vec<FinalEligibility> = self.read_rows(stage, Stage::Review, files::FINAL_ELIGIBILITY)?;
        let manifest = finalize_cohort(&records, &assessments, &decided).map_err(|e| err(&e))?;
        let mut out = Outputs::new(&self.out);
        let p = self.path(stage, files::COHORT);
        write_json(&p, &manifest).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn segment(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Segment;
        let err = stage_err(stage);
        let records: Vec<PatientRecord> = self.read_rows(stage, Stage::Scrub, files::RECORDS)?;
        let cohort: CohortManifest = read_json(&self.path(Stage::Finalize, files::COHORT)).map_err(|e| err(&e))?;
        let segmenter = Segmenter::new(&self.config.segmentation).map_err(|e| err(&e))?;
        let mut rows = Vec::new();
        for r in records.iter().filter(|r| cohort.contains(&r.record_id)) {
            rows.extend(segmenter.segment(r).into_iter().map(|segment| GroupedSegment { segment, group: r.group }));
        }
        let mut out = Outputs::new(&self.out);
        let p = self.path(stage, files::SEGMENTS);
        write_jsonl(&p, &rows).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn frame(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Frame;
        let err = stage_err(stage);
        let rows: Vec<GroupedSegment> = self.read_rows(stage, Stage::Segment, files::SEGMENTS)?;
        let segments: Vec<(Segment, DeliveryGroup)> = rows.into_iter().map(|r| (r.segment, r.group)).collect();
        let labels = classify_batch(&segments, self.backend.as_ref(), &self.config.framing_config(), self.config.backend.parallelism)
            .map_err(|e| err(&e))?;
        let mut out = Outputs::new(&self.out);
        let p = self.path(stage, files::LABELS);
        write_jsonl(&p, &labels).map_err(|e| err(&e))?;
        out.add(p);
        Ok(StageResult::Done(out))
    }

    fn stats(&self) -> Result<StageResult, PipelineError> {
        let stage = Stage::Stats;
        let err = stage_err(stage);
        let stored: Vec<StoredFraming> = self.read_rows(stage, Stage::Frame, files::LABELS)?;
        let subset = filter_counseling(&stored);
        let mut out = Outputs::new(&self.out);
        let p = self.path(stage, files::COVERAGE);
        write_json(&p, &subset.coverage).map_err(|e| err(&e))?;
        out.add(p);
        let p = self.path(stage, files::DISTRIBUTION);
        write_json(&p, &distribution_report(&subset.labels)).map_err(|e| err(&e))?;
        out.add(p);
        let table = build_table(&subset.labels).map_err(|e| err(&e))?;
        let result = chi_square(&table).map_err(|e| err(&e))?;
        let p = self.path(stage, files::TABLE);
        write_json(&p, &table).map_err(|e| err(&e))?;
        out.add(p);
        let p = self.path(stage, files::CHI_SQUARE);
        write_json(&p, &result).map_err(|e| err(&e))?;
        out.add(p);
        if let Some(path) = &self.config.paths.expert_labels {
            let experts: Vec<ExpertLabel> = read_jsonl(path).map_err(|e| err(&e))?;
            let lookup = expert_lookup(&experts);
            let mut llm = Vec::new();
            let mut sets = Vec::new();
            let mut primary = Vec::new();
            for s in &stored {
                if let StoredFraming::Ok(l) = s {
                    if let Some((set, first)) = lookup.get(&(l.note_id.clone(), l.index)) {
                        llm.push(l.category);
                        sets.push(set.clone());
                        primary.push(*first);
                    }
                }
            }
            if !llm.is_empty() {
                let report = agreement_metrics(&llm, &sets, &primary).map_err(|e| err(&e))?;
                let p = self.path(stage, files::AGREEMENT);
                write_json(&p, &report).map_err(|e| err(&e))?;
                out.add(p);
            }
        }
        Ok(StageResult::Done(out))
    }
}

/// Stage outputs listed in a manifest, by stage.
pub fn manifest_outputs(m: &RunManifest) -> BTreeMap<Stage, Vec<String>> {
    m.stages.iter().map(|s| (s.stage, s.outputs.iter().map(|o| o.path.clone()).collect())).collect()
}
