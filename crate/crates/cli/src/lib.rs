//! `counsel` command line: pipeline stages, reports, and the review queue.

pub mod server;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use counsel_core::adjudication::{ConceptMap, Decision, TaskStatus};
use counsel_core::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage, StageOutcome, MANIFEST_FILE};
use counsel_core::report::{build_report, ReportError};
use counsel_core::review::{ReviewError, ReviewService, TaskKind, TaskQuery};
use counsel_core::stats::{chi_square, render_table_text, ContingencyTable};
use counsel_core::synth::{generate_synthetic_corpus, SyntheticCorpusSpec, EXPERT_FILE, HISTORY_FILE, NOTES_FILE, TRUTH_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_PENDING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "counsel", version, about = "Grounded extraction and framing analysis for delivery counseling notes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with its ground-truth sidecar and a config.
    Generate(GenerateArgs),
    /// Run every stage, resuming from intact outputs, then write the report.
    Run(ConfigArg),
    /// Load notes and delivery history.
    Ingest(ConfigArg),
    /// Replace identifiers in note text.
    Scrub(ConfigArg),
    /// Classify RCS patients from structured history.
    Eligibility(ConfigArg),
    /// Extract incision, contraindication and delivery-mode evidence.
    Extract(ConfigArg),
    /// Check extracted strings against the note text.
    Audit(ConfigArg),
    /// Review queue: run the stage, inspect or resolve tasks, or serve the API.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Join adjudicated eligibility into the framing cohort.
    Finalize(ConfigArg),
    /// Split cohort notes into sentence groups.
    Segment(ConfigArg),
    /// Label each segment with a framing category.
    Frame(ConfigArg),
    /// Framing statistics, from the run or from a counts file.
    Stats(StatsArgs),
    /// Rebuild the report from persisted outputs.
    Report(ConfigArg),
    /// Show the run manifest.
    Status(ConfigArg),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub n_rcs: usize,
    #[arg(long, default_value_t = 20)]
    pub n_vbac: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(short, long, required_unless_present = "counts", conflicts_with = "counts")]
    pub config: Option<PathBuf>,
    /// JSON file with `row_labels`, `col_labels` and `counts`.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Enqueue review tasks and adjudicate when all are resolved.
    Run(ConfigArg),
    /// List review tasks.
    List(ListArgs),
    /// Show one task with its decision candidates.
    Show {
        #[arg(short, long)]
        config: PathBuf,
        task_id: String,
    },
    /// Record a decision for a task.
    Resolve {
        #[arg(short, long)]
        config: PathBuf,
        task_id: String,
        /// Review category (e.g. ParaphraseAccurate) or ConfirmedEligible / Excluded.
        decision: String,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Serve the review API (and optionally the UI build).
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long, value_parser = parse_status)]
    pub status: Option<TaskStatus>,
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<TaskKind>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory with the built review UI.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Environment variable holding a bearer token the API will require.
    #[arg(long)]
    pub token_env: Option<String>,
}

fn parse_status(s: &str) -> Result<TaskStatus, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("expected pending or resolved, got {s:?}"))
}

fn parse_kind(s: &str) -> Result<TaskKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| format!("expected flag or consult, got {s:?}"))
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<ReviewError> for CliError {
    fn from(e: ReviewError) -> Self {
        let code = match &e {
            ReviewError::NotReady(_) | ReviewError::Read { .. } => EXIT_STAGE,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError {
            code: EXIT_STAGE,
            message: e.to_string(),
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_STAGE,
        message: e.to_string(),
    }
}

fn config_err(message: String) -> CliError {
    CliError { code: EXIT_CONFIG, message }
}

fn pipeline(path: &Path) -> Result<Pipeline, CliError> {
    Ok(Pipeline::new(PipelineConfig::load(path)?)?)
}

fn review_service(path: &Path) -> Result<ReviewService, CliError> {
    let config = PipelineConfig::load(path)?;
    config.validate()?;
    let map = match &config.paths.concept_map {
        Some(p) => ConceptMap::load(p).map_err(|e| config_err(format!("concept map: {e}")))?,
        None => ConceptMap::default(),
    };
    Ok(ReviewService::open(&config.paths.output_dir, map)?)
}

fn run_stage(config: &Path, stage: Stage, out: &mut dyn Write) -> Result<(), CliError> {
    let outcome = pipeline(config)?.run_stage(stage)?;
    writeln!(out, "{stage}: {}", outcome_name(outcome)).map_err(io_err)
}

fn outcome_name(o: StageOutcome) -> &'static str {
    match o {
        StageOutcome::Ran => "ran",
        StageOutcome::Reused => "reused",
        StageOutcome::Blocked => "blocked",
    }
}

/// Config written next to a generated corpus. Auto-resolve is safe here
/// because the sidecar holds the true answers.
pub fn synthetic_config(corpus_dir: &Path, output_dir: &Path) -> String {
    format!(
        "seed = 7\n\n[paths]\nnotes = {:?}\nhistory = {:?}\noutput_dir = {:?}\ntruth = {:?}\nexpert_labels = {:?}\n\n\
         [backend]\nkind = \"mock\"\nmodel = \"echo-mock\"\n\n[extraction]\nvariant = \"short\"\n\n\
         [adjudication]\npolicy = \"auto_resolve\"\n",
        corpus_dir.join(NOTES_FILE),
        corpus_dir.join(HISTORY_FILE),
        output_dir,
        corpus_dir.join(TRUTH_FILE),
        corpus_dir.join(EXPERT_FILE),
    )
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => {
            let spec = SyntheticCorpusSpec {
                n_rcs: a.n_rcs,
                n_vbac: a.n_vbac,
                seed: a.seed,
                ..Default::default()
            };
            let corpus = generate_synthetic_corpus(&spec).map_err(config_err)?;
            corpus.write_to(&a.out).map_err(io_err)?;
            let config = a.out.join("pipeline.toml");
            std::fs::write(&config, synthetic_config(&a.out, &a.out.join("run"))).map_err(io_err)?;
            writeln!(out, "wrote {} records to {}", corpus.records.len(), a.out.display()).map_err(io_err)?;
            writeln!(out, "config: {}", config.display()).map_err(io_err)?;
        }
        Command::Run(c) => {
            let p = pipeline(&c.config)?;
            let summary = p.run()?;
            for (stage, o) in &summary.outcomes {
                writeln!(out, "{stage}: {}", outcome_name(*o)).map_err(io_err)?;
            }
            let report = build_report(p.output_dir())?;
            writeln!(out, "report: {}", report.files[0].display()).map_err(io_err)?;
        }
        Command::Ingest(c) => run_stage(&c.config, Stage::Ingest, out)?,
        Command::Scrub(c) => run_stage(&c.config, Stage::Scrub, out)?,
        Command::Eligibility(c) => run_stage(&c.config, Stage::Eligibility, out)?,
        Command::Extract(c) => run_stage(&c.config, Stage::Extract, out)?,
        Command::Audit(c) => run_stage(&c.config, Stage::Audit, out)?,
        Command::Finalize(c) => run_stage(&c.config, Stage::Finalize, out)?,
        Command::Segment(c) => run_stage(&c.config, Stage::Segment, out)?,
        Command::Frame(c) => run_stage(&c.config, Stage::Frame, out)?,
        Command::Stats(a) => match (a.counts, a.config) {
            (Some(counts), _) => {
                let raw: ContingencyTable = counsel_core::util::read_json(&counts).map_err(|e| config_err(format!("{}: {e}", counts.display())))?;
                let table = ContingencyTable::new(raw.row_labels, raw.col_labels, raw.counts)
                    .map_err(|e| config_err(e.to_string()))?;
                let result = chi_square(&table).map_err(|e| CliError {
                    code: EXIT_STAGE,
                    message: e.to_string(),
                })?;
                if a.json {
                    writeln!(out, "{}", serde_json::to_string_pretty(&result).expect("serializable")).map_err(io_err)?;
                } else {
                    write!(out, "{}", render_table_text(&table, &result)).map_err(io_err)?;
                }
            }
            (None, Some(config)) => run_stage(&config, Stage::Stats, out)?,
            (None, None) => return Err(config_err("stats needs --config or --counts".into())),
        },
        Command::Report(c) => {
            let config = PipelineConfig::load(&c.config)?;
            let report = build_report(&config.paths.output_dir)?;
            write!(out, "{}", report.text).map_err(io_err)?;
        }
        Command::Status(c) => {
            let config = PipelineConfig::load(&c.config)?;
            let path = config.paths.output_dir.join(MANIFEST_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError {
                code: EXIT_STAGE,
                message: format!("{}: {e}", path.display()),
            })?;
            writeln!(out, "{text}").map_err(io_err)?;
        }
        Command::Review(r) => review(r, out)?,
    }
    Ok(())
}

fn review(cmd: ReviewCommand, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        ReviewCommand::Run(c) => run_stage(&c.config, Stage::Review, out)?,
        ReviewCommand::List(a) => {
            let svc = review_service(&a.config)?;
            let q = TaskQuery {
                status: a.status,
                kind: a.kind,
                page_size: Some(counsel_core::review::MAX_PAGE_SIZE),
                ..Default::default()
            };
            let mut page_no = 1;
            loop {
                let page = svc.list(&TaskQuery { page: Some(page_no), ..q.clone() })?;
                for t in &page.tasks {
                    if a.json {
                        writeln!(out, "{}", serde_json::to_string(&t.task).expect("serializable")).map_err(io_err)?;
                    } else {
                        let status = match t.task.status {
                            TaskStatus::Pending => "pending",
                            TaskStatus::Resolved => "resolved",
                        };
                        writeln!(out, "{}\t{status}", t.task.task_id).map_err(io_err)?;
                    }
                }
                if page_no * page.page_size >= page.total {
                    break;
                }
                page_no += 1;
            }
        }
        ReviewCommand::Show { config, task_id } => {
            let svc = review_service(&config)?;
            let view = svc
                .get(&task_id)
                .ok_or_else(|| config_err(format!("unknown task {task_id}")))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&view).expect("serializable")).map_err(io_err)?;
        }
        ReviewCommand::Resolve {
            config,
            task_id,
            decision,
            note,
        } => {
            let decision: Decision = decision.parse().map_err(config_err)?;
            let mut svc = review_service(&config)?;
            let view = svc.resolve(&task_id, decision, &note)?;
            let pending = svc.store().pending().count();
            writeln!(out, "{} resolved; {pending} pending", view.task.task_id).map_err(io_err)?;
        }
        ReviewCommand::Serve(a) => {
            let svc = review_service(&a.config)?;
            let token = match &a.token_env {
                Some(var) => Some(std::env::var(var).map_err(|_| config_err(format!("environment variable {var} is not set")))?),
                None => None,
            };
            let app = server::router(svc, token, a.static_dir);
            let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
            rt.block_on(server::serve(&a.addr, app)).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
