//! Plain-text and JSON report, rebuilt from persisted stage outputs only.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::framing::GroupCoverage;
use crate::corpus::DeliveryGroup;
use crate::eligibility::EligibilitySummary;
use crate::grounding::{aggregate_audit, AuditRecord};
use crate::pipeline::{files, stage_file, Stage};
use crate::stats::{render_table_text, AgreementReport, ChiSquareResult, ContingencyTable, DistributionReport};
use crate::util::{read_json, read_jsonl, write_json};

pub const REPORT_DIR: &str = "report";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("eligibility output missing at {0}; run the pipeline through eligibility first")]
    MissingEligibility(PathBuf),
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("writing report: {0}")]
    Write(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportData {
    pub eligibility: EligibilitySummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<crate::grounding::AuditAggregate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<std::collections::BTreeMap<DeliveryGroup, GroupCoverage>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<ContingencyTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_square: Option<ChiSquareResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementReport>,
    /// Sections left out and why.
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub data: ReportData,
    pub text: String,
    pub files: Vec<PathBuf>,
}

fn optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ReportError> {
    if !path.exists() {
        return Ok(None);
    }
    read_json(path).map(Some).map_err(|e| ReportError::Read {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn collect(out: &Path) -> Result<ReportData, ReportError> {
    let elig_path = stage_file(out, Stage::Eligibility, files::ELIGIBILITY_SUMMARY);
    let eligibility: EligibilitySummary = optional(&elig_path)?.ok_or(ReportError::MissingEligibility(elig_path))?;
    let mut notices = Vec::new();

    let reviewed = stage_file(out, Stage::Review, files::REVIEWED_AUDITS);
    let audit = if reviewed.exists() {
        let records: Vec<AuditRecord> = read_jsonl(&reviewed).map_err(|e| ReportError::Read {
            path: reviewed.clone(),
            message: e.to_string(),
        })?;
        Some(aggregate_audit(&records).map_err(|e| ReportError::Read {
            path: reviewed,
            message: e.to_string(),
        })?)
    } else {
        notices.push("extraction audit skipped: review is not complete".to_string());
        None
    };

    let coverage = optional(&stage_file(out, Stage::Stats, files::COVERAGE))?;
    let distribution = optional(&stage_file(out, Stage::Stats, files::DISTRIBUTION))?;
    let table = optional(&stage_file(out, Stage::Stats, files::TABLE))?;
    let chi_square = optional(&stage_file(out, Stage::Stats, files::CHI_SQUARE))?;
    if coverage.is_none() {
        notices.push("framing analysis skipped: no framing statistics were produced".to_string());
    }
    let agreement = optional(&stage_file(out, Stage::Stats, files::AGREEMENT))?;
    if agreement.is_none() && coverage.is_some() {
        notices.push("expert agreement skipped: no expert labels were configured".to_string());
    }
    Ok(ReportData {
        eligibility,
        audit,
        coverage,
        distribution,
        table,
        chi_square,
        agreement,
        notices,
    })
}

pub fn render(data: &ReportData) -> String {
    let mut out = String::new();
    out.push_str("== Eligibility ==\n");
    out.push_str(&data.eligibility.render_text());
    if let Some(a) = &data.audit {
        out.push_str("\n== Extraction audit ==\n");
        out.push_str(&a.render_text());
    }
    if let Some(cov) = &data.coverage {
        out.push_str("\n== Counseling coverage ==\n");
        for (group, c) in cov {
            out.push_str(&format!(
                "{group}: {} of {} segments are counseling ({:.1}%); {} not counseling, {} rejected\n",
                c.counseling,
                c.total_segments,
                c.counseling_percent(),
                c.not_counseling,
                c.rejected
            ));
        }
    }
    if let Some(d) = &data.distribution {
        out.push_str("\n== Framing distribution ==\n");
        out.push_str(&d.render_text());
    }
    if let (Some(t), Some(r)) = (&data.table, &data.chi_square) {
        out.push_str("\n== Framing by delivery group ==\n");
        out.push_str(&render_table_text(t, r));
    }
    if let Some(a) = &data.agreement {
        out.push_str("\n== Agreement with expert labels ==\n");
        out.push_str(&format!(
            "items {}\nany-match {:.1}%\nmean Jaccard {:.1}%\nCohen's kappa {:.2}\n",
            a.n_items,
            100.0 * a.any_match_rate,
            100.0 * a.mean_jaccard,
            a.kappa
        ));
    }
    if !data.notices.is_empty() {
        out.push_str("\n== Notices ==\n");
        for n in &data.notices {
            out.push_str(n);
            out.push('\n');
        }
    }
    out
}

/// Build and write `report/report.txt` and `report/report.json`.
pub fn build_report(out: &Path) -> Result<Report, ReportError> {
    let data = collect(out)?;
    let text = render(&data);
    let dir = out.join(REPORT_DIR);
    fs::create_dir_all(&dir).map_err(|e| ReportError::Write(e.to_string()))?;
    let txt = dir.join(REPORT_TEXT);
    fs::write(&txt, &text).map_err(|e| ReportError::Write(e.to_string()))?;
    let json = dir.join(REPORT_JSON);
    write_json(&json, &data).map_err(|e| ReportError::Write(e.to_string()))?;
    Ok(Report {
        data,
        text,
        files: vec![txt, json],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{Pipeline, PipelineConfig};
    use crate::synth::{generate_synthetic_corpus, SyntheticCorpusSpec, EXPERT_FILE, HISTORY_FILE, NOTES_FILE, TRUTH_FILE};

    fn config(dir: &Path, experts: bool) -> PipelineConfig {
        let c = dir.join("c");
        let mut text = format!(
            "[paths]\nnotes = {:?}\nhistory = {:?}\noutput_dir = {:?}\ntruth = {:?}\n",
            c.join(NOTES_FILE),
            c.join(HISTORY_FILE),
            dir.join("out"),
            c.join(TRUTH_FILE)
        );
        if experts {
            text.push_str(&format!("expert_labels = {:?}\n", c.join(EXPERT_FILE)));
        }
        text.push_str("[adjudication]\npolicy = \"auto_resolve\"\n");
        PipelineConfig::from_toml(&text).unwrap()
    }

    fn corpus(dir: &Path) {
        generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap().write_to(&dir.join("c")).unwrap();
    }

    #[test]
    fn missing_eligibility_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_report(dir.path()), Err(ReportError::MissingEligibility(_))));
    }

    #[test]
    fn partial_run_reports_with_notices() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let p = Pipeline::new(config(dir.path(), false)).unwrap();
        p.run_through(Stage::Eligibility).unwrap();
        let r = build_report(p.output_dir()).unwrap();
        assert!(r.data.coverage.is_none() && r.data.audit.is_none());
        assert!(r.text.contains("framing analysis skipped"));
        assert!(r.text.contains("Eligible"));
    }

    #[test]
    fn full_run_report_has_every_section() {
        let dir = tempfile::tempdir().unwrap();
        corpus(dir.path());
        let p = Pipeline::new(config(dir.path(), true)).unwrap();
        p.run().unwrap();
        let r = build_report(p.output_dir()).unwrap();
        for section in ["Extraction audit", "Counseling coverage", "Framing distribution", "Framing by delivery group", "Agreement"] {
            assert!(r.text.contains(section), "{section}");
        }
        assert!(r.data.notices.is_empty());
        let again = build_report(p.output_dir()).unwrap();
        assert_eq!(again.text, r.text);
    }
}
