//! Note ingestion, custom PHI scrubbing and counseling-section segmentation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque patient key shared by the notes file and the history table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub String);

impl RecordId {
    pub fn new(id: impl Into<String>) -> Self {
        RecordId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True when the id can be used verbatim as a file stem.
    pub fn is_file_safe(&self) -> bool {
        !self.0.is_empty()
            && self.0 != "."
            && self.0 != ".."
            && self
                .0
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RecordId {
    fn from(s: &str) -> Self {
        RecordId(s.to_string())
    }
}

/// Delivery outcome of the index pregnancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeliveryGroup {
    #[serde(rename = "RCS")]
    Rcs,
    #[serde(rename = "VBAC")]
    Vbac,
}

impl DeliveryGroup {
    pub const ALL: [DeliveryGroup; 2] = [DeliveryGroup::Rcs, DeliveryGroup::Vbac];

    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryGroup::Rcs => "RCS",
            DeliveryGroup::Vbac => "VBAC",
        }
    }
}

impl fmt::Display for DeliveryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub record_id: RecordId,
    pub narrative: String,
    pub group: DeliveryGroup,
    pub prior_cesarean: bool,
    #[serde(default)]
    pub age: Option<f64>,
    #[serde(default)]
    pub bmi: Option<f64>,
    /// Date of the index delivery; used for the interdelivery interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_date: Option<NaiveDate>,
}

impl PatientRecord {
    /// Records without a documented prior cesarean stay in the corpus but
    /// never enter the cohort.
    pub fn is_excluded(&self) -> bool {
        !self.prior_cesarean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryMode {
    Cesarean,
    Vaginal,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncisionType {
    LowTransverse,
    Classical,
    TShaped,
    JShaped,
    #[default]
    Unknown,
}

impl IncisionType {
    /// Classical (vertical), T-shaped and J-shaped scars.
    pub fn is_classical_family(self) -> bool {
        matches!(self, IncisionType::Classical | IncisionType::TShaped | IncisionType::JShaped)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PregnancyHistoryEntry {
    pub record_id: RecordId,
    pub mode: DeliveryMode,
    #[serde(default, deserialize_with = "incision_or_unknown")]
    pub incision_type: IncisionType,
    #[serde(default)]
    pub delivery_date: Option<NaiveDate>,
}

fn incision_or_unknown<'de, D>(d: D) -> Result<IncisionType, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Ok(Option::<IncisionType>::deserialize(d)?.unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub note_id: RecordId,
    pub index: usize,
    pub text: String,
    #[serde(default)]
    pub section_header: Option<String>,
    /// Byte offsets of `text` in the narrative it was cut from.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate record_id {id}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: RecordId,
    },
    #[error("{path}:{line}: history entry references unknown record_id {id}")]
    DanglingHistory {
        path: PathBuf,
        line: usize,
        id: RecordId,
    },
    #[error("{path}:{line}: record {id} has an empty narrative")]
    EmptyNarrative {
        path: PathBuf,
        line: usize,
        id: RecordId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub records: Vec<PatientRecord>,
    pub history: Vec<PregnancyHistoryEntry>,
}

impl Corpus {
    pub fn record(&self, id: &RecordId) -> Option<&PatientRecord> {
        self.records.iter().find(|r| &r.record_id == id)
    }

    pub fn history_for<'a>(&'a self, id: &'a RecordId) -> impl Iterator<Item = &'a PregnancyHistoryEntry> + 'a {
        self.history.iter().filter(move |h| &h.record_id == id)
    }
}

fn read_lines(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parse line-delimited JSON; blank lines are skipped, line numbers are 1-based.
fn parse_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    text: &str,
) -> Result<Vec<(usize, T)>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn parse_corpus(
    notes_path: &Path,
    notes: &str,
    history_path: &Path,
    history: &str,
) -> Result<Corpus, CorpusError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, record) in parse_jsonl::<PatientRecord>(notes_path, notes)? {
        if record.narrative.trim().is_empty() {
            return Err(CorpusError::EmptyNarrative {
                path: notes_path.to_path_buf(),
                line,
                id: record.record_id,
            });
        }
        if !seen.insert(record.record_id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: notes_path.to_path_buf(),
                line,
                id: record.record_id,
            });
        }
        records.push(record);
    }
    let mut entries = Vec::new();
    for (line, entry) in parse_jsonl::<PregnancyHistoryEntry>(history_path, history)? {
        if !seen.contains(&entry.record_id) {
            return Err(CorpusError::DanglingHistory {
                path: history_path.to_path_buf(),
                line,
                id: entry.record_id,
            });
        }
        entries.push(entry);
    }
    Ok(Corpus {
        records,
        history: entries,
    })
}

pub fn load_corpus(notes_path: &Path, history_path: &Path) -> Result<Corpus, CorpusError> {
    let notes = read_lines(notes_path)?;
    let history = read_lines(history_path)?;
    parse_corpus(notes_path, &notes, history_path, &history)
}

// ---------------------------------------------------------------------------
// PHI scrubbing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placeholder {
    #[serde(rename = "NAME")]
    Name,
    #[serde(rename = "DOB")]
    Dob,
    #[serde(rename = "DATE")]
    Date,
    #[serde(rename = "INITIAL")]
    Initial,
}

impl Placeholder {
    pub fn as_str(self) -> &'static str {
        match self {
            Placeholder::Name => "NAME",
            Placeholder::Dob => "DOB",
            Placeholder::Date => "DATE",
            Placeholder::Initial => "INITIAL",
        }
    }
}

/// One replaced region, in byte offsets of the input text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementSpan {
    pub start: usize,
    pub end: usize,
    pub original: String,
    pub placeholder: Placeholder,
}

struct PhiRule {
    placeholder: Placeholder,
    pattern: Regex,
    /// Capture group holding the part to replace (0 = whole match).
    group: usize,
}

const DATE_PATTERN: &str = r"(?:\d{1,2}[/-]\d{1,2}[/-](?:\d{4}|\d{2})|\d{4}-\d{2}-\d{2}|(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|Jun(?:e)?|Jul(?:y)?|Aug(?:ust)?|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)\.? \d{1,2},? \d{4})";

fn phi_rules() -> &'static [PhiRule] {
    static RULES: OnceLock<Vec<PhiRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let rule = |placeholder, pattern: &str, group| PhiRule {
            placeholder,
            pattern: Regex::new(pattern).expect("static PHI pattern"),
            group,
        };
        vec![
            // Name placeholder or a personal name, followed by a credential.
            rule(
                Placeholder::Name,
                r"\b(?:(?:[A-Z]\.\s*)?NAME|[A-Z][a-z]+(?:\s+[A-Z]\.)?\s+[A-Z][a-z]+(?:-[A-Z][a-z]+)?|[A-Z]\.\s*[A-Z][a-z]+),?\s+(?:MD|APRN|CNM)\b",
                0,
            ),
            rule(
                Placeholder::Dob,
                &format!(r"(?i:\b(?:DOB|D\.O\.B\.|date of birth))\s*[:\-]?\s*({DATE_PATTERN})"),
                1,
            ),
            rule(Placeholder::Date, &format!(r"\b{DATE_PATTERN}\b"), 0),
            rule(Placeholder::Initial, r"\b[A-Z]\.(?:\s?[A-Z]\.)*", 0),
        ]
    })
}

/// Replace provider credentials, dates (including dates of birth) and
/// single-letter initials with fixed placeholders. Rules apply in order and
/// earlier rules claim their regions, so dates are masked before initials.
pub fn scrub_custom_phi(text: &str) -> (String, Vec<ReplacementSpan>) {
    let mut spans: Vec<ReplacementSpan> = Vec::new();
    for rule in phi_rules() {
        // Later rules only see the text between regions already claimed.
        spans.sort_by_key(|s| s.start);
        let mut gaps = Vec::with_capacity(spans.len() + 1);
        let mut cursor = 0;
        for s in &spans {
            gaps.push((cursor, s.start));
            cursor = s.end;
        }
        gaps.push((cursor, text.len()));
        for (gap_start, gap_end) in gaps {
            let gap = &text[gap_start..gap_end];
            for caps in rule.pattern.captures_iter(gap) {
                let Some(m) = caps.get(rule.group) else { continue };
                if m.start() == m.end() {
                    continue;
                }
                spans.push(ReplacementSpan {
                    start: gap_start + m.start(),
                    end: gap_start + m.end(),
                    original: m.as_str().to_string(),
                    placeholder: rule.placeholder,
                });
            }
        }
    }
    spans.sort_by_key(|s| s.start);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for s in &spans {
        out.push_str(&text[cursor..s.start]);
        out.push_str(s.placeholder.as_str());
        cursor = s.end;
    }
    out.push_str(&text[cursor..]);
    (out, spans)
}

// ---------------------------------------------------------------------------
// Segmentation

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Counseling-section headers, matched case-insensitively and followed by a colon.
    pub header_patterns: Vec<String>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            header_patterns: vec![
                "plan".to_string(),
                "assessment and plan".to_string(),
                "assessment/plan".to_string(),
            ],
        }
    }
}

/// Compiled form of [`SegmentationConfig`].
pub struct Segmenter {
    counseling: Regex,
}

fn generic_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^[ \t]*(?:[A-Z][A-Za-z/&()]*(?:[ \t]+[A-Za-z/&()]+){0,3}[ \t]*:|[A-Z][A-Z/&()]+(?:[ \t]+[A-Z/&()]+)*[ \t]*$)")
            .expect("static header pattern")
    })
}

fn sentence_break() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.!?]+\s+[A-Z0-9]").expect("static sentence pattern"))
}

const NON_TERMINAL_ABBREVIATIONS: &[&str] = &["dr", "mr", "mrs", "ms", "st", "vs"];

impl Segmenter {
    pub fn new(config: &SegmentationConfig) -> Result<Self, regex::Error> {
        let mut patterns: Vec<&String> = config.header_patterns.iter().collect();
        // Longest first so "assessment and plan" wins over "plan".
        patterns.sort_by_key(|p| std::cmp::Reverse(p.len()));
        let alternation = patterns
            .iter()
            .map(|p| regex::escape(p.trim()).replace(' ', r"\s+"))
            .collect::<Vec<_>>()
            .join("|");
        let counseling = Regex::new(&format!(r"(?i)\b(?:{alternation})\s*:"))?;
        Ok(Segmenter { counseling })
    }

    /// Counseling headers that start a line or follow terminal punctuation.
    fn counseling_headers<'t>(&self, text: &'t str) -> Vec<regex::Match<'t>> {
        self.counseling
            .find_iter(text)
            .filter(|m| {
                let before = text[..m.start()].trim_end_matches([' ', '\t']);
                before.is_empty()
                    || before.ends_with('\n')
                    || before.ends_with(['.', '!', '?'])
            })
            .collect()
    }

    /// Byte ranges of counseling regions with the header text that opened each.
    pub fn regions<'t>(&self, text: &'t str) -> Vec<(usize, usize, &'t str)> {
        let headers = self.counseling_headers(text);
        let mut regions = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            let start = h.end();
            let next_counseling = headers.get(i + 1).map(|n| n.start()).unwrap_or(text.len());
            let next_generic = generic_header()
                .find_iter(&text[start..])
                .map(|m| start + m.start())
                // A header match that begins on the header's own line is the header itself.
                .find(|&pos| text[start..pos].contains('\n'))
                .unwrap_or(text.len());
            let end = next_counseling.min(next_generic);
            let header = h.as_str().trim_end_matches(':').trim();
            regions.push((start, end, header));
        }
        regions
    }

    pub fn segment(&self, record: &PatientRecord) -> Vec<Segment> {
        let text = record.narrative.as_str();
        let mut segments = Vec::new();
        for (start, end, header) in self.regions(text) {
            for (s, e) in split_sentences(text, start, end) {
                segments.push(Segment {
                    note_id: record.record_id.clone(),
                    index: segments.len(),
                    text: text[s..e].to_string(),
                    section_header: Some(header.to_string()),
                    start: s,
                    end: e,
                });
            }
        }
        segments
    }
}

/// Sentence byte ranges inside `text[start..end]`, trimmed of surrounding
/// whitespace. Gaps between consecutive ranges are whitespace only.
pub fn split_sentences(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let region = &text[start..end];
    let mut cuts = Vec::new();
    for m in sentence_break().find_iter(region) {
        let punct_end = m.as_str().find(char::is_whitespace).map(|p| m.start() + p).unwrap_or(m.end());
        let word_start = region[..m.start()]
            .rfind(|c: char| !c.is_alphabetic())
            .map(|p| p + 1)
            .unwrap_or(0);
        let word = region[word_start..m.start()].to_ascii_lowercase();
        if NON_TERMINAL_ABBREVIATIONS.contains(&word.as_str()) {
            continue;
        }
        cuts.push(punct_end);
    }
    cuts.push(region.len());
    let mut out = Vec::new();
    let mut from = 0;
    for cut in cuts {
        let piece = &region[from..cut];
        let lead = piece.len() - piece.trim_start().len();
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            let s = start + from + lead;
            out.push((s, s + trimmed.len()));
        }
        from = cut;
    }
    out
}

/// Sentence-level segments from counseling regions, using the default headers.
pub fn segment_counseling(record: &PatientRecord) -> Vec<Segment> {
    Segmenter::new(&SegmentationConfig::default())
        .expect("default header patterns compile")
        .segment(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(narrative: &str) -> PatientRecord {
        PatientRecord {
            record_id: "p1".into(),
            narrative: narrative.to_string(),
            group: DeliveryGroup::Rcs,
            prior_cesarean: true,
            age: None,
            bmi: None,
            delivery_date: None,
        }
    }

    fn parse(notes: &str, history: &str) -> Result<Corpus, CorpusError> {
        parse_corpus(Path::new("notes.jsonl"), notes, Path::new("history.jsonl"), history)
    }

    const NOTE_A: &str = r#"{"record_id":"a","narrative":"Note A.","group":"RCS","prior_cesarean":true,"age":31,"bmi":28.4}"#;
    const NOTE_B: &str = r#"{"record_id":"b","narrative":"Note B.","group":"VBAC","prior_cesarean":true,"age":null,"bmi":null}"#;
    const NOTE_C: &str = r#"{"record_id":"c","narrative":"Note C.","group":"RCS","prior_cesarean":false}"#;

    #[test]
    fn duplicate_id_is_rejected_with_its_name() {
        let notes = format!("{NOTE_A}\n{NOTE_A}\n");
        match parse(&notes, "") {
            Err(CorpusError::DuplicateId { id, line, .. }) => {
                assert_eq!(id.as_str(), "a");
                assert_eq!(line, 2);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn empty_files_give_empty_corpus() {
        let corpus = parse("", "").unwrap();
        assert!(corpus.records.is_empty());
        assert!(corpus.history.is_empty());
    }

    #[test]
    fn linked_history_loads() {
        let notes = [NOTE_A, NOTE_B, NOTE_C].join("\n");
        let history = [
            r#"{"record_id":"a","mode":"cesarean","incision_type":"low_transverse","delivery_date":"2017-05-01"}"#,
            r#"{"record_id":"a","mode":"cesarean","incision_type":null,"delivery_date":"2019-03-02"}"#,
            r#"{"record_id":"b","mode":"cesarean"}"#,
            r#"{"record_id":"b","mode":"vaginal","incision_type":"unknown"}"#,
            r#"{"record_id":"c","mode":"unknown","delivery_date":null}"#,
        ]
        .join("\n");
        let corpus = parse(&notes, &history).unwrap();
        assert_eq!(corpus.records.len(), 3);
        assert_eq!(corpus.history.len(), 5);
        assert_eq!(corpus.history[1].incision_type, IncisionType::Unknown);
        assert_eq!(corpus.history[2].incision_type, IncisionType::Unknown);
        assert!(corpus.records[2].is_excluded());
        assert_eq!(corpus.history_for(&"a".into()).count(), 2);
    }

    #[test]
    fn dangling_history_is_rejected() {
        let err = parse(NOTE_A, r#"{"record_id":"zz","mode":"vaginal"}"#).unwrap_err();
        assert!(matches!(err, CorpusError::DanglingHistory { ref id, line: 1, .. } if id.as_str() == "zz"));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let notes = format!("{NOTE_A}\n\n{{not json\n");
        let err = parse(&notes, "").unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }), "{err}");
        let bad_group = r#"{"record_id":"x","narrative":"n","group":"TOLAC","prior_cesarean":true}"#;
        assert!(matches!(parse(bad_group, ""), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_narrative_is_rejected() {
        let notes = r#"{"record_id":"x","narrative":"   ","group":"RCS","prior_cesarean":true}"#;
        assert!(matches!(parse(notes, ""), Err(CorpusError::EmptyNarrative { .. })));
    }

    #[test]
    fn scrub_credential_and_date() {
        let (out, spans) = scrub_custom_phi("seen by NAME, MD on 3/14/2019");
        assert_eq!(out, "seen by NAME on DATE");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].original, "NAME, MD");
        assert_eq!(spans[1].original, "3/14/2019");
    }

    #[test]
    fn scrub_fixed_point_without_phi() {
        let text = "Prior LTCS x1. Risks of TOLAC reviewed, 74% success.";
        let (out, spans) = scrub_custom_phi(text);
        assert_eq!(out, text);
        assert!(spans.is_empty());
    }

    #[test]
    fn scrub_date_of_birth() {
        assert_eq!(scrub_custom_phi("DOB: 01/02/1990").0, "DOB: DOB");
        assert_eq!(scrub_custom_phi("date of birth 1990-01-02.").0, "date of birth DOB.");
    }

    #[test]
    fn scrub_names_with_credentials_and_initials() {
        assert_eq!(scrub_custom_phi("Discussed with Jane Doe, CNM today.").0, "Discussed with NAME today.");
        assert_eq!(scrub_custom_phi("Attending: M. Smith APRN").0, "Attending: NAME");
        assert_eq!(scrub_custom_phi("Pt and J.D. agree.").0, "Pt and INITIAL agree.");
        assert_eq!(scrub_custom_phi("Delivered March 3, 2016 at term.").0, "Delivered DATE at term.");
        // The attending-style word alone is not a name.
        assert_eq!(scrub_custom_phi("Attending MD aware.").0, "Attending MD aware.");
    }

    #[test]
    fn dates_win_over_initials() {
        let (out, spans) = scrub_custom_phi("Seen 2/3/2020 by K. NAME, MD");
        assert_eq!(out, "Seen DATE by NAME");
        assert_eq!(spans.iter().filter(|s| s.placeholder == Placeholder::Name).count(), 1);
    }

    #[test]
    fn plan_section_three_sentences() {
        let note = "HPI: 32 yo G2P1.\nAssessment and Plan: Risks of TOLAC reviewed. She desires TOLAC. Admit to L&D.";
        let segs = segment_counseling(&record(note));
        let texts: Vec<_> = segs.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["Risks of TOLAC reviewed.", "She desires TOLAC.", "Admit to L&D."]);
        assert_eq!(segs[0].section_header.as_deref(), Some("Assessment and Plan"));
        assert_eq!(segs.iter().map(|s| s.index).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn no_plan_header_no_segments() {
        let note = "HPI: 32 yo presenting in labor. Exam: cervix 4 cm.";
        assert!(segment_counseling(&record(note)).is_empty());
        assert!(segment_counseling(&record("Plan for the weekend is rest.")).is_empty());
    }

    #[test]
    fn two_plan_sections_in_order() {
        let note = "Plan: TOLAC discussed. Consent signed.\nLabs: CBC normal.\nAssessment/Plan: Continue monitoring. Epidural when desired.";
        let segs = segment_counseling(&record(note));
        assert_eq!(segs.len(), 4);
        assert!(segs.windows(2).all(|w| w[0].index < w[1].index && w[0].end <= w[1].start));
        assert_eq!(segs[2].text, "Continue monitoring.");
        assert_eq!(segs[2].section_header.as_deref(), Some("Assessment/Plan"));
        assert!(!segs.iter().any(|s| s.text.contains("CBC")));
    }

    #[test]
    fn region_stops_at_all_caps_header() {
        let note = "PLAN: Offer TOLAC.\nDISPOSITION\nHome tomorrow.";
        let segs = segment_counseling(&record(note));
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].text, "Offer TOLAC.");
    }

    #[test]
    fn decimals_and_titles_do_not_split() {
        let note = "Plan: Risk is 0.5% per Dr. Jones today. 74% success rate.";
        let segs = segment_counseling(&record(note));
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert_eq!(segs[0].text, "Risk is 0.5% per Dr. Jones today.");
    }

    #[test]
    fn custom_header_patterns() {
        let seg = Segmenter::new(&SegmentationConfig {
            header_patterns: vec!["counseling".into()],
        })
        .unwrap();
        let segs = seg.segment(&record("Counseling: VBAC risks reviewed."));
        assert_eq!(segs.len(), 1);
    }

    proptest! {
        #[test]
        fn scrub_is_idempotent(text in "[A-Za-z0-9 ,.:/-]{0,80}") {
            let (once, _) = scrub_custom_phi(&text);
            let (twice, _) = scrub_custom_phi(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn scrub_idempotent_on_phi_shapes(
            parts in proptest::collection::vec(prop_oneof![
                Just("NAME, MD".to_string()),
                Just("J. Smith CNM".to_string()),
                Just("DOB: 4/5/1988".to_string()),
                Just("K.L.".to_string()),
                Just("on 2019-02-03".to_string()),
                "[a-z ]{1,8}",
            ], 0..8)
        ) {
            let text = parts.join(" ");
            let (once, spans) = scrub_custom_phi(&text);
            prop_assert_eq!(&scrub_custom_phi(&once).0, &once);
            for s in spans {
                prop_assert_eq!(&text[s.start..s.end], s.original.as_str());
            }
        }

        #[test]
        fn segments_reconstruct_region(
            sentences in proptest::collection::vec("[A-Z][a-z]{1,6}[0-9]( [a-z0-9%]{1,6}){0,3}( [a-z]{1,5}[0-9])[.!?]", 1..6),
            gaps in proptest::collection::vec("[ \t]{1,3}", 6),
        ) {
            let mut body = String::new();
            for (i, s) in sentences.iter().enumerate() {
                body.push_str(s);
                body.push_str(&gaps[i]);
            }
            let note = format!("HPI: stable.\nPlan: {body}");
            let rec = record(&note);
            let segs = segment_counseling(&rec);
            prop_assert_eq!(segs.len(), sentences.len());
            let region_start = note.find("Plan:").unwrap() + "Plan:".len();
            let mut cursor = region_start;
            for seg in &segs {
                prop_assert!(note[cursor..seg.start].trim().is_empty());
                prop_assert_eq!(&note[seg.start..seg.end], seg.text.as_str());
                cursor = seg.end;
            }
            prop_assert!(note[cursor..].trim().is_empty());
        }
    }
}
