//! Contingency analysis of framing labels and agreement with expert labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DeliveryGroup;
use crate::framing::{FramingCategory, FramingLabel};
use crate::util::half_up_tenths;

/// Cells with |r| above this are reported as driving the association.
pub const RESIDUAL_THRESHOLD: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no observations")]
    Empty,
    #[error("table has {rows} row(s) and {cols} column(s) after dropping empty margins; the test needs df > 0")]
    ZeroDegreesOfFreedom { rows: usize, cols: usize },
    #[error("expected count in row {row}, column {col} is zero")]
    ZeroExpected { row: usize, col: usize },
    #[error("row {0} or a column holds every observation; residuals are undefined")]
    DegenerateMargins(usize),
    #[error("table shape mismatch: {0}")]
    Shape(String),
    #[error("Not Counseling labels must be filtered out before building the table")]
    NotCounseling,
    #[error("label lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expert label set at item {0} is empty")]
    EmptyExpertSet(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Rows or columns dropped because their total was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ContingencyTable {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, StatsError> {
        if counts.len() != row_labels.len() {
            return Err(StatsError::Shape(format!("{} row labels for {} rows", row_labels.len(), counts.len())));
        }
        if let Some(i) = counts.iter().position(|r| r.len() != col_labels.len()) {
            return Err(StatsError::Shape(format!("row {i} has {} cells, expected {}", counts[i].len(), col_labels.len())));
        }
        Ok(ContingencyTable {
            row_labels,
            col_labels,
            counts,
            notes: Vec::new(),
        })
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_totals(&self) -> Vec<u64> {
        (0..self.col_labels.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn df(&self) -> usize {
        self.row_labels.len().saturating_sub(1) * self.col_labels.len().saturating_sub(1)
    }

    /// Remove rows and columns whose total is zero, noting each removal.
    pub fn drop_empty_margins(mut self) -> Self {
        let rows = self.row_totals();
        for i in (0..rows.len()).rev() {
            if rows[i] == 0 {
                self.notes.push(format!("row {:?} has no observations and was excluded from the test", self.row_labels[i]));
                self.row_labels.remove(i);
                self.counts.remove(i);
            }
        }
        let cols = self.col_totals();
        for j in (0..cols.len()).rev() {
            if cols[j] == 0 {
                self.notes.push(format!("column {:?} has no observations and was excluded from the test", self.col_labels[j]));
                self.col_labels.remove(j);
                for r in &mut self.counts {
                    r.remove(j);
                }
            }
        }
        self.notes.reverse();
        self
    }

    /// Drop empty margins and require a testable shape.
    pub fn testable(self) -> Result<Self, StatsError> {
        if self.grand_total() == 0 {
            return Err(StatsError::Empty);
        }
        let t = self.drop_empty_margins();
        if t.df() == 0 {
            return Err(StatsError::ZeroDegreesOfFreedom {
                rows: t.row_labels.len(),
                cols: t.col_labels.len(),
            });
        }
        Ok(t)
    }
}

/// Category × delivery-group counts for counseling labels. Rows follow the
/// category order; categories absent from both groups are dropped.
pub fn build_table(labels: &[FramingLabel]) -> Result<ContingencyTable, StatsError> {
    if labels.is_empty() {
        return Err(StatsError::Empty);
    }
    if labels.iter().any(|l| !l.category.is_counseling()) {
        return Err(StatsError::NotCounseling);
    }
    let mut counts = vec![vec![0u64; DeliveryGroup::ALL.len()]; FramingCategory::COUNSELING.len()];
    for l in labels {
        let i = FramingCategory::COUNSELING.iter().position(|c| *c == l.category).expect("counseling category");
        let j = DeliveryGroup::ALL.iter().position(|g| *g == l.group).expect("group");
        counts[i][j] += 1;
    }
    let table = ContingencyTable::new(
        FramingCategory::COUNSELING.iter().map(|c| c.name().to_string()).collect(),
        DeliveryGroup::ALL.iter().map(|g| g.as_str().to_string()).collect(),
        counts,
    )?;
    table.testable()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub expected: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
}

impl ChiSquareResult {
    pub fn significant_cells(&self) -> Vec<Vec<bool>> {
        significance_flags(&self.residuals)
    }
}

pub fn expected_counts(table: &ContingencyTable) -> Vec<Vec<f64>> {
    let n = table.grand_total() as f64;
    let cols = table.col_totals();
    table
        .row_totals()
        .iter()
        .map(|&r| cols.iter().map(|&c| r as f64 * c as f64 / n).collect())
        .collect()
}

/// Pearson χ² without continuity correction.
pub fn chi_square(table: &ContingencyTable) -> Result<ChiSquareResult, StatsError> {
    if table.grand_total() == 0 {
        return Err(StatsError::Empty);
    }
    let df = table.df();
    if df == 0 {
        return Err(StatsError::ZeroDegreesOfFreedom {
            rows: table.row_labels.len(),
            cols: table.col_labels.len(),
        });
    }
    let expected = expected_counts(table);
    let mut statistic = 0.0;
    for (i, row) in expected.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            if e <= 0.0 {
                return Err(StatsError::ZeroExpected { row: i, col: j });
            }
            let d = table.counts[i][j] as f64 - e;
            statistic += d * d / e;
        }
    }
    let residuals = adjusted_residuals(table)?;
    Ok(ChiSquareResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df as f64),
        expected,
        residuals,
    })
}

/// r = (O − E) / sqrt(E (1 − row/N) (1 − col/N)).
pub fn adjusted_residuals(table: &ContingencyTable) -> Result<Vec<Vec<f64>>, StatsError> {
    let n = table.grand_total();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let rows = table.row_totals();
    let cols = table.col_totals();
    if let Some(i) = rows.iter().position(|&r| r == n) {
        return Err(StatsError::DegenerateMargins(i));
    }
    if cols.iter().any(|&c| c == n) {
        return Err(StatsError::DegenerateMargins(0));
    }
    let nf = n as f64;
    let mut out = Vec::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        let mut line = Vec::with_capacity(cols.len());
        for (j, &c) in cols.iter().enumerate() {
            let e = r as f64 * c as f64 / nf;
            if e <= 0.0 {
                return Err(StatsError::ZeroExpected { row: i, col: j });
            }
            let var = e * (1.0 - r as f64 / nf) * (1.0 - c as f64 / nf);
            line.push((table.counts[i][j] as f64 - e) / var.sqrt());
        }
        out.push(line);
    }
    Ok(out)
}

pub fn significance_flags(residuals: &[Vec<f64>]) -> Vec<Vec<bool>> {
    residuals
        .iter()
        .map(|r| r.iter().map(|x| x.abs() > RESIDUAL_THRESHOLD).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (a * x.ln() - x - ln_gamma(a)).exp()
}

fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

fn upper_continued_fraction(a: f64, x: f64) -> f64 {
    // Modified Lentz evaluation.
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    gamma_prefactor(a, x) * h
}

/// Regularized upper incomplete gamma Q(a, x) = Γ(a, x) / Γ(a).
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - lower_series(a, x)
    } else {
        upper_continued_fraction(a, x)
    }
}

/// Upper tail of the χ² distribution.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    regularized_gamma_q(df / 2.0, statistic / 2.0).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Agreement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub any_match_rate: f64,
    pub mean_jaccard: f64,
    pub kappa: f64,
    pub n_items: usize,
}

/// Two-rater Cohen's κ. When chance agreement is certain (both raters use a
/// single shared label) the labelings are identical and κ is taken as 1.
pub fn cohen_kappa<L: Eq + Hash>(a: &[L], b: &[L]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = a.len() as f64;
    let mut left: HashMap<&L, usize> = HashMap::new();
    let mut right: HashMap<&L, usize> = HashMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *left.entry(x).or_default() += 1;
        *right.entry(y).or_default() += 1;
        if x == y {
            agree += 1;
        }
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = left
        .iter()
        .map(|(k, &c)| c as f64 / n * right.get(k).copied().unwrap_or(0) as f64 / n)
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn agreement_metrics<L: Ord + Hash + Clone>(
    llm: &[L],
    expert: &[BTreeSet<L>],
    expert_primary: &[L],
) -> Result<AgreementReport, StatsError> {
    if llm.len() != expert.len() {
        return Err(StatsError::LengthMismatch(llm.len(), expert.len()));
    }
    if llm.len() != expert_primary.len() {
        return Err(StatsError::LengthMismatch(llm.len(), expert_primary.len()));
    }
    if llm.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(i) = expert.iter().position(|s| s.is_empty()) {
        return Err(StatsError::EmptyExpertSet(i));
    }
    let n = llm.len() as f64;
    let mut hits = 0usize;
    let mut jaccard = 0.0;
    for (label, set) in llm.iter().zip(expert) {
        if set.contains(label) {
            hits += 1;
            jaccard += 1.0 / set.len() as f64;
        }
    }
    Ok(AgreementReport {
        any_match_rate: hits as f64 / n,
        mean_jaccard: jaccard / n,
        kappa: cohen_kappa(llm, expert_primary)?,
        n_items: llm.len(),
    })
}

// ---------------------------------------------------------------------------
// Distributions and rendering

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub label: String,
    pub count: u64,
    /// Percent of the column total in tenths, rounded half-up.
    pub tenths: u64,
}

impl Share {
    pub fn percent(&self) -> f64 {
        self.tenths as f64 / 10.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    /// Column label → (total, shares in row order).
    pub groups: BTreeMap<String, GroupDistribution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDistribution {
    pub total: u64,
    pub shares: Vec<Share>,
}

impl DistributionReport {
    pub fn share(&self, group: &str, label: &str) -> Option<&Share> {
        self.groups.get(group)?.shares.iter().find(|s| s.label == label)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (group, d) in &self.groups {
            let _ = writeln!(out, "{group} (n = {})", d.total);
            for s in &d.shares {
                let _ = writeln!(out, "  {:<24} {:>6} {:>6.1}%", s.label, s.count, s.percent());
            }
        }
        out
    }
}

/// Per-column category percentages of a table.
pub fn column_distribution(table: &ContingencyTable) -> DistributionReport {
    let totals = table.col_totals();
    let groups = table
        .col_labels
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let shares = table
                .row_labels
                .iter()
                .zip(&table.counts)
                .map(|(label, row)| Share {
                    label: label.clone(),
                    count: row[j],
                    tenths: half_up_tenths(row[j], totals[j]),
                })
                .collect();
            (g.clone(), GroupDistribution { total: totals[j], shares })
        })
        .collect();
    DistributionReport { groups }
}

/// Category percentages within each delivery group, Not Counseling ignored.
pub fn distribution_report(labels: &[FramingLabel]) -> DistributionReport {
    let mut groups = BTreeMap::new();
    for g in DeliveryGroup::ALL {
        let in_group: Vec<_> = labels.iter().filter(|l| l.group == g && l.category.is_counseling()).collect();
        if in_group.is_empty() {
            continue;
        }
        let total = in_group.len() as u64;
        let shares = FramingCategory::COUNSELING
            .iter()
            .filter_map(|c| {
                let count = in_group.iter().filter(|l| l.category == *c).count() as u64;
                (count > 0).then(|| Share {
                    label: c.name().to_string(),
                    count,
                    tenths: half_up_tenths(count, total),
                })
            })
            .collect();
        groups.insert(g.as_str().to_string(), GroupDistribution { total, shares });
    }
    DistributionReport { groups }
}

/// Counts with adjusted residuals in parentheses, plus the test line.
pub fn render_table_text(table: &ContingencyTable, result: &ChiSquareResult) -> String {
    let mut out = String::new();
    let width = table.row_labels.iter().map(|l| l.len()).max().unwrap_or(8).max(8);
    let _ = write!(out, "{:<width$}", "Category");
    for c in &table.col_labels {
        let _ = write!(out, "  {c:>16}");
    }
    let _ = writeln!(out, "  {:>7}", "Total");
    let rows = table.row_totals();
    for (i, label) in table.row_labels.iter().enumerate() {
        let _ = write!(out, "{label:<width$}");
        for (j, &o) in table.counts[i].iter().enumerate() {
            let r = result.residuals[i][j];
            let mark = if r.abs() > RESIDUAL_THRESHOLD { "*" } else { " " };
            let _ = write!(out, "  {:>16}", format!("{o} ({r:.2}){mark}"));
        }
        let _ = writeln!(out, "  {:>7}", rows[i]);
    }
    let _ = write!(out, "{:<width$}", "Total");
    for c in table.col_totals() {
        let _ = write!(out, "  {c:>16}");
    }
    let _ = writeln!(out, "  {:>7}", table.grand_total());
    let _ = writeln!(
        out,
        "chi2 = {:.2}, df = {}, p = {:.3e}; * marks |r| > {RESIDUAL_THRESHOLD}",
        result.statistic, result.df, result.p_value
    );
    for note in &table.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}
