//! Exact-match, NFE, and legality metrics, threshold-sweep frontier
//! tables, and byte-stable CSV/JSON report emission.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate, StepModel, StepTrace};
use crate::error::{Error, Result};
use crate::sudoku::board::{box_of, check_legality, col_of, row_of, Board, UNITS};
use crate::sudoku::dataset::PuzzleRecord;
use crate::training::Objective;

/// Which cut of the test set a report covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Unfiltered,
    DeductionOnly,
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slice::Unfiltered => f.write_str("unfiltered"),
            Slice::DeductionOnly => f.write_str("deduction_only"),
        }
    }
}

impl FromStr for Slice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Slice> {
        match s {
            "unfiltered" => Ok(Slice::Unfiltered),
            "deduction_only" => Ok(Slice::DeductionOnly),
            other => Err(Error::Config(format!(
                "unknown slice {other:?}; expected unfiltered or deduction_only"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slice: Slice,
    pub tau: f64,
    pub n: usize,
    /// Fraction of puzzles whose final board matches the solution
    /// everywhere.
    pub exact_match: f64,
    pub mean_nfe: f64,
    /// Fraction of puzzles whose final board has zero violations.
    pub legal_final_rate: f64,
    /// Mean per-puzzle count of commits duplicating a digit already in
    /// the same row, column, or box at commit time.
    pub mean_rollout_violations: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub objective: Objective,
    pub tied: bool,
    pub tau: f64,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FrontierTable {
    pub rows: Vec<FrontierRow>,
}

/// Counts commit-time duplicates along a generation trace: each
/// committed digit already present elsewhere in its row, column, or box
/// adds one per conflicting unit.
pub fn rollout_violations(trace: &[StepTrace], puzzle: &Board) -> Result<usize> {
    let mut board = puzzle.clone();
    let mut count = 0usize;
    for step in trace {
        for &(i, v) in &step.committed {
            if board.get(i) != 0 {
                return Err(Error::Consistency(format!(
                    "trace commits onto occupied cell {i}"
                )));
            }
            if v > 0 {
                let units = [row_of(i), col_of(i) + 9, box_of(i) + 18];
                for u in units {
                    let dup = UNITS[u].iter().any(|&j| j != i && board.get(j) == v);
                    if dup {
                        count += 1;
                    }
                }
            }
            board.set(i, v);
        }
    }
    Ok(count)
}

/// Decodes every record at one threshold and aggregates the metrics.
/// `make_model` builds a fresh step model per record so records can run
/// in parallel; results aggregate in dataset order.
pub fn evaluate_set<M, MK>(
    make_model: &MK,
    records: &[PuzzleRecord],
    tau: f64,
    slice: Slice,
) -> Result<EvalReport>
where
    M: StepModel,
    MK: Fn() -> M + Sync,
{
    if records.is_empty() {
        return Err(Error::EmptySet);
    }
    let results: Vec<(bool, usize, bool, usize)> = records
        .par_iter()
        .map(|record| -> Result<(bool, usize, bool, usize)> {
            let mut model = make_model();
            let out = generate(&mut model, record, tau)?;
            let exact = out.final_board == record.solution;
            let legal = check_legality(&out.final_board).violations == 0;
            let violations = rollout_violations(&out.trace, &record.puzzle)?;
            Ok((exact, out.nfe, legal, violations))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = results.len();
    let nf = n as f64;
    let exact_match = results.iter().filter(|r| r.0).count() as f64 / nf;
    let mean_nfe = results.iter().map(|r| r.1 as f64).sum::<f64>() / nf;
    let legal_final_rate = results.iter().filter(|r| r.2).count() as f64 / nf;
    let mean_rollout_violations = results.iter().map(|r| r.3 as f64).sum::<f64>() / nf;
    Ok(EvalReport {
        slice,
        tau,
        n,
        exact_match,
        mean_nfe,
        legal_final_rate,
        mean_rollout_violations,
    })
}

/// One evaluate_set per threshold, rows ascending in tau.
#[allow(clippy::too_many_arguments)]
pub fn sweep<M, MK>(
    make_model: &MK,
    records: &[PuzzleRecord],
    taus: &[f64],
    slice: Slice,
    objective: Objective,
    tied: bool,
    seed: u64,
) -> Result<FrontierTable>
where
    M: StepModel,
    MK: Fn() -> M + Sync,
{
    if taus.is_empty() {
        return Err(Error::Config("sweep needs at least one tau".into()));
    }
    if taus.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config("sweep taus must all be positive".into()));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite taus"));
    sorted.dedup();
    let mut rows = Vec::with_capacity(sorted.len());
    for tau in sorted {
        let report = evaluate_set(make_model, records, tau, slice)?;
        rows.push(FrontierRow { objective, tied, tau, seed, report });
    }
    Ok(FrontierTable { rows })
}

/// Mean and sample standard deviation (n-1 denominator) over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedStat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn seed_stats(values: &[f64]) -> Result<SeedStat> {
    if values.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(SeedStat { mean, sd, n })
}

impl fmt::Display for SeedStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.sd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown report format {other:?}; expected csv or json"
            ))),
        }
    }
}

pub const REPORT_CSV_HEADER: &str =
    "objective,tied,slice,tau,n,exact_match,mean_nfe,legal_final_rate,mean_rollout_violations,seed";

/// Canonical report file name for one (objective, tied, slice) cell.
pub fn report_file_name(
    objective: Objective,
    tied: bool,
    slice: Slice,
    format: ReportFormat,
) -> String {
    let tied = if tied { "tied" } else { "untied" };
    let ext = match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Json => "json",
    };
    format!("{objective}_{tied}_{slice}.{ext}")
}

fn render_csv(table: &FrontierTable) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in &table.rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            row.objective,
            row.tied,
            r.slice,
            row.tau,
            r.n,
            r.exact_match,
            r.mean_nfe,
            r.legal_final_rate,
            r.mean_rollout_violations,
            row.seed,
        ));
    }
    out
}

/// JSON mirror of the CSV rows, floats fixed at six decimals so repeated
/// emission is byte-identical.
fn render_json(table: &FrontierTable) -> String {
    let mut out = String::from("[");
    for (i, row) in table.rows.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let r = &row.report;
        out.push_str(&format!(
            concat!(
                "\n  {{\"objective\": \"{}\", \"tied\": {}, \"slice\": \"{}\", ",
                "\"tau\": {:.6}, \"n\": {}, \"exact_match\": {:.6}, \"mean_nfe\": {:.6}, ",
                "\"legal_final_rate\": {:.6}, \"mean_rollout_violations\": {:.6}, \"seed\": {}}}"
            ),
            row.objective,
            row.tied,
            r.slice,
            row.tau,
            r.n,
            r.exact_match,
            r.mean_nfe,
            r.legal_final_rate,
            r.mean_rollout_violations,
            row.seed,
        ));
    }
    if !table.rows.is_empty() {
        out.push('\n');
    }
    out.push_str("]\n");
    out
}

/// Writes the table to `path` (temp name, then rename, so interrupted
/// runs never leave a truncated report).
pub fn emit_report(table: &FrontierTable, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => render_csv(table),
        ReportFormat::Json => render_json(table),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses a CSV produced by [`emit_report`] back into a table.
pub fn parse_report_csv(text: &str) -> Result<FrontierTable> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty report file".into()))?;
    if header != REPORT_CSV_HEADER {
        return Err(Error::Format(format!("unexpected report header {header:?}")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Format(format!(
                "report line {}: expected 10 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("report line {}: bad {what}", lineno + 2));
        let objective: Objective = fields[0].parse()?;
        let tied: bool = fields[1].parse().map_err(|_| bad("tied"))?;
        let slice: Slice = fields[2].parse()?;
        let tau: f64 = fields[3].parse().map_err(|_| bad("tau"))?;
        let n: usize = fields[4].parse().map_err(|_| bad("n"))?;
        let exact_match: f64 = fields[5].parse().map_err(|_| bad("exact_match"))?;
        let mean_nfe: f64 = fields[6].parse().map_err(|_| bad("mean_nfe"))?;
        let legal_final_rate: f64 = fields[7].parse().map_err(|_| bad("legal_final_rate"))?;
        let mean_rollout_violations: f64 =
            fields[8].parse().map_err(|_| bad("mean_rollout_violations"))?;
        let seed: u64 = fields[9].parse().map_err(|_| bad("seed"))?;
        rows.push(FrontierRow {
            objective,
            tied,
            tau,
            seed,
            report: EvalReport {
                slice,
                tau,
                n,
                exact_match,
                mean_nfe,
                legal_final_rate,
                mean_rollout_violations,
            },
        });
    }
    Ok(FrontierTable { rows })
}
