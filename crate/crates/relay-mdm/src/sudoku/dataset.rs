//! Puzzle file ingest, solver-trace annotation, and cohort selection.
//!
//! A puzzle file holds one `<puzzle81>,<solution81>` record per line with
//! '0' or '.' for blanks; lines starting with '#' are skipped. Annotations
//! travel in a JSONL sidecar keyed by record index.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sudoku::board::{check_legality, Board};
use crate::sudoku::solver::{
    count_solutions, solve_with_trace, Annotation, StrategyTag, Tier,
};

/// One puzzle with its solution and, once computed, its solver trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuzzleRecord {
    pub puzzle: Board,
    pub solution: Board,
    /// Indices of nonzero puzzle cells.
    pub clue_positions: Vec<usize>,
    pub annotation: Option<Annotation>,
}

/// Parses one `<puzzle81>,<solution81>` line.
pub fn parse_record(line: &str) -> Result<PuzzleRecord> {
    let (p, s) = line
        .split_once(',')
        .ok_or_else(|| Error::Format("record needs two comma-separated fields".into()))?;
    let puzzle = Board::parse(p.trim())?;
    let solution = Board::parse(s.trim())?;
    if !solution.is_complete() {
        return Err(Error::Consistency("solution has blank cells".into()));
    }
    if !check_legality(&solution).legal {
        return Err(Error::Consistency("solution is illegal".into()));
    }
    let clue_positions = puzzle.clue_positions();
    for &i in &clue_positions {
        if puzzle.get(i) != solution.get(i) {
            return Err(Error::Consistency(format!(
                "solution contradicts clue at cell {i}"
            )));
        }
    }
    Ok(PuzzleRecord { puzzle, solution, clue_positions, annotation: None })
}

/// Inverse of [`parse_record`]; blanks come out as '0'.
pub fn serialize_record(record: &PuzzleRecord) -> String {
    format!("{},{}", record.puzzle, record.solution)
}

/// Reads every record of a puzzle file, skipping comments and empty lines.
pub fn read_puzzle_file(path: &Path) -> Result<Vec<PuzzleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = parse_record(trimmed).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_puzzle_file(path: &Path, records: &[PuzzleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in records {
        writeln!(w, "{}", serialize_record(record))?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar line mirroring [`Annotation`], keyed by record index. The
/// trajectory is optional to bound file size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub index: usize,
    pub num_steps: usize,
    pub strategies_used: Vec<StrategyTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<String>>,
}

impl AnnotationRecord {
    pub fn from_annotation(
        index: usize,
        ann: &Annotation,
        include_trajectory: bool,
    ) -> AnnotationRecord {
        AnnotationRecord {
            index,
            num_steps: ann.num_steps,
            strategies_used: ann.strategies_used.iter().copied().collect(),
            trajectory: include_trajectory
                .then(|| ann.trajectory.iter().map(|b| b.to_string()).collect()),
        }
    }

    /// Rebuilds the in-memory annotation. When the sidecar omitted the
    /// trajectory the result carries an empty one.
    pub fn to_annotation(&self) -> Result<Annotation> {
        let trajectory = match &self.trajectory {
            Some(lines) => lines.iter().map(|s| Board::parse(s)).collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Annotation {
            trajectory,
            num_steps: self.num_steps,
            strategies_used: self.strategies_used.iter().copied().collect(),
        })
    }
}

/// Solves every record, storing traces in place. Records are sharded
/// across threads; order and indexing are preserved.
pub fn annotate_records(records: &mut [PuzzleRecord]) -> Result<()> {
    let annotations: Vec<Result<Annotation>> = records
        .par_iter()
        .map(|record| {
            if count_solutions(&record.puzzle, 2) != 1 {
                return Err(Error::AmbiguousSolution);
            }
            let (solution, ann) = solve_with_trace(&record.puzzle)?;
            if solution != record.solution {
                return Err(Error::Consistency(
                    "solver disagrees with recorded solution".into(),
                ));
            }
            Ok(ann)
        })
        .collect();
    for (record, ann) in records.iter_mut().zip(annotations) {
        record.annotation = Some(ann?);
    }
    Ok(())
}

pub fn write_annotations(
    path: &Path,
    records: &[PuzzleRecord],
    include_trajectory: bool,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (index, record) in records.iter().enumerate() {
        let ann = record
            .annotation
            .as_ref()
            .ok_or(Error::MissingAnnotation(index))?;
        let line = AnnotationRecord::from_annotation(index, ann, include_trajectory);
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Attaches sidecar annotations to their records by index.
pub fn attach_annotations(
    records: &mut [PuzzleRecord],
    annotations: &[AnnotationRecord],
) -> Result<()> {
    let n = records.len();
    for ann in annotations {
        let record = records.get_mut(ann.index).ok_or_else(|| {
            Error::Consistency(format!(
                "annotation index {} out of range ({n} records)",
                ann.index
            ))
        })?;
        record.annotation = Some(ann.to_annotation()?);
    }
    Ok(())
}

/// A record belongs to the evaluation cohort when its trace uses at least
/// one Advanced or Master strategy and never falls back to backtracking.
pub fn is_cohort_member(ann: &Annotation) -> bool {
    let has_hard = ann
        .strategies_used
        .iter()
        .any(|t| matches!(t.tier(), Tier::Advanced | Tier::Master));
    has_hard && !ann.strategies_used.contains(&StrategyTag::Backtracking)
}

/// Every strategy in the trace is Basic tier.
pub fn is_basic_only(ann: &Annotation) -> bool {
    !ann.strategies_used.is_empty()
        && ann.strategies_used.iter().all(|t| t.tier() == Tier::Basic)
}

/// First `n` records, in input order, satisfying [`is_cohort_member`].
pub fn cohort_filter(records: &[PuzzleRecord], n: usize) -> Result<Vec<PuzzleRecord>> {
    let mut kept = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let ann = record
            .annotation
            .as_ref()
            .ok_or(Error::MissingAnnotation(index))?;
        if is_cohort_member(ann) {
            kept.push(record.clone());
            if kept.len() == n {
                break;
            }
        }
    }
    Ok(kept)
}

/// Hardest tier appearing in the trace, if any strategy was used.
pub fn hardest_tier(ann: &Annotation) -> Option<Tier> {
    ann.strategies_used.iter().map(|t| t.tier()).max()
}
