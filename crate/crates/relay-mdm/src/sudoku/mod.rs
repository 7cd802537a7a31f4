//! Sudoku domain: boards, legality, the strategy solver, and dataset
//! handling.

pub mod board;
pub mod dataset;
pub mod solver;

pub use board::{check_legality, Board, DigitSet, LegalityReport, CELLS};
pub use dataset::{cohort_filter, parse_record, serialize_record, PuzzleRecord};
pub use solver::{solve_with_trace, Annotation, StrategyTag, Tier};
