//! Board representation, legality checking, and candidate computation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use crate::error::{Error, Result};

/// Cells on a 9x9 board.
pub const CELLS: usize = 81;

pub fn row_of(i: usize) -> usize {
    i / 9
}

pub fn col_of(i: usize) -> usize {
    i % 9
}

pub fn box_of(i: usize) -> usize {
    3 * (row_of(i) / 3) + col_of(i) / 3
}

/// The 27 units: rows 0-8, columns 9-17, boxes 18-26.
pub static UNITS: LazyLock<[[usize; 9]; 27]> = LazyLock::new(|| {
    let mut units = [[0usize; 9]; 27];
    for r in 0..9 {
        for c in 0..9 {
            units[r][c] = r * 9 + c;
            units[9 + c][r] = r * 9 + c;
        }
    }
    for b in 0..9 {
        let (br, bc) = (b / 3 * 3, b % 3 * 3);
        for k in 0..9 {
            units[18 + b][k] = (br + k / 3) * 9 + bc + k % 3;
        }
    }
    units
});

/// The 20 peers (same row, column, or box) of each cell.
pub static PEERS: LazyLock<[[usize; 20]; 81]> = LazyLock::new(|| {
    let mut peers = [[0usize; 20]; 81];
    for i in 0..CELLS {
        let mut seen = [false; CELLS];
        let mut n = 0;
        for unit in UNITS.iter() {
            if unit.contains(&i) {
                for &j in unit {
                    if j != i && !seen[j] {
                        seen[j] = true;
                        peers[i][n] = j;
                        n += 1;
                    }
                }
            }
        }
        debug_assert_eq!(n, 20);
    }
    peers
});

/// A set of digits 1-9 as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct DigitSet(u16);

impl DigitSet {
    pub const EMPTY: DigitSet = DigitSet(0);
    pub const ALL: DigitSet = DigitSet(0b11_1111_1110);

    pub fn contains(self, d: u8) -> bool {
        debug_assert!((1..=9).contains(&d));
        self.0 & (1 << d) != 0
    }

    pub fn insert(&mut self, d: u8) {
        self.0 |= 1 << d;
    }

    pub fn remove(&mut self, d: u8) -> bool {
        let had = self.contains(d);
        self.0 &= !(1 << d);
        had
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: DigitSet) -> DigitSet {
        DigitSet(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: DigitSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Digits in ascending order.
    pub fn iter(self) -> impl Iterator<Item = u8> {
        (1..=9u8).filter(move |&d| self.contains(d))
    }

    pub fn first(self) -> Option<u8> {
        self.iter().next()
    }
}

impl fmt::Debug for DigitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<u8> for DigitSet {
    fn from_iter<T: IntoIterator<Item = u8>>(iter: T) -> Self {
        let mut s = DigitSet::EMPTY;
        for d in iter {
            s.insert(d);
        }
        s
    }
}

/// An 81-cell board; 0 = blank, 1-9 = digits.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Board {
    cells: [u8; CELLS],
}

impl Board {
    pub fn empty() -> Board {
        Board { cells: [0; CELLS] }
    }

    pub fn from_cells(cells: [u8; CELLS]) -> Result<Board> {
        if let Some(i) = cells.iter().position(|&v| v > 9) {
            return Err(Error::Format(format!(
                "cell {i} holds {} (must be 0-9)",
                cells[i]
            )));
        }
        Ok(Board { cells })
    }

    /// Parses an 81-character board string; blanks may be '0' or '.'.
    pub fn parse(s: &str) -> Result<Board> {
        if s.chars().count() != CELLS {
            return Err(Error::Format(format!(
                "board string has {} characters, expected {CELLS}",
                s.chars().count()
            )));
        }
        let mut cells = [0u8; CELLS];
        for (i, ch) in s.chars().enumerate() {
            cells[i] = match ch {
                '.' | '0' => 0,
                '1'..='9' => ch as u8 - b'0',
                _ => {
                    return Err(Error::Format(format!(
                        "illegal character {ch:?} at cell {i}"
                    )))
                }
            };
        }
        Ok(Board { cells })
    }

    pub fn cells(&self) -> &[u8; CELLS] {
        &self.cells
    }

    pub fn get(&self, i: usize) -> u8 {
        self.cells[i]
    }

    pub fn set(&mut self, i: usize, v: u8) {
        debug_assert!(v <= 9);
        self.cells[i] = v;
    }

    pub fn filled_count(&self) -> usize {
        self.cells.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|&v| v != 0)
    }

    /// Indices of nonzero cells.
    pub fn clue_positions(&self) -> Vec<usize> {
        (0..CELLS).filter(|&i| self.cells[i] != 0).collect()
    }
}

impl fmt::Display for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &v in &self.cells {
            write!(f, "{}", (b'0' + v) as char)?;
        }
        Ok(())
    }
}

impl fmt::Debug for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Board({self})")
    }
}

/// Outcome of a legality check over all 27 units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LegalityReport {
    pub legal: bool,
    /// (unit, digit) multiplicity count: k occurrences of a digit in one
    /// unit contribute k - 1.
    pub violations: usize,
}

/// Counts repeated digits per unit; blanks never contribute.
pub fn check_legality(board: &Board) -> LegalityReport {
    let mut violations = 0;
    for unit in UNITS.iter() {
        let mut counts = [0usize; 10];
        for &i in unit {
            counts[board.get(i) as usize] += 1;
        }
        for d in 1..=9 {
            if counts[d] >= 2 {
                violations += counts[d] - 1;
            }
        }
    }
    LegalityReport {
        legal: violations == 0,
        violations,
    }
}

/// For each blank cell of a legal board, the digits not present among its
/// peers.
pub fn candidates(board: &Board) -> Result<BTreeMap<usize, DigitSet>> {
    if !check_legality(board).legal {
        return Err(Error::Precondition(
            "candidates requires a legal board".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for i in 0..CELLS {
        if board.get(i) == 0 {
            let mut set = DigitSet::ALL;
            for &p in &PEERS[i] {
                let v = board.get(p);
                if v != 0 {
                    set.remove(v);
                }
            }
            out.insert(i, set);
        }
    }
    Ok(out)
}
