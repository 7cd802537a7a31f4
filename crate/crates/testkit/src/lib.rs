//! Brute-force oracles and fixture generators used by the test suites.
//!
//! Everything here works on plain `&[u8]` boards of length 81 (0 = blank,
//! 1-9 = digits) and is written independently of the main crate so that
//! tests compare two separately derived answers.

use rand::seq::SliceRandom;
use rand::Rng;

pub const BOARD_CELLS: usize = 81;

fn row_of(i: usize) -> usize {
    i / 9
}

fn col_of(i: usize) -> usize {
    i % 9
}

fn box_of(i: usize) -> usize {
    3 * (row_of(i) / 3) + col_of(i) / 3
}

/// The 27 units (9 rows, 9 columns, 9 boxes) as index lists.
pub fn units() -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(27);
    for r in 0..9 {
        out.push((0..9).map(|c| r * 9 + c).collect());
    }
    for c in 0..9 {
        out.push((0..9).map(|r| r * 9 + c).collect());
    }
    for b in 0..9 {
        let (br, bc) = (b / 3 * 3, b % 3 * 3);
        out.push(
            (0..9)
                .map(|k| (br + k / 3) * 9 + bc + k % 3)
                .collect(),
        );
    }
    out
}

/// Naive (unit, digit) multiplicity counter: a digit appearing k >= 2 times
/// in a unit contributes k - 1.
pub fn violation_count(board: &[u8]) -> usize {
    assert_eq!(board.len(), BOARD_CELLS);
    let mut total = 0;
    for unit in units() {
        for digit in 1..=9u8 {
            let k = unit.iter().filter(|&&i| board[i] == digit).count();
            if k >= 2 {
                total += k - 1;
            }
        }
    }
    total
}

/// Digits not present in the row, column, or box of `idx`, by direct scan.
pub fn cell_candidates(board: &[u8], idx: usize) -> Vec<u8> {
    let (r, c, b) = (row_of(idx), col_of(idx), box_of(idx));
    (1..=9u8)
        .filter(|&d| {
            !(0..BOARD_CELLS).any(|j| {
                board[j] == d && (row_of(j) == r || col_of(j) == c || box_of(j) == b)
            })
        })
        .collect()
}

fn placement_ok(board: &[u8], idx: usize, digit: u8) -> bool {
    let (r, c, b) = (row_of(idx), col_of(idx), box_of(idx));
    !(0..BOARD_CELLS).any(|j| {
        j != idx
            && board[j] == digit
            && (row_of(j) == r || col_of(j) == c || box_of(j) == b)
    })
}

fn search(board: &mut [u8], count: &mut usize, cap: usize, first: &mut Option<[u8; 81]>) {
    if *count >= cap {
        return;
    }
    // Most-constrained blank cell, candidates recomputed by scan each time.
    let mut best: Option<(usize, Vec<u8>)> = None;
    for i in 0..BOARD_CELLS {
        if board[i] == 0 {
            let cands = cell_candidates(board, i);
            let n = cands.len();
            if n == 0 {
                return;
            }
            if best.as_ref().map_or(true, |(_, c)| n < c.len()) {
                best = Some((i, cands));
                if n == 1 {
                    break;
                }
            }
        }
    }
    match best {
        None => {
            *count += 1;
            if first.is_none() {
                let mut b = [0u8; 81];
                b.copy_from_slice(board);
                *first = Some(b);
            }
        }
        Some((idx, cands)) => {
            for d in cands {
                board[idx] = d;
                search(board, count, cap, first);
                board[idx] = 0;
                if *count >= cap {
                    return;
                }
            }
        }
    }
}

/// Counts solutions by exhaustive backtracking, stopping at `cap`.
pub fn count_solutions(board: &[u8], cap: usize) -> usize {
    let mut work = board.to_vec();
    if (0..BOARD_CELLS).any(|i| work[i] != 0 && !placement_ok(&work, i, work[i])) {
        return 0;
    }
    let mut count = 0;
    let mut first = None;
    search(&mut work, &mut count, cap, &mut first);
    count
}

/// First solution found by exhaustive backtracking, if any.
pub fn solve(board: &[u8]) -> Option<[u8; 81]> {
    let mut work = board.to_vec();
    if (0..BOARD_CELLS).any(|i| work[i] != 0 && !placement_ok(&work, i, work[i])) {
        return None;
    }
    let mut count = 0;
    let mut first = None;
    search(&mut work, &mut count, 1, &mut first);
    first
}

/// A uniformly scrambled complete legal board.
pub fn random_solved_board<R: Rng>(rng: &mut R) -> [u8; 81] {
    loop {
        let mut board = [0u8; 81];
        if fill_random(&mut board, 0, rng) {
            return board;
        }
    }
}

fn fill_random<R: Rng>(board: &mut [u8; 81], idx: usize, rng: &mut R) -> bool {
    if idx == BOARD_CELLS {
        return true;
    }
    let mut digits: Vec<u8> = (1..=9).collect();
    digits.shuffle(rng);
    for d in digits {
        if placement_ok(board, idx, d) {
            board[idx] = d;
            if fill_random(board, idx + 1, rng) {
                return true;
            }
            board[idx] = 0;
        }
    }
    false
}

/// Digs a puzzle out of a solved board by blanking cells while the solution
/// stays unique. Stops at `target_clues` or when no further cell can be
/// removed; the result may therefore hold more clues than the target.
pub fn dig_puzzle<R: Rng>(rng: &mut R, solution: &[u8; 81], target_clues: usize) -> [u8; 81] {
    let mut puzzle = *solution;
    let mut order: Vec<usize> = (0..BOARD_CELLS).collect();
    order.shuffle(rng);
    let mut clues = BOARD_CELLS;
    for idx in order {
        if clues <= target_clues {
            break;
        }
        let saved = puzzle[idx];
        puzzle[idx] = 0;
        if count_solutions(&puzzle, 2) == 1 {
            clues -= 1;
        } else {
            puzzle[idx] = saved;
        }
    }
    puzzle
}

/// Overwrites `k` distinct random cells with random digits 1-9.
pub fn corrupt_board<R: Rng>(rng: &mut R, board: &[u8; 81], k: usize) -> [u8; 81] {
    let mut out = *board;
    let mut cells: Vec<usize> = (0..BOARD_CELLS).collect();
    cells.shuffle(rng);
    for &i in cells.iter().take(k) {
        out[i] = rng.gen_range(1..=9);
    }
    out
}

/// Blanks `n` distinct random cells of a board (a legal partial when the
/// input was legal).
pub fn blank_cells<R: Rng>(rng: &mut R, board: &[u8; 81], n: usize) -> [u8; 81] {
    let mut out = *board;
    let mut cells: Vec<usize> = (0..BOARD_CELLS).collect();
    cells.shuffle(rng);
    for &i in cells.iter().take(n) {
        out[i] = 0;
    }
    out
}

/// Exhaustive reference for the cumulative-confidence unmasking rule: sorts
/// by (1 - c, index), tries every prefix of the sorted order, keeps the
/// longest whose sum of (1 - c) stays strictly below tau, and falls back to
/// the single best position when no prefix qualifies.
///
/// Returns (selected positions in ascending index order, fallback_used).
pub fn select_prefix_oracle(confidences: &[(usize, f64)], tau: f64) -> (Vec<usize>, bool) {
    assert!(!confidences.is_empty());
    let mut order: Vec<(f64, usize)> = confidences.iter().map(|&(i, c)| (1.0 - c, i)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut best_len = 0;
    for len in 1..=order.len() {
        let sum: f64 = order[..len].iter().map(|&(u, _)| u).sum();
        if sum < tau {
            best_len = len;
        }
    }
    if best_len == 0 {
        (vec![order[0].1], true)
    } else {
        let mut sel: Vec<usize> = order[..best_len].iter().map(|&(_, i)| i).collect();
        sel.sort_unstable();
        (sel, false)
    }
}
