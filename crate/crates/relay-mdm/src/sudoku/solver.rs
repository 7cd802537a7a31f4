//! Deductive solver with a strategy trace, plus exhaustive backtracking
//! used for uniqueness checks and as the guided fallback.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sudoku::board::{
    box_of, check_legality, col_of, row_of, Board, DigitSet, CELLS, PEERS, UNITS,
};

/// Deduction strategies in priority order, cheapest first, with the
/// backtracking fallback last.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum StrategyTag {
    NakedSingle,
    HiddenSingle,
    NakedPair,
    HiddenPair,
    NakedTriple,
    HiddenTriple,
    NakedQuad,
    HiddenQuad,
    XWing,
    Swordfish,
    Jellyfish,
    Backtracking,
}

/// Difficulty tier of a strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tier {
    Basic,
    Advanced,
    Master,
    Fallback,
}

impl StrategyTag {
    pub fn tier(self) -> Tier {
        use StrategyTag::*;
        match self {
            NakedSingle | HiddenSingle => Tier::Basic,
            NakedPair | HiddenPair | NakedTriple | HiddenTriple | NakedQuad
            | HiddenQuad => Tier::Advanced,
            XWing | Swordfish | Jellyfish => Tier::Master,
            Backtracking => Tier::Fallback,
        }
    }
}

/// Solver trace: every intermediate board and the set of strategies used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    /// Board states from the puzzle to the solution, inclusive. Elimination
    /// steps repeat the previous cell contents.
    pub trajectory: Vec<Board>,
    /// Number of strategy applications, `trajectory.len() - 1`.
    pub num_steps: usize,
    pub strategies_used: BTreeSet<StrategyTag>,
}

/// Per-cell candidate sets kept consistent with a board. Filled cells carry
/// an empty set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateGrid {
    sets: [DigitSet; CELLS],
}

impl CandidateGrid {
    pub fn from_board(board: &Board) -> Result<CandidateGrid> {
        let cands = crate::sudoku::board::candidates(board)?;
        let mut sets = [DigitSet::EMPTY; CELLS];
        for (i, set) in cands {
            sets[i] = set;
        }
        Ok(CandidateGrid { sets })
    }

    pub fn get(&self, i: usize) -> DigitSet {
        self.sets[i]
    }

    /// Places a digit and strikes it from all peers.
    fn assign(&mut self, board: &mut Board, i: usize, d: u8) {
        debug_assert!(board.get(i) == 0 && self.sets[i].contains(d));
        board.set(i, d);
        self.sets[i] = DigitSet::EMPTY;
        for &p in &PEERS[i] {
            self.sets[p].remove(d);
        }
    }

    fn eliminate(&mut self, i: usize, d: u8) -> bool {
        self.sets[i].remove(d)
    }

    /// Some blank cell has no candidates left.
    fn has_contradiction(&self, board: &Board) -> bool {
        (0..CELLS).any(|i| board.get(i) == 0 && self.sets[i].is_empty())
    }

    #[cfg(test)]
    fn from_sets(sets: [DigitSet; CELLS]) -> CandidateGrid {
        CandidateGrid { sets }
    }
}

/// Blank cell with exactly one candidate; lowest index wins.
fn find_naked_single(grid: &CandidateGrid) -> Option<(usize, u8)> {
    (0..CELLS).find_map(|i| {
        let s = grid.get(i);
        (s.len() == 1).then(|| (i, s.first().unwrap()))
    })
}

/// Digit with exactly one admissible cell in some unit; lowest cell index,
/// then lowest digit, wins.
fn find_hidden_single(grid: &CandidateGrid) -> Option<(usize, u8)> {
    let mut best: Option<(usize, u8)> = None;
    for unit in UNITS.iter() {
        for d in 1..=9u8 {
            let mut found = None;
            let mut count = 0;
            for &i in unit {
                if grid.get(i).contains(d) {
                    found = Some(i);
                    count += 1;
                    if count > 1 {
                        break;
                    }
                }
            }
            if count == 1 {
                let cand = (found.unwrap(), d);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
    }
    best
}

/// Calls `f` with each k-combination of `0..n` in lexicographic order until
/// it returns `Some`.
fn combinations<T>(
    n: usize,
    k: usize,
    mut f: impl FnMut(&[usize]) -> Option<T>,
) -> Option<T> {
    fn rec<T>(
        n: usize,
        k: usize,
        start: usize,
        current: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]) -> Option<T>,
    ) -> Option<T> {
        if current.len() == k {
            return f(current);
        }
        for i in start..n {
            current.push(i);
            if let Some(t) = rec(n, k, i + 1, current, f) {
                return Some(t);
            }
            current.pop();
        }
        None
    }
    rec(n, k, 0, &mut Vec::with_capacity(k), &mut f)
}

/// k cells in one unit whose candidates union to exactly k digits; those
/// digits are struck from the rest of the unit. First pattern (unit
/// ascending, cells ascending) with an effect wins.
fn find_naked_subset(grid: &CandidateGrid, k: usize) -> Option<Vec<(usize, u8)>> {
    for unit in UNITS.iter() {
        let cells: Vec<usize> = unit
            .iter()
            .copied()
            .filter(|&i| (2..=k).contains(&grid.get(i).len()))
            .collect();
        let hit = combinations(cells.len(), k, |combo| {
            let members: Vec<usize> = combo.iter().map(|&j| cells[j]).collect();
            let union = members
                .iter()
                .fold(DigitSet::EMPTY, |acc, &i| acc.union(grid.get(i)));
            if union.len() != k {
                return None;
            }
            let elims: Vec<(usize, u8)> = unit
                .iter()
                .filter(|i| !members.contains(i))
                .flat_map(|&i| {
                    union.iter().filter(move |&d| grid.get(i).contains(d)).map(
                        move |d| (i, d),
                    )
                })
                .collect();
            (!elims.is_empty()).then_some(elims)
        });
        if hit.is_some() {
            return hit;
        }
    }
    None
}

/// k digits in one unit confined to exactly k cells; all other candidates
/// are struck from those cells. First pattern (unit ascending, digits
/// ascending) with an effect wins.
fn find_hidden_subset(grid: &CandidateGrid, k: usize) -> Option<Vec<(usize, u8)>> {
    for unit in UNITS.iter() {
        // Position mask within the unit for each digit still open there.
        let mut digit_pos: Vec<(u8, u16)> = Vec::new();
        for d in 1..=9u8 {
            let mut mask = 0u16;
            for (slot, &i) in unit.iter().enumerate() {
                if grid.get(i).contains(d) {
                    mask |= 1 << slot;
                }
            }
            let n = mask.count_ones() as usize;
            if (1..=k).contains(&n) {
                digit_pos.push((d, mask));
            }
        }
        let hit = combinations(digit_pos.len(), k, |combo| {
            let digits: DigitSet = combo.iter().map(|&j| digit_pos[j].0).collect();
            let union = combo.iter().fold(0u16, |acc, &j| acc | digit_pos[j].1);
            if union.count_ones() as usize != k {
                return None;
            }
            let elims: Vec<(usize, u8)> = unit
                .iter()
                .enumerate()
                .filter(|(slot, _)| union & (1 << slot) != 0)
                .flat_map(|(_, &i)| {
                    grid.get(i)
                        .iter()
                        .filter(|&d| !digits.contains(d))
                        .map(move |d| (i, d))
                })
                .collect();
            (!elims.is_empty()).then_some(elims)
        });
        if hit.is_some() {
            return hit;
        }
    }
    None
}

/// Basic fish of size k (2 = X-Wing, 3 = Swordfish, 4 = Jellyfish): one
/// digit confined, across k base rows, to k cover columns; the digit is
/// struck from the cover columns outside the base rows. Also searched with
/// columns as the base. First pattern (digit ascending, rows before
/// columns, base sets ascending) with an effect wins.
fn find_fish(grid: &CandidateGrid, k: usize) -> Option<Vec<(usize, u8)>> {
    for d in 1..=9u8 {
        for row_base in [true, false] {
            // Cross-line position mask per base line.
            let line_mask = |line: usize| -> u16 {
                let mut mask = 0u16;
                for cross in 0..9 {
                    let i = if row_base { line * 9 + cross } else { cross * 9 + line };
                    if grid.get(i).contains(d) {
                        mask |= 1 << cross;
                    }
                }
                mask
            };
            let lines: Vec<(usize, u16)> = (0..9)
                .map(|l| (l, line_mask(l)))
                .filter(|&(_, m)| (2..=k as u32).contains(&m.count_ones()))
                .collect();
            let hit = combinations(lines.len(), k, |combo| {
                let cover = combo.iter().fold(0u16, |acc, &j| acc | lines[j].1);
                if cover.count_ones() as usize != k {
                    return None;
                }
                let base: Vec<usize> = combo.iter().map(|&j| lines[j].0).collect();
                let mut elims = Vec::new();
                for line in 0..9 {
                    if base.contains(&line) {
                        continue;
                    }
                    for cross in 0..9 {
                        if cover & (1 << cross) == 0 {
                            continue;
                        }
                        let i =
                            if row_base { line * 9 + cross } else { cross * 9 + line };
                        if grid.get(i).contains(d) {
                            elims.push((i, d));
                        }
                    }
                }
                (!elims.is_empty()).then_some(elims)
            });
            if hit.is_some() {
                return hit;
            }
        }
    }
    None
}

enum Application {
    Place(usize, u8),
    Eliminate(Vec<(usize, u8)>),
}

/// First strategy in priority order that makes progress.
fn next_application(grid: &CandidateGrid) -> Option<(StrategyTag, Application)> {
    use StrategyTag::*;
    if let Some((i, d)) = find_naked_single(grid) {
        return Some((NakedSingle, Application::Place(i, d)));
    }
    if let Some((i, d)) = find_hidden_single(grid) {
        return Some((HiddenSingle, Application::Place(i, d)));
    }
    let subset_tags = [(2, NakedPair, HiddenPair), (3, NakedTriple, HiddenTriple), (4, NakedQuad, HiddenQuad)];
    let fish_tags = [(2, XWing), (3, Swordfish), (4, Jellyfish)];
    for (k, naked, hidden) in subset_tags {
        if let Some(elims) = find_naked_subset(grid, k) {
            return Some((naked, Application::Eliminate(elims)));
        }
        if let Some(elims) = find_hidden_subset(grid, k) {
            return Some((hidden, Application::Eliminate(elims)));
        }
    }
    for (k, tag) in fish_tags {
        if let Some(elims) = find_fish(grid, k) {
            return Some((tag, Application::Eliminate(elims)));
        }
    }
    None
}

/// Exhaustive search with digit-use masks and most-constrained-cell
/// ordering. Returns the number of solutions found, capped at `cap`, and
/// stores the first one.
fn search_count(board: &Board, cap: usize, first: &mut Option<Board>) -> usize {
    struct State {
        cells: [u8; CELLS],
        rows: [u16; 9],
        cols: [u16; 9],
        boxes: [u16; 9],
    }
    impl State {
        fn candidates_at(&self, i: usize) -> u16 {
            let used = self.rows[row_of(i)] | self.cols[col_of(i)] | self.boxes[box_of(i)];
            !used & 0b11_1111_1110
        }
        fn place(&mut self, i: usize, d: u8) {
            self.cells[i] = d;
            let bit = 1u16 << d;
            self.rows[row_of(i)] |= bit;
            self.cols[col_of(i)] |= bit;
            self.boxes[box_of(i)] |= bit;
        }
        fn unplace(&mut self, i: usize, d: u8) {
            self.cells[i] = 0;
            let bit = !(1u16 << d);
            self.rows[row_of(i)] &= bit;
            self.cols[col_of(i)] &= bit;
            self.boxes[box_of(i)] &= bit;
        }
    }
    fn dfs(s: &mut State, cap: usize, found: &mut usize, first: &mut Option<Board>) {
        if *found >= cap {
            return;
        }
        // Most-constrained blank cell.
        let mut best: Option<(usize, u16, u32)> = None;
        for i in 0..CELLS {
            if s.cells[i] != 0 {
                continue;
            }
            let mask = s.candidates_at(i);
            let n = mask.count_ones();
            if n == 0 {
                return;
            }
            if best.is_none_or(|(_, _, bn)| n < bn) {
                best = Some((i, mask, n));
                if n == 1 {
                    break;
                }
            }
        }
        let Some((i, mask, _)) = best else {
            *found += 1;
            if first.is_none() {
                *first = Some(Board::from_cells(s.cells).unwrap());
            }
            return;
        };
        for d in 1..=9u8 {
            if mask & (1 << d) != 0 {
                s.place(i, d);
                dfs(s, cap, found, first);
                s.unplace(i, d);
                if *found >= cap {
                    return;
                }
            }
        }
    }

    if !check_legality(board).legal {
        return 0;
    }
    let mut state = State {
        cells: *board.cells(),
        rows: [0; 9],
        cols: [0; 9],
        boxes: [0; 9],
    };
    for i in 0..CELLS {
        let d = state.cells[i];
        if d != 0 {
            let bit = 1u16 << d;
            state.rows[row_of(i)] |= bit;
            state.cols[col_of(i)] |= bit;
            state.boxes[box_of(i)] |= bit;
        }
    }
    let mut found = 0;
    dfs(&mut state, cap, &mut found, first);
    found
}

/// Number of solutions reachable from `board`, capped at `cap`.
pub fn count_solutions(board: &Board, cap: usize) -> usize {
    let mut first = None;
    search_count(board, cap, &mut first)
}

/// The unique solution of `board`, or an error when none or several exist.
pub fn unique_solution(board: &Board) -> Result<Board> {
    let mut first = None;
    match search_count(board, 2, &mut first) {
        0 => Err(Error::Unsolvable),
        1 => Ok(first.unwrap()),
        _ => Err(Error::AmbiguousSolution),
    }
}

/// Solves by repeated strategy application, falling back to one verified
/// backtracking placement whenever no strategy progresses.
pub fn solve_with_trace(puzzle: &Board) -> Result<(Board, Annotation)> {
    let mut board = puzzle.clone();
    let mut grid = CandidateGrid::from_board(&board)?;
    let mut trajectory = vec![board.clone()];
    let mut strategies_used = BTreeSet::new();

    while !board.is_complete() {
        if grid.has_contradiction(&board) {
            return Err(Error::Unsolvable);
        }
        let (tag, app) = match next_application(&grid) {
            Some(found) => found,
            None => {
                // Verify the remainder has exactly one completion, then
                // commit the most constrained cell to its value there.
                let solution = unique_solution(&board)?;
                let cell = (0..CELLS)
                    .filter(|&i| board.get(i) == 0)
                    .min_by_key(|&i| (grid.get(i).len(), i))
                    .expect("incomplete board has a blank");
                (StrategyTag::Backtracking, Application::Place(cell, solution.get(cell)))
            }
        };
        match app {
            Application::Place(i, d) => grid.assign(&mut board, i, d),
            Application::Eliminate(elims) => {
                for (i, d) in elims {
                    grid.eliminate(i, d);
                }
            }
        }
        strategies_used.insert(tag);
        trajectory.push(board.clone());
    }

    if !check_legality(&board).legal {
        return Err(Error::Invariant("solver produced an illegal board".into()));
    }
    let num_steps = trajectory.len() - 1;
    Ok((board, Annotation { trajectory, num_steps, strategies_used }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn board_from_oracle(cells: [u8; CELLS]) -> Board {
        Board::from_cells(cells).unwrap()
    }

    #[test]
    fn solved_board_has_empty_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let solved = board_from_oracle(testkit::random_solved_board(&mut rng));
        let (solution, ann) = solve_with_trace(&solved).unwrap();
        assert_eq!(solution, solved);
        assert_eq!(ann.trajectory, vec![solved]);
        assert_eq!(ann.num_steps, 0);
        assert!(ann.strategies_used.is_empty());
    }

    #[test]
    fn one_blank_is_a_naked_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let solved = testkit::random_solved_board(&mut rng);
        let mut cells = solved;
        cells[40] = 0;
        let (solution, ann) = solve_with_trace(&board_from_oracle(cells)).unwrap();
        assert_eq!(solution.cells(), &solved);
        assert_eq!(ann.num_steps, 1);
        assert_eq!(
            ann.strategies_used.iter().copied().collect::<Vec<_>>(),
            vec![StrategyTag::NakedSingle]
        );
    }

    #[test]
    fn solutions_match_oracle_on_random_puzzles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..100 {
            let solved = testkit::random_solved_board(&mut rng);
            // Digging all the way to 17 clues is slow; a spread of clue
            // counts still exercises every strategy path.
            let target = 24 + (round % 16);
            let puzzle = testkit::dig_puzzle(&mut rng, &solved, target);
            let board = board_from_oracle(puzzle);
            let oracle = testkit::solve(&puzzle).expect("oracle solves unique puzzle");
            let (solution, ann) = solve_with_trace(&board).unwrap();
            assert_eq!(solution.cells(), &oracle, "puzzle {board}");
            assert!(ann.num_steps >= 1);
        }
    }

    #[test]
    fn trajectories_stay_legal_with_monotone_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let solved = testkit::random_solved_board(&mut rng);
            let puzzle = testkit::dig_puzzle(&mut rng, &solved, 28);
            let (_, ann) = solve_with_trace(&board_from_oracle(puzzle)).unwrap();
            let mut prev_filled = 0;
            for b in &ann.trajectory {
                assert!(check_legality(b).legal);
                let filled = b.filled_count();
                assert!(filled >= prev_filled);
                prev_filled = filled;
            }
            assert_eq!(ann.num_steps, ann.trajectory.len() - 1);
        }
    }

    #[test]
    fn count_solutions_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let solved = testkit::random_solved_board(&mut rng);
            let cells = testkit::blank_cells(&mut rng, &solved, 50);
            let board = board_from_oracle(cells);
            assert_eq!(
                count_solutions(&board, 5),
                testkit::count_solutions(&cells, 5)
            );
        }
    }

    #[test]
    fn contradictory_board_is_unsolvable() {
        // Row 0 holds 1..8 and column 8 additionally blocks the 9.
        let mut b = Board::empty();
        for c in 0..8 {
            b.set(c, c as u8 + 1);
        }
        b.set(2 * 9 + 8, 9);
        assert!(matches!(solve_with_trace(&b), Err(Error::Unsolvable)));
    }

    #[test]
    fn ambiguous_board_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let solved = testkit::random_solved_board(&mut rng);
        // Blanking most of the board leaves many completions.
        let cells = testkit::blank_cells(&mut rng, &solved, 75);
        assert!(testkit::count_solutions(&cells, 2) >= 2);
        assert!(matches!(
            solve_with_trace(&board_from_oracle(cells)),
            Err(Error::AmbiguousSolution)
        ));
    }

    #[test]
    fn xwing_pattern_is_found() {
        // Digit 5 confined to columns 3 and 7 in rows 2 and 5; the extra
        // 5-candidates in those columns must fall.
        let mut sets = [DigitSet::EMPTY; CELLS];
        for &r in &[2usize, 5] {
            for &c in &[3usize, 7] {
                sets[r * 9 + c].insert(5);
            }
        }
        sets[7 * 9 + 3].insert(5);
        sets[0 * 9 + 7].insert(5);
        let grid = CandidateGrid::from_sets(sets);
        let elims = find_fish(&grid, 2).unwrap();
        assert_eq!(elims, vec![(0 * 9 + 7, 5), (7 * 9 + 3, 5)]);
    }

    #[test]
    fn swordfish_pattern_is_found() {
        // Digit 3 on rows 0, 4, 8 covering columns {1, 4, 7}.
        let mut sets = [DigitSet::EMPTY; CELLS];
        for &(r, cs) in &[(0usize, [1usize, 4]), (4, [4, 7]), (8, [1, 7])] {
            for &c in &cs {
                sets[r * 9 + c].insert(3);
            }
        }
        sets[2 * 9 + 4].insert(3);
        let grid = CandidateGrid::from_sets(sets);
        assert!(find_fish(&grid, 2).is_none());
        let elims = find_fish(&grid, 3).unwrap();
        assert_eq!(elims, vec![(2 * 9 + 4, 3)]);
    }

    #[test]
    fn naked_pair_strikes_unit_peers() {
        // Cells 0 and 1 both restricted to {4, 7}; cell 5 in the same row
        // loses both digits.
        let mut sets = [DigitSet::EMPTY; CELLS];
        sets[0] = DigitSet::from_iter([4, 7]);
        sets[1] = DigitSet::from_iter([4, 7]);
        sets[5] = DigitSet::from_iter([2, 4, 7]);
        let grid = CandidateGrid::from_sets(sets);
        let elims = find_naked_subset(&grid, 2).unwrap();
        assert_eq!(elims, vec![(5, 4), (5, 7)]);
    }

    #[test]
    fn hidden_pair_restricts_its_cells() {
        // In row 0, digits 4 and 7 only fit cells 0 and 1, which also hold
        // other candidates; those extras fall.
        let mut sets = [DigitSet::EMPTY; CELLS];
        sets[0] = DigitSet::from_iter([2, 4, 7]);
        sets[1] = DigitSet::from_iter([3, 4, 7]);
        sets[5] = DigitSet::from_iter([2, 3, 5]);
        sets[6] = DigitSet::from_iter([2, 3, 5]);
        sets[7] = DigitSet::from_iter([2, 3, 5]);
        let grid = CandidateGrid::from_sets(sets);
        let elims = find_hidden_subset(&grid, 2).unwrap();
        assert_eq!(elims, vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn tier_mapping_is_total() {
        use StrategyTag::*;
        assert_eq!(NakedSingle.tier(), Tier::Basic);
        assert_eq!(HiddenSingle.tier(), Tier::Basic);
        for tag in [NakedPair, HiddenPair, NakedTriple, HiddenTriple, NakedQuad, HiddenQuad] {
            assert_eq!(tag.tier(), Tier::Advanced);
        }
        for tag in [XWing, Swordfish, Jellyfish] {
            assert_eq!(tag.tier(), Tier::Master);
        }
        assert_eq!(Backtracking.tier(), Tier::Fallback);
    }
}
