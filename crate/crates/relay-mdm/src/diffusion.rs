//! Masking, the two cross-entropy losses, the confidence-threshold
//! unmasking policy, token forcing, and the generation loop with NFE
//! accounting.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams, Real};
use crate::sudoku::board::{Board, CELLS};
use crate::sudoku::dataset::PuzzleRecord;

/// Token ids: digits keep their face value.
pub const BLANK_TOKEN: u8 = 0;
pub const MASK_TOKEN: u8 = 10;
pub const PAD_TOKEN: u8 = 11;

pub fn board_to_tokens(board: &Board) -> Vec<u8> {
    board.cells().to_vec()
}

/// Tokens back to a board; masks or pads present are an error.
pub fn tokens_to_board(tokens: &[u8]) -> Result<Board> {
    if tokens.len() != CELLS {
        return Err(Error::Input(format!(
            "{} tokens cannot form a board",
            tokens.len()
        )));
    }
    let mut cells = [0u8; CELLS];
    for (i, &t) in tokens.iter().enumerate() {
        if t > 9 {
            return Err(Error::Input(format!(
                "token {t} at position {i} is not a digit or blank"
            )));
        }
        cells[i] = t;
    }
    Board::from_cells(cells)
}

/// A partially masked token sequence with fixed clue positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub tokens: Vec<u8>,
    pub masked: BTreeSet<usize>,
    pub clues: BTreeSet<usize>,
}

impl MaskedSequence {
    /// Inference start state: clue digits kept, every other position MASK.
    pub fn from_puzzle(puzzle: &Board) -> MaskedSequence {
        let mut tokens = board_to_tokens(puzzle);
        let mut masked = BTreeSet::new();
        let mut clues = BTreeSet::new();
        for (i, t) in tokens.iter_mut().enumerate() {
            if *t == BLANK_TOKEN {
                *t = MASK_TOKEN;
                masked.insert(i);
            } else {
                clues.insert(i);
            }
        }
        MaskedSequence { tokens, masked, clues }
    }

    /// The same start state for an arbitrary-length target sequence.
    pub fn fully_masked(x0: &[u8], clues: &BTreeSet<usize>) -> MaskedSequence {
        let mut tokens = x0.to_vec();
        let mut masked = BTreeSet::new();
        for (i, t) in tokens.iter_mut().enumerate() {
            if !clues.contains(&i) {
                *t = MASK_TOKEN;
                masked.insert(i);
            }
        }
        MaskedSequence { tokens, masked, clues: clues.clone() }
    }

    /// Every invariant the type promises; used by tests and debug builds.
    pub fn validate(&self) -> Result<()> {
        if self.masked.intersection(&self.clues).next().is_some() {
            return Err(Error::Invariant("masked and clue sets overlap".into()));
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            let is_mask = t == MASK_TOKEN;
            if is_mask != self.masked.contains(&i) {
                return Err(Error::Invariant(format!(
                    "token/mask mismatch at position {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Masks each non-clue position of `x0` independently with probability
/// `t`; clues are never touched.
pub fn mask_uniform(
    x0: &[u8],
    t: f64,
    clues: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("mask probability {t} outside [0, 1]")));
    }
    if x0.iter().any(|&v| v == MASK_TOKEN) {
        return Err(Error::Precondition("x0 must be fully unmasked".into()));
    }
    let mut tokens = x0.to_vec();
    let mut masked = BTreeSet::new();
    for (i, tok) in tokens.iter_mut().enumerate() {
        if !clues.contains(&i) && rng.gen::<f64>() < t {
            *tok = MASK_TOKEN;
            masked.insert(i);
        }
    }
    Ok(MaskedSequence { tokens, masked, clues: clues.clone() })
}

/// Sum over masked positions of -log softmax(logits)[target], with the
/// matching gradient d(sum)/d(logits). Rows outside the masked set have
/// zero gradient.
pub fn ce_masked<F: Real>(
    logits: ArrayView2<'_, F>,
    x0: &[u8],
    masked: &BTreeSet<usize>,
) -> Result<(F, Array2<F>)> {
    let (l, v) = logits.dim();
    if x0.len() != l {
        return Err(Error::Input(format!(
            "targets of length {} against {l} logit rows",
            x0.len()
        )));
    }
    let mut total = F::zero();
    let mut dlogits = Array2::zeros((l, v));
    for &i in masked {
        if i >= l {
            return Err(Error::Input(format!("masked index {i} out of range")));
        }
        let target = x0[i] as usize;
        if target >= v {
            return Err(Error::Input(format!("target id {target} out of range")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for &z in row.iter() {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln() + max;
        total += log_denom - row[target];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            dlogits[[i, j]] = p;
        }
        dlogits[[i, target]] -= F::one();
    }
    Ok((total, dlogits))
}

/// Time-weighted masked cross-entropy: (1/t) times the per-masked-token
/// mean. Empty mask yields zero.
pub fn mdm_loss<F: Real>(
    logits: ArrayView2<'_, F>,
    x0: &[u8],
    masked: &BTreeSet<usize>,
    t: f64,
) -> Result<F> {
    if masked.is_empty() {
        return Ok(F::zero());
    }
    if t <= 0.0 {
        return Err(Error::Input(format!(
            "mask time {t} must be positive with masked positions present"
        )));
    }
    let (sum, _) = ce_masked(logits, x0, masked)?;
    Ok(sum / (F::from_f64(t) * F::from_f64(masked.len() as f64)))
}

/// Unweighted per-masked-token mean cross-entropy, the per-step rollout
/// term.
pub fn rollout_step_loss<F: Real>(
    logits: ArrayView2<'_, F>,
    x0: &[u8],
    masked: &BTreeSet<usize>,
) -> Result<F> {
    if masked.is_empty() {
        return Ok(F::zero());
    }
    let (sum, _) = ce_masked(logits, x0, masked)?;
    Ok(sum / F::from_f64(masked.len() as f64))
}

/// Max softmax probability over the full vocabulary (the confidence) and
/// the argmax over board values 0..=9 (the committable value).
pub fn confidence_and_value<F: Real>(row: ArrayView1<'_, F>) -> (f64, u8) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for &z in row.iter() {
        denom += (z - max).exp();
    }
    let confidence = ((max - max).exp() / denom).to_f64();
    let mut best = 0u8;
    let mut best_z = row[0];
    for d in 1..=9usize {
        if row[d] > best_z {
            best_z = row[d];
            best = d as u8;
        }
    }
    (confidence, best)
}

/// One inference decision: which masked positions unmask this step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDecision {
    pub confidences: BTreeMap<usize, f64>,
    pub selected: BTreeSet<usize>,
    pub fallback_used: bool,
}

/// Sorts masked positions by ascending 1-c (ties to the lower index) and
/// takes the maximal prefix whose running sum of 1-c stays strictly below
/// `tau`; an empty prefix falls back to the single most confident
/// position.
pub fn select_positions(
    confidences: &BTreeMap<usize, f64>,
    tau: f64,
) -> Result<StepDecision> {
    if confidences.is_empty() {
        return Err(Error::EmptySet);
    }
    for (&i, &c) in confidences {
        if !c.is_finite() || !(0.0..=1.0).contains(&c) {
            return Err(Error::Input(format!(
                "confidence {c} at position {i} outside [0, 1]"
            )));
        }
    }
    let mut order: Vec<(usize, f64)> = confidences.iter().map(|(&i, &c)| (i, c)).collect();
    order.sort_by(|a, b| {
        let ua = 1.0 - a.1;
        let ub = 1.0 - b.1;
        ua.partial_cmp(&ub).expect("finite").then(a.0.cmp(&b.0))
    });
    let mut selected = BTreeSet::new();
    let mut running = 0.0;
    for &(i, c) in &order {
        running += 1.0 - c;
        if running < tau {
            selected.insert(i);
        } else {
            break;
        }
    }
    let fallback_used = selected.is_empty();
    if fallback_used {
        selected.insert(order[0].0);
    }
    Ok(StepDecision {
        confidences: confidences.clone(),
        selected,
        fallback_used,
    })
}

/// Returns a copy of `s` with `selected` unmasked to the given values.
/// `values` is indexed by position: ground-truth x0 in training, argmax
/// digits at generation time.
pub fn commit(
    s: &MaskedSequence,
    selected: &BTreeSet<usize>,
    values: &[u8],
) -> Result<MaskedSequence> {
    if selected.intersection(&s.clues).next().is_some() {
        return Err(Error::Invariant("commit would touch a clue position".into()));
    }
    if !selected.is_subset(&s.masked) {
        return Err(Error::Invariant(
            "commit selection is not a subset of the masked set".into(),
        ));
    }
    let mut out = s.clone();
    for &i in selected {
        let v = values[i];
        if v == MASK_TOKEN {
            return Err(Error::Invariant(format!(
                "commit value at position {i} is the mask token"
            )));
        }
        out.tokens[i] = v;
        out.masked.remove(&i);
    }
    Ok(out)
}

/// One model forward per denoising step; implementations own any state
/// carried between steps (the relay).
pub trait StepModel {
    /// Begins a fresh episode.
    fn reset(&mut self);
    /// Logits for the current tokens, seq_len x vocab rows.
    fn logits(&mut self, tokens: &[u8]) -> Result<Array2<f32>>;
}

/// The trained model as a step model, carrying the relay state across
/// steps when the architecture has one.
pub struct ModelStepper<'a> {
    params: &'a ModelParams<f32>,
    h: Option<Array2<f32>>,
}

impl<'a> ModelStepper<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> ModelStepper<'a> {
        let h = params
            .config
            .relay_enabled
            .then(|| Array2::zeros((params.config.seq_len, params.config.d_model)));
        ModelStepper { params, h }
    }
}

impl StepModel for ModelStepper<'_> {
    fn reset(&mut self) {
        if let Some(h) = &mut self.h {
            h.fill(0.0);
        }
    }

    fn logits(&mut self, tokens: &[u8]) -> Result<Array2<f32>> {
        let seq = self.params.config.seq_len;
        let view = ArrayView2::from_shape((1, seq), tokens)
            .map_err(|e| Error::Input(format!("token shape: {e}")))?;
        let (out, _) = forward(self.params, view, self.h.as_ref(), false, None, false)?;
        if let Some(h) = &mut self.h {
            *h = out.h_next;
        }
        Ok(out.logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub decision: StepDecision,
    /// (position, digit) pairs committed this step, ascending by position.
    pub committed: Vec<(usize, u8)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub final_board: Board,
    /// Denoising forward passes taken.
    pub nfe: usize,
    pub trace: Vec<StepTrace>,
}

/// Iteratively unmasks a puzzle: forward, confidence-threshold selection,
/// greedy digit commits, until no mask remains. Deterministic for a
/// deterministic step model.
pub fn generate<M: StepModel>(
    model: &mut M,
    record: &PuzzleRecord,
    tau: f64,
) -> Result<GenerationResult> {
    if tau <= 0.0 {
        return Err(Error::Input(format!("tau {tau} must be positive")));
    }
    let mut seq = MaskedSequence::from_puzzle(&record.puzzle);
    model.reset();
    let mut trace = Vec::new();
    while !seq.masked.is_empty() {
        let logits = model.logits(&seq.tokens)?;
        let mut confidences = BTreeMap::new();
        let mut values = vec![0u8; seq.tokens.len()];
        for &i in &seq.masked {
            let (c, v) = confidence_and_value(logits.row(i));
            confidences.insert(i, c);
            values[i] = v;
        }
        let decision = select_positions(&confidences, tau)?;
        let committed: Vec<(usize, u8)> =
            decision.selected.iter().map(|&i| (i, values[i])).collect();
        seq = commit(&seq, &decision.selected, &values)?;
        trace.push(StepTrace { decision, committed });
    }
    Ok(GenerationResult {
        final_board: tokens_to_board(&seq.tokens)?,
        nfe: trace.len(),
        trace,
    })
}
