//! Finite-difference verification of the analytic gradients on frozen
//! rollouts, in f64, with a retry guard that keeps the probe away from
//! ReLU kinks.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{array_names, build_model, ModelConfig, ModelParams};
use crate::training::replay::{
    record_trace, replay_grads, replay_loss, replay_relay_inputs, replay_relu_margin,
};
use crate::training::{Objective, RolloutTrace, TrainConfig};

/// Central-difference step; with f64 losses of order 1 the truncation
/// and roundoff errors both sit well under the acceptance tolerance.
const FD_STEP: f64 = 1e-5;

/// Smallest acceptable |pre-activation| at the base point. A nudge of
/// FD_STEP to one parameter moves any pre-activation by a few times
/// FD_STEP at most, so this margin keeps every ReLU on one side during
/// the probe. It cannot be much larger: the minimum |pre-activation|
/// across the thousands of units in a rollout concentrates near 1e-4,
/// so a looser gate would reject nearly every draw.
const RELU_MARGIN: f64 = 2e-4;

const MAX_ATTEMPTS: u64 = 25;

/// Acceptance bound on the relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

/// Smallest gradient magnitude the probe can score relatively. The
/// difference of two O(1) losses carries roughly 2e-10 of f64
/// cancellation noise after dividing by 2 * FD_STEP, so a coordinate
/// whose analytic and numeric values both sit below this floor would
/// show noise, not disagreement, once the denominator bottoms out at
/// 1e-8. Such coordinates must instead agree absolutely, and the
/// sampler keeps probing until 200 scoreable ones are found.
const SCORE_FLOOR: f64 = 5e-6;

/// Agreement bound for coordinates under [`SCORE_FLOOR`]: fifty times
/// the probe's noise, and small enough that an analytic value computed
/// from a wrong formula still trips it or clears the floor.
const FD_ABS_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub objective: Objective,
    pub k: usize,
    /// Coordinates probed in total, including those under the floor.
    pub coords: usize,
    /// Probed coordinates whose gradient was too small to score
    /// relatively; these matched to [`FD_ABS_TOL`] instead.
    pub below_floor: usize,
    pub max_rel_err: f64,
    /// Array owning the worst coordinate, with its analytic and numeric
    /// values.
    pub worst_array: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// The reduced architecture used for gradient checks: two layers, width
/// 32, sequence length 16, no dropout, untied head so every parameter
/// group exists.
pub fn gradcheck_config(objective: Objective) -> ModelConfig {
    ModelConfig {
        seq_len: 16,
        relay_enabled: objective.uses_relay(),
        ..ModelConfig::tiny()
    }
}

fn synth_episode(seq_len: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, BTreeSet<usize>) {
    let x0: Vec<u8> = (0..seq_len).map(|_| rng.gen_range(1..=9u8)).collect();
    let clues: BTreeSet<usize> = (0..seq_len).filter(|_| rng.gen_bool(0.2)).collect();
    (x0, clues)
}

/// Compares analytic gradients of a frozen rollout against central
/// finite differences over >= 200 coordinates spanning every parameter
/// array; returns the max relative error with denominator
/// max(|a|, |b|, 1e-8). Coordinates whose gradient falls under
/// [`SCORE_FLOOR`] both ways are checked absolutely and replaced in
/// the scored sample.
pub fn grad_check(
    mcfg: &ModelConfig,
    objective: Objective,
    k: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    mcfg.validate()?;
    if mcfg.dropout != 0.0 {
        return Err(Error::Config("gradient checks need dropout 0".into()));
    }
    if objective == Objective::Mlm && k != 1 {
        return Err(Error::Config("mlm checks use K = 1".into()));
    }
    if k < 1 {
        return Err(Error::Config(format!("K = {k} must be at least 1")));
    }
    if objective.uses_relay() != mcfg.relay_enabled {
        return Err(Error::Config(format!(
            "objective {objective} against relay_enabled = {}",
            mcfg.relay_enabled
        )));
    }

    let cfg = TrainConfig {
        objective,
        k,
        threshold_std: 0.05,
        ..TrainConfig::default()
    };

    // Draw model + episode until the rollout fills the window and the
    // base point sits clear of every ReLU kink.
    let mut chosen: Option<(ModelParams<f64>, RolloutTrace)> = None;
    for attempt in 0..MAX_ATTEMPTS {
        let s = seed.wrapping_add(attempt);
        let params = build_model::<f64>(mcfg, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5DEECE66D);
        let (x0, clues) = synth_episode(mcfg.seq_len, &mut rng);
        if mcfg.seq_len - clues.len() < k {
            continue;
        }
        let trace = record_trace(&params, &x0, &clues, &cfg, &mut rng)?;
        if trace.steps.len() != k {
            continue;
        }
        if replay_relu_margin(&params, &trace, objective)? < RELU_MARGIN {
            continue;
        }
        chosen = Some((params, trace));
        break;
    }
    let (params, trace) = chosen.ok_or_else(|| {
        Error::Numeric(format!(
            "no kink-free rollout found for {objective} K={k} in {MAX_ATTEMPTS} attempts"
        ))
    })?;

    // Frozen rollouts must be deterministic functions of the parameters.
    let l1 = replay_loss(&params, &trace, objective, None)?;
    let l2 = replay_loss(&params, &trace, objective, None)?;
    if l1 != l2 {
        return Err(Error::Numeric(
            "frozen rollout replayed to different losses".into(),
        ));
    }

    let (_, analytic) = replay_grads(&params, &trace, objective)?;
    // Severed-gradient semantics: the finite difference must hold the
    // relay inputs at their base-point values.
    let frozen_h = if objective == Objective::RelaySg {
        Some(replay_relay_inputs(&params, &trace)?)
    } else {
        None
    };

    let names = array_names(mcfg);
    let n_arrays = names.len();
    let per_array = 200usize.div_ceil(n_arrays);

    let mut probe = params.clone();
    let mut visited: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_arrays];
    let mut scored = 0usize;
    let mut below_floor = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst_array = String::new();
    let mut worst_analytic = 0.0;
    let mut worst_numeric = 0.0;

    fn set_coord(p: &mut ModelParams<f64>, ai: usize, ci: usize, v: f64) {
        let mut arrays = p.arrays_mut();
        arrays[ai].view_mut().as_slice_mut().expect("contiguous")[ci] = v;
    }

    let analytic_arrays = analytic.arrays();
    // Round 0 strides through every array; later rounds shift the
    // strides to replace coordinates that fell under the floor.
    'sample: for round in 0..64usize {
        for (ai, name) in names.iter().enumerate() {
            if round > 0 && scored >= 200 {
                break 'sample;
            }
            let len = analytic_arrays[ai].len();
            let take = per_array.min(len);
            let stride = (len / take).max(1);
            for j in 0..take {
                let ci = (j * stride + round) % len;
                if !visited[ai].insert(ci) {
                    continue;
                }
                let a = analytic_arrays[ai].view().as_slice().expect("contiguous")[ci];

                let orig = probe.arrays()[ai].view().as_slice().expect("contiguous")[ci];
                set_coord(&mut probe, ai, ci, orig + FD_STEP);
                let plus: f64 = replay_loss(&probe, &trace, objective, frozen_h.as_deref())?;
                set_coord(&mut probe, ai, ci, orig - FD_STEP);
                let minus: f64 = replay_loss(&probe, &trace, objective, frozen_h.as_deref())?;
                set_coord(&mut probe, ai, ci, orig);
                let numeric = (plus - minus) / (2.0 * FD_STEP);

                if a.abs().max(numeric.abs()) < SCORE_FLOOR {
                    if (a - numeric).abs() > FD_ABS_TOL {
                        return Err(Error::Numeric(format!(
                            "{name}[{ci}]: analytic {a:e} vs numeric {numeric:e} \
                             disagree on a near-zero gradient"
                        )));
                    }
                    below_floor += 1;
                    continue;
                }

                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if rel > max_rel_err {
                    max_rel_err = rel;
                    worst_array = name.clone();
                    worst_analytic = a;
                    worst_numeric = numeric;
                }
                scored += 1;
            }
        }
        if scored >= 200 {
            break;
        }
    }
    if scored < 200 {
        return Err(Error::Numeric(format!(
            "only {scored} sampled coordinates carry gradients above the probe's floor"
        )));
    }

    Ok(GradCheckReport {
        objective,
        k,
        coords: scored + below_floor,
        below_floor,
        max_rel_err,
        worst_array,
        worst_analytic,
        worst_numeric,
    })
}
