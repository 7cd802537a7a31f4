//! Episodic teacher-forced training: the four-objective ladder, K-step
//! windows with truncated backpropagation through the relay state, the
//! optimizer, the driver loop, and gradient verification.

mod driver;
mod gradcheck;
mod optim;
mod replay;
mod window;

pub use driver::{
    checkpoint_path, resume_training_state, run_training, train_step, StepMetrics, TrainState,
    METRICS_HEADER,
};
pub use gradcheck::{grad_check, gradcheck_config, GradCheckReport, GRAD_TOL};
pub use optim::{clip_global_norm, lr_at, AdamW};
pub use replay::{bptt_term, record_trace, replay_grads, replay_loss, replay_relay_inputs};
pub use window::{mlm_step, rollout_window, WindowResult};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::MaskedSequence;
use crate::error::{Error, Result};
use crate::model::Real;

/// The training ladder. MLM is one masked forward per step; Rollout adds
/// episodic teacher-forced unmasking without any carried state; RelaySG
/// carries the relay value but severs its gradient between steps; Relay
/// backpropagates through the carried state across the whole window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    Rollout,
    RelaySg,
    Relay,
}

impl Objective {
    /// Whether the model consumes a carried relay state under this
    /// objective.
    pub fn uses_relay(self) -> bool {
        matches!(self, Objective::RelaySg | Objective::Relay)
    }

    /// Whether gradients flow through the relay hand-off between inner
    /// steps.
    pub fn bptt_through_relay(self) -> bool {
        self == Objective::Relay
    }

    pub const ALL: [Objective; 4] = [
        Objective::Mlm,
        Objective::Rollout,
        Objective::RelaySg,
        Objective::Relay,
    ];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Objective::Mlm => "mlm",
            Objective::Rollout => "rollout",
            Objective::RelaySg => "relay_sg",
            Objective::Relay => "relay",
        };
        f.write_str(s)
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Objective> {
        match s {
            "mlm" => Ok(Objective::Mlm),
            "rollout" => Ok(Objective::Rollout),
            "relay_sg" => Ok(Objective::RelaySg),
            "relay" => Ok(Objective::Relay),
            other => Err(Error::Config(format!(
                "unknown objective {other:?}; expected mlm, rollout, relay_sg, or relay"
            ))),
        }
    }
}

/// One live training episode: the ground-truth tokens, the partially
/// unmasked sequence, and the relay state carried between optimizer
/// steps.
#[derive(Clone, Debug)]
pub struct EpisodeState<F> {
    pub x0: Vec<u8>,
    pub seq: MaskedSequence,
    /// seq_len x d_model; zero exactly at episode start, untouched for
    /// objectives without a relay.
    pub h: Array2<F>,
    pub finished: bool,
}

impl<F: Real> EpisodeState<F> {
    /// A fresh episode: all non-clue positions masked, relay zeroed.
    pub fn start(x0: Vec<u8>, clues: &BTreeSet<usize>, d_model: usize) -> EpisodeState<F> {
        let seq = MaskedSequence::fully_masked(&x0, clues);
        let h = Array2::zeros((x0.len(), d_model));
        let finished = seq.masked.is_empty();
        EpisodeState { x0, seq, h, finished }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Unroll horizon of one optimizer window ("K").
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub threshold_mean: f64,
    pub threshold_std: f64,
    /// Redraw tau once per window instead of once per inner step.
    pub tau_per_window: bool,
    /// Lower bound of the masking-time draw, bounding the 1/t weight.
    pub mlm_t_min: f64,
    pub total_steps: usize,
    pub log_every: usize,
    /// Validation and checkpoint cadence; 0 disables periodic validation.
    pub val_every: usize,
    /// Records held out from the end of the dataset for validation.
    pub val_n: usize,
    pub val_taus: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Relay,
            k: 2,
            batch_size: 512,
            lr: 5e-4,
            weight_decay: 1e-2,
            warmup_steps: 2000,
            grad_clip: 0.5,
            threshold_mean: 0.15,
            threshold_std: 0.1,
            tau_per_window: false,
            mlm_t_min: 1e-3,
            total_steps: 20_000,
            log_every: 50,
            val_every: 5000,
            val_n: 256,
            val_taus: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config(format!("K = {} must be at least 1", self.k)));
        }
        if self.objective == Objective::Mlm && self.k != 1 {
            return Err(Error::Config(format!(
                "mlm uses exactly one forward per step, K = {} is meaningless",
                self.k
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip {} must be positive",
                self.grad_clip
            )));
        }
        if !(0.0 < self.threshold_mean && self.threshold_mean < 1.0) {
            return Err(Error::Config(format!(
                "threshold_mean {} outside (0, 1)",
                self.threshold_mean
            )));
        }
        if !(self.threshold_std >= 0.0) {
            return Err(Error::Config(format!(
                "threshold_std {} must be >= 0",
                self.threshold_std
            )));
        }
        if !(0.0 < self.mlm_t_min && self.mlm_t_min < 1.0) {
            return Err(Error::Config(format!(
                "mlm_t_min {} outside (0, 1)",
                self.mlm_t_min
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.val_taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("val_taus must all be positive".into()));
        }
        Ok(())
    }
}

/// Draws the confidence threshold for one selection, clamped away from
/// the degenerate ends.
pub fn sample_threshold(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> f64 {
    let normal = Normal::new(cfg.threshold_mean, cfg.threshold_std)
        .expect("validated threshold parameters");
    normal.sample(rng).clamp(0.01, 0.99)
}

/// One recorded inner step of a rollout window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub masked: BTreeSet<usize>,
    pub selected: BTreeSet<usize>,
    /// (position, ground-truth token) pairs, ascending by position.
    pub committed: Vec<(usize, u8)>,
    pub step_loss: f64,
}

/// A full window trace for one episode; enough to replay the rollout as
/// a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub x0: Vec<u8>,
    pub start_tokens: Vec<u8>,
    pub clues: BTreeSet<usize>,
    pub steps: Vec<TraceStep>,
    /// Masking time of a single-pass masked-LM step; None for rollout
    /// objectives.
    pub mlm_t: Option<f64>,
}

impl RolloutTrace {
    /// Masked sets must shrink strictly until the episode empties.
    pub fn validate(&self) -> Result<()> {
        for w in self.steps.windows(2) {
            if w[1].masked.len() >= w[0].masked.len() {
                return Err(Error::Invariant(
                    "masked set failed to shrink between inner steps".into(),
                ));
            }
        }
        for step in &self.steps {
            if !step.selected.is_subset(&step.masked) {
                return Err(Error::Invariant(
                    "trace selects positions outside its masked set".into(),
                ));
            }
        }
        Ok(())
    }
}
