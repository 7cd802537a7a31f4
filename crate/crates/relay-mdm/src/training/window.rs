//! One optimizer window: K teacher-forced inner steps with the policy in
//! the loop, plus the single-pass masked-LM objective.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    ce_masked, commit, confidence_and_value, mask_uniform, select_positions, MaskedSequence,
};
use crate::error::{Error, Result};
use crate::model::{backward, forward, zeros_like, ForwardCache, GradStore, ModelParams, Real};
use crate::training::{
    sample_threshold, EpisodeState, Objective, RolloutTrace, TraceStep, TrainConfig,
};

pub struct WindowResult<F> {
    /// Batch mean over episodes of the summed inner-step losses.
    pub loss: F,
    pub grads: GradStore<F>,
    pub traces: Vec<RolloutTrace>,
}

struct SubStep<F> {
    active: Vec<usize>,
    cache: ForwardCache<F>,
    /// d(window loss)/d(logits) for this forward, already scaled.
    dlogits: Array2<F>,
}

/// Runs up to K teacher-forced inner steps over the episode pool and
/// returns the window loss with its parameter gradients. Episode
/// sequences and relay values advance in place; gradient history never
/// crosses the window boundary.
pub fn rollout_window<F: Real>(
    params: &ModelParams<F>,
    episodes: &mut [EpisodeState<F>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    train_mode: bool,
) -> Result<WindowResult<F>> {
    if cfg.k < 1 {
        return Err(Error::Config(format!("K = {} must be at least 1", cfg.k)));
    }
    if cfg.objective == Objective::Mlm {
        return Err(Error::Config("mlm does not roll out; use mlm_step".into()));
    }
    if episodes.is_empty() {
        return Err(Error::Precondition("empty episode pool".into()));
    }
    if let Some(b) = episodes.iter().position(|e| e.finished) {
        return Err(Error::Precondition(format!(
            "episode {b} already finished at window entry; re-seed before rolling"
        )));
    }
    let uses_relay = cfg.objective.uses_relay();
    if uses_relay && !params.config.relay_enabled {
        return Err(Error::Config(format!(
            "objective {} needs a relay-enabled model",
            cfg.objective
        )));
    }
    let mcfg = &params.config;
    let seq_len = mcfg.seq_len;
    let d = mcfg.d_model;
    let batch = episodes.len();

    let mut traces: Vec<RolloutTrace> = episodes
        .iter()
        .map(|e| RolloutTrace {
            x0: e.x0.clone(),
            start_tokens: e.seq.tokens.clone(),
            clues: e.seq.clues.clone(),
            steps: Vec::new(),
            mlm_t: None,
        })
        .collect();

    // Per-window thresholds are drawn up front in episode order; the
    // per-step mode draws inside the loop instead.
    let window_taus: Vec<f64> = if cfg.tau_per_window {
        (0..batch).map(|_| sample_threshold(rng, cfg)).collect()
    } else {
        Vec::new()
    };

    let mut sub_steps: Vec<SubStep<F>> = Vec::with_capacity(cfg.k);
    let mut loss_sum = F::zero();

    for _k in 0..cfg.k {
        let active: Vec<usize> = (0..batch).filter(|&b| !episodes[b].finished).collect();
        if active.is_empty() {
            break;
        }
        let a = active.len();
        let mut tokens = Array2::<u8>::zeros((a, seq_len));
        for (ai, &b) in active.iter().enumerate() {
            for (j, &t) in episodes[b].seq.tokens.iter().enumerate() {
                tokens[[ai, j]] = t;
            }
        }
        let relay_in: Option<Array2<F>> = uses_relay.then(|| {
            let mut h = Array2::zeros((a * seq_len, d));
            for (ai, &b) in active.iter().enumerate() {
                h.slice_mut(s![ai * seq_len..(ai + 1) * seq_len, ..])
                    .assign(&episodes[b].h);
            }
            h
        });
        let (out, cache) = forward(
            params,
            tokens.view(),
            relay_in.as_ref(),
            train_mode,
            Some(rng),
            true,
        )?;
        let cache = cache.expect("cache requested");

        let mut dlogits = Array2::<F>::zeros((a * seq_len, mcfg.vocab_size));
        for (ai, &b) in active.iter().enumerate() {
            let rows = ai * seq_len..(ai + 1) * seq_len;
            let block = out.logits.slice(s![rows.clone(), ..]);
            let ep = &episodes[b];
            let m = ep.seq.masked.len();
            let (ce_sum, ce_grad) = ce_masked(block, &ep.x0, &ep.seq.masked)?;
            let step_loss = ce_sum / F::from_f64(m as f64);
            loss_sum += step_loss;
            let scale = F::from_f64(1.0 / (m as f64 * batch as f64));
            dlogits
                .slice_mut(s![rows.clone(), ..])
                .assign(&(&ce_grad * scale));

            // Policy: confidences from this forward, teacher-forced
            // commits from x0.
            let mut confidences = BTreeMap::new();
            for &i in &ep.seq.masked {
                confidences.insert(i, confidence_and_value(block.row(i)).0);
            }
            let tau = if cfg.tau_per_window {
                window_taus[b]
            } else {
                sample_threshold(rng, cfg)
            };
            let decision = select_positions(&confidences, tau)?;
            let committed: Vec<(usize, u8)> = decision
                .selected
                .iter()
                .map(|&i| (i, ep.x0[i]))
                .collect();
            let masked_before = ep.seq.masked.clone();
            let next_seq = commit(&ep.seq, &decision.selected, &ep.x0)?;
            traces[b].steps.push(TraceStep {
                masked: masked_before,
                selected: decision.selected,
                committed,
                step_loss: step_loss.to_f64(),
            });

            let ep = &mut episodes[b];
            ep.seq = next_seq;
            ep.finished = ep.seq.masked.is_empty();
            if uses_relay {
                ep.h.assign(&out.h_next.slice(s![rows, ..]));
            }
        }
        sub_steps.push(SubStep { active, cache, dlogits });
    }

    // Reverse pass. For the full-BPTT objective the relay-input gradient
    // of step k+1 arrives at step k as an extra gradient on h_next.
    let mut grads = zeros_like(params);
    let chain = cfg.objective.bptt_through_relay();
    let mut d_h_pending: HashMap<usize, Array2<F>> = HashMap::new();
    for (k, sub) in sub_steps.iter().enumerate().rev() {
        let a = sub.active.len();
        let d_h_extra: Option<Array2<F>> = if chain && !d_h_pending.is_empty() {
            let mut extra = Array2::zeros((a * seq_len, d));
            for (ai, &b) in sub.active.iter().enumerate() {
                if let Some(dh) = d_h_pending.get(&b) {
                    extra
                        .slice_mut(s![ai * seq_len..(ai + 1) * seq_len, ..])
                        .assign(dh);
                }
            }
            Some(extra)
        } else {
            None
        };
        let want_d_relay = chain && k > 0;
        let d_relay_in = backward(
            params,
            &sub.cache,
            &sub.dlogits,
            d_h_extra.as_ref(),
            want_d_relay,
            &mut grads,
        )?;
        d_h_pending.clear();
        if let Some(dri) = d_relay_in {
            for (ai, &b) in sub.active.iter().enumerate() {
                d_h_pending.insert(
                    b,
                    dri.slice(s![ai * seq_len..(ai + 1) * seq_len, ..]).to_owned(),
                );
            }
        }
    }

    Ok(WindowResult {
        loss: loss_sum / F::from_f64(batch as f64),
        grads,
        traces,
    })
}

/// One masked-LM step over a batch of (target tokens, clue set) pairs:
/// per-sequence masking time, one forward with a zeroed relay, and the
/// time-weighted loss with its gradients.
pub fn mlm_step<F: Real>(
    params: &ModelParams<F>,
    batch: &[(&[u8], &std::collections::BTreeSet<usize>)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    train_mode: bool,
) -> Result<(F, GradStore<F>, Vec<RolloutTrace>)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty mlm batch".into()));
    }
    let mcfg = &params.config;
    let seq_len = mcfg.seq_len;
    let b_total = batch.len();

    let mut seqs: Vec<MaskedSequence> = Vec::with_capacity(b_total);
    let mut times: Vec<f64> = Vec::with_capacity(b_total);
    for (x0, clues) in batch {
        if x0.len() != seq_len {
            return Err(Error::Input(format!(
                "sequence of length {} against seq_len {seq_len}",
                x0.len()
            )));
        }
        let t = rng.gen_range(cfg.mlm_t_min..1.0);
        seqs.push(mask_uniform(x0, t, clues, rng)?);
        times.push(t);
    }

    let mut tokens = Array2::<u8>::zeros((b_total, seq_len));
    for (b, seq) in seqs.iter().enumerate() {
        for (j, &t) in seq.tokens.iter().enumerate() {
            tokens[[b, j]] = t;
        }
    }
    // A masked-LM step is a one-step episode, so the relay input is the
    // zero state when the architecture carries one at all.
    let relay_in: Option<Array2<F>> = mcfg
        .relay_enabled
        .then(|| Array2::zeros((b_total * seq_len, mcfg.d_model)));
    let (out, cache) = forward(
        params,
        tokens.view(),
        relay_in.as_ref(),
        train_mode,
        Some(rng),
        true,
    )?;
    let cache = cache.expect("cache requested");

    let mut loss = F::zero();
    let mut dlogits = Array2::<F>::zeros((b_total * seq_len, mcfg.vocab_size));
    let mut traces = Vec::with_capacity(b_total);
    for (b, ((x0, _), seq)) in batch.iter().zip(&seqs).enumerate() {
        let rows = b * seq_len..(b + 1) * seq_len;
        let block = out.logits.slice(s![rows.clone(), ..]);
        let t = times[b];
        let m = seq.masked.len();
        let mut step_loss = F::zero();
        if m > 0 {
            let (ce_sum, ce_grad) = ce_masked(block, x0, &seq.masked)?;
            let weight = F::from_f64(1.0 / (t * m as f64));
            step_loss = ce_sum * weight;
            let scale = weight / F::from_f64(b_total as f64);
            dlogits
                .slice_mut(s![rows, ..])
                .assign(&(&ce_grad * scale));
        }
        loss += step_loss;
        traces.push(RolloutTrace {
            x0: x0.to_vec(),
            start_tokens: seq.tokens.clone(),
            clues: seq.clues.clone(),
            steps: vec![TraceStep {
                masked: seq.masked.clone(),
                selected: seq.masked.clone(),
                committed: seq.masked.iter().map(|&i| (i, x0[i])).collect(),
                step_loss: step_loss.to_f64(),
            }],
            mlm_t: Some(t),
        });
    }

    let mut grads = zeros_like(params);
    backward(params, &cache, &dlogits, None, false, &mut grads)?;
    Ok((loss / F::from_f64(b_total as f64), grads, traces))
}
