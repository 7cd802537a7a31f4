//! Frozen-rollout replay. A recorded trace pins every discrete decision
//! (mask draws, selections, commits), making the window loss a smooth
//! deterministic function of the parameters; gradient checks
//! finite-difference that function.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    ce_masked, confidence_and_value, mask_uniform, select_positions, MaskedSequence, MASK_TOKEN,
};
use crate::error::{Error, Result};
use crate::model::{backward, forward, zeros_like, ForwardCache, GradStore, ModelParams, Real};
use crate::training::{sample_threshold, Objective, RolloutTrace, TraceStep, TrainConfig};

/// Runs one live episode (eval mode, single sequence) and records it as
/// a frozen trace. For the masked-LM objective the "rollout" is a single
/// masking draw.
pub fn record_trace<F: Real>(
    params: &ModelParams<F>,
    x0: &[u8],
    clues: &BTreeSet<usize>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutTrace> {
    if cfg.objective == Objective::Mlm {
        let t = rng.gen_range(cfg.mlm_t_min..1.0);
        let seq = mask_uniform(x0, t, clues, rng)?;
        let committed: Vec<(usize, u8)> = seq.masked.iter().map(|&i| (i, x0[i])).collect();
        return Ok(RolloutTrace {
            x0: x0.to_vec(),
            start_tokens: seq.tokens.clone(),
            clues: clues.clone(),
            steps: vec![TraceStep {
                masked: seq.masked.clone(),
                selected: seq.masked,
                committed,
                step_loss: 0.0,
            }],
            mlm_t: Some(t),
        });
    }

    let uses_relay = cfg.objective.uses_relay();
    let mcfg = &params.config;
    let mut seq = MaskedSequence::fully_masked(x0, clues);
    let start_tokens = seq.tokens.clone();
    let mut h: Option<Array2<F>> = uses_relay.then(|| Array2::zeros((mcfg.seq_len, mcfg.d_model)));
    let mut steps = Vec::new();
    for _k in 0..cfg.k {
        if seq.masked.is_empty() {
            break;
        }
        let tokens = ArrayView2::from_shape((1, mcfg.seq_len), &seq.tokens)
            .map_err(|e| Error::Input(format!("token shape: {e}")))?;
        let (out, _) = forward(params, tokens, h.as_ref(), false, None, false)?;
        let (ce_sum, _) = ce_masked(out.logits.view(), x0, &seq.masked)?;
        let step_loss = (ce_sum / F::from_f64(seq.masked.len() as f64)).to_f64();
        let mut confidences = std::collections::BTreeMap::new();
        for &i in &seq.masked {
            confidences.insert(i, confidence_and_value(out.logits.row(i)).0);
        }
        let tau = sample_threshold(rng, cfg);
        let decision = select_positions(&confidences, tau)?;
        let committed: Vec<(usize, u8)> =
            decision.selected.iter().map(|&i| (i, x0[i])).collect();
        steps.push(TraceStep {
            masked: seq.masked.clone(),
            selected: decision.selected.clone(),
            committed,
            step_loss,
        });
        seq = crate::diffusion::commit(&seq, &decision.selected, x0)?;
        if uses_relay {
            h = Some(out.h_next);
        }
    }
    Ok(RolloutTrace {
        x0: x0.to_vec(),
        start_tokens,
        clues: clues.clone(),
        steps,
        mlm_t: None,
    })
}

struct ReplayRun<F> {
    loss: F,
    /// Per step: forward cache (when collected) and the scaled loss
    /// gradient at the logits.
    steps: Vec<(Option<ForwardCache<F>>, Array2<F>)>,
    h_inputs: Vec<Array2<F>>,
    min_relu_margin: f64,
}

fn run_replay<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
    objective: Objective,
    frozen_h: Option<&[Array2<F>]>,
    want_caches: bool,
) -> Result<ReplayRun<F>> {
    let mcfg = &params.config;
    if trace.start_tokens.len() != mcfg.seq_len {
        return Err(Error::Input(format!(
            "trace length {} against seq_len {}",
            trace.start_tokens.len(),
            mcfg.seq_len
        )));
    }
    let is_mlm = objective == Objective::Mlm;
    if is_mlm && (trace.steps.len() != 1 || trace.mlm_t.is_none()) {
        return Err(Error::Precondition(
            "masked-LM replay needs a single-step trace with a recorded t".into(),
        ));
    }
    let uses_relay = if is_mlm {
        // A masked-LM step injects the zero relay state when the
        // architecture has one.
        mcfg.relay_enabled
    } else {
        objective.uses_relay()
    };
    if let Some(fh) = frozen_h {
        if fh.len() != trace.steps.len() {
            return Err(Error::Precondition(format!(
                "{} frozen relay inputs for {} steps",
                fh.len(),
                trace.steps.len()
            )));
        }
    }

    let mut tokens = trace.start_tokens.clone();
    let mut h: Array2<F> = Array2::zeros((mcfg.seq_len, mcfg.d_model));
    let mut loss = F::zero();
    let mut steps_out = Vec::with_capacity(trace.steps.len());
    let mut h_inputs = Vec::new();
    let mut margin = f64::INFINITY;

    for (k, step) in trace.steps.iter().enumerate() {
        // The tokens derived from the commit history must agree with the
        // recorded masked set.
        for (i, &t) in tokens.iter().enumerate() {
            if (t == MASK_TOKEN) != step.masked.contains(&i) {
                return Err(Error::Invariant(format!(
                    "trace step {k} masked set disagrees with its commit history at {i}"
                )));
            }
        }
        let relay_in: Option<&Array2<F>> = if uses_relay {
            if let Some(fh) = frozen_h {
                Some(&fh[k])
            } else {
                h_inputs.push(h.clone());
                Some(h_inputs.last().expect("just pushed"))
            }
        } else {
            None
        };
        let view = ArrayView2::from_shape((1, mcfg.seq_len), &tokens)
            .map_err(|e| Error::Input(format!("token shape: {e}")))?;
        let (out, cache) = forward(params, view, relay_in, false, None, want_caches)?;
        if let Some(c) = &cache {
            for layer in &c.layers {
                for &z in layer.z1.iter() {
                    margin = margin.min(z.to_f64().abs());
                }
            }
        }
        let (ce_sum, ce_grad) = ce_masked(out.logits.view(), &trace.x0, &step.masked)?;
        let m = step.masked.len() as f64;
        let weight = if is_mlm {
            1.0 / (trace.mlm_t.expect("checked") * m)
        } else {
            1.0 / m
        };
        loss += ce_sum * F::from_f64(weight);
        let dlogits = &ce_grad * F::from_f64(weight);
        steps_out.push((cache, dlogits));

        for &(i, v) in &step.committed {
            tokens[i] = v;
        }
        if uses_relay && frozen_h.is_none() {
            h = out.h_next;
        }
    }
    Ok(ReplayRun { loss, steps: steps_out, h_inputs, min_relu_margin: margin })
}

/// Window loss of a frozen trace at the given parameters. With
/// `frozen_h` the relay inputs are treated as constants (the severed
/// gradient semantics); otherwise they are recomputed, coupling the
/// steps.
pub fn replay_loss<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
    objective: Objective,
    frozen_h: Option<&[Array2<F>]>,
) -> Result<F> {
    Ok(run_replay(params, trace, objective, frozen_h, false)?.loss)
}

/// The relay inputs realized at these parameters, one per step (index 0
/// is the zero state). Empty for objectives without a relay.
pub fn replay_relay_inputs<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
) -> Result<Vec<Array2<F>>> {
    Ok(run_replay(params, trace, Objective::Relay, None, false)?.h_inputs)
}

/// Smallest |MLP pre-activation| seen while replaying; a wide margin
/// keeps finite differences away from the ReLU kink.
pub fn replay_relu_margin<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
    objective: Objective,
) -> Result<f64> {
    Ok(run_replay(params, trace, objective, None, true)?.min_relu_margin)
}

/// Loss and analytic parameter gradients of a frozen trace under the
/// given objective's gradient-flow rules.
pub fn replay_grads<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
    objective: Objective,
) -> Result<(F, GradStore<F>)> {
    let run = run_replay(params, trace, objective, None, true)?;
    let mut grads = zeros_like(params);
    let chain = objective.bptt_through_relay();
    let mut d_h_pending: Option<Array2<F>> = None;
    for (k, (cache, dlogits)) in run.steps.iter().enumerate().rev() {
        let cache = cache.as_ref().expect("caches collected");
        let want = chain && k > 0;
        let d_relay = backward(
            params,
            cache,
            dlogits,
            d_h_pending.as_ref(),
            want,
            &mut grads,
        )?;
        d_h_pending = d_relay;
    }
    Ok((run.loss, grads))
}

/// The gradient component flowing only through the inter-step relay
/// hand-off of a two-step window: the second step's cross-entropy pushed
/// back through h into the first forward, with the direct terms zeroed.
pub fn bptt_term<F: Real>(
    params: &ModelParams<F>,
    trace: &RolloutTrace,
) -> Result<GradStore<F>> {
    let run = run_replay(params, trace, Objective::Relay, None, true)?;
    if run.steps.len() != 2 {
        return Err(Error::Config(format!(
            "decomposition is assembled for two-step windows, trace has {}",
            run.steps.len()
        )));
    }
    let cache1 = run.steps[1].0.as_ref().expect("caches collected");
    let cache0 = run.steps[0].0.as_ref().expect("caches collected");

    let mut scratch = zeros_like(params);
    let d_relay = backward(params, cache1, &run.steps[1].1, None, true, &mut scratch)?
        .expect("relay-input gradient requested");

    let mut term = zeros_like(params);
    let zero_dlogits = Array2::zeros(run.steps[0].1.dim());
    backward(params, cache0, &zero_dlogits, Some(&d_relay), false, &mut term)?;
    Ok(term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::training::{rollout_window, EpisodeState};
    use rand::SeedableRng;

    fn tiny16(objective: Objective) -> ModelConfig {
        ModelConfig {
            seq_len: 16,
            relay_enabled: objective.uses_relay(),
            ..ModelConfig::tiny()
        }
    }

    fn synth_episode(seed: u64) -> (Vec<u8>, BTreeSet<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<u8> = (0..16).map(|_| rng.gen_range(1..=9u8)).collect();
        let clues: BTreeSet<usize> = (0..16).filter(|_| rng.gen_bool(0.2)).collect();
        (x0, clues)
    }

    fn trace_for(objective: Objective, k: usize, seed: u64) -> (ModelConfig, RolloutTrace) {
        let mcfg = tiny16(objective);
        let params = build_model::<f64>(&mcfg, seed).unwrap();
        let (x0, clues) = synth_episode(seed + 100);
        let cfg = TrainConfig {
            objective,
            k,
            threshold_std: 0.05,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let trace = record_trace(&params, &x0, &clues, &cfg, &mut rng).unwrap();
        (mcfg, trace)
    }

    #[test]
    fn recorded_trace_is_consistent_and_replays_to_its_loss() {
        let (mcfg, trace) = trace_for(Objective::Relay, 2, 31);
        trace.validate().unwrap();
        assert!(!trace.steps.is_empty() && trace.steps.len() <= 2);
        let params = build_model::<f64>(&mcfg, 31).unwrap();
        let recorded: f64 = trace.steps.iter().map(|s| s.step_loss).sum();
        let replayed = replay_loss(&params, &trace, Objective::Relay, None).unwrap();
        assert!((replayed - recorded).abs() < 1e-9, "{replayed} vs {recorded}");
    }

    #[test]
    fn replay_matches_live_window_gradients() {
        // The trace produced by a live window replays to the exact same
        // loss and gradients (dropout 0, single episode).
        for objective in [Objective::Rollout, Objective::RelaySg, Objective::Relay] {
            let mcfg = tiny16(objective);
            let params = build_model::<f64>(&mcfg, 37).unwrap();
            let (x0, clues) = synth_episode(38);
            let cfg = TrainConfig {
                objective,
                k: 2,
                threshold_std: 0.05,
                ..TrainConfig::default()
            };
            let mut episodes =
                vec![EpisodeState::<f64>::start(x0, &clues, mcfg.d_model)];
            let mut rng = ChaCha8Rng::seed_from_u64(39);
            let live = rollout_window(&params, &mut episodes, &cfg, &mut rng, true).unwrap();
            let (loss, grads) = replay_grads(&params, &live.traces[0], objective).unwrap();
            assert!(
                (loss - live.loss).abs() < 1e-12,
                "{objective}: {loss} vs {}",
                live.loss
            );
            for (a, b) in grads.arrays().iter().zip(live.grads.arrays().iter()) {
                for (x, y) in a.view().iter().zip(b.view().iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frozen_relay_inputs_reproduce_the_base_loss() {
        let (mcfg, trace) = trace_for(Objective::Relay, 2, 41);
        let params = build_model::<f64>(&mcfg, 41).unwrap();
        let h = replay_relay_inputs(&params, &trace).unwrap();
        assert_eq!(h.len(), trace.steps.len());
        assert!(h[0].iter().all(|&v| v == 0.0), "first input is the zero state");
        let coupled = replay_loss(&params, &trace, Objective::Relay, None).unwrap();
        let frozen = replay_loss(&params, &trace, Objective::RelaySg, Some(&h)).unwrap();
        assert_eq!(coupled, frozen);
    }

    #[test]
    fn decomposition_matches_gradient_difference() {
        let (mcfg, trace) = trace_for(Objective::Relay, 2, 43);
        assert_eq!(trace.steps.len(), 2, "need a full two-step window");
        let params = build_model::<f64>(&mcfg, 43).unwrap();
        let (_, g_relay) = replay_grads(&params, &trace, Objective::Relay).unwrap();
        let (_, g_sg) = replay_grads(&params, &trace, Objective::RelaySg).unwrap();
        let term = bptt_term(&params, &trace).unwrap();
        let mut term_norm = 0.0f64;
        for ((a, b), t) in g_relay
            .arrays()
            .iter()
            .zip(g_sg.arrays().iter())
            .zip(term.arrays().iter())
        {
            for ((x, y), z) in a.view().iter().zip(b.view().iter()).zip(t.view().iter()) {
                assert!(
                    ((x - y) - z).abs() < 1e-12,
                    "difference {} vs term {z}",
                    x - y
                );
                term_norm += z * z;
            }
        }
        assert!(term_norm > 0.0, "the relay path must carry some gradient");
    }

    #[test]
    fn mlm_trace_replays() {
        let (mcfg, trace) = trace_for(Objective::Mlm, 1, 47);
        assert!(trace.mlm_t.is_some());
        let params = build_model::<f64>(&mcfg, 47).unwrap();
        let (loss, grads) = replay_grads(&params, &trace, Objective::Mlm).unwrap();
        assert!(loss > 0.0);
        assert!(grads.embedding.iter().any(|&g| g != 0.0));
        let again = replay_loss(&params, &trace, Objective::Mlm, None).unwrap();
        assert_eq!(loss, again);
    }

    #[test]
    fn inconsistent_trace_is_rejected() {
        let (mcfg, mut trace) = trace_for(Objective::Relay, 2, 53);
        let params = build_model::<f64>(&mcfg, 53).unwrap();
        // Corrupt the second step's masked set.
        if trace.steps.len() == 2 {
            let extra = (0..16)
                .find(|i| !trace.steps[1].masked.contains(i))
                .unwrap();
            trace.steps[1].masked.insert(extra);
            assert!(replay_loss(&params, &trace, Objective::Relay, None).is_err());
        }
    }

    #[test]
    fn relu_margin_is_positive_on_tiny_models() {
        let (mcfg, trace) = trace_for(Objective::Relay, 2, 59);
        let params = build_model::<f64>(&mcfg, 59).unwrap();
        let margin = replay_relu_margin(&params, &trace, Objective::Relay).unwrap();
        assert!(margin > 0.0 && margin.is_finite());
    }
}
