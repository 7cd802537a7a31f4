//! The training loop: episode pool upkeep, optimizer steps, the metrics
//! log, periodic validation sweeps, and bit-exact checkpoint/resume.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{board_to_tokens, MaskedSequence, ModelStepper};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_set, sweep, ReportFormat, Slice};
use crate::model::checkpoint::{load_model, save_model, Container, Entry};
use crate::model::{
    array_names, build_model, zeros_like, GradStore, ModelConfig, ModelParams, Real,
};
use crate::sudoku::dataset::PuzzleRecord;
use crate::training::{
    clip_global_norm, lr_at, mlm_step, rollout_window, AdamW, EpisodeState, Objective,
    TrainConfig,
};

pub const METRICS_HEADER: &str =
    "step,objective,loss,lr,grad_norm,episodes_finished,val_exact_match@0.15,val_mean_nfe@0.15";

/// Everything one optimizer step reads and writes.
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub opt: AdamW<f32>,
    pub episodes: Vec<EpisodeState<f32>>,
    /// Completed optimizer steps.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Episodes that completed during this step (batch size for the
    /// single-pass objective, where every step retires its batch).
    pub episodes_finished: usize,
}

impl TrainState {
    /// Fresh state: parameters from the model seed, training randomness
    /// from a decorrelated stream of the same seed.
    pub fn fresh(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
        let params = build_model::<f32>(model_cfg, cfg.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
        Ok(TrainState {
            opt: AdamW::new(&params),
            params,
            episodes: Vec::new(),
            step: 0,
            rng,
        })
    }
}

fn draw_episode(
    rng: &mut ChaCha8Rng,
    data: &[PuzzleRecord],
    d_model: usize,
) -> Result<EpisodeState<f32>> {
    for _ in 0..100 {
        let r = &data[rng.gen_range(0..data.len())];
        let clues: BTreeSet<usize> = r.clue_positions.iter().copied().collect();
        let ep = EpisodeState::start(board_to_tokens(&r.solution), &clues, d_model);
        if !ep.finished {
            return Ok(ep);
        }
    }
    Err(Error::Input(
        "dataset appears to contain only completed puzzles; nothing to unmask".into(),
    ))
}

/// Re-seeds finished episodes in slot order and grows the pool to the
/// batch size. Draw order is fixed so resumed runs replay identically.
fn fill_pool(state: &mut TrainState, cfg: &TrainConfig, data: &[PuzzleRecord]) -> Result<()> {
    let d_model = state.params.config.d_model;
    for b in 0..state.episodes.len() {
        if state.episodes[b].finished {
            state.episodes[b] = draw_episode(&mut state.rng, data, d_model)?;
        }
    }
    while state.episodes.len() < cfg.batch_size {
        let ep = draw_episode(&mut state.rng, data, d_model)?;
        state.episodes.push(ep);
    }
    Ok(())
}

/// One optimizer step: pool upkeep, a window (or masked-LM pass), clip,
/// AdamW with warmup.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[PuzzleRecord],
) -> Result<StepMetrics> {
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let (loss, mut grads, episodes_finished) = if cfg.objective == Objective::Mlm {
        let mut batch: Vec<(Vec<u8>, BTreeSet<usize>)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let r = &data[state.rng.gen_range(0..data.len())];
            batch.push((
                board_to_tokens(&r.solution),
                r.clue_positions.iter().copied().collect(),
            ));
        }
        let refs: Vec<(&[u8], &BTreeSet<usize>)> =
            batch.iter().map(|(x, c)| (x.as_slice(), c)).collect();
        let (loss, grads, _) = mlm_step(&state.params, &refs, cfg, &mut state.rng, true)?;
        (loss, grads, cfg.batch_size)
    } else {
        fill_pool(state, cfg, data)?;
        let out = rollout_window(&state.params, &mut state.episodes, cfg, &mut state.rng, true)?;
        let finished = state.episodes.iter().filter(|e| e.finished).count();
        (out.loss, out.grads, finished)
    };

    if !loss.is_finite() {
        let sizes: Vec<usize> = state.episodes.iter().map(|e| e.seq.masked.len()).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss at step {} under {}; masked sizes of the pool: {sizes:?}",
            state.step, cfg.objective
        )));
    }

    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = lr_at(state.step, cfg.lr, cfg.warmup_steps);
    state.opt.update(&mut state.params, &grads, lr, cfg.weight_decay)?;
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss: loss.to_f64(),
        lr,
        grad_norm,
        episodes_finished,
    })
}

#[derive(Serialize, Deserialize)]
struct EpisodeMeta {
    x0: Vec<u8>,
    tokens: Vec<u8>,
    masked: Vec<usize>,
    clues: Vec<usize>,
    finished: bool,
}

fn store_entries(prefix: &str, cfg: &ModelConfig, store: &GradStore<f32>) -> Vec<Entry> {
    array_names(cfg)
        .into_iter()
        .zip(store.arrays())
        .map(|(name, a)| {
            let view = a.view();
            Entry {
                name: format!("{prefix}.{name}"),
                shape: view.shape().to_vec(),
                data: view.iter().copied().collect(),
            }
        })
        .collect()
}

fn load_store(
    container: &Container,
    prefix: &str,
    params: &ModelParams<f32>,
) -> Result<GradStore<f32>> {
    let mut store = zeros_like(params);
    let names = array_names(&params.config);
    let mut arrays = store.arrays_mut();
    for (name, slot) in names.iter().zip(arrays.iter_mut()) {
        let full = format!("{prefix}.{name}");
        let entry = container
            .entries
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer array {full}")))?;
        let mut view = slot.view_mut();
        if view.len() != entry.data.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer array {full} has {} values, expected {}",
                entry.data.len(),
                view.len()
            )));
        }
        for (dst, &src) in view.iter_mut().zip(entry.data.iter()) {
            *dst = src;
        }
    }
    drop(arrays);
    Ok(store)
}

/// Canonical checkpoint path for a step count.
pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("ckpt-{step:06}.rmdm"))
}

fn save_training_checkpoint(
    path: &Path,
    state: &TrainState,
    cfg: &TrainConfig,
) -> Result<()> {
    let episodes_meta: Vec<EpisodeMeta> = state
        .episodes
        .iter()
        .map(|e| EpisodeMeta {
            x0: e.x0.clone(),
            tokens: e.seq.tokens.clone(),
            masked: e.seq.masked.iter().copied().collect(),
            clues: e.seq.clues.iter().copied().collect(),
            finished: e.finished,
        })
        .collect();
    let meta = json!({
        "kind": "training",
        "train_config": cfg,
        "step": state.step,
        "adam_t": state.opt.t,
        "rng": &state.rng,
        "episodes": episodes_meta,
    });
    let mcfg = &state.params.config;
    let mut extra = store_entries("adam.m", mcfg, &state.opt.m);
    extra.extend(store_entries("adam.v", mcfg, &state.opt.v));
    if cfg.objective.uses_relay() {
        for (b, e) in state.episodes.iter().enumerate() {
            extra.push(Entry {
                name: format!("episode{b}.h"),
                shape: e.h.shape().to_vec(),
                data: e.h.iter().copied().collect(),
            });
        }
    }
    save_model(path, &state.params, meta, extra)
}

/// Restores a full training state. The stored train config must match
/// the requested one except for total_steps, which may grow on resume.
pub fn resume_training_state(
    path: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let (params, container) = load_model(path)?;
    if &container.config != model_cfg {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match the requested one",
            container.config
        )));
    }
    let meta = &container.meta;
    if meta.get("kind").and_then(|v| v.as_str()) != Some("training") {
        return Err(Error::Checkpoint(
            "checkpoint has no training state; it cannot seed a resume".into(),
        ));
    }
    let stored_cfg: TrainConfig = serde_json::from_value(
        meta.get("train_config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing train_config".into()))?,
    )?;
    let mut comparable = stored_cfg.clone();
    comparable.total_steps = cfg.total_steps;
    if &comparable != cfg {
        return Err(Error::Config(
            "resume config differs from the checkpoint's (only total_steps may change)".into(),
        ));
    }
    let step = meta
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing step".into()))? as usize;
    let adam_t = meta
        .get("adam_t")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("missing adam_t".into()))? as usize;
    let rng: ChaCha8Rng = serde_json::from_value(
        meta.get("rng")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing rng state".into()))?,
    )?;
    let episodes_meta: Vec<EpisodeMeta> = serde_json::from_value(
        meta.get("episodes")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing episodes".into()))?,
    )?;

    let m = load_store(&container, "adam.m", &params)?;
    let v = load_store(&container, "adam.v", &params)?;

    let d_model = params.config.d_model;
    let seq_len = params.config.seq_len;
    let mut episodes = Vec::with_capacity(episodes_meta.len());
    for (b, em) in episodes_meta.into_iter().enumerate() {
        let seq = MaskedSequence {
            tokens: em.tokens,
            masked: em.masked.into_iter().collect(),
            clues: em.clues.into_iter().collect(),
        };
        seq.validate()?;
        let h = if cfg.objective.uses_relay() {
            let name = format!("episode{b}.h");
            let entry = container
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
            if entry.shape != [seq_len, d_model] {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}", entry.shape)));
            }
            Array2::from_shape_vec((seq_len, d_model), entry.data.clone())
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?
        } else {
            Array2::zeros((seq_len, d_model))
        };
        episodes.push(EpisodeState { x0: em.x0, seq, h, finished: em.finished });
    }

    Ok(TrainState {
        params,
        opt: AdamW { m, v, t: adam_t },
        episodes,
        step,
        rng,
    })
}

fn metrics_row(m: &StepMetrics, objective: Objective, val: Option<(f64, f64)>) -> String {
    let (ve, vn) = match val {
        Some((e, n)) => (format!("{e:.6}"), format!("{n:.6}")),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{},{:.6},{:.6},{:.6},{},{},{}",
        m.step, objective, m.loss, m.lr, m.grad_norm, m.episodes_finished, ve, vn
    )
}

/// Runs `total_steps` optimizer steps (possibly resuming mid-run),
/// logging metrics, validating and checkpointing at the configured
/// cadence, and returning the final checkpoint path.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[PuzzleRecord],
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<PathBuf> {
    model_cfg.validate()?;
    cfg.validate()?;
    if cfg.objective.uses_relay() != model_cfg.relay_enabled {
        return Err(Error::Config(format!(
            "objective {} against relay_enabled = {}",
            cfg.objective, model_cfg.relay_enabled
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptySet);
    }
    let use_val = cfg.val_every > 0 && cfg.val_n > 0;
    if use_val && data.len() <= cfg.val_n {
        return Err(Error::Config(format!(
            "dataset of {} records cannot hold out val_n = {}",
            data.len(),
            cfg.val_n
        )));
    }
    let (train_data, val_data) = if use_val {
        data.split_at(data.len() - cfg.val_n)
    } else {
        (data, &[][..])
    };

    fs::create_dir_all(out_dir)?;
    let mut state = match resume_from {
        Some(path) => resume_training_state(path, model_cfg, cfg)?,
        None => {
            let state = TrainState::fresh(model_cfg, cfg)?;
            save_training_checkpoint(&checkpoint_path(out_dir, 0), &state, cfg)?;
            state
        }
    };

    let metrics_path = out_dir.join("metrics.csv");
    let need_header = !metrics_path.exists() || fs::metadata(&metrics_path)?.len() == 0;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if need_header {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }

    while state.step < cfg.total_steps {
        let m = train_step(&mut state, cfg, train_data)?;
        let at_cadence = use_val && m.step % cfg.val_every == 0;
        let val = if at_cadence {
            let make = || ModelStepper::new(&state.params);
            let report = evaluate_set(&make, val_data, 0.15, Slice::Unfiltered)?;
            let table = sweep(
                &make,
                val_data,
                &cfg.val_taus,
                Slice::Unfiltered,
                cfg.objective,
                model_cfg.tie_embeddings,
                cfg.seed,
            )?;
            emit_report(
                &table,
                &out_dir.join(format!("val_frontier_step{:06}.csv", m.step)),
                ReportFormat::Csv,
            )?;
            Some((report.exact_match, report.mean_nfe))
        } else {
            None
        };
        if m.step % cfg.log_every == 0 || m.step == cfg.total_steps || val.is_some() {
            writeln!(metrics, "{}", metrics_row(&m, cfg.objective, val))?;
        }
        if at_cadence {
            save_training_checkpoint(&checkpoint_path(out_dir, m.step), &state, cfg)?;
        }
    }
    metrics.flush()?;

    let final_path = checkpoint_path(out_dir, state.step);
    save_training_checkpoint(&final_path, &state, cfg)?;
    Ok(final_path)
}
