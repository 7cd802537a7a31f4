//! Batched forward pass with the intermediate caches the backward pass
//! needs. Sequences are flattened to one row matrix of `batch * seq_len`
//! positions; attention runs per (sequence, head) block.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Norm, Real};

pub const LN_EPS: f64 = 1e-5;

/// Relay state of one episode: last-layer hidden rows carried across
/// denoising steps, zeroed at episode start.
#[derive(Clone, Debug, PartialEq)]
pub struct RelayState<F> {
    /// seq_len x d_model.
    pub h: Array2<F>,
    /// Forward passes taken this episode.
    pub step_index: usize,
}

impl<F: Real> RelayState<F> {
    pub fn zero(cfg: &ModelConfig) -> RelayState<F> {
        RelayState {
            h: Array2::zeros((cfg.seq_len, cfg.d_model)),
            step_index: 0,
        }
    }
}

pub(crate) struct NormCache<F> {
    /// Normalized rows before the affine map.
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// Applies affine layer normalization row-wise.
pub(crate) fn layer_norm<F: Real>(x: &Array2<F>, norm: &Norm<F>) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let eps = F::from_f64(LN_EPS);
    let df = F::from_f64(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            / df;
        let rstd = F::one() / (var + eps).sqrt();
        inv_std[r] = rstd;
        for c in 0..d {
            let h = (x[[r, c]] - mean) * rstd;
            xhat[[r, c]] = h;
            y[[r, c]] = h * norm.gamma[c] + norm.beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Affine normalization of the relay state, the additive delta injected
/// before layer zero.
pub fn relay_transform<F: Real>(h: &Array2<F>, params: &ModelParams<F>) -> Result<Array2<F>> {
    let norm = params
        .relay_norm
        .as_ref()
        .ok_or_else(|| Error::Config("relay transform requires relay_enabled".into()))?;
    Ok(layer_norm(h, norm).0)
}

/// Cosine/sine tables for interleaved-pair rotation at base 10,000.
pub(crate) struct RopeTables<F> {
    /// seq_len x rotary_width/2 each.
    pub cos: Array2<F>,
    pub sin: Array2<F>,
}

pub(crate) fn rope_tables<F: Real>(seq_len: usize, rotary_width: usize) -> RopeTables<F> {
    let half = rotary_width / 2;
    let mut cos = Array2::zeros((seq_len, half));
    let mut sin = Array2::zeros((seq_len, half));
    for pos in 0..seq_len {
        for j in 0..half {
            let freq = 10_000f64.powf(-((2 * j) as f64) / rotary_width as f64);
            let angle = pos as f64 * freq;
            cos[[pos, j]] = F::from_f64(angle.cos());
            sin[[pos, j]] = F::from_f64(angle.sin());
        }
    }
    RopeTables { cos, sin }
}

/// Rotates the first `rotary_width` dims of every head in place. Rows are
/// flattened (batch, position); `invert` applies the transpose rotation.
pub(crate) fn apply_rope<F: Real>(
    x: &mut Array2<F>,
    cfg: &ModelConfig,
    tables: &RopeTables<F>,
    invert: bool,
) {
    let half = cfg.rotary_width / 2;
    if half == 0 {
        return;
    }
    let n = x.nrows();
    for r in 0..n {
        let pos = r % cfg.seq_len;
        for h in 0..cfg.n_heads {
            let base = h * cfg.head_dim;
            for j in 0..half {
                let (a, b) = (base + 2 * j, base + 2 * j + 1);
                let (c, mut sn) = (tables.cos[[pos, j]], tables.sin[[pos, j]]);
                if invert {
                    sn = -sn;
                }
                let (xa, xb) = (x[[r, a]], x[[r, b]]);
                x[[r, a]] = xa * c - xb * sn;
                x[[r, b]] = xa * sn + xb * c;
            }
        }
    }
}

/// Inverted-dropout scale matrix: entries 0 with probability p, else
/// 1/(1-p). Draws row-major.
fn dropout_scale<F: Real>(rng: &mut ChaCha8Rng, p: f64, rows: usize, cols: usize) -> Array2<F> {
    let keep = F::from_f64(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}

pub(crate) struct LayerCache<F> {
    pub norm1: NormCache<F>,
    /// Post-rotation projections, batch*seq rows.
    pub q_rot: Array2<F>,
    pub k_rot: Array2<F>,
    pub v: Array2<F>,
    /// Softmax outputs per (sequence, head), before attention dropout.
    pub probs: Vec<Array2<F>>,
    pub attn_drop: Option<Vec<Array2<F>>>,
    /// Heads concatenated, before the output projection.
    pub concat: Array2<F>,
    pub proj_drop: Option<Array2<F>>,
    pub norm2: NormCache<F>,
    /// MLP pre-activation.
    pub z1: Array2<F>,
    pub mlp_drop: Option<Array2<F>>,
}

pub(crate) struct RelayCache<F> {
    pub norm: NormCache<F>,
}

pub struct ForwardCache<F> {
    pub(crate) tokens: Array2<u8>,
    pub(crate) relay: Option<RelayCache<F>>,
    pub(crate) layers: Vec<LayerCache<F>>,
    pub(crate) final_norm: NormCache<F>,
    pub(crate) h_next: Array2<F>,
}

pub struct ForwardOutput<F> {
    /// batch*seq_len x d_model, the final-norm output carried as relay.
    pub h_next: Array2<F>,
    /// batch*seq_len x vocab_size.
    pub logits: Array2<F>,
}

fn check_finite<F: Real>(x: &Array2<F>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// One full pass: embed, add the normalized relay state, run every
/// pre-norm block with rotary attention and ReLU MLP, final-norm, project
/// to logits. Dropout is active only in train mode and draws from `rng`.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    tokens: ArrayView2<'_, u8>,
    relay_in: Option<&Array2<F>>,
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    want_cache: bool,
) -> Result<(ForwardOutput<F>, Option<ForwardCache<F>>)> {
    let cfg = &params.config;
    let (batch, seq) = tokens.dim();
    if seq != cfg.seq_len {
        return Err(Error::Input(format!(
            "sequence length {seq} does not match config seq_len {}",
            cfg.seq_len
        )));
    }
    let n = batch * seq;
    let d = cfg.d_model;
    if let Some(h) = relay_in {
        if !cfg.relay_enabled {
            return Err(Error::Config("relay input passed but relay_enabled is false".into()));
        }
        if h.dim() != (n, d) {
            return Err(Error::Input(format!(
                "relay input shape {:?} does not match ({n}, {d})",
                h.dim()
            )));
        }
    }
    let use_dropout = train_mode && cfg.dropout > 0.0;
    if use_dropout && rng.is_none() {
        return Err(Error::Config("train-mode dropout needs an rng".into()));
    }

    // Embedding lookup.
    let mut x = Array2::<F>::zeros((n, d));
    for (row, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {tok} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        x.row_mut(row).assign(&params.embedding.row(tok as usize));
    }

    // Relay injection.
    let relay_cache = match relay_in {
        Some(h) => {
            let norm = params.relay_norm.as_ref().expect("checked above");
            let (delta, nc) = layer_norm(h, norm);
            x += &delta;
            Some(RelayCache { norm: nc })
        }
        None => None,
    };

    let tables = rope_tables::<F>(cfg.seq_len, cfg.rotary_width);
    let scale = F::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let hd = cfg.head_dim;

    let mut layer_caches = Vec::new();

    for (li, layer) in params.layers.iter().enumerate() {
        let (y1, norm1) = layer_norm(&x, &layer.norm1);
        let mut q = y1.dot(&layer.wq);
        let mut k = y1.dot(&layer.wk);
        let v = y1.dot(&layer.wv);
        apply_rope(&mut q, cfg, &tables, false);
        apply_rope(&mut k, cfg, &tables, false);

        let mut concat = Array2::<F>::zeros((n, d));
        let mut probs_cache = Vec::new();
        let mut attn_drop_cache = Vec::new();
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..cfg.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let qb = q.slice(s![rows.clone(), cols.clone()]);
                let kb = k.slice(s![rows.clone(), cols.clone()]);
                let vb = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qb.dot(&kb.t());
                scores *= scale;
                // Row-wise softmax.
                let mut probs = scores;
                for mut row in probs.rows_mut() {
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut sum = F::zero();
                    for p in row.iter_mut() {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    row.mapv_inplace(|p| p / sum);
                }
                let dropped = if use_dropout {
                    let dm = dropout_scale::<F>(
                        rng.as_deref_mut().expect("rng checked"),
                        cfg.dropout,
                        seq,
                        seq,
                    );
                    let dp = &probs * &dm;
                    attn_drop_cache.push(dm);
                    dp
                } else {
                    probs.clone()
                };
                concat
                    .slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&dropped.dot(&vb));
                if want_cache {
                    probs_cache.push(probs);
                }
            }
        }

        let mut attn_out = concat.dot(&layer.wo);
        let proj_drop = if use_dropout {
            let dm = dropout_scale::<F>(rng.as_deref_mut().expect("rng checked"), cfg.dropout, n, d);
            attn_out *= &dm;
            Some(dm)
        } else {
            None
        };
        let x_mid = &x + &attn_out;

        let (y2, norm2) = layer_norm(&x_mid, &layer.norm2);
        let mut z1 = y2.dot(&layer.w1);
        z1 += &layer.b1;
        let a1 = z1.mapv(|z| z.max(F::zero()));
        let mut mlp_out = a1.dot(&layer.w2);
        mlp_out += &layer.b2;
        let mlp_drop = if use_dropout {
            let dm = dropout_scale::<F>(rng.as_deref_mut().expect("rng checked"), cfg.dropout, n, d);
            mlp_out *= &dm;
            Some(dm)
        } else {
            None
        };
        let x_out = &x_mid + &mlp_out;
        check_finite(&x_out, &format!("layer {li} output"))?;

        if want_cache {
            layer_caches.push(LayerCache {
                norm1,
                q_rot: q,
                k_rot: k,
                v,
                probs: probs_cache,
                attn_drop: use_dropout.then_some(attn_drop_cache),
                concat,
                proj_drop,
                norm2,
                z1,
                mlp_drop,
            });
        }
        x = x_out;
    }

    let (h_next, final_norm) = layer_norm(&x, &params.final_norm);
    let logits = match &params.unembedding {
        Some(u) => h_next.dot(u),
        None => h_next.dot(&params.embedding.t()),
    };
    check_finite(&logits, "logits")?;

    let output = ForwardOutput { h_next: h_next.clone(), logits };
    let cache = want_cache.then(|| ForwardCache {
        tokens: tokens.to_owned(),
        relay: relay_cache,
        layers: layer_caches,
        final_norm,
        h_next,
    });
    Ok((output, cache))
}

/// Splits flattened hidden rows back into one matrix per sequence.
pub fn split_rows<F: Real>(x: &Array2<F>, batch: usize) -> Vec<Array2<F>> {
    let seq = x.nrows() / batch;
    (0..batch)
        .map(|b| x.slice(s![b * seq..(b + 1) * seq, ..]).to_owned())
        .collect()
}

/// Stacks per-sequence matrices into the flattened row layout.
pub fn stack_rows<F: Real>(parts: &[ArrayView2<'_, F>]) -> Array2<F> {
    let views: Vec<ArrayView2<'_, F>> = parts.to_vec();
    ndarray::concatenate(Axis(0), &views).expect("uniform widths")
}
