//! Manual reverse pass mirroring `forward`. Gradients accumulate into a
//! caller-owned store so a K-step window can sum contributions across its
//! inner steps before one optimizer update.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::model::forward::{apply_rope, rope_tables, ForwardCache, NormCache};
use crate::model::{ModelParams, Norm, Real};

/// Gradients use the same layout as the parameters they mirror; in tied
/// mode both embedding and unembedding paths accumulate into `embedding`.
pub type GradStore<F> = ModelParams<F>;

/// A zero-filled gradient store shaped like `params`.
pub fn zeros_like<F: Real>(params: &ModelParams<F>) -> GradStore<F> {
    let mut g = params.clone();
    for mut a in g.arrays_mut() {
        a.view_mut().fill(F::zero());
    }
    g
}

/// Reverse of `layer_norm`: returns dx and accumulates the affine grads.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    norm: &Norm<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let df = F::from_f64(d as f64);
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for c in 0..d {
            let dxhat = dy[[r, c]] * norm.gamma[c];
            m1 += dxhat;
            m2 += dxhat * cache.xhat[[r, c]];
            dgamma[c] += dy[[r, c]] * cache.xhat[[r, c]];
            dbeta[c] += dy[[r, c]];
        }
        m1 /= df;
        m2 /= df;
        let rstd = cache.inv_std[r];
        for c in 0..d {
            let dxhat = dy[[r, c]] * norm.gamma[c];
            dx[[r, c]] = rstd * (dxhat - m1 - cache.xhat[[r, c]] * m2);
        }
    }
    dx
}

/// Backpropagates `d_logits` (and, for BPTT windows, an extra gradient
/// arriving at this step's relay output `h_next`) through one cached
/// forward. Returns the gradient with respect to the relay input when
/// requested; parameter gradients accumulate into `grads`.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    d_logits: &Array2<F>,
    d_h_next_extra: Option<&Array2<F>>,
    want_d_relay_in: bool,
    grads: &mut GradStore<F>,
) -> Result<Option<Array2<F>>> {
    let cfg = &params.config;
    let (batch, seq) = cache.tokens.dim();
    let n = batch * seq;
    let d = cfg.d_model;
    if d_logits.dim() != (n, cfg.vocab_size) {
        return Err(Error::Input(format!(
            "d_logits shape {:?} does not match ({n}, {})",
            d_logits.dim(),
            cfg.vocab_size
        )));
    }
    if want_d_relay_in && cache.relay.is_none() {
        return Err(Error::Config(
            "relay-input gradient requested but the forward had no relay input".into(),
        ));
    }

    // Unembedding.
    let mut d_h_next = match &params.unembedding {
        Some(u) => {
            let du = cache.h_next.t().dot(d_logits);
            *grads.unembedding.as_mut().expect("untied grads") += &du;
            d_logits.dot(&u.t())
        }
        None => {
            grads.embedding += &d_logits.t().dot(&cache.h_next);
            d_logits.dot(&params.embedding)
        }
    };
    if let Some(extra) = d_h_next_extra {
        d_h_next += extra;
    }

    // Final norm.
    let mut dx = layer_norm_backward(
        &d_h_next,
        &cache.final_norm,
        &params.final_norm,
        &mut grads.final_norm.gamma,
        &mut grads.final_norm.beta,
    );

    let tables = rope_tables::<F>(cfg.seq_len, cfg.rotary_width);
    let scale = F::from_f64(1.0 / (cfg.head_dim as f64).sqrt());
    let hd = cfg.head_dim;

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP half: x_out = x_mid + drop(relu(norm2(x_mid) W1 + b1) W2 + b2).
        let d_x_out = dx;
        let d_mlp = match &lc.mlp_drop {
            Some(dm) => &d_x_out * dm,
            None => d_x_out.clone(),
        };
        let a1 = lc.z1.mapv(|z| z.max(F::zero()));
        lg.w2 += &a1.t().dot(&d_mlp);
        lg.b2 += &d_mlp.sum_axis(ndarray::Axis(0));
        let da1 = d_mlp.dot(&layer.w2.t());
        let dz1 = ndarray::Zip::from(&da1)
            .and(&lc.z1)
            .map_collect(|&g, &z| if z > F::zero() { g } else { F::zero() });
        let y2 = {
            let mut y = lc.norm2.xhat.clone();
            for mut row in y.rows_mut() {
                for c in 0..d {
                    row[c] = row[c] * layer.norm2.gamma[c] + layer.norm2.beta[c];
                }
            }
            y
        };
        lg.w1 += &y2.t().dot(&dz1);
        lg.b1 += &dz1.sum_axis(ndarray::Axis(0));
        let dy2 = dz1.dot(&layer.w1.t());
        let mut d_x_mid = layer_norm_backward(
            &dy2,
            &lc.norm2,
            &layer.norm2,
            &mut lg.norm2.gamma,
            &mut lg.norm2.beta,
        );
        d_x_mid += &d_x_out;

        // Attention half: x_mid = x_in + drop(concat Wo).
        let d_proj = match &lc.proj_drop {
            Some(dm) => &d_x_mid * dm,
            None => d_x_mid.clone(),
        };
        lg.wo += &lc.concat.t().dot(&d_proj);
        let d_concat = d_proj.dot(&layer.wo.t());

        let mut dq_rot = Array2::<F>::zeros((n, d));
        let mut dk_rot = Array2::<F>::zeros((n, d));
        let mut dv = Array2::<F>::zeros((n, d));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..cfg.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let idx = b * cfg.n_heads + h;
                let probs = &lc.probs[idx];
                let dropped = match &lc.attn_drop {
                    Some(masks) => probs * &masks[idx],
                    None => probs.clone(),
                };
                let d_out = d_concat.slice(s![rows.clone(), cols.clone()]);
                let vb = lc.v.slice(s![rows.clone(), cols.clone()]);
                let mut d_dropped = d_out.dot(&vb.t());
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&dropped.t().dot(&d_out));
                if let Some(masks) = &lc.attn_drop {
                    d_dropped *= &masks[idx];
                }
                // Softmax backward per row.
                let mut d_scores = d_dropped;
                for (mut drow, prow) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot: F = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &p) in drow.iter_mut().zip(prow.iter()) {
                        *dv_ = p * (*dv_ - dot);
                    }
                }
                d_scores *= scale;
                let qb = lc.q_rot.slice(s![rows.clone(), cols.clone()]);
                let kb = lc.k_rot.slice(s![rows.clone(), cols.clone()]);
                dq_rot
                    .slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&d_scores.dot(&kb));
                dk_rot
                    .slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&d_scores.t().dot(&qb));
            }
        }
        apply_rope(&mut dq_rot, cfg, &tables, true);
        apply_rope(&mut dk_rot, cfg, &tables, true);

        let y1 = {
            let mut y = lc.norm1.xhat.clone();
            for mut row in y.rows_mut() {
                for c in 0..d {
                    row[c] = row[c] * layer.norm1.gamma[c] + layer.norm1.beta[c];
                }
            }
            y
        };
        lg.wq += &y1.t().dot(&dq_rot);
        lg.wk += &y1.t().dot(&dk_rot);
        lg.wv += &y1.t().dot(&dv);
        let mut dy1 = dq_rot.dot(&layer.wq.t());
        dy1 += &dk_rot.dot(&layer.wk.t());
        dy1 += &dv.dot(&layer.wv.t());
        let mut d_x_in = layer_norm_backward(
            &dy1,
            &lc.norm1,
            &layer.norm1,
            &mut lg.norm1.gamma,
            &mut lg.norm1.beta,
        );
        d_x_in += &d_x_mid;
        dx = d_x_in;
    }

    // dx is now the gradient at (embedding + relay delta).
    for (row, &tok) in cache.tokens.iter().enumerate() {
        let mut e = grads.embedding.row_mut(tok as usize);
        e += &dx.row(row);
    }
    let d_relay_in = match &cache.relay {
        Some(rc) => {
            let norm = params.relay_norm.as_ref().expect("relay cache implies params");
            let gnorm = grads.relay_norm.as_mut().expect("relay grads");
            let d_h_in = layer_norm_backward(
                &dx,
                &rc.norm,
                norm,
                &mut gnorm.gamma,
                &mut gnorm.beta,
            );
            want_d_relay_in.then_some(d_h_in)
        }
        None => None,
    };
    Ok(d_relay_in)
}
