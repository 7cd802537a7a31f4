//! AdamW with decoupled weight decay, global-norm clipping, and the
//! warmup-then-constant learning-rate schedule.

use crate::error::Result;
use crate::model::{zeros_like, GradStore, ModelParams, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates in the same slot layout as the
/// parameters, plus the shared step count for bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub m: GradStore<F>,
    pub v: GradStore<F>,
    pub t: usize,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ModelParams<F>) -> AdamW<F> {
        AdamW { m: zeros_like(params), v: zeros_like(params), t: 0 }
    }

    /// One decoupled-weight-decay update. `lr` is the already-scheduled
    /// rate; decay multiplies by `lr * weight_decay` so a zero rate
    /// leaves parameters untouched.
    pub fn update(
        &mut self,
        params: &mut ModelParams<F>,
        grads: &GradStore<F>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        let lr = F::from_f64(lr);
        let wd = F::from_f64(weight_decay);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let bias2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));

        let mut p_arrays = params.arrays_mut();
        let g_arrays = grads.arrays();
        let mut m_arrays = self.m.arrays_mut();
        let mut v_arrays = self.v.arrays_mut();
        for (((p, g), m), v) in p_arrays
            .iter_mut()
            .zip(g_arrays.iter())
            .zip(m_arrays.iter_mut())
            .zip(v_arrays.iter_mut())
        {
            let mut p = p.view_mut();
            let g = g.view();
            let mut m = m.view_mut();
            let mut v = v.view_mut();
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }
}

/// Scales gradients in place so their global norm does not exceed
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut GradStore<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for a in grads.arrays() {
        for &g in a.view().iter() {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for a in grads.arrays_mut().iter_mut() {
            a.view_mut().mapv_inplace(|g| g * scale);
        }
    }
    norm
}

/// Linear warmup to `lr` over `warmup_steps`, constant afterwards.
/// `step` counts completed optimizer steps, so the first update (step 0)
/// uses lr/warmup.
pub fn lr_at(step: usize, lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step + 1 >= warmup_steps {
        lr
    } else {
        lr * (step + 1) as f64 / warmup_steps as f64
    }
}
