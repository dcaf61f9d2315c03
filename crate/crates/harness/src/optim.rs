//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sparc_core::params::ParamStore;
use sparc_tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One AdamW update of every parameter that has a gradient. Parameters for
/// which `decayed` is false skip the weight decay.
///
/// `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
    wd: f64,
    decayed: impl Fn(&str, &Tensor) -> bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(HarnessError::Config(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let decay = if decayed(name, p) { lr * wd } else { 0.0 };
        let it = p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data());
        for (((x, m), v), &g) in it {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            *x -= decay * *x;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`. Steps past the end stay at 0.
pub fn lr_schedule(step: usize, peak_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return peak_lr;
        }
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}
