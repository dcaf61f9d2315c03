//! Softmax Jacobian structure, the 1/k² gradient scale at uniform
//! initialization, saturation, and winner-takes-all iteration.
//!
//! The iteration experiment uses the normalized power map
//! `a ← a^gain / Σ a^gain`, computed in logit space as
//! `h ← gain · log softmax(h)`. For `gain > 1` the simplex corners attract
//! every start with a unique maximum; the uniform point is a fixed point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sparc_tensor::Tensor;

use crate::error::{CoreError, Result};

/// Smallest log-probability carried between iterations. Keeps `exp` away
/// from producing exact zeros whose log would be `-inf`.
pub const LOG_FLOOR: f64 = -708.0;

/// Standard deviation of the near-zero logits drawn by
/// [`uniform_init_grad_scale`].
pub const INIT_LOGIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub k: usize,
    pub grad_scale_expected: f64,
    pub grad_scale_measured: f64,
    pub entropy_trace: Vec<f64>,
    pub corner_distance_trace: Vec<f64>,
    /// Argmax of the final distribution (iteration experiment only).
    pub converged_corner: Option<usize>,
}

pub fn softmax(h: &[f64]) -> Vec<f64> {
    let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Entropy in nats; zero entries contribute nothing.
pub fn entropy(a: &[f64]) -> f64 {
    -a.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

fn argmax(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in a.iter().enumerate() {
        if x > a[best] {
            best = i;
        }
    }
    best
}

fn check_logits(h: &Tensor) -> Result<()> {
    if h.rank() != 1 || h.numel() < 2 {
        return Err(CoreError::Config(format!(
            "softmax lab needs a vector of at least 2 logits, got shape {:?}",
            h.shape()
        )));
    }
    Ok(())
}

/// `J[i][j] = ∂a_i/∂h_j = a_i (δ_ij − a_j)` for `a = softmax(h)`.
pub fn softmax_jacobian(h: &Tensor) -> Result<Tensor> {
    check_logits(h)?;
    let a = softmax(h.data());
    let k = a.len();
    let mut j = Vec::with_capacity(k * k);
    for i in 0..k {
        for c in 0..k {
            let delta = if i == c { 1.0 } else { 0.0 };
            j.push(a[i] * (delta - a[c]));
        }
    }
    Ok(Tensor::new(vec![k, k], j)?)
}

/// Maximum absolute row sum of the softmax Jacobian.
pub fn jacobian_inf_norm(h: &Tensor) -> Result<f64> {
    let j = softmax_jacobian(h)?;
    let k = h.numel();
    Ok(j.data()
        .chunks(k)
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Mean magnitude of the off-diagonal Jacobian entries for `trials` draws of
/// logits `N(0, INIT_LOGIT_STD²)`. The expected value is close to `1/k²`.
pub fn uniform_init_grad_scale(k: usize, trials: usize, seed: u64) -> Result<DynamicsReport> {
    if k < 2 || trials == 0 {
        return Err(CoreError::Config("need k >= 2 and trials >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_LOGIT_STD).expect("valid std");
    let mut total = 0.0;
    let mut entropy_trace = Vec::with_capacity(trials);
    let mut corner_distance_trace = Vec::with_capacity(trials);
    for _ in 0..trials {
        let h: Vec<f64> = (0..k).map(|_| normal.sample(&mut rng)).collect();
        let a = softmax(&h);
        // Σ_{i≠j} a_i a_j = 1 − Σ a_i²
        let sq: f64 = a.iter().map(|x| x * x).sum();
        total += (1.0 - sq) / (k * (k - 1)) as f64;
        entropy_trace.push(entropy(&a));
        corner_distance_trace.push(1.0 - a[argmax(&a)]);
    }
    Ok(DynamicsReport {
        k,
        grad_scale_expected: 1.0 / (k * k) as f64,
        grad_scale_measured: total / trials as f64,
        entropy_trace,
        corner_distance_trace,
        converged_corner: None,
    })
}

/// Runs [`uniform_init_grad_scale`] for each k and fits the log-log slope of
/// measured scale against k.
pub fn grad_scale_sweep(
    ks: &[usize],
    trials: usize,
    seed: u64,
) -> Result<(Vec<DynamicsReport>, f64)> {
    if ks.len() < 2 {
        return Err(CoreError::Config(
            "a slope needs at least two values of k".into(),
        ));
    }
    let reports = ks
        .iter()
        .map(|&k| uniform_init_grad_scale(k, trials, seed))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = reports.iter().map(|r| r.grad_scale_measured.ln()).collect();
    Ok((reports, least_squares_slope(&xs, &ys)))
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Iterates `h ← gain · max(log softmax(h), LOG_FLOOR)` for `steps` steps.
/// Traces hold the entropy and `1 − max a` of the initial distribution and
/// after every step.
pub fn iterate_softmax(h0: &Tensor, steps: usize, gain: f64) -> Result<DynamicsReport> {
    check_logits(h0)?;
    if steps == 0 || !(gain > 1.0) {
        return Err(CoreError::Config("need steps >= 1 and gain > 1".into()));
    }
    let k = h0.numel();
    let mut a = softmax(h0.data());
    let mut entropy_trace = vec![entropy(&a)];
    let mut corner_distance_trace = vec![1.0 - a[argmax(&a)]];
    for _ in 0..steps {
        let h: Vec<f64> = a.iter().map(|&x| gain * x.ln().max(LOG_FLOOR)).collect();
        a = softmax(&h);
        entropy_trace.push(entropy(&a));
        corner_distance_trace.push(1.0 - a[argmax(&a)]);
    }
    let sq: f64 = a.iter().map(|x| x * x).sum();
    Ok(DynamicsReport {
        k,
        grad_scale_expected: 1.0 / (k * k) as f64,
        grad_scale_measured: (1.0 - sq) / (k * (k - 1)) as f64,
        entropy_trace,
        corner_distance_trace,
        converged_corner: Some(argmax(&a)),
    })
}
