//! Central finite-difference checks against reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative discrepancy.
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-8,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryCheck>,
    pub failures: Vec<EntryCheck>,
    /// `(input, flat index)` entries whose ±step perturbation changed a
    /// recorded branch decision; reported, not failed.
    pub discontinuity_adjacent: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), cfg)
}

/// Checks a scalar function of several tensors, perturbing every entry of
/// every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;
    let reference = graph.decisions().to_vec();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            graph
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<u64>)> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        Ok((g.value(out).item(), g.decisions().to_vec()))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        for index in 0..t.numel() {
            let orig = t.data()[index];
            work[input].data_mut()[index] = orig + cfg.step;
            let (plus, dec_plus) = eval(&work)?;
            work[input].data_mut()[index] = orig - cfg.step;
            let (minus, dec_minus) = eval(&work)?;
            work[input].data_mut()[index] = orig;

            if dec_plus != reference || dec_minus != reference {
                report.discontinuity_adjacent.push((input, index));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[input].data()[index];
            let rel_error = relative_error(a, numeric, cfg.floor);
            let entry = EntryCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_error,
            };
            report.checked += 1;
            if rel_error > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel_error);
                report.worst = Some(entry.clone());
            }
            if rel_error > cfg.tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}
