//! Central finite-difference gradient checking.
//!
//! Only forward evaluation is used to build the numerical gradient, so the
//! check is independent of every backward rule it validates.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation size.
    pub step: f64,
    /// Upper bound on perturbed coordinates per input; evenly strided when
    /// the input is larger.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            max_coords: usize::MAX,
        }
    }
}

/// Per-input comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct InputError {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / max(|a|, |n|)` over the checked coordinates (Euclidean
    /// norms); zero when both gradients vanish.
    pub relative: f64,
}

impl GradCheck {
    /// `build` receives one leaf per input (all requiring grad) and must
    /// return a scalar.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<Vec<InputError>, TensorError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            Ok(f64::from(g.item(out)))
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        g.backward(loss)?;

        let mut report = Vec::with_capacity(inputs.len());
        let mut work = inputs.to_vec();
        for (idx, var) in vars.iter().enumerate() {
            let full = g.grad_tensor(*var);
            let n = inputs[idx].numel();
            let stride = n.div_ceil(self.max_coords.min(n)).max(1);
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for c in (0..n).step_by(stride) {
                let orig = inputs[idx].data()[c];
                work[idx].data_mut()[c] = (f64::from(orig) + self.step) as f32;
                let up = eval(&work)?;
                work[idx].data_mut()[c] = (f64::from(orig) - self.step) as f32;
                let down = eval(&work)?;
                work[idx].data_mut()[c] = orig;
                analytic.push(f64::from(full.data()[c]));
                numeric.push((up - down) / (2.0 * self.step));
            }
            let diff = norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b));
            let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
            let relative = if scale < 1e-6 { diff } else { diff / scale };
            report.push(InputError {
                analytic,
                numeric,
                relative,
            });
        }
        Ok(report)
    }
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest relative error across inputs.
pub fn worst(report: &[InputError]) -> f64 {
    report.iter().map(|r| r.relative).fold(0.0, f64::max)
}
