//! Central finite-difference checks of reverse-mode gradients.

use ndarray::ArrayD;

use crate::{Graph, Var};

/// Outcome of comparing autodiff against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, autodiff, finite difference)` of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Tolerances for [`check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum relative error `|a - n| / max(|a|, |n|)`.
    pub rel_tol: f64,
    /// Absolute differences below this pass regardless of relative error,
    /// covering coordinates whose true gradient is zero.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
        }
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` at every input coordinate.
pub fn check<F>(inputs: &[ArrayD<f64>], f: F, config: GradCheckConfig) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<ArrayD<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&g, &vars);
        assert_eq!(out.value().len(), 1, "gradcheck needs a scalar output");
        let grads = g.backward(out);
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        f(&g, &vars).item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.as_slice_memory_order().expect("contiguous input")[i];
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig + config.eps;
            let plus = eval(&work);
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig - config.eps;
            let minus = eval(&work);
            work[k].as_slice_memory_order_mut().unwrap()[i] = orig;
            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = analytic[k].as_slice_memory_order().unwrap()[i];
            let diff = (a - numeric).abs();
            let rel = if diff <= config.abs_floor {
                0.0
            } else {
                diff / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            if rel <= config.rel_tol {
                report.passed += 1;
            }
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    report
}
