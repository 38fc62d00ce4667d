//! Central finite-difference gradient checking.

use super::{Array, Tape, Var};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Largest relative error among elements whose absolute error exceeds
    /// [`ABS_FLOOR`].
    pub max_rel_err_above_floor: f64,
    pub checked: usize,
}

pub const ABS_FLOOR: f64 = 1e-9;

impl GradCheck {
    /// Every element is within `rel_tol` relative error or within the absolute floor.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err_above_floor < rel_tol
    }
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `eps`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Array], eps: f64, f: &F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Array> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let root = f(&tape, &vars);
        let grads = tape.backward(root);
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let eval = |inputs: &[Array]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
        f(&tape, &vars).value().item()
    };
    let mut report = GradCheck::default();
    let mut work: Vec<Array> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + eps;
            let up = eval(&work);
            work[k].data_mut()[i] = x0 - eps;
            let down = eval(&work);
            work[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].data()[i];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            let rel = rel_err(a, numeric, ABS_FLOOR);
            report.max_rel_err = report.max_rel_err.max(rel);
            if (a - numeric).abs() > ABS_FLOOR {
                report.max_rel_err_above_floor = report.max_rel_err_above_floor.max(rel);
            }
            report.checked += 1;
        }
    }
    report
}
