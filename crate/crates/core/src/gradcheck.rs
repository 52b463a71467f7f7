//! Central finite-difference gradient verification at 64-bit precision.
//!
//! The numeric side only ever evaluates the forward pass; it never reads a
//! gradient produced by the tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor for the relative error, so exact zeros compare absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided); `None` = all.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences for every input tensor
/// that requires grad. `f` must build a scalar loss from the leaves it is handed.
pub fn check_gradients<F>(inputs: &mut [Tensor<f64>], f: F, cfg: &GradCheck) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec))
        .collect();

    let mut report = GradReport::default();
    for ti in 0..inputs.len() {
        if !inputs[ti].requires_grad() {
            continue;
        }
        let n = inputs[ti].len();
        let stride = cfg.max_coords.map_or(1, |m| (n / m.max(1)).max(1));
        for i in (0..n).step_by(stride) {
            let orig = inputs[ti].data()[i];
            inputs[ti].data_mut()[i] = orig + cfg.step;
            let up = eval(inputs)?;
            inputs[ti].data_mut()[i] = orig - cfg.step;
            let down = eval(inputs)?;
            inputs[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g[i]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("input {ti} coordinate {i}")));
            }
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    Ok(report)
}
