//! Finite-difference verification of reverse-mode gradients.

use crate::error::{NdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate where `max_rel_error` was attained.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose stencil straddled a ReLU kink and were left out.
    pub skipped_kinks: usize,
}

const DENOM_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central differences.
///
/// Each coordinate uses the fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`. A coordinate is skipped
/// when any stencil point activates a different set of ReLUs than `x` itself,
/// since the function is not differentiable across such a kink.
/// Relative error is `|g - g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&step) {
        return Err(NdError::Contract(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let out = f(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(NdError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let pattern = tape.relu_pattern_digest();
    let analytic = tape
        .backward(out)?
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |probe: &Tensor<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::inference();
        let v = t.constant(probe.clone());
        let o = f(&mut t, v)?;
        Ok((t.value(o).item(), t.relu_pattern_digest()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = input.clone();
    for i in 0..input.len() {
        let x0 = input.data()[i];
        let mut values = [0.0; 4];
        let mut kink = false;
        for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
            probe.data_mut()[i] = x0 + offset * step;
            let (v, p) = eval(&probe)?;
            values[slot] = v;
            kink |= p != pattern;
        }
        probe.data_mut()[i] = x0;
        if kink {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * step);
        let g = analytic.data()[i];
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(DENOM_FLOOR);
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
