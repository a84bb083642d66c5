use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over all inputs.
    pub max_rel_error: f64,
    /// `(input, flat index)` where the largest error occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares `∂f/∂x` from the tape against `(f(x+h) − f(x−h)) / 2h`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, floor)` with
/// `floor = max(1e-2·‖n‖∞, 1e-12)`, so coordinates whose true gradient is
/// essentially zero are judged against the overall gradient scale.
pub fn gradient_check<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let mut col = Vec::with_capacity(point[i].numel());
        for j in 0..point[i].numel() {
            let x0 = point[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            col.push((fp - fm) / (2.0 * h));
        }
        numeric.push(col);
    }

    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&a, &n)) in a.data().iter().zip(n).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check at input {i} index {j}")));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
