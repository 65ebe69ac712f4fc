use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central finite differences of a scalar function at `x`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let eval = |t: Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        Ok(tape.item(out))
    };
    let mut probe = x.clone();
    probe.requires_grad = false;
    probe.grad = None;
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = eval(probe.clone())?;
        probe.data_mut()[k] = orig - eps;
        let down = eval(probe.clone())?;
        probe.data_mut()[k] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// The error per coordinate is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::invalid("gradcheck", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let v = tape.param(Tensor::from_parts(x.shape().to_vec(), x.data().to_vec()));
    let out = f(&mut tape, v)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::invalid("gradcheck", "function must return a scalar"));
    }
    if !tape.item(out).is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = numeric_gradient(&f, x, eps)?;
    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > worst {
            worst = err;
            worst_index = k;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
