use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::arg("grad_check: function must return a scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: function value {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+h) - f(x-h)) / 2h` on every input element and
/// returns the worst [`relative_error`].
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, step, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `max_coords` randomly chosen
/// elements per input tensor.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(check(&f, inputs, step, max_coords, seed, None)?.max_rel_error)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared against the analytic gradient.
    pub checked: usize,
    /// Coordinates dropped because the function is not smooth within one
    /// step of the probe point.
    pub skipped: usize,
}

/// Sampled check for piecewise-smooth functions (ReLU, max-pool). A
/// coordinate whose one-sided differences `(f(x+h) - f(x)) / h` and
/// `(f(x) - f(x-h)) / h` disagree by more than `kink_tol` in relative terms
/// straddles a kink and is skipped. The test uses function values only, so
/// it cannot hide a wrong analytic gradient.
pub fn grad_check_nonsmooth<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
    seed: u64,
    kink_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check(&f, inputs, step, max_coords, seed, Some(kink_tol))
}

fn check<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: usize,
    seed: u64,
    kink_tol: Option<f64>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::arg("grad_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(f, &probe)?;
            probe[k].data_mut()[i] = orig;
            if let Some(tol) = kink_tol {
                if relative_error((plus - base) / step, (base - minus) / step) > tol {
                    report.skipped += 1;
                    continue;
                }
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite gradient at input {k}[{i}]"
                )));
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
        }
    }
    Ok(report)
}
