//! Central-difference gradient certification.
//!
//! Only the forward closure is used for the numeric side, so the check is
//! independent of every backward implementation it certifies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::tensor::Tensor;

/// Magnitude below which gradients are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares analytic gradients of `loss()` with central differences of
/// step `h` on up to `max_per_input` randomly chosen entries per input.
pub fn check_gradients(
    loss: impl Fn() -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    h: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let grads = loss()?.grad_map()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = grads.get(input).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_input).into_vec()
        };
        let original = input.to_vec();
        for i in picks {
            let mut plus = original.clone();
            plus[i] += h;
            input.set_data(plus)?;
            let f_plus = loss()?.item();
            let mut minus = original.clone();
            minus[i] -= h;
            input.set_data(minus)?;
            let f_minus = loss()?.item();
            input.set_data(original.clone())?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((k, i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}
