use crate::error::{Error, Result};

use super::Matrix;

/// Central finite-difference gradient of `f` at `params`.
///
/// Each coordinate is perturbed by `±eps` in turn; `params` is restored
/// before returning.
pub fn fd_gradient<F>(mut f: F, params: &mut [Matrix], eps: f64) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "fd step must be > 0, got {eps}"
        )));
    }
    let mut grads: Vec<Matrix> = params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    for k in 0..params.len() {
        for i in 0..params[k].len() {
            let orig = params[k].as_slice()[i];
            params[k].as_mut_slice()[i] = orig + eps;
            let plus = f(params);
            params[k].as_mut_slice()[i] = orig - eps;
            let minus = f(params);
            params[k].as_mut_slice()[i] = orig;
            grads[k].as_mut_slice()[i] = (plus? - minus?) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// `max |a - b| / max(1, |b|)` over all entries, with `b` the reference.
pub fn max_relative_error(analytic: &[Matrix], reference: &[Matrix]) -> Result<f64> {
    if analytic.len() != reference.len() {
        return Err(Error::shape(
            "max_relative_error",
            format!("{} vs {} tensors", analytic.len(), reference.len()),
        ));
    }
    let mut worst = 0.0f64;
    for (a, r) in analytic.iter().zip(reference) {
        if a.shape() != r.shape() {
            return Err(Error::shape(
                "max_relative_error",
                format!("{:?} vs {:?}", a.shape(), r.shape()),
            ));
        }
        for (x, y) in a.as_slice().iter().zip(r.as_slice()) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    Ok(worst)
}
