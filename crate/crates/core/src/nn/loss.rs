use crate::error::{Error, Result};
use crate::grid::MaskedField;

use super::scalar::Scalar;

/// Mean squared error over the valid cells of `target`, and its gradient with
/// respect to `pred` (exactly zero at masked cells).
pub fn masked_mse<T: Scalar>(pred: &[T], target: &MaskedField) -> Result<(f64, Vec<T>)> {
    if pred.len() != target.values().len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} cells, target has {}",
            pred.len(),
            target.values().len()
        )));
    }
    let n = target.n_valid();
    if n == 0 {
        return Err(Error::AllMasked);
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); pred.len()];
    let scale = 2.0 / n as f64;
    for (i, t) in target.valid() {
        let r = pred[i].to_f64().unwrap_or(f64::NAN) - t;
        loss += r * r;
        grad[i] = T::lit(scale * r);
    }
    Ok((loss / n as f64, grad))
}
