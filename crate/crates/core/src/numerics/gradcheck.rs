use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Central-difference gradient of a scalar function at `x`.
///
/// Every element is perturbed by `±h`. For large parameter tensors use
/// [`finite_diff_entries`] to probe a sample of coordinates instead.
pub fn finite_diff_gradient<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    let values = finite_diff_entries(&mut f, x, h, &coords)?;
    Ok(Matrix::from_raw(x.rows(), x.cols(), values))
}

/// Central differences at the given flat (row-major) indices of `x`.
pub fn finite_diff_entries<F>(mut f: F, x: &Matrix, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &idx in coords {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "function not finite near element {idx} (f+ = {plus}, f- = {minus})"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, 1e-8)`, the element-wise comparison used by the
/// gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
