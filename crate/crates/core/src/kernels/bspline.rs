//! Cox–de Boor evaluation of B-spline basis functions.
//!
//! `B_{i,0}(x) = 1` on `[t_i, t_{i+1})`, zero elsewhere, and
//! `B_{i,k}(x) = (x - t_i)/(t_{i+k} - t_i) B_{i,k-1}(x)
//!             + (t_{i+k+1} - x)/(t_{i+k+1} - t_{i+1}) B_{i+1,k-1}(x)`
//! with `0/0` terms taken as zero.

use crate::{Error, Result};

/// Number of degree-`degree` basis functions on `knots`.
pub fn basis_count(knots: &[f64], degree: usize) -> usize {
    knots.len().saturating_sub(degree + 1)
}

pub(crate) fn validate_knots(knots: &[f64], degree: usize) -> Result<()> {
    if knots.len() < degree + 2 {
        return Err(Error::Kernel(format!(
            "degree {degree} needs at least {} knots, got {}",
            degree + 2,
            knots.len()
        )));
    }
    if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Kernel("knots must be finite and nondecreasing".into()));
    }
    Ok(())
}

/// Value of the `i`-th basis function of the given degree at `x`.
pub fn bspline_basis(knots: &[f64], degree: usize, i: usize, x: f64) -> Result<f64> {
    validate_knots(knots, degree)?;
    let count = basis_count(knots, degree);
    if i >= count {
        return Err(Error::invalid(format!("basis index {i} out of range ({count} functions)")));
    }
    Ok(basis_unchecked(knots, degree, i, x))
}

/// All `basis_count` basis values at `x`, computed with the triangular
/// Cox–de Boor table.
pub fn bspline_basis_all(knots: &[f64], degree: usize, x: f64) -> Result<Vec<f64>> {
    validate_knots(knots, degree)?;
    Ok(all_unchecked(knots, degree, x))
}

pub(crate) fn all_unchecked(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let m = knots.len() - 1;
    let mut level: Vec<f64> = (0..m)
        .map(|i| if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 })
        .collect();
    for k in 1..=degree {
        let next: Vec<f64> = (0..m - k)
            .map(|i| {
                ratio(x - knots[i], knots[i + k] - knots[i]) * level[i]
                    + ratio(knots[i + k + 1] - x, knots[i + k + 1] - knots[i + 1]) * level[i + 1]
            })
            .collect();
        level = next;
    }
    level
}

/// First derivatives of all basis functions at `x`.
pub(crate) fn derivative_all_unchecked(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let count = basis_count(knots, degree);
    if degree == 0 {
        return vec![0.0; count];
    }
    let lower = all_unchecked(knots, degree - 1, x);
    let k = degree as f64;
    (0..count)
        .map(|i| {
            k * ratio(1.0, knots[i + degree] - knots[i]) * lower[i]
                - k * ratio(1.0, knots[i + degree + 1] - knots[i + 1]) * lower[i + 1]
        })
        .collect()
}

fn basis_unchecked(knots: &[f64], degree: usize, i: usize, x: f64) -> f64 {
    if degree == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let left = ratio(x - knots[i], knots[i + degree] - knots[i]);
    let right = ratio(knots[i + degree + 1] - x, knots[i + degree + 1] - knots[i + 1]);
    let mut v = 0.0;
    if left != 0.0 {
        v += left * basis_unchecked(knots, degree - 1, i, x);
    }
    if right != 0.0 {
        v += right * basis_unchecked(knots, degree - 1, i + 1, x);
    }
    v
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Degree-0 basis written as the difference of two translated unit steps,
/// `H(x - t_i) - H(x - t_{i+1})` with `H(0) = 1`.
pub fn step_difference(knots: &[f64], i: usize, x: f64) -> Result<f64> {
    if i + 1 >= knots.len() {
        return Err(Error::invalid(format!("step index {i} out of range")));
    }
    let step = |z: f64| if z >= 0.0 { 1.0 } else { 0.0 };
    Ok(step(x - knots[i]) - step(x - knots[i + 1]))
}

/// `n + 1` equally spaced knots on `[lo, hi]`.
pub fn uniform_knots(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|j| lo + (hi - lo) * j as f64 / n as f64).collect()
}
