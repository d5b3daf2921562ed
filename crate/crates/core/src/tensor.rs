//! Flat tensors indexed by windows of consecutive latent states.
//!
//! A tensor over `b` window variables, each taking `k` values, is stored as a
//! vector of length `k^b` in lexicographic order with the latest time index
//! varying fastest. Summing out a variable is the action of the Kronecker
//! marginalization matrix `I ⊗ … ⊗ 1' ⊗ … ⊗ I`, realized here as a strided
//! sum so the `k^b × k^(b-1)` matrix is never built.

use crate::error::{HmmError, Result};

/// `k^b`, saturating on overflow.
#[inline]
pub fn size(k: usize, b: usize) -> usize {
    k.saturating_pow(b as u32)
}

pub(crate) fn check_len(values: &[f64], k: usize, vars: usize) -> Result<()> {
    if k == 0 || values.len() != size(k, vars) {
        return Err(HmmError::TensorShape {
            len: values.len(),
            k,
            vars,
        });
    }
    Ok(())
}

/// Lexicographic index of a window configuration (latest variable fastest).
#[inline]
pub fn encode(states: &[usize], k: usize) -> usize {
    states.iter().fold(0, |acc, &s| acc * k + s)
}

/// Inverse of [`encode`] for a window of `vars` variables.
pub fn decode(mut index: usize, k: usize, vars: usize) -> Vec<usize> {
    let mut out = vec![0; vars];
    for slot in out.iter_mut().rev() {
        *slot = index % k;
        index /= k;
    }
    out
}

/// Sums a tensor over `vars` variables with respect to the variable at
/// 0-based position `axis`.
pub fn marginalize(values: &[f64], k: usize, vars: usize, axis: usize) -> Result<Vec<f64>> {
    check_len(values, k, vars)?;
    if axis >= vars {
        return Err(HmmError::IncompatibleWindow(format!(
            "axis {axis} out of range for {vars} variables"
        )));
    }
    Ok(marginalize_unchecked(values, k, vars, axis))
}

pub(crate) fn marginalize_unchecked(values: &[f64], k: usize, vars: usize, axis: usize) -> Vec<f64> {
    let inner = size(k, vars - axis - 1);
    let outer = size(k, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for v in 0..k {
            let base = (o * k + v) * inner;
            for (d, &x) in dst.iter_mut().zip(&values[base..base + inner]) {
                *d += x;
            }
        }
    }
    out
}

/// `1_{k^m} ⊗ values`: adds `m` leading variables the result is constant over.
pub fn prepend(values: &[f64], k: usize, m: usize) -> Vec<f64> {
    let reps = size(k, m);
    let mut out = Vec::with_capacity(values.len() * reps);
    for _ in 0..reps {
        out.extend_from_slice(values);
    }
    out
}

/// `values ⊗ 1_{k^m}`: adds `m` trailing variables the result is constant over.
pub fn append(values: &[f64], k: usize, m: usize) -> Vec<f64> {
    let reps = size(k, m);
    let mut out = Vec::with_capacity(values.len() * reps);
    for &x in values {
        out.extend(std::iter::repeat_n(x, reps));
    }
    out
}

/// Broadcasts a tensor over `positions.len()` variables into a window of
/// `target_vars` variables. `positions` lists, in increasing order, where each
/// source variable sits in the target window; the result is constant over the
/// remaining target variables.
pub fn expand_broadcast(
    values: &[f64],
    k: usize,
    target_vars: usize,
    positions: &[usize],
) -> Result<Vec<f64>> {
    check_len(values, k, positions.len())?;
    if positions.windows(2).any(|w| w[0] >= w[1])
        || positions.last().is_some_and(|&p| p >= target_vars)
    {
        return Err(HmmError::IncompatibleWindow(format!(
            "positions {positions:?} do not embed in a window of {target_vars} variables"
        )));
    }
    let n = size(k, target_vars);
    let mut out = Vec::with_capacity(n);
    let mut digits = vec![0usize; target_vars];
    for _ in 0..n {
        let src = positions.iter().fold(0, |acc, &p| acc * k + digits[p]);
        out.push(values[src]);
        // odometer increment, last digit fastest
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < k {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

/// Dense `M_{a,b}` marginalization matrix (row-major, `k^(b-1)` rows by
/// `k^b` columns) for a 0-based `axis`. Only meant for small `b`, to check
/// the strided kernel against the Kronecker construction.
pub fn marginalization_matrix(k: usize, vars: usize, axis: usize) -> Vec<Vec<f64>> {
    let mut factors: Vec<Vec<Vec<f64>>> = Vec::with_capacity(vars);
    for l in 0..vars {
        if l == axis {
            factors.push(vec![vec![1.0; k]]);
        } else {
            factors.push(
                (0..k)
                    .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
            );
        }
    }
    factors
        .into_iter()
        .fold(vec![vec![1.0]], |acc, f| kronecker(&acc, &f))
}

fn kronecker(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (br, bc) = (b.len(), b[0].len());
    let mut out = vec![vec![0.0; a[0].len() * bc]; a.len() * br];
    for (i, arow) in a.iter().enumerate() {
        for (j, &x) in arow.iter().enumerate() {
            for (p, brow) in b.iter().enumerate() {
                for (q, &y) in brow.iter().enumerate() {
                    out[i * br + p][j * bc + q] = x * y;
                }
            }
        }
    }
    out
}
