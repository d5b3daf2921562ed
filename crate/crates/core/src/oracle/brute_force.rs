use crate::error::{HmmError, Result};
use crate::model::{log_normal_density, ObservationSeries, ParameterSet};
use crate::tensor;

/// Largest number of state paths enumerated.
pub const MAX_PATHS: usize = 1_000_000;

/// Exact posterior over all `k^T` state paths.
#[derive(Debug, Clone)]
pub struct BruteForce {
    pub k: usize,
    pub len: usize,
    /// `log f(y)`.
    pub log_fy: f64,
    /// `q(u | y)` indexed by the lexicographic code of the path.
    pub posterior: Vec<f64>,
}

/// Enumerates every path `u` and evaluates
/// `f(u, y) = Π_t f(y_t|u_t) p(u_t | u_{max(t-h,1)}..u_{t-1})`.
pub fn brute_force_joint(params: &ParameterSet, y: &ObservationSeries) -> Result<BruteForce> {
    let (k, h) = (params.k(), params.h());
    let n = y.len();
    let paths = (k as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if paths > MAX_PATHS as u128 {
        return Err(HmmError::Oracle(format!("{k}^{n} paths exceed the enumeration limit")));
    }
    let paths = paths as usize;
    let log_f: Vec<Vec<f64>> = y
        .values
        .iter()
        .map(|&v| params.sigma.iter().map(|&s| log_normal_density(v, s)).collect())
        .collect();
    let mut log_joint = Vec::with_capacity(paths);
    for code in 0..paths {
        let u = tensor::decode(code, k, n);
        let mut acc = 0.0;
        for t in 1..=n {
            let start = if t > h { t - 1 - h } else { 0 };
            let p = params.transition(t)[tensor::encode(&u[start..t], k)];
            acc += log_f[t - 1][u[t - 1]] + p.ln();
        }
        log_joint.push(acc);
    }
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_joint.iter().map(|&l| (l - max).exp()).sum();
    let log_fy = max + sum.ln();
    let posterior = log_joint.iter().map(|&l| (l - log_fy).exp()).collect();
    Ok(BruteForce { k, len: n, log_fy, posterior })
}

impl BruteForce {
    /// Joint posterior of the states at the given 1-based, increasing times,
    /// lexicographic with the latest time fastest.
    pub fn window_marginal(&self, times: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; tensor::size(self.k, times.len())];
        for (code, &p) in self.posterior.iter().enumerate() {
            let u = tensor::decode(code, self.k, self.len);
            let idx = times.iter().fold(0, |acc, &t| acc * self.k + u[t - 1]);
            out[idx] += p;
        }
        out
    }

    /// Posterior of the state at `times[target]` given the other states in
    /// `times` and all of `y`; 0 where the conditioning has zero mass.
    pub fn conditional(&self, times: &[usize], target: usize) -> Vec<f64> {
        let joint = self.window_marginal(times);
        let vars = times.len();
        let inner = tensor::size(self.k, vars - target - 1);
        let mut out = vec![0.0; joint.len()];
        for (i, slot) in out.iter_mut().enumerate() {
            let outer = i / (inner * self.k);
            let s = i % inner;
            let c: f64 = (0..self.k).map(|v| joint[(outer * self.k + v) * inner + s]).sum();
            if c > 0.0 {
                *slot = joint[i] / c;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn single_state_is_iid() {
        let p = ParameterSet::uniform(ModelConfig::new(1, 1).unwrap(), vec![1.5]).unwrap();
        let y = ObservationSeries::new(vec![0.3, -2.0, 1.0]).unwrap();
        let bf = brute_force_joint(&p, &y).unwrap();
        let iid: f64 = y.values.iter().map(|&v| log_normal_density(v, 1.5)).sum();
        assert!((bf.log_fy - iid).abs() < 1e-13);
    }

    #[test]
    fn order_zero_factorizes() {
        let p = ParameterSet::new(ModelConfig::new(2, 0).unwrap(), vec![], vec![0.3, 0.7], vec![1.0, 2.0]).unwrap();
        let y = ObservationSeries::new(vec![0.3, -2.0, 1.0, 4.0]).unwrap();
        let bf = brute_force_joint(&p, &y).unwrap();
        let want: f64 = y
            .values
            .iter()
            .map(|&v| (0.3 * log_normal_density(v, 1.0).exp() + 0.7 * log_normal_density(v, 2.0).exp()).ln())
            .sum();
        assert!((bf.log_fy - want).abs() < 1e-13);
    }

    #[test]
    fn guard_on_size() {
        let p = ParameterSet::uniform(ModelConfig::new(3, 1).unwrap(), vec![1.0; 3]).unwrap();
        let y = ObservationSeries::new(vec![0.0; 13]).unwrap();
        assert!(matches!(brute_force_joint(&p, &y), Err(HmmError::Oracle(_))));
    }
}
