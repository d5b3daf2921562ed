//! Model configuration, parameter containers, the Gaussian volatility
//! emission density and synthetic data generation.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HmmError, Result};
use crate::tensor;

/// Tolerance on the sum of every conditional distribution.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionFamily {
    /// `Y_t | U_t = v ~ N(0, sigma_v^2)`.
    #[default]
    GaussianSv,
}

/// Number of latent states `k`, Markov order `h` and emission family.
///
/// `h = 0` means serially independent states sharing one marginal
/// distribution (a finite mixture).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub h: usize,
    #[serde(default)]
    pub emission: EmissionFamily,
}

impl ModelConfig {
    pub fn new(k: usize, h: usize) -> Result<Self> {
        if k == 0 {
            return Err(HmmError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(Self {
            k,
            h,
            emission: EmissionFamily::GaussianSv,
        })
    }

    /// Number of conditioning states for occasion `t` (1-based): `min(t-1, h)`.
    #[inline]
    pub fn lead(&self, t: usize) -> usize {
        (t - 1).min(self.h)
    }
}

/// Free parameter count: `k` volatilities, `k-1` per conditioning row of the
/// early tensors `λ_1..λ_h`, and `k-1` per row of the homogeneous tensor `π`.
pub fn param_count(config: &ModelConfig) -> usize {
    let k = config.k;
    let early_rows: usize = (1..=config.h).map(|t| tensor::size(k, t - 1)).sum();
    k + (k - 1) * early_rows + (k - 1) * tensor::size(k, config.h)
}

/// Which conditional-probability tensor a violation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    /// `λ_t`, 1-based `t`.
    Early(usize),
    Pi,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorId::Early(t) => write!(f, "early[{t}]"),
            TensorId::Pi => write!(f, "pi"),
        }
    }
}

/// A single invariant violation found by [`ParameterSet::validate`].
/// Rows and states are reported 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EarlyCount { expected: usize, found: usize },
    SigmaCount { expected: usize, found: usize },
    Shape { tensor: TensorId, expected: usize, found: usize },
    Negative { tensor: TensorId, row: usize, state: usize, value: f64 },
    RowSum { tensor: TensorId, row: usize, sum: f64 },
    Sigma { index: usize, value: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EarlyCount { expected, found } => {
                write!(f, "expected {expected} early tensors, found {found}")
            }
            Violation::SigmaCount { expected, found } => {
                write!(f, "expected {expected} volatilities, found {found}")
            }
            Violation::Shape { tensor, expected, found } => {
                write!(f, "{tensor} has {found} entries, expected {expected}")
            }
            Violation::Negative { tensor, row, state, value } => {
                write!(f, "{tensor} row {row} state {state} is negative ({value})")
            }
            Violation::RowSum { tensor, row, sum } => {
                write!(f, "{tensor} row {row} sums to {sum}")
            }
            Violation::Sigma { index, value } => {
                write!(f, "sigma[{index}] = {value} is not positive")
            }
        }
    }
}

/// Early transition tensors, homogeneous transition tensor and volatilities.
///
/// `early[i]` holds `p(u_{i+1} | u_1..u_i)` as `k^i` rows of `k` outcomes and
/// `pi` holds `p(u_t | u_{t-h}..u_{t-1})` for `t > h` as `k^h` rows. Rows are
/// flattened lexicographically, latest conditioning state fastest, so every
/// tensor is a window tensor over `(conditioning.., outcome)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub early: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ParameterSet {
    /// Builds and validates a parameter set.
    pub fn new(config: ModelConfig, early: Vec<Vec<f64>>, pi: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let p = Self { config, early, pi, sigma };
        let v = p.validate();
        if v.is_empty() {
            Ok(p)
        } else {
            Err(HmmError::InvalidParameters(v))
        }
    }

    /// All transitions uniform.
    pub fn uniform(config: ModelConfig, sigma: Vec<f64>) -> Result<Self> {
        let k = config.k;
        let u = 1.0 / k as f64;
        let early = (1..=config.h).map(|t| vec![u; tensor::size(k, t)]).collect();
        let pi = vec![u; tensor::size(k, config.h + 1)];
        Self::new(config, early, pi, sigma)
    }

    /// First-order convenience constructor.
    pub fn first_order(initial: Vec<f64>, transition: Vec<Vec<f64>>, sigma: Vec<f64>) -> Result<Self> {
        let config = ModelConfig::new(sigma.len(), 1)?;
        Self::new(config, vec![initial], transition.concat(), sigma)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.config.k
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.config.h
    }

    /// Transition tensor in force at occasion `t` (1-based).
    #[inline]
    pub fn transition(&self, t: usize) -> &[f64] {
        if t <= self.config.h {
            &self.early[t - 1]
        } else {
            &self.pi
        }
    }

    /// Reports every invariant violation; empty when the set is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let (k, h) = (self.config.k, self.config.h);
        let mut out = Vec::new();
        if self.sigma.len() != k {
            out.push(Violation::SigmaCount { expected: k, found: self.sigma.len() });
        }
        for (i, &s) in self.sigma.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                out.push(Violation::Sigma { index: i + 1, value: s });
            }
        }
        if self.early.len() != h {
            out.push(Violation::EarlyCount { expected: h, found: self.early.len() });
        }
        let tensors = self
            .early
            .iter()
            .enumerate()
            .map(|(i, e)| (TensorId::Early(i + 1), e, i + 1))
            .chain(std::iter::once((TensorId::Pi, &self.pi, h + 1)));
        for (id, values, vars) in tensors {
            let expected = tensor::size(k, vars);
            if k == 0 || values.len() != expected {
                out.push(Violation::Shape { tensor: id, expected, found: values.len() });
                continue;
            }
            for (r, row) in values.chunks(k).enumerate() {
                for (s, &x) in row.iter().enumerate() {
                    if !(x >= 0.0) {
                        out.push(Violation::Negative { tensor: id, row: r + 1, state: s + 1, value: x });
                    }
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
                    out.push(Violation::RowSum { tensor: id, row: r + 1, sum });
                }
            }
        }
        out
    }

    /// Count of free coordinates: `k` volatilities plus `k-1` per row.
    pub fn free_coordinates(&self) -> usize {
        let k = self.config.k;
        let rows: usize = self.early.iter().map(|e| e.len() / k).sum::<usize>() + self.pi.len() / k;
        self.sigma.len() + rows * (k - 1)
    }

    /// Renames states so that old state `v` becomes `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let k = self.config.k;
        let permute = |values: &[f64], vars: usize| {
            let mut out = vec![0.0; values.len()];
            for (i, &x) in values.iter().enumerate() {
                let digits: Vec<usize> = tensor::decode(i, k, vars).into_iter().map(|s| perm[s]).collect();
                out[tensor::encode(&digits, k)] = x;
            }
            out
        };
        let mut sigma = vec![0.0; k];
        for (v, &s) in self.sigma.iter().enumerate() {
            sigma[perm[v]] = s;
        }
        Self {
            config: self.config,
            early: self.early.iter().enumerate().map(|(i, e)| permute(e, i + 1)).collect(),
            pi: permute(&self.pi, self.config.h + 1),
            sigma,
        }
    }

    /// Relabels states so volatilities are ascending. Returns the permutation
    /// applied (old state -> new state) alongside the result.
    pub fn sorted_by_sigma(&self) -> (Self, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.config.k).collect();
        order.sort_by(|&a, &b| self.sigma[a].total_cmp(&self.sigma[b]).then(a.cmp(&b)));
        let mut perm = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            perm[old] = new;
        }
        (self.relabel(&perm), perm)
    }
}

/// Observed series `y_1..y_T`, e.g. percentage log-returns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSeries {
    pub values: Vec<f64>,
    pub label: Option<String>,
    pub dates: Option<Vec<String>>,
}

impl ObservationSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(HmmError::EmptySeries);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(HmmError::NonFiniteObservation { index: index + 1, value });
        }
        Ok(Self { values, label: None, dates: None })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Normal density with mean zero and standard deviation `sigma[v]`.
pub fn emission_density(y: f64, v: usize, params: &ParameterSet) -> Result<f64> {
    if !y.is_finite() {
        return Err(HmmError::NonFiniteObservation { index: 0, value: y });
    }
    let sigma = *params
        .sigma
        .get(v)
        .ok_or_else(|| HmmError::InvalidConfig(format!("state {v} out of range")))?;
    Ok(log_normal_density(y, sigma).exp())
}

#[inline]
pub(crate) fn log_normal_density(y: f64, sigma: f64) -> f64 {
    let z = y / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log densities of `y` under every state.
pub(crate) fn log_emissions(y: f64, sigma: &[f64]) -> Vec<f64> {
    sigma.iter().map(|&s| log_normal_density(y, s)).collect()
}

/// Draws a state path and observations. States come from `early` for
/// `t <= h` and from `pi` afterwards.
pub fn simulate(params: &ParameterSet, length: usize, seed: u64) -> Result<(Vec<usize>, ObservationSeries)> {
    if length == 0 {
        return Err(HmmError::InvalidLength);
    }
    let v = params.validate();
    if !v.is_empty() {
        return Err(HmmError::InvalidParameters(v));
    }
    let k = params.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(length);
    let mut ys = Vec::with_capacity(length);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for t in 1..=length {
        let lead = params.config.lead(t);
        let row = tensor::encode(&states[t - 1 - lead..t - 1], k);
        let probs = &params.transition(t)[row * k..(row + 1) * k];
        let u = draw_categorical(probs, rng.random::<f64>());
        states.push(u);
        ys.push(params.sigma[u] * std_normal.sample(&mut rng));
    }
    Ok((states, ObservationSeries::new(ys)?))
}

fn draw_categorical(probs: &[f64], r: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if r < acc {
            return i;
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, h: usize) -> ModelConfig {
        ModelConfig::new(k, h).unwrap()
    }

    #[test]
    fn counts_match_table() {
        assert_eq!(param_count(&cfg(3, 1)), 11);
        assert_eq!(param_count(&cfg(4, 2)), 67);
        assert_eq!(param_count(&cfg(1, 0)), 1);
        assert_eq!(param_count(&cfg(3, 2)), 29);
        assert_eq!(param_count(&cfg(2, 0)), 3);
    }

    #[test]
    fn count_matches_free_coordinates() {
        for k in 1..=4 {
            for h in 0..=3 {
                let p = ParameterSet::uniform(cfg(k, h), vec![1.0; k]).unwrap();
                assert_eq!(p.free_coordinates(), param_count(&p.config), "k={k} h={h}");
            }
        }
    }

    #[test]
    fn zero_k_rejected() {
        assert!(ModelConfig::new(0, 1).is_err());
    }

    #[test]
    fn density_values() {
        let p = ParameterSet::uniform(cfg(2, 1), vec![1.0, 1.609]).unwrap();
        let at0 = emission_density(0.0, 0, &p).unwrap();
        assert!((at0 - 0.398_942_280_4).abs() < 1e-10);
        let at1 = emission_density(1.0, 0, &p).unwrap();
        assert!((at1 - at0 * (-0.5f64).exp()).abs() < 1e-15);
        let s: f64 = 1.609;
        let direct = 1.0 / (2.0 * std::f64::consts::PI * s * s).sqrt() * (-(2.0 * 2.0) / (2.0 * s * s)).exp();
        assert!((emission_density(2.0, 1, &p).unwrap() - direct).abs() < 1e-15);
        assert!(emission_density(f64::NAN, 0, &p).is_err());
        assert!(emission_density(f64::INFINITY, 0, &p).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        for &s in &[0.3, 1.0, 3.77] {
            let p = ParameterSet::uniform(cfg(1, 0), vec![s]).unwrap();
            let (a, b, n) = (-10.0 * s, 10.0 * s, 20_000);
            let dx = (b - a) / n as f64;
            // composite Simpson
            let mut acc = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * emission_density(a + i as f64 * dx, 0, &p).unwrap();
            }
            assert!((acc * dx / 3.0 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn validate_reports_each_problem() {
        let good = ParameterSet::uniform(cfg(2, 1), vec![1.0, 2.0]).unwrap();
        assert!(good.validate().is_empty());

        let mut bad = good.clone();
        bad.pi = vec![0.5, 0.4, 0.5, 0.5];
        assert_eq!(
            bad.validate(),
            vec![Violation::RowSum { tensor: TensorId::Pi, row: 1, sum: 0.9 }]
        );

        let mut bad = good.clone();
        bad.sigma[1] = 0.0;
        assert_eq!(bad.validate(), vec![Violation::Sigma { index: 2, value: 0.0 }]);

        let mut bad = good.clone();
        bad.early[0] = vec![1.2, -0.2];
        assert!(bad
            .validate()
            .iter()
            .any(|v| matches!(v, Violation::Negative { tensor: TensorId::Early(1), row: 1, state: 2, .. })));

        let mut bad = good;
        bad.pi.push(0.0);
        assert!(matches!(bad.validate()[0], Violation::Shape { tensor: TensorId::Pi, expected: 4, found: 5 }));
    }

    #[test]
    fn relabel_roundtrip() {
        let p = ParameterSet::first_order(
            vec![0.2, 0.3, 0.5],
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]],
            vec![3.0, 1.0, 2.0],
        )
        .unwrap();
        let (sorted, perm) = p.sorted_by_sigma();
        assert_eq!(sorted.sigma, vec![1.0, 2.0, 3.0]);
        assert_eq!(perm, vec![2, 0, 1]);
        // old (0 -> 1) = 0.2 becomes new (2 -> 0)
        assert_eq!(sorted.pi[2 * 3], 0.2);
        assert!(sorted.validate().is_empty());
        let mut inv = vec![0; 3];
        for (o, &n) in perm.iter().enumerate() {
            inv[n] = o;
        }
        assert_eq!(sorted.relabel(&inv), p);
    }

    #[test]
    fn simulate_single_state() {
        let p = ParameterSet::uniform(cfg(1, 1), vec![2.0]).unwrap();
        let (s, y) = simulate(&p, 500, 3).unwrap();
        assert!(s.iter().all(|&u| u == 0));
        let var = y.values.iter().map(|v| v * v).sum::<f64>() / 500.0;
        assert!((var.sqrt() - 2.0).abs() < 0.2);
        assert!(matches!(simulate(&p, 0, 3), Err(HmmError::InvalidLength)));
    }

    #[test]
    fn simulate_absorbing() {
        let p = ParameterSet::first_order(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 2.0]).unwrap();
        for seed in 0..10 {
            let (s, _) = simulate(&p, 200, seed).unwrap();
            assert!(s.iter().all(|&u| u == s[0]));
        }
    }

    #[test]
    fn simulate_is_deterministic() {
        let p = ParameterSet::uniform(cfg(3, 2), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(simulate(&p, 100, 9).unwrap(), simulate(&p, 100, 9).unwrap());
    }

    #[test]
    fn simulate_frequencies_converge() {
        let p = ParameterSet::first_order(
            vec![0.3, 0.7],
            vec![vec![0.9, 0.1], vec![0.25, 0.75]],
            vec![1.0, 2.0],
        )
        .unwrap();
        let n = 100_000;
        let (s, _) = simulate(&p, n, 17).unwrap();
        let mut counts = [[0.0f64; 2]; 2];
        for w in s.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        for a in 0..2 {
            let row = counts[a][0] + counts[a][1];
            for b in 0..2 {
                let freq = counts[a][b] / row;
                let target = p.pi[a * 2 + b];
                assert!((freq - target).abs() < 0.01);
                let se = (target * (1.0 - target) / row).sqrt();
                assert!((freq - target).abs() < 3.0 * se);
            }
        }
    }

    #[test]
    fn simulate_second_order_frequencies() {
        let k = 2;
        let pi = vec![0.8, 0.2, 0.4, 0.6, 0.3, 0.7, 0.1, 0.9];
        let p = ParameterSet::new(cfg(k, 2), vec![vec![0.5, 0.5], vec![0.5, 0.5, 0.5, 0.5]], pi.clone(), vec![1.0, 2.0]).unwrap();
        let (s, _) = simulate(&p, 100_000, 4).unwrap();
        let mut counts = vec![0.0f64; 8];
        for w in s.windows(3) {
            counts[tensor::encode(w, k)] += 1.0;
        }
        for r in 0..4 {
            let tot = counts[2 * r] + counts[2 * r + 1];
            for b in 0..2 {
                let freq = counts[2 * r + b] / tot;
                let target = pi[2 * r + b];
                let se = (target * (1.0 - target) / tot).sqrt();
                assert!((freq - target).abs() < 3.0 * se, "row {r}");
            }
        }
    }

    #[test]
    fn observation_series_checks() {
        assert!(matches!(ObservationSeries::new(vec![]), Err(HmmError::EmptySeries)));
        assert!(matches!(
            ObservationSeries::new(vec![1.0, f64::NAN]),
            Err(HmmError::NonFiniteObservation { index: 2, .. })
        ));
    }
}
