//! EM estimation of the Gaussian volatility-regime model, BIC and `(h, k)`
//! grid selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{HmmError, Result};
use crate::model::{param_count, ModelConfig, ObservationSeries, ParameterSet};
use crate::recursion::{smooth, RecursionOptions, SmoothedJoint};
use crate::tensor;

/// Total posterior weight below which a state counts as empty.
pub const EMPTY_STATE_WEIGHT: f64 = 1e-10;

/// Weight on the self-transition for the persistent starting point.
const DIAGONAL_BIAS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSettings {
    pub max_iterations: usize,
    /// Stop when `|ℓ_new - ℓ_old| <= rel_tolerance * |ℓ_old|`.
    pub rel_tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub strict_zeros: bool,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            rel_tolerance: 1e-8,
            n_starts: 10,
            seed: 0,
            strict_zeros: false,
        }
    }
}

impl EmSettings {
    fn check(&self) -> Result<()> {
        if self.max_iterations == 0 || self.n_starts == 0 || !(self.rel_tolerance > 0.0) {
            return Err(HmmError::Estimation(
                "max_iterations, n_starts and rel_tolerance must be positive".into(),
            ));
        }
        Ok(())
    }

    fn recursion(&self) -> RecursionOptions {
        RecursionOptions { strict_zeros: self.strict_zeros }
    }
}

/// Posterior expectations of the complete-data indicators.
#[derive(Debug, Clone)]
pub struct ExpectedCounts {
    /// `ŵ_{t,v} = q(u_t = v | y)`.
    pub w_hat: Vec<Vec<f64>>,
    /// `ẑ_t = q(u_{max(t-h,1)}..u_t | y)`.
    pub z_hat: Vec<SmoothedJoint>,
}

/// E-step: expected indicators and the log-likelihood of `params`.
pub fn e_step(params: &ParameterSet, y: &ObservationSeries, opts: RecursionOptions) -> Result<(ExpectedCounts, f64)> {
    let s = smooth(params, y, opts)?;
    Ok((ExpectedCounts { w_hat: s.marginals, z_hat: s.joints }, s.loglik))
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub params: ParameterSet,
    /// States whose total weight fell below [`EMPTY_STATE_WEIGHT`]; their
    /// volatility was carried over from `previous`.
    pub empty_states: Vec<usize>,
}

fn normalize_rows(values: &mut [f64], k: usize) {
    for row in values.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / k as f64);
        }
    }
}

/// M-step for the Gaussian volatility model:
/// `σ_v = sqrt(Σ_t ŵ_{t,v} y_t² / Σ_t ŵ_{t,v})`, `λ_t` from `ẑ_t` normalized
/// per conditioning row, and `π` from `Σ_{t>h} ẑ_t` normalized per row.
/// Rows with no posterior mass become uniform.
pub fn m_step(counts: &ExpectedCounts, y: &ObservationSeries, previous: &ParameterSet) -> Result<MStep> {
    let config = previous.config;
    let (k, h) = (config.k, config.h);
    let n = y.len();
    if counts.w_hat.len() != n || counts.z_hat.len() != n {
        return Err(HmmError::Estimation(format!(
            "expected counts cover {} occasions, series has {n}",
            counts.w_hat.len()
        )));
    }
    let mut sigma = Vec::with_capacity(k);
    let mut empty_states = Vec::new();
    for v in 0..k {
        let weight: f64 = counts.w_hat.iter().map(|w| w[v]).sum();
        let sq: f64 = counts.w_hat.iter().zip(&y.values).map(|(w, yt)| w[v] * yt * yt).sum();
        let s = (sq / weight).sqrt();
        if weight < EMPTY_STATE_WEIGHT || !(s > 0.0 && s.is_finite()) {
            empty_states.push(v);
            sigma.push(previous.sigma[v]);
        } else {
            sigma.push(s);
        }
    }
    let mut early = Vec::with_capacity(h);
    for t in 1..=h {
        let mut e = if t <= n {
            counts.z_hat[t - 1].values.clone()
        } else {
            vec![0.0; tensor::size(k, t)]
        };
        if e.len() != tensor::size(k, t) {
            return Err(HmmError::Estimation(format!("window posterior at t={t} has the wrong width")));
        }
        normalize_rows(&mut e, k);
        early.push(e);
    }
    let mut pi = vec![0.0; tensor::size(k, h + 1)];
    for z in counts.z_hat.iter().skip(h) {
        if z.values.len() != pi.len() {
            return Err(HmmError::Estimation(format!("window posterior at t={} has the wrong width", z.t)));
        }
        for (acc, x) in pi.iter_mut().zip(&z.values) {
            *acc += x;
        }
    }
    normalize_rows(&mut pi, k);
    let params = ParameterSet::new(config, early, pi, sigma)?;
    Ok(MStep { params, empty_states })
}

/// `-2 ℓ + npar ln T`.
pub fn bic(loglik: f64, npar: usize, len: usize) -> f64 {
    -2.0 * loglik + npar as f64 * (len as f64).ln()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    pub loglik: f64,
    pub npar: usize,
    pub bic: f64,
    /// Log-likelihood of each evaluated parameter set, in order.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub start_index: usize,
    pub warnings: Vec<String>,
}

fn dirichlet_row(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, k: usize, vars: usize, biased: bool) -> Vec<f64> {
    let rows = tensor::size(k, vars - 1);
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let mut row = dirichlet_row(rng, k);
        if biased && vars > 1 {
            let last = r % k;
            for (v, x) in row.iter_mut().enumerate() {
                *x = (1.0 - DIAGONAL_BIAS) * *x + if v == last { DIAGONAL_BIAS } else { 0.0 };
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        out.extend(row);
    }
    out
}

/// Volatilities from `k` quantile bands of `|y|`.
fn band_sigmas(y: &[f64], k: usize) -> Vec<f64> {
    let mut sq: Vec<f64> = y.iter().map(|v| v * v).collect();
    sq.sort_by(f64::total_cmp);
    let rms = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    let n = sq.len();
    (0..k)
        .map(|v| {
            let (lo, hi) = (v * n / k, (v + 1) * n / k);
            let s = if hi > lo {
                (sq[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).sqrt()
            } else {
                rms * (v + 1) as f64 / k as f64
            };
            // keep starting levels positive and distinct
            s.max(rms * 1e-3 * (v + 1) as f64)
        })
        .collect()
}

fn starting_point(config: ModelConfig, y: &[f64], seed: u64, start: usize) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let (k, h) = (config.k, config.h);
    let biased = start == 0;
    let mut sigma = band_sigmas(y, k);
    if !biased {
        for s in sigma.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s *= (0.5 * z).exp();
        }
    }
    let early = (1..=h).map(|t| random_tensor(&mut rng, k, t, biased)).collect();
    let pi = random_tensor(&mut rng, k, h + 1, biased);
    ParameterSet::new(config, early, pi, sigma)
}

fn run_start(config: ModelConfig, y: &ObservationSeries, settings: &EmSettings, start: usize) -> Result<FitResult> {
    let init = starting_point(config, &y.values, settings.seed, start)?;
    fit_from(init, y, settings).map(|mut r| {
        r.start_index = start;
        r
    })
}

/// Runs EM from a given starting point.
pub fn fit_from(init: ParameterSet, y: &ObservationSeries, settings: &EmSettings) -> Result<FitResult> {
    settings.check()?;
    let opts = settings.recursion();
    let npar = param_count(&init.config);
    let mut params = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut empty: Vec<usize> = Vec::new();
    let mut warnings = Vec::new();
    loop {
        let (counts, ll) = e_step(&params, y, opts)?;
        if !ll.is_finite() {
            return Err(HmmError::Estimation(format!("log-likelihood is {ll}")));
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() <= settings.rel_tolerance * prev.abs() {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || trace.len() >= settings.max_iterations {
            break;
        }
        let step = m_step(&counts, y, &params)?;
        if !step.empty_states.is_empty() && step.empty_states != empty {
            warnings.push(format!(
                "iteration {}: empty state(s) {:?}, volatility kept",
                trace.len(),
                step.empty_states.iter().map(|v| v + 1).collect::<Vec<_>>()
            ));
        }
        empty = step.empty_states;
        params = step.params;
    }
    if !empty.is_empty() {
        converged = false;
        warnings.push(format!(
            "state(s) {:?} still empty at termination",
            empty.iter().map(|v| v + 1).collect::<Vec<_>>()
        ));
    }
    let loglik = *trace.last().expect("at least one evaluation");
    Ok(FitResult {
        bic: bic(loglik, npar, y.len()),
        params,
        loglik,
        npar,
        trace,
        converged,
        start_index: 0,
        warnings,
    })
}

/// Best of `n_starts` EM runs by final log-likelihood (ties to the lowest
/// start). Start 0 uses persistent transitions and band volatilities; the
/// others draw transition rows from a flat Dirichlet and jitter the
/// volatilities.
pub fn fit(config: ModelConfig, y: &ObservationSeries, settings: &EmSettings) -> Result<FitResult> {
    settings.check()?;
    if y.is_empty() {
        return Err(HmmError::EmptySeries);
    }
    let runs: Vec<Result<FitResult>> = (0..settings.n_starts)
        .into_par_iter()
        .map(|s| run_start(config, y, settings, s))
        .collect();
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(fr) => {
                if best.as_ref().is_none_or(|b| fr.loglik > b.loglik) {
                    best = Some(fr);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| {
        HmmError::Estimation(format!(
            "all {} starts failed: {}",
            settings.n_starts,
            first_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub h: usize,
    pub k: usize,
    pub npar: usize,
    pub outcome: std::result::Result<FitResult, String>,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub len: usize,
    /// Cells ordered by `(h, k)`.
    pub cells: Vec<GridCell>,
    pub selected: Option<(usize, usize)>,
}

impl GridReport {
    pub fn cell(&self, h: usize, k: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.h == h && c.k == k)
    }
}

/// Fits every `(h, k)` combination and selects the smallest BIC, ties going
/// to the smaller `(h, k)`. A failing cell is recorded without stopping the
/// grid.
pub fn grid_search(y: &ObservationSeries, h_values: &[usize], k_values: &[usize], settings: &EmSettings) -> Result<GridReport> {
    if h_values.is_empty() || k_values.is_empty() {
        return Err(HmmError::Estimation("grid needs at least one h and one k".into()));
    }
    let mut pairs: Vec<(usize, usize)> = h_values
        .iter()
        .flat_map(|&h| k_values.iter().map(move |&k| (h, k)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(h, k)| {
            let outcome = ModelConfig::new(k, h)
                .and_then(|cfg| fit(cfg, y, settings))
                .map_err(|e| e.to_string());
            let npar = if k > 0 { param_count(&ModelConfig { k, h, emission: Default::default() }) } else { 0 };
            GridCell { h, k, npar, outcome }
        })
        .collect();
    let mut selected: Option<((usize, usize), f64)> = None;
    for c in &cells {
        if let Ok(fr) = &c.outcome {
            if selected.is_none_or(|(_, b)| fr.bic < b) {
                selected = Some(((c.h, c.k), fr.bic));
            }
        }
    }
    Ok(GridReport { len: y.len(), cells, selected: selected.map(|(hk, _)| hk) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use rand::Rng;

    fn series(v: Vec<f64>) -> ObservationSeries {
        ObservationSeries::new(v).unwrap()
    }

    #[test]
    fn bic_values() {
        assert!((bic(-2026.60, 1, 1007) - 4060.12).abs() <= 0.01);
        assert_eq!(bic(0.0, 0, 17), 0.0);
    }

    #[test]
    fn single_state_fit_is_gaussian_mle() {
        let y = series(vec![0.5, -1.5, 2.0, 0.1, -0.7]);
        let r = fit(ModelConfig::new(1, 1).unwrap(), &y, &EmSettings::default()).unwrap();
        let mle = (y.values.iter().map(|v| v * v).sum::<f64>() / 5.0).sqrt();
        assert!((r.params.sigma[0] - mle).abs() < 1e-12);
        assert!(r.converged);
        assert!(r.trace.len() <= 3);
        assert_eq!(r.npar, 1);
    }

    #[test]
    fn single_state_counts_are_ones() {
        let p = ParameterSet::uniform(ModelConfig::new(1, 2).unwrap(), vec![1.0]).unwrap();
        let (c, _) = e_step(&p, &series(vec![0.3, 1.0, -0.2]), RecursionOptions::default()).unwrap();
        assert!(c.w_hat.iter().all(|r| r == &vec![1.0]));
        assert!(c.z_hat.iter().all(|z| z.values == vec![1.0]));
    }

    #[test]
    fn all_weight_on_one_state() {
        let cfg = ModelConfig::new(2, 1).unwrap();
        let prev = ParameterSet::uniform(cfg, vec![0.7, 5.0]).unwrap();
        let y = series(vec![1.0, -2.0, 3.0]);
        let z = |t: usize, vars: usize| SmoothedJoint {
            t,
            k: 2,
            vars,
            values: {
                let mut v = vec![0.0; 1 << vars];
                v[0] = 1.0;
                v
            },
        };
        let counts = ExpectedCounts { w_hat: vec![vec![1.0, 0.0]; 3], z_hat: vec![z(1, 1), z(2, 2), z(3, 2)] };
        let step = m_step(&counts, &y, &prev).unwrap();
        assert!((step.params.sigma[0] - (14.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert_eq!(step.params.sigma[1], 5.0);
        assert_eq!(step.empty_states, vec![1]);
        // row of state 2 never observed: uniform
        assert_eq!(step.params.pi, vec![1.0, 0.0, 0.5, 0.5]);
        assert_eq!(step.params.early[0], vec![1.0, 0.0]);
    }

    #[test]
    fn deterministic_path_gives_indicator_transitions() {
        // path 0,1,1,0 with certainty
        let path = [0usize, 1, 1, 0];
        let cfg = ModelConfig::new(2, 1).unwrap();
        let prev = ParameterSet::uniform(cfg, vec![1.0, 2.0]).unwrap();
        let w_hat: Vec<Vec<f64>> = path.iter().map(|&u| if u == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let mut z_hat = vec![SmoothedJoint { t: 1, k: 2, vars: 1, values: w_hat[0].clone() }];
        for t in 2..=4 {
            let mut v = vec![0.0; 4];
            v[path[t - 2] * 2 + path[t - 1]] = 1.0;
            z_hat.push(SmoothedJoint { t, k: 2, vars: 2, values: v });
        }
        let y = series(vec![1.0, 2.0, 2.0, 1.0]);
        let step = m_step(&ExpectedCounts { w_hat, z_hat }, &y, &prev).unwrap();
        assert_eq!(step.params.pi, vec![0.0, 1.0, 0.5, 0.5]);
        assert_eq!(step.params.early[0], vec![1.0, 0.0]);
        assert!((step.params.sigma[0] - 1.0).abs() < 1e-15);
        assert!((step.params.sigma[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn m_step_pi_is_locally_optimal() {
        // expected complete-data objective in π alone: Σ_rows Σ_v counts log π
        let truth = ParameterSet::first_order(vec![0.5, 0.5], vec![vec![0.85, 0.15], vec![0.2, 0.8]], vec![1.0, 2.5]).unwrap();
        let (_, y) = simulate(&truth, 200, 5).unwrap();
        let (counts, _) = e_step(&truth, &y, RecursionOptions::default()).unwrap();
        let step = m_step(&counts, &y, &truth).unwrap();
        let mut agg = [0.0f64; 4];
        for z in counts.z_hat.iter().skip(1) {
            for (a, x) in agg.iter_mut().zip(&z.values) {
                *a += x;
            }
        }
        let objective = |pi: &[f64]| -> f64 { agg.iter().zip(pi).map(|(c, p)| c * p.ln()).sum() };
        let best = objective(&step.params.pi);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut pi = step.params.pi.clone();
            for r in 0..2 {
                let d: f64 = rng.random_range(-0.05..0.05);
                pi[2 * r] = (pi[2 * r] + d).clamp(1e-6, 1.0 - 1e-6);
                pi[2 * r + 1] = 1.0 - pi[2 * r];
            }
            assert!(objective(&pi) <= best + 1e-12);
        }
    }

    #[test]
    fn em_is_monotone_second_order() {
        let cfg = ModelConfig::new(2, 2).unwrap();
        let truth = ParameterSet::new(
            cfg,
            vec![vec![0.5, 0.5], vec![0.9, 0.1, 0.2, 0.8]],
            vec![0.95, 0.05, 0.6, 0.4, 0.3, 0.7, 0.1, 0.9],
            vec![0.8, 2.4],
        )
        .unwrap();
        let (_, y) = simulate(&truth, 400, 21).unwrap();
        let settings = EmSettings { n_starts: 3, max_iterations: 200, ..Default::default() };
        let r = fit(cfg, &y, &settings).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        assert_eq!(r.npar, param_count(&cfg));
        assert!((r.bic - bic(r.loglik, r.npar, 400)).abs() < 1e-9);
    }

    #[test]
    fn grid_single_cell() {
        let y = series(vec![0.5, -1.5, 2.0, 0.1, -0.7]);
        let g = grid_search(&y, &[0], &[1], &EmSettings { n_starts: 1, ..Default::default() }).unwrap();
        assert_eq!(g.selected, Some((0, 1)));
        assert_eq!(g.cells.len(), 1);
        assert!(grid_search(&y, &[], &[1], &EmSettings::default()).is_err());
    }

    #[test]
    fn grid_keeps_going_after_failed_cell() {
        let y = series(vec![0.5, -1.5, 2.0, 0.1, -0.7]);
        let g = grid_search(&y, &[0], &[0, 1], &EmSettings { n_starts: 1, ..Default::default() }).unwrap();
        assert!(g.cell(0, 0).unwrap().outcome.is_err());
        assert_eq!(g.selected, Some((0, 1)));
    }

    #[test]
    fn settings_are_checked() {
        let y = series(vec![0.5]);
        let cfg = ModelConfig::new(1, 0).unwrap();
        assert!(fit(cfg, &y, &EmSettings { n_starts: 0, ..Default::default() }).is_err());
        assert!(fit(cfg, &y, &EmSettings { rel_tolerance: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn band_sigmas_are_positive_and_ordered() {
        let s = band_sigmas(&[0.0, 0.0, 1.0, -2.0, 3.0, 0.5], 3);
        assert!(s.iter().all(|&x| x > 0.0));
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        let s = band_sigmas(&[0.0], 3);
        assert!(s.iter().all(|&x| x > 0.0));
    }
}
