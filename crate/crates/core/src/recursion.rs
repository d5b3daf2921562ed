//! Backward peeling recursion for latent-state posteriors of an order-`h`
//! hidden Markov model, the forward recursion for smoothed window joints,
//! the likelihood identity, local decoding and prediction.
//!
//! For each occasion `t` the backward pass first forms the full conditional
//! of `U_t` given its whole window `u_{max(t-h,1)}..u_{t+j}` and `y_t`, with
//! `j = min(T-t, h)`, then removes the future conditioning states one at a
//! time (latest first) using already computed slices `q_{t+j+1,0}`:
//!
//! ```text
//! q(u_t | .., u_{t+j}, y) = [ Σ_{u_{t+j+1}} q(u_{t+j+1} | .., y) / q(u_t | .., u_{t+j+1}, y) ]^-1
//! ```
//!
//! All quantities are conditional probabilities, so no rescaling is needed.
//! Emission vectors are divided by their maximum over states before use; the
//! factor cancels in every conditional and keeps numerators in `[0, 1]`.
//!
//! Structural zeros: an exactly zero transition probability makes both
//! `q_{t+j+1,0}` and `q_{t,j+1}` vanish together, and the reciprocal sum then
//! contains `0/0` terms whose limit is finite. Zero transitions are therefore
//! raised to a tiny floor ([`zero_floor`]) inside the recursion, which
//! evaluates the limit of the perturbed model. Remaining zeros (emission
//! underflow) follow a zero-mass convention: a window configuration whose
//! numerator vanishes for every `u_t` gets conditional probability 0, and a
//! reciprocal-sum term with zero numerator contributes nothing. With
//! [`RecursionOptions::strict_zeros`] no floor is applied and every zero
//! normalizer or zero denominator is an error.

use crate::error::{HmmError, Result};
use crate::model::{log_emissions, ObservationSeries, ParameterSet};
use crate::tensor;

/// Upper slack tolerated on a peeled probability before declaring the input
/// windows misaligned.
const PROB_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecursionOptions {
    /// Error out on zero normalizers and zero denominators instead of
    /// applying the zero-mass convention.
    pub strict_zeros: bool,
}

/// `q(u_t | u_{t-lead}..u_{t-1}, u_{t+1}..u_{t+j}, y)` over the window
/// `u_{t-lead}..u_{t+j}`, lexicographic with the latest state fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSlice {
    pub t: usize,
    pub j: usize,
    /// Number of conditioning states before `u_t`, `min(t-1, h)`.
    pub lead: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl PosteriorSlice {
    /// Window width `d_{t,j} = min(t-1,h) + j + 1`.
    #[inline]
    pub fn vars(&self) -> usize {
        self.lead + self.j + 1
    }

    /// First time index covered by the window.
    #[inline]
    pub fn start(&self) -> usize {
        self.t - self.lead
    }

    /// Entry for a window configuration given in time order.
    pub fn get(&self, window: &[usize]) -> f64 {
        self.values[tensor::encode(window, self.k)]
    }
}

/// Unnormalized numerator `f(y_t|u_t) Π_{l=0..j} p(u_{t+l} | window)` over
/// the same window as the corresponding [`PosteriorSlice`]. The emission
/// factor is scaled by `1 / max_v f(y_t|v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumeratorTensor {
    pub t: usize,
    pub j: usize,
    pub lead: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

/// `q(u_{max(t-h,1)}..u_t | y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedJoint {
    pub t: usize,
    pub k: usize,
    pub vars: usize,
    pub values: Vec<f64>,
}

/// Tensors produced along the backward pass, reported to an observer.
#[derive(Debug, Clone, Copy)]
pub enum Intermediate<'a> {
    Numerator(&'a NumeratorTensor),
    Slice(&'a PosteriorSlice),
}

fn scaled_emissions(y: f64, sigma: &[f64]) -> Result<Vec<f64>> {
    if !y.is_finite() {
        return Err(HmmError::NonFiniteObservation { index: 0, value: y });
    }
    let logs = log_emissions(y, sigma);
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(logs.into_iter().map(|l| (l - max).exp()).collect())
}

/// Floor applied to zero transition probabilities for an order-`h` model.
/// Small enough to be invisible at double precision in every positive
/// quantity, large enough that a product of `h + 1` floored factors and a
/// scaled emission stays representable.
pub fn zero_floor(h: usize) -> f64 {
    f64::MIN_POSITIVE.powf(1.0 / (2.0 * (h as f64 + 1.0)))
}

fn numerator(params: &ParameterSet, f: &[f64], t: usize, j: usize, floor: f64) -> NumeratorTensor {
    let k = params.k();
    let cfg = &params.config;
    let lead = cfg.lead(t);
    let mut a = tensor::prepend(f, k, lead);
    for (x, p) in a.iter_mut().zip(params.transition(t)) {
        *x *= p.max(floor);
    }
    for l in 1..=j {
        a = tensor::append(&a, k, 1);
        // p_{t+l} covers a suffix of the current window
        let p = params.transition(t + l);
        let n = p.len();
        for (i, x) in a.iter_mut().enumerate() {
            *x *= p[i % n].max(floor);
        }
    }
    NumeratorTensor { t, j, lead, k, values: a }
}

/// Divides by the sum over the variable at `axis`, per configuration of the
/// remaining variables.
fn normalize_axis(a: &[f64], k: usize, vars: usize, axis: usize, t: usize, j: usize, opts: RecursionOptions) -> Result<Vec<f64>> {
    let inner = tensor::size(k, vars - axis - 1);
    let outer = tensor::size(k, axis);
    let mut out = vec![0.0; a.len()];
    for o in 0..outer {
        for s in 0..inner {
            let c: f64 = (0..k).map(|v| a[(o * k + v) * inner + s]).sum();
            if c > 0.0 {
                for v in 0..k {
                    let i = (o * k + v) * inner + s;
                    out[i] = a[i] / c;
                }
            } else if opts.strict_zeros {
                return Err(HmmError::ZeroNormalizer { t, j, config: o * inner + s });
            }
        }
    }
    Ok(out)
}

fn check_params(params: &ParameterSet) -> Result<()> {
    let v = params.validate();
    if v.is_empty() {
        Ok(())
    } else {
        Err(HmmError::InvalidParameters(v))
    }
}

/// Full conditional of `U_t` given `u_{max(t-h,1)}..u_{t-1}`,
/// `u_{t+1}..u_{t+j}` and `y_t`, together with its numerator.
pub fn windowed_full_conditional(
    params: &ParameterSet,
    y_t: f64,
    t: usize,
    j: usize,
    opts: RecursionOptions,
) -> Result<(PosteriorSlice, NumeratorTensor)> {
    if t == 0 {
        return Err(HmmError::Misaligned("time index is 1-based".into()));
    }
    if j > params.h() {
        return Err(HmmError::Misaligned(format!("look-ahead {j} exceeds order {}", params.h())));
    }
    let f = scaled_emissions(y_t, &params.sigma)?;
    let floor = if opts.strict_zeros { 0.0 } else { zero_floor(params.h()) };
    let a = numerator(params, &f, t, j, floor);
    let vars = a.lead + j + 1;
    let q = normalize_axis(&a.values, a.k, vars, a.lead, t, j, opts)?;
    Ok((PosteriorSlice { t, j, lead: a.lead, k: a.k, values: q }, a))
}

/// `q(u_T | u_{max(T-h,1)}..u_{T-1}, y)` for the last occasion `T`.
pub fn terminal_posterior(params: &ParameterSet, y_last: f64, last: usize, opts: RecursionOptions) -> Result<PosteriorSlice> {
    windowed_full_conditional(params, y_last, last, 0, opts).map(|(q, _)| q)
}

/// Removes the conditioning on the latest future state `u_{t+j+1}` from
/// `inner = q_{t,j+1}` using `next = q_{t+j+1,0}`.
pub fn peel(inner: &PosteriorSlice, next: &PosteriorSlice, opts: RecursionOptions) -> Result<PosteriorSlice> {
    if inner.j == 0 || next.j != 0 {
        return Err(HmmError::Misaligned(format!(
            "peel needs q(t, j+1) and q(t', 0), got j={} and j={}",
            inner.j, next.j
        )));
    }
    if inner.k != next.k || next.t != inner.t + inner.j {
        return Err(HmmError::Misaligned(format!(
            "slice ending at t={} cannot be peeled with slice for t={}",
            inner.t + inner.j,
            next.t
        )));
    }
    if next.start() < inner.start() || inner.vars() - next.vars() != next.start() - inner.start() {
        return Err(HmmError::Misaligned(format!(
            "window of t={} is not a suffix of the window of t={}",
            next.t, inner.t
        )));
    }
    let k = inner.k;
    let n = next.values.len();
    let rows = inner.values.len() / k;
    let mut out = vec![0.0; rows];
    for (r, slot) in out.iter_mut().enumerate() {
        let mut sum = 0.0;
        let mut unbounded = false;
        for w in 0..k {
            let i = r * k + w;
            let num = next.values[i % n];
            let den = inner.values[i];
            if num == 0.0 {
                if den == 0.0 && opts.strict_zeros {
                    return Err(HmmError::ZeroPosterior { t: inner.t, j: inner.j, config: i });
                }
                continue;
            }
            if den == 0.0 {
                if opts.strict_zeros {
                    return Err(HmmError::ZeroPosterior { t: inner.t, j: inner.j, config: i });
                }
                unbounded = true;
                break;
            }
            sum += num / den;
        }
        *slot = if unbounded {
            0.0
        } else if sum > 0.0 {
            1.0 / sum
        } else if opts.strict_zeros {
            return Err(HmmError::ZeroNormalizer { t: inner.t, j: inner.j - 1, config: r });
        } else {
            0.0
        };
        if !(*slot <= 1.0 + PROB_SLACK) {
            return Err(HmmError::Misaligned(format!(
                "peeled probability {} at t={} exceeds 1",
                slot, inner.t
            )));
        }
    }
    Ok(PosteriorSlice { t: inner.t, j: inner.j - 1, lead: inner.lead, k, values: out })
}

/// Computes `q_{t,0} = q(u_t | u_{max(t-h,1)}..u_{t-1}, y)` for every
/// `t = 1..T`. Slice `t` is at index `t - 1`.
pub fn backward_pass(params: &ParameterSet, y: &ObservationSeries, opts: RecursionOptions) -> Result<Vec<PosteriorSlice>> {
    backward_pass_observed(params, y, opts, |_| {})
}

/// [`backward_pass`] that hands every numerator and every slice (all
/// look-ahead levels) to `observer` as it is produced.
pub fn backward_pass_observed<F>(
    params: &ParameterSet,
    y: &ObservationSeries,
    opts: RecursionOptions,
    mut observer: F,
) -> Result<Vec<PosteriorSlice>>
where
    F: FnMut(Intermediate<'_>),
{
    check_params(params)?;
    let n = y.len();
    if n == 0 {
        return Err(HmmError::EmptySeries);
    }
    let h = params.h();
    let mut slices: Vec<Option<PosteriorSlice>> = vec![None; n];
    for t in (1..=n).rev() {
        let j = (n - t).min(h);
        let (mut q, a) = windowed_full_conditional(params, y.values[t - 1], t, j, opts)
            .map_err(|e| at_index(e, t))?;
        observer(Intermediate::Numerator(&a));
        observer(Intermediate::Slice(&q));
        for jj in (0..j).rev() {
            let next = slices[t + jj].as_ref().expect("later slices computed first");
            q = peel(&q, next, opts)?;
            observer(Intermediate::Slice(&q));
        }
        slices[t - 1] = Some(q);
    }
    Ok(slices.into_iter().map(|s| s.expect("all slices filled")).collect())
}

fn at_index(e: HmmError, t: usize) -> HmmError {
    match e {
        HmmError::NonFiniteObservation { value, .. } => HmmError::NonFiniteObservation { index: t, value },
        other => other,
    }
}

/// Smoothed window joints from the target slices:
/// `q*_1 = q_{1,0}`, then `q*_t = q_{t,0} × (q*_{t-1} ⊗ 1_k)` while the
/// window is growing and `q*_t = q_{t,0} × ((M_1 q*_{t-1}) ⊗ 1_k)` once it
/// has reached `h + 1` states.
pub fn forward_joint_pass(slices: &[PosteriorSlice]) -> Result<Vec<SmoothedJoint>> {
    let first = slices.first().ok_or(HmmError::EmptySeries)?;
    let k = first.k;
    let mut out: Vec<SmoothedJoint> = Vec::with_capacity(slices.len());
    for (i, q) in slices.iter().enumerate() {
        if q.j != 0 || q.t != i + 1 || q.k != k {
            return Err(HmmError::Misaligned(format!("slice {} is not q(t={}, 0)", i, i + 1)));
        }
        let values = match out.last() {
            None => q.values.clone(),
            Some(prev) => {
                let base = if prev.vars == q.vars() {
                    tensor::marginalize_unchecked(&prev.values, k, prev.vars, 0)
                } else if prev.vars + 1 == q.vars() {
                    prev.values.clone()
                } else {
                    return Err(HmmError::Misaligned(format!("window of t={} does not follow t={}", q.t, prev.t)));
                };
                let mut v = tensor::append(&base, k, 1);
                for (x, p) in v.iter_mut().zip(&q.values) {
                    *x *= p;
                }
                v
            }
        };
        out.push(SmoothedJoint { t: q.t, k, vars: q.vars(), values });
    }
    Ok(out)
}

/// `q(u_t | y)` for every `t`, as a `T × k` table.
pub fn state_marginals(joints: &[SmoothedJoint]) -> Vec<Vec<f64>> {
    joints
        .iter()
        .map(|z| {
            let mut row = vec![0.0; z.k];
            for (i, &x) in z.values.iter().enumerate() {
                row[i % z.k] += x;
            }
            row
        })
        .collect()
}

/// Log-likelihood through `p(y) = f(u, y) / q(u | y)` for one reference
/// state path `u`:
///
/// `ℓ = Σ_t log f(y_t|u_t) + log p(u_t | window) - log q(u_t | window, y)`.
///
/// `opts` must be the options the slices were computed with, so that the
/// transition factors carry the same zero floor as the posteriors.
///
/// With `reference = None` the all-`0` path is tried first; if it hits a
/// zero posterior, a path that follows the most probable state given the
/// states already chosen is used instead (always admissible).
pub fn log_likelihood(
    params: &ParameterSet,
    y: &ObservationSeries,
    slices: &[PosteriorSlice],
    reference: Option<&[usize]>,
    opts: RecursionOptions,
) -> Result<f64> {
    let floor = if opts.strict_zeros { 0.0 } else { zero_floor(params.h()) };
    match reference {
        Some(path) => log_likelihood_along(params, y, slices, path, floor),
        None => {
            let ones = vec![0; y.len()];
            match log_likelihood_along(params, y, slices, &ones, floor) {
                Err(HmmError::InadmissibleReference { .. }) => {
                    let path = greedy_path(slices);
                    log_likelihood_along(params, y, slices, &path, floor)
                }
                other => other,
            }
        }
    }
}

fn log_likelihood_along(
    params: &ParameterSet,
    y: &ObservationSeries,
    slices: &[PosteriorSlice],
    path: &[usize],
    floor: f64,
) -> Result<f64> {
    let k = params.k();
    if path.len() != y.len() || slices.len() != y.len() {
        return Err(HmmError::Misaligned(format!(
            "series, slices and reference lengths differ ({}, {}, {})",
            y.len(),
            slices.len(),
            path.len()
        )));
    }
    if let Some(&bad) = path.iter().find(|&&s| s >= k) {
        return Err(HmmError::InvalidConfig(format!("reference state {bad} out of range")));
    }
    let mut total = 0.0;
    for (i, q) in slices.iter().enumerate() {
        let t = i + 1;
        let window = &path[t - 1 - q.lead..t];
        let idx = tensor::encode(window, k);
        let post = q.values[idx];
        let prior = params.transition(t)[idx].max(floor);
        if !(post > 0.0 && prior > 0.0) {
            return Err(HmmError::InadmissibleReference { t });
        }
        let u = path[t - 1];
        let log_f = crate::model::log_normal_density(y.values[i], params.sigma[u]);
        total += log_f + prior.ln() - post.ln();
    }
    Ok(total)
}

/// Sequentially picks the most probable state given the states already
/// chosen; every step has positive posterior.
pub fn greedy_path(slices: &[PosteriorSlice]) -> Vec<usize> {
    let mut path: Vec<usize> = Vec::with_capacity(slices.len());
    for (i, q) in slices.iter().enumerate() {
        let t = i + 1;
        let k = q.k;
        let row = tensor::encode(&path[t - 1 - q.lead..t - 1], k);
        path.push(argmax(&q.values[row * k..(row + 1) * k]));
    }
    path
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `û_t = argmax_v q(u_t = v | y)`, ties going to the lowest state.
pub fn local_decode(marginals: &[Vec<f64>]) -> Vec<usize> {
    marginals.iter().map(|row| argmax(row)).collect()
}

/// One-step-ahead state prediction and predictive mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub state: usize,
    /// `p(u_{T+1} = v | window)`.
    pub weights: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Prediction {
    /// Predictive density `Σ_v f(y|v) p(u_{T+1}=v | window)`.
    pub fn density(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.sigma)
            .map(|(w, &s)| w * crate::model::log_normal_density(y, s).exp())
            .sum()
    }
}

/// Predicts occasion `T + 1` from a state history `u_1..u_T` (typically the
/// local decoding). Past `T` there are no observations, so the posterior of
/// `U_{T+1}` given its window equals the transition law.
pub fn predict(params: &ParameterSet, history: &[usize]) -> Result<Prediction> {
    check_params(params)?;
    let k = params.k();
    if let Some(&bad) = history.iter().find(|&&s| s >= k) {
        return Err(HmmError::InvalidConfig(format!("state {bad} out of range")));
    }
    let t = history.len() + 1;
    let lead = params.config.lead(t);
    let row = tensor::encode(&history[history.len() - lead..], k);
    let weights = params.transition(t)[row * k..(row + 1) * k].to_vec();
    Ok(Prediction { state: argmax(&weights), weights, sigma: params.sigma.clone() })
}

/// Everything the backward and forward passes produce for one series.
#[derive(Debug, Clone)]
pub struct Smoothing {
    pub slices: Vec<PosteriorSlice>,
    pub joints: Vec<SmoothedJoint>,
    pub marginals: Vec<Vec<f64>>,
    pub loglik: f64,
}

/// Runs the backward pass, forward joint pass, marginalization and
/// likelihood identity in one go.
pub fn smooth(params: &ParameterSet, y: &ObservationSeries, opts: RecursionOptions) -> Result<Smoothing> {
    let slices = backward_pass(params, y, opts)?;
    let joints = forward_joint_pass(&slices)?;
    let marginals = state_marginals(&joints);
    let loglik = log_likelihood(params, y, &slices, None, opts)?;
    Ok(Smoothing { slices, joints, marginals, loglik })
}
