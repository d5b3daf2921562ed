use crate::error::{HmmError, Result};
use crate::model::{ObservationSeries, ParameterSet};

/// Scaled forward and backward quantities of a first-order model.
///
/// `forward[t][v]` is `f(u_t = v, y_{<=t})` divided by `f(y_{<=t})`, so every
/// row sums to 1; `log_scales[t]` is `log f(y_t | y_{<t})`. `backward[t][v]`
/// is `f(y_{>t} | u_t = v)` divided by `f(y_{>t} | y_{<=t})`.
#[derive(Debug, Clone)]
pub struct ForwardBackwardTables {
    pub k: usize,
    pub forward: Vec<Vec<f64>>,
    pub log_scales: Vec<f64>,
    pub backward: Option<Vec<Vec<f64>>>,
    emissions: Vec<Vec<f64>>,
    transition: Vec<f64>,
}

impl ForwardBackwardTables {
    /// `log f(y)` as the sum of the log scaling factors.
    pub fn log_fy(&self) -> f64 {
        self.log_scales.iter().sum()
    }
}

fn density(y: f64, s: f64) -> f64 {
    (-(y * y) / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s).sqrt()
}

/// Forward recursion `f(u_t, y_{<=t}) = Σ f(u_{t-1}, y_{<=t-1}) p(u_t|u_{t-1}) f(y_t|u_t)`
/// with each row rescaled to sum 1.
pub fn bw_forward(params: &ParameterSet, y: &ObservationSeries) -> Result<ForwardBackwardTables> {
    if params.h() != 1 {
        return Err(HmmError::Oracle(format!("Baum-Welch oracle needs h = 1, got {}", params.h())));
    }
    let k = params.k();
    let emissions: Vec<Vec<f64>> = y
        .values
        .iter()
        .map(|&v| params.sigma.iter().map(|&s| density(v, s)).collect())
        .collect();
    let a = &params.pi;
    let mut forward = Vec::with_capacity(y.len());
    let mut log_scales = Vec::with_capacity(y.len());
    let mut row: Vec<f64> = (0..k).map(|v| params.early[0][v] * emissions[0][v]).collect();
    for t in 0..y.len() {
        if t > 0 {
            let prev: &Vec<f64> = forward.last().unwrap();
            row = (0..k)
                .map(|j| (0..k).map(|i| prev[i] * a[i * k + j]).sum::<f64>() * emissions[t][j])
                .collect();
        }
        let c: f64 = row.iter().sum();
        log_scales.push(c.ln());
        forward.push(row.iter().map(|x| x / c).collect());
    }
    Ok(ForwardBackwardTables { k, forward, log_scales, backward: None, emissions, transition: a.clone() })
}

/// Runs the forward pass and then the backward recursion
/// `f(y_{>t}|u_t) = Σ f(y_{>t+1}|u_{t+1}) p(u_{t+1}|u_t) f(y_{t+1}|u_{t+1})`,
/// started from ones at `t = T` and scaled with the forward factors.
pub fn bw_backward(params: &ParameterSet, y: &ObservationSeries) -> Result<ForwardBackwardTables> {
    let mut tables = bw_forward(params, y)?;
    let (k, n) = (tables.k, y.len());
    let a = &tables.transition;
    let mut backward = vec![vec![1.0; k]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let scale = tables.log_scales[t + 1].exp();
        let next = &backward[t + 1];
        let e = &tables.emissions[t + 1];
        backward[t] = (0..k)
            .map(|i| (0..k).map(|j| a[i * k + j] * e[j] * next[j]).sum::<f64>() / scale)
            .collect();
    }
    tables.backward = Some(backward);
    Ok(tables)
}

/// State posteriors `q(u_t|y)` (`T × k`) and pairwise posteriors
/// `q(u_{t-1}, u_t | y)` for `t = 2..T` (`(T-1) × k × k`, row-major).
pub fn bw_posteriors(tables: &ForwardBackwardTables) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let backward = tables
        .backward
        .as_ref()
        .ok_or_else(|| HmmError::Oracle("backward table missing".into()))?;
    let k = tables.k;
    let marginals = tables
        .forward
        .iter()
        .zip(backward)
        .map(|(f, b)| f.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();
    let mut pairwise = Vec::with_capacity(tables.forward.len().saturating_sub(1));
    for t in 1..tables.forward.len() {
        let scale = tables.log_scales[t].exp();
        let mut slab = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                slab[i * k + j] = tables.forward[t - 1][i] * tables.transition[i * k + j] * tables.emissions[t][j]
                    * backward[t][j]
                    / scale;
            }
        }
        pairwise.push(slab);
    }
    Ok((marginals, pairwise))
}
