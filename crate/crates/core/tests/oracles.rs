use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use hohmm::oracle::{brute_force_joint, bw_backward, bw_posteriors};
use hohmm::tensor;
use hohmm::{
    backward_pass, bic, e_step, grid_search, log_likelihood, m_step, simulate, smooth, EmSettings, ModelConfig,
    ObservationSeries, ParameterSet, RecursionOptions,
};

const OPTS: RecursionOptions = RecursionOptions { strict_zeros: false };

fn random_params(rng: &mut ChaCha8Rng, k: usize, h: usize) -> ParameterSet {
    let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let g: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|x| x / s).collect()
    };
    let tensor = |rng: &mut ChaCha8Rng, vars: usize| -> Vec<f64> {
        (0..tensor::size(k, vars - 1)).flat_map(|_| row(rng)).collect()
    };
    let early = (1..=h).map(|t| tensor(rng, t)).collect();
    let pi = tensor(rng, h + 1);
    let sigma = (0..k).map(|_| rng.random_range(0.4..3.5)).collect();
    ParameterSet::new(ModelConfig::new(k, h).unwrap(), early, pi, sigma).unwrap()
}

fn random_series(rng: &mut ChaCha8Rng, n: usize) -> ObservationSeries {
    let v = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            2.0 * z
        })
        .collect();
    ObservationSeries::new(v).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_are_exact_conditionals(seed in any::<u64>(), k in 1usize..=3, h in 0usize..=3, n in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, k, h);
        let y = random_series(&mut rng, n);
        let bf = brute_force_joint(&p, &y).unwrap();
        let s = smooth(&p, &y, OPTS).unwrap();
        for q in &s.slices {
            let times: Vec<usize> = (q.start()..q.start() + q.vars()).collect();
            prop_assert!(max_diff(&q.values, &bf.conditional(&times, q.lead)) < 1e-10);
        }
        for z in &s.joints {
            let times: Vec<usize> = (z.t + 1 - z.vars..=z.t).collect();
            prop_assert!(max_diff(&z.values, &bf.window_marginal(&times)) < 1e-10);
        }
        prop_assert!((s.loglik - bf.log_fy).abs() < 1e-10);
    }

    #[test]
    fn any_reference_path_gives_the_same_likelihood(seed in any::<u64>(), k in 1usize..=3, h in 0usize..=2, n in 1usize..=15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, k, h);
        let y = random_series(&mut rng, n);
        let slices = backward_pass(&p, &y, OPTS).unwrap();
        let base = log_likelihood(&p, &y, &slices, None, OPTS).unwrap();
        let path: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let other = log_likelihood(&p, &y, &slices, Some(&path), OPTS).unwrap();
        prop_assert!((base - other).abs() < 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn relabeling_states_preserves_likelihood(seed in any::<u64>(), k in 2usize..=3, h in 0usize..=2, n in 1usize..=20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, k, h);
        let y = random_series(&mut rng, n);
        let (q, perm) = p.sorted_by_sigma();
        let a = smooth(&p, &y, OPTS).unwrap();
        let b = smooth(&q, &y, OPTS).unwrap();
        prop_assert!((a.loglik - b.loglik).abs() < 1e-10);
        for (ra, rb) in a.marginals.iter().zip(&b.marginals) {
            for (old, &new) in perm.iter().enumerate() {
                prop_assert!((ra[old] - rb[new]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn expected_counts_are_consistent(seed in any::<u64>(), k in 1usize..=3, h in 0usize..=3, n in 1usize..=30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, k, h);
        let y = random_series(&mut rng, n);
        let (c, _) = e_step(&p, &y, OPTS).unwrap();
        let total: f64 = c.w_hat.iter().flatten().sum();
        prop_assert!((total - n as f64).abs() < 1e-9);
        for (z, w) in c.z_hat.iter().zip(&c.w_hat) {
            prop_assert!((z.values.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let mut m = z.values.clone();
            for vars in (2..=z.vars).rev() {
                m = tensor::marginalize(&m, k, vars, 0).unwrap();
            }
            prop_assert!(max_diff(&m, w) < 1e-10);
        }
        for pair in c.z_hat.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            let lead = tensor::marginalize(&cur.values, k, cur.vars, cur.vars - 1).unwrap();
            let tail = if prev.vars == cur.vars {
                tensor::marginalize(&prev.values, k, prev.vars, 0).unwrap()
            } else {
                prev.values.clone()
            };
            prop_assert!(max_diff(&lead, &tail) < 1e-10);
        }
    }
}

/// M-step written directly from scaled forward-backward state and pairwise
/// posteriors of a first-order model.
fn baum_welch_update(p: &ParameterSet, y: &ObservationSeries) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = p.k();
    let (gamma, xi) = bw_posteriors(&bw_backward(p, y).unwrap()).unwrap();
    let sigma = (0..k)
        .map(|v| {
            let w: f64 = gamma.iter().map(|g| g[v]).sum();
            let s: f64 = gamma.iter().zip(&y.values).map(|(g, y)| g[v] * y * y).sum();
            (s / w).sqrt()
        })
        .collect();
    let initial = gamma[0].clone();
    let mut pi = vec![0.0; k * k];
    for slab in &xi {
        for (a, b) in pi.iter_mut().zip(slab) {
            *a += b;
        }
    }
    for row in pi.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    (sigma, initial, pi)
}

#[test]
fn one_em_iteration_matches_baum_welch() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let k = rng.random_range(2..=4);
        let p = random_params(&mut rng, k, 1);
        let (_, y) = simulate(&p, rng.random_range(20..300), rng.random()).unwrap();
        let (counts, _) = e_step(&p, &y, OPTS).unwrap();
        let ours = m_step(&counts, &y, &p).unwrap().params;
        let (sigma, initial, pi) = baum_welch_update(&p, &y);
        assert!(max_diff(&ours.sigma, &sigma) < 1e-8);
        assert!(max_diff(&ours.early[0], &initial) < 1e-8);
        assert!(max_diff(&ours.pi, &pi) < 1e-8);
    }
}

#[test]
fn long_series_agree_with_scaled_forward_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let p = random_params(&mut rng, 4, 1);
    let (_, y) = simulate(&p, 3000, 9).unwrap();
    let tables = bw_backward(&p, &y).unwrap();
    let (gamma, xi) = bw_posteriors(&tables).unwrap();
    let s = smooth(&p, &y, OPTS).unwrap();
    assert!((s.loglik - tables.log_fy()).abs() < 1e-8);
    for (a, b) in s.marginals.iter().zip(&gamma) {
        assert!(max_diff(a, b) < 1e-8);
    }
    for (z, x) in s.joints.iter().skip(1).zip(&xi) {
        assert!(max_diff(&z.values, x) < 1e-8);
    }
}

#[test]
fn grid_cells_and_selection_are_consistent() {
    let truth = ParameterSet::first_order(vec![0.5, 0.5], vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![0.7, 2.5]).unwrap();
    let (_, y) = simulate(&truth, 800, 5).unwrap();
    let settings = EmSettings { n_starts: 4, ..EmSettings::default() };
    let g = grid_search(&y, &[2, 0, 1], &[2, 1], &settings).unwrap();
    assert_eq!(g.cells.len(), 6);
    let order: Vec<(usize, usize)> = g.cells.iter().map(|c| (c.h, c.k)).collect();
    assert_eq!(order, vec![(0, 1), (0, 2), (1, 1), (1, 2), (2, 1), (2, 2)]);
    let k1: Vec<f64> = (0..3).map(|h| g.cell(h, 1).unwrap().outcome.as_ref().unwrap().loglik).collect();
    assert!(k1.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    let mut best = (f64::INFINITY, (0, 0));
    for c in &g.cells {
        let r = c.outcome.as_ref().unwrap();
        assert!((r.bic - bic(r.loglik, c.npar, y.len())).abs() < 1e-9);
        if r.bic < best.0 {
            best = (r.bic, (c.h, c.k));
        }
    }
    assert_eq!(g.selected, Some(best.1));
    assert_eq!(g.selected, Some((1, 2)));
    // richer chains never fit worse than the first-order model they contain
    let l1 = g.cell(1, 2).unwrap().outcome.as_ref().unwrap().loglik;
    let l2 = g.cell(2, 2).unwrap().outcome.as_ref().unwrap().loglik;
    assert!(l2 >= l1 - 1e-3 * l1.abs());
}

#[test]
fn strict_mode_rejects_impossible_data() {
    let p = ParameterSet::first_order(vec![1.0, 0.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![1.0, 2.0]).unwrap();
    let y = ObservationSeries::new(vec![0.1, 0.2, 0.3]).unwrap();
    let strict = RecursionOptions { strict_zeros: true };
    assert!(backward_pass(&p, &y, strict).is_err());
    let s = smooth(&p, &y, OPTS).unwrap();
    let bf = brute_force_joint(&p, &y).unwrap();
    assert!((s.loglik - bf.log_fy).abs() < 1e-10);
    for (t, m) in s.marginals.iter().enumerate() {
        assert!(max_diff(m, &bf.window_marginal(&[t + 1])) < 1e-10);
    }
}
