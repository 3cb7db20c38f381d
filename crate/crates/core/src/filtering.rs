//! Latent chain and un-impacted price simulation, and the belief processes every measure
//! computes from the price path: filters, time-0 smoothers, density ratios and filtered drifts.
//!
//! The filter is the exact hidden-Markov recursion for the Euler-discretised observation model:
//! the Gaussian likelihood of each price increment given the state at the start of the step,
//! followed by the chain's one-step transition matrix. One J x J matrix, the unnormalised joint
//! weight of (initial state, current state), serves all measures at once, since measures differ
//! only in their prior over the initial state.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{LatentSchedule, MarketModelSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::matrix_exponential;
use crate::rng::{seek_step, stream, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub theta_idx: Vec<usize>,
    pub f: Vec<f64>,
    pub dw: Vec<f64>,
}

/// Per-step constants shared by every path: transition matrix and observation model.
#[derive(Debug, Clone)]
pub struct ChainKernel {
    pub theta: Vec<f64>,
    pub kappa: f64,
    pub sigma: f64,
    pub delta: f64,
    /// Row-major e^{C delta}.
    pub trans: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ChainKernel {
    pub fn new(market: &MarketModelSpec, grid: &TimeGrid) -> Result<Self> {
        let c = market.chain.generator_matrix();
        let j = c.nrows();
        let p = matrix_exponential(&(c * grid.delta()))?;
        let mut trans = vec![0.0; j * j];
        let mut cumulative = vec![0.0; j * j];
        for r in 0..j {
            let mut acc = 0.0;
            for col in 0..j {
                // Clip the rounding-level negatives a stochastic matrix exponential can carry.
                let v = p[(r, col)].max(0.0);
                trans[r * j + col] = v;
                acc += v;
                cumulative[r * j + col] = acc;
            }
            for col in 0..j {
                cumulative[r * j + col] /= acc;
                trans[r * j + col] /= acc;
            }
        }
        Ok(Self {
            theta: market.chain.theta.clone(),
            kappa: market.kappa,
            sigma: market.sigma,
            delta: grid.delta(),
            trans,
            cumulative,
        })
    }

    pub fn states(&self) -> usize {
        self.theta.len()
    }

    pub fn next_state(&self, i: usize, u: f64) -> usize {
        let j = self.states();
        let row = &self.cumulative[i * j..(i + 1) * j];
        row.iter().position(|&c| u < c).unwrap_or(j - 1)
    }

    pub fn next_price(&self, f: f64, i: usize, dw: f64) -> f64 {
        f + self.kappa * (self.theta[i] - f) * self.delta + self.sigma * dw
    }
}

pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws of one path for one step: the Brownian increment and the chain's uniform.
pub fn step_draws(rng: &mut rand_chacha::ChaCha8Rng, m: usize, delta: f64) -> (f64, f64) {
    seek_step(rng, m + 1);
    let z: f64 = rng.sample(StandardNormal);
    let u: f64 = rng.random();
    (z * delta.sqrt(), u)
}

/// Simulates one latent path with initial law `prior` (or the schedule when given).
pub fn simulate_latent_path_from(
    kernel: &ChainKernel,
    grid: &TimeGrid,
    s0: f64,
    prior: &[f64],
    schedule: Option<&LatentSchedule>,
    seed: u64,
    path: u64,
) -> LatentPath {
    let mut rng = stream(seed, Domain::Latent, path);
    seek_step(&mut rng, 0);
    let u0: f64 = rng.random();
    let mut i = match schedule {
        Some(s) => s.state_at(0.0),
        None => sample_index(prior, u0),
    };
    let mut out = LatentPath {
        theta_idx: Vec::with_capacity(grid.nodes()),
        f: Vec::with_capacity(grid.nodes()),
        dw: Vec::with_capacity(grid.steps),
    };
    let mut f = s0;
    out.theta_idx.push(i);
    out.f.push(f);
    for m in 0..grid.steps {
        let (dw, u) = step_draws(&mut rng, m, grid.delta());
        f = kernel.next_price(f, i, dw);
        i = match schedule {
            Some(s) => s.state_at(grid.t(m + 1)),
            None => kernel.next_state(i, u),
        };
        out.theta_idx.push(i);
        out.f.push(f);
        out.dw.push(dw);
    }
    out
}

pub fn simulate_latent_path(market: &MarketModelSpec, grid: &TimeGrid, seed: u64, path: u64) -> Result<LatentPath> {
    let kernel = ChainKernel::new(market, grid)?;
    Ok(simulate_latent_path_from(
        &kernel,
        grid,
        market.s0,
        &market.true_prior,
        market.latent_path.as_ref(),
        seed,
        path,
    ))
}

/// Belief state of all K measures on one path. Matrices are row-major K x J unless noted.
#[derive(Debug, PartialEq)]
pub struct FilterState {
    k: usize,
    j: usize,
    q: usize,
    /// Effective prior weights of each measure over the initial state (unnormalised).
    weights: Vec<f64>,
    /// Likelihood-weighted transitions from initial state i to current state j, J x J: the identity
    /// at the start, rescaled to unit sum after every step.
    pub lam_smooth: Vec<f64>,
    pub lam: Vec<f64>,
    pub pi: Vec<f64>,
    pub smooth0: Vec<f64>,
    pub z: Vec<f64>,
    pub a_hat: Vec<f64>,
    scratch: Vec<f64>,
}

impl Clone for FilterState {
    fn clone(&self) -> Self {
        Self {
            k: self.k,
            j: self.j,
            q: self.q,
            weights: self.weights.clone(),
            lam_smooth: self.lam_smooth.clone(),
            lam: self.lam.clone(),
            pi: self.pi.clone(),
            smooth0: self.smooth0.clone(),
            z: self.z.clone(),
            a_hat: self.a_hat.clone(),
            scratch: self.scratch.clone(),
        }
    }

    // reuses the buffers: branch states are copied once per path and step
    fn clone_from(&mut self, src: &Self) {
        (self.k, self.j, self.q) = (src.k, src.j, src.q);
        self.weights.clone_from(&src.weights);
        self.lam_smooth.clone_from(&src.lam_smooth);
        self.lam.clone_from(&src.lam);
        self.pi.clone_from(&src.pi);
        self.smooth0.clone_from(&src.smooth0);
        self.z.clone_from(&src.z);
        self.a_hat.clone_from(&src.a_hat);
        self.scratch.clone_from(&src.scratch);
    }
}

impl FilterState {
    /// Starts from prior rows `priors` (K x J) with measure `q` as the reference measure.
    pub fn new(priors: &[Vec<f64>], q: usize, f0: f64, kernel: &ChainKernel) -> Self {
        let weights: Vec<f64> = priors.iter().flatten().copied().collect();
        Self::from_weights(weights, priors.len(), q, f0, kernel)
    }

    /// Starts from unnormalised initial weights; row sums become the initial density ratios
    /// relative to row `q`.
    pub fn from_weights(weights: Vec<f64>, k: usize, q: usize, f0: f64, kernel: &ChainKernel) -> Self {
        let j = kernel.states();
        assert_eq!(weights.len(), k * j);
        let mut lam_smooth = vec![0.0; j * j];
        for i in 0..j {
            lam_smooth[i * j + i] = 1.0;
        }
        let mut s = Self {
            k,
            j,
            q,
            weights,
            lam_smooth,
            lam: vec![0.0; k * j],
            pi: vec![0.0; k * j],
            smooth0: vec![0.0; k * j],
            z: vec![0.0; k],
            a_hat: vec![0.0; k],
            scratch: vec![0.0; j],
        };
        s.refresh(f0, kernel)
            .expect("initial weights must give every measure positive mass");
        s
    }

    /// Rebuilds a state from its weights and stored joint smoother weight.
    pub fn restore(weights: Vec<f64>, k: usize, q: usize, lam_smooth: &[f64], f: f64, kernel: &ChainKernel) -> Result<Self> {
        let j = kernel.states();
        let mut s = Self {
            k,
            j,
            q,
            weights,
            lam_smooth: lam_smooth.to_vec(),
            lam: vec![0.0; k * j],
            pi: vec![0.0; k * j],
            smooth0: vec![0.0; k * j],
            z: vec![0.0; k],
            a_hat: vec![0.0; k],
            scratch: vec![0.0; j],
        };
        s.refresh(f, kernel)?;
        Ok(s)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn measures(&self) -> usize {
        self.k
    }

    pub fn states(&self) -> usize {
        self.j
    }

    pub fn reference(&self) -> usize {
        self.q
    }

    pub fn pi_row(&self, k: usize) -> &[f64] {
        &self.pi[k * self.j..(k + 1) * self.j]
    }

    /// Advances across one grid step given the un-impacted prices at its two ends.
    pub fn step(&mut self, f_prev: f64, f_next: f64, kernel: &ChainKernel) -> Result<()> {
        let j = self.j;
        let df = f_next - f_prev;
        let s2 = kernel.sigma * kernel.sigma;
        let loglik = &mut self.scratch;
        let mut top = f64::NEG_INFINITY;
        for i in 0..j {
            let h = kernel.kappa * (kernel.theta[i] - f_prev);
            loglik[i] = h * df / s2 - 0.5 * h * h * kernel.delta / s2;
            top = top.max(loglik[i]);
        }
        for v in loglik.iter_mut() {
            *v = (*v - top).exp();
        }
        // lam_smooth <- lam_smooth diag(lik) trans
        let mut next = [0.0f64; 64];
        let mut heap;
        let buf: &mut [f64] = if j * j <= 64 {
            &mut next[..j * j]
        } else {
            heap = vec![0.0; j * j];
            &mut heap
        };
        let mut total = 0.0;
        for r in 0..j {
            for c in 0..j {
                let mut acc = 0.0;
                for l in 0..j {
                    acc += self.lam_smooth[r * j + l] * loglik[l] * kernel.trans[l * j + c];
                }
                buf[r * j + c] = acc;
                total += acc;
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::FilterCollapse { step: 0, measure: self.q });
        }
        for (dst, src) in self.lam_smooth.iter_mut().zip(buf.iter()) {
            *dst = src / total;
        }
        self.refresh(f_next, kernel)
    }

    fn refresh(&mut self, f: f64, kernel: &ChainKernel) -> Result<()> {
        let (k, j, q) = (self.k, self.j, self.q);
        let Self { weights, lam_smooth, lam, pi, smooth0, z, a_hat, scratch: rows, .. } = self;
        for i in 0..j {
            rows[i] = lam_smooth[i * j..(i + 1) * j].iter().sum();
        }
        let mass = |m: usize| -> f64 { (0..j).map(|i| weights[m * j + i] * rows[i]).sum() };
        let q_mass = mass(q);
        for m in 0..k {
            let w = &weights[m * j..(m + 1) * j];
            let mut sum = 0.0;
            for c in 0..j {
                let v: f64 = (0..j).map(|i| w[i] * lam_smooth[i * j + c]).sum();
                lam[m * j + c] = v;
                sum += v;
            }
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::FilterCollapse { step: 0, measure: m });
            }
            let mut mean = 0.0;
            for c in 0..j {
                let p = lam[m * j + c] / sum;
                pi[m * j + c] = p;
                mean += p * kernel.theta[c];
            }
            let wm = mass(m);
            for i in 0..j {
                smooth0[m * j + i] = w[i] * rows[i] / wm;
            }
            z[m] = wm / q_mass;
            a_hat[m] = kernel.kappa * (mean - f);
        }
        Ok(())
    }

    pub fn snapshot(&self, f: f64) -> StateSnapshot {
        StateSnapshot { f, pi: self.pi.clone(), z: self.z.clone(), j: self.j }
    }
}

/// The raw state seen by the regression: price, filters of every measure, density ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub f: f64,
    pub pi: Vec<f64>,
    pub z: Vec<f64>,
    pub j: usize,
}

/// A_hat^k = kappa (sum_i theta_i pi^{k,i} - F).
pub fn filtered_drift_vector(pi: &[Vec<f64>], f: f64, market: &MarketModelSpec) -> Vec<f64> {
    pi.iter()
        .map(|row| {
            let mean: f64 = row.iter().zip(&market.chain.theta).map(|(p, t)| p * t).sum();
            market.kappa * (mean - f)
        })
        .collect()
}

/// Runs the filter along a latent path, attaching the step index to any collapse.
pub fn run_filter(
    path: &LatentPath,
    priors: &[Vec<f64>],
    q: usize,
    kernel: &ChainKernel,
    mut visit: impl FnMut(usize, &FilterState),
) -> Result<FilterState> {
    let mut state = FilterState::new(priors, q, path.f[0], kernel);
    visit(0, &state);
    for m in 0..path.dw.len() {
        state.step(path.f[m], path.f[m + 1], kernel).map_err(|e| match e {
            Error::FilterCollapse { measure, .. } => Error::FilterCollapse { step: m, measure },
            other => other,
        })?;
        visit(m + 1, &state);
    }
    Ok(state)
}

/// e^{tC} as a dense matrix, for reference computations.
pub fn chain_semigroup(market: &MarketModelSpec, t: f64) -> Result<DMatrix<f64>> {
    matrix_exponential(&(market.chain.generator_matrix() * t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::table_config;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn market() -> MarketModelSpec {
        table_config().market
    }

    fn kernel(m: &MarketModelSpec, steps: usize) -> (ChainKernel, TimeGrid) {
        let grid = TimeGrid::new(1.0, steps);
        (ChainKernel::new(m, &grid).unwrap(), grid)
    }

    #[test]
    fn static_chain_stays_put() {
        let mut m = market();
        m.chain.generator = vec![vec![0.0; 2]; 2];
        m.true_prior = vec![0.0, 1.0];
        let grid = TimeGrid::new(1.0, 200);
        let p = simulate_latent_path(&m, &grid, 3, 0).unwrap();
        assert!(p.theta_idx.iter().all(|&i| i == 1));
    }

    #[test]
    fn degenerate_sde_is_constant() {
        let mut m = market();
        m.kappa = 0.0;
        m.sigma = 0.0;
        let grid = TimeGrid::new(1.0, 100);
        let p = simulate_latent_path(&m, &grid, 3, 0).unwrap();
        assert_eq!(p.f[0], m.s0);
        assert!(p.f.iter().all(|&f| f == m.s0));
    }

    #[test]
    fn fixed_schedule_is_followed() {
        let mut m = market();
        m.latent_path = Some(LatentSchedule {
            initial: 1,
            switches: vec![crate::config::Switch { time: 0.5, state: 0 }],
        });
        let grid = TimeGrid::new(1.0, 10);
        let p = simulate_latent_path(&m, &grid, 3, 0).unwrap();
        assert_eq!(p.theta_idx, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn chain_marginals_match_semigroup() {
        let mut m = market();
        m.true_prior = vec![1.0, 0.0];
        let (k, grid) = kernel(&m, 600);
        let n = 10_000;
        let mut left = 0usize;
        let mut end_in_0 = 0usize;
        for path in 0..n {
            let p = simulate_latent_path_from(&k, &grid, m.s0, &m.true_prior, None, 11, path);
            if p.theta_idx.iter().any(|&i| i != 0) {
                left += 1;
            }
            if p.theta_idx[grid.steps] == 0 {
                end_in_0 += 1;
            }
        }
        let nf = n as f64;
        let leave = 1.0 - (-1.0f64).exp();
        let se = (leave * (1.0 - leave) / nf).sqrt();
        assert!((left as f64 / nf - leave).abs() < 3.0 * se, "{}", left as f64 / nf);
        let p00 = chain_semigroup(&m, 1.0).unwrap()[(0, 0)];
        let se = (p00 * (1.0 - p00) / nf).sqrt();
        assert!((end_in_0 as f64 / nf - p00).abs() < 3.0 * se);
    }

    #[test]
    fn point_mass_prior_is_preserved() {
        let mut m = market();
        m.chain.generator = vec![vec![0.0; 2]; 2];
        let (k, grid) = kernel(&m, 300);
        let path = simulate_latent_path_from(&k, &grid, m.s0, &[1.0, 0.0], None, 5, 0);
        run_filter(&path, &[vec![1.0, 0.0]], 0, &k, |_, s| {
            assert_eq!(s.pi, vec![1.0, 0.0]);
        })
        .unwrap();
    }

    #[test]
    fn equal_priors_give_unit_density() {
        let m = market();
        let (k, grid) = kernel(&m, 300);
        let path = simulate_latent_path_from(&k, &grid, m.s0, &[0.5, 0.5], None, 5, 1);
        run_filter(&path, &[vec![0.3, 0.7], vec![0.3, 0.7]], 0, &k, |_, s| {
            assert_eq!(s.z, vec![1.0, 1.0]);
            assert_eq!(s.pi_row(0), s.pi_row(1));
        })
        .unwrap();
    }

    #[test]
    fn uninformative_observations() {
        let mut m = market();
        m.chain.theta = vec![5.0, 5.0];
        m.chain.generator = vec![vec![0.0; 2]; 2];
        let (k, grid) = kernel(&m, 300);
        let path = simulate_latent_path_from(&k, &grid, m.s0, &[0.5, 0.5], None, 5, 2);
        let prior = vec![vec![0.2, 0.8]];
        run_filter(&path, &prior, 0, &k, |_, s| {
            assert!((s.pi[0] - 0.2).abs() < 1e-15 && (s.pi[1] - 0.8).abs() < 1e-15);
        })
        .unwrap();
    }

    #[test]
    fn smoother_starts_at_prior() {
        let m = market();
        let (k, _) = kernel(&m, 10);
        let priors = vec![vec![0.1, 0.9], vec![0.9, 0.1]];
        let s = FilterState::new(&priors, 0, m.s0, &k);
        assert_eq!(s.smooth0, vec![0.1, 0.9, 0.9, 0.1]);
        assert_eq!(s.pi, s.smooth0);
        assert_eq!(s.z, vec![1.0, 1.0]);
    }

    #[test]
    fn drift_examples() {
        let m = market();
        assert_eq!(filtered_drift_vector(&[vec![0.5, 0.5]], 5.0, &m), vec![0.0]);
        let mut m0 = m.clone();
        m0.kappa = 0.0;
        assert_eq!(filtered_drift_vector(&[vec![0.2, 0.8]], 3.0, &m0), vec![0.0]);
        let mean = 0.2 * 4.95 + 0.8 * 5.05;
        assert!(filtered_drift_vector(&[vec![0.2, 0.8]], mean, &m)[0].abs() < 1e-15);
    }

    #[test]
    fn measure_consistency_against_single_filters() {
        let m = market();
        let (k, grid) = kernel(&m, 600);
        let priors = vec![vec![0.1, 0.9], vec![0.9, 0.1], vec![0.6, 0.4]];
        for path_id in 0..5 {
            let path = simulate_latent_path_from(&k, &grid, m.s0, &[0.5, 0.5], None, 9, path_id);
            let mut joint = Vec::new();
            run_filter(&path, &priors, 0, &k, |_, s| joint.push(s.clone())).unwrap();
            for (r, prior) in priors.iter().enumerate() {
                let mut step = 0;
                run_filter(&path, std::slice::from_ref(prior), 0, &k, |_, s| {
                    for c in 0..2 {
                        assert!((s.pi[c] - joint[step].pi_row(r)[c]).abs() < 1e-12);
                    }
                    step += 1;
                })
                .unwrap();
            }
        }
    }

    /// Bootstrap particle filter on the same discretised model; independent of the matrix recursion.
    fn particle_filter(path: &LatentPath, prior: &[f64], k: &ChainKernel, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let j = k.states();
        let mut parts: Vec<usize> = (0..n).map(|_| sample_index(prior, rng.random())).collect();
        let mut w = vec![0.0; n];
        let s2 = k.sigma * k.sigma;
        for m in 0..path.dw.len() {
            let (f0, f1) = (path.f[m], path.f[m + 1]);
            for (wi, &p) in w.iter_mut().zip(&parts) {
                let mean = f0 + k.kappa * (k.theta[p] - f0) * k.delta;
                *wi = -(f1 - mean).powi(2) / (2.0 * s2 * k.delta);
            }
            let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut cum = Vec::with_capacity(n);
            let mut acc = 0.0;
            for wi in &w {
                acc += (wi - top).exp();
                cum.push(acc);
            }
            // systematic resampling, then move each particle through the chain
            let u0: f64 = rng.random();
            let mut idx = 0;
            let mut next = Vec::with_capacity(n);
            for s in 0..n {
                let target = (u0 + s as f64) / n as f64 * acc;
                while cum[idx] < target {
                    idx += 1;
                }
                next.push(k.next_state(parts[idx], rng.random()));
            }
            parts = next;
        }
        let mut freq = vec![0.0; j];
        for p in parts {
            freq[p] += 1.0 / n as f64;
        }
        freq
    }

    #[test]
    fn filter_agrees_with_particle_oracle() {
        let mut m = market();
        m.sigma = 0.14;
        m.chain.generator = vec![vec![0.0; 2]; 2];
        m.latent_path = Some(LatentSchedule { initial: 0, switches: vec![] });
        let grid = TimeGrid::new(4.0, 2400);
        let k = ChainKernel::new(&m, &grid).unwrap();
        let path = simulate_latent_path(&m, &grid, 21, 0).unwrap();
        for prior in [vec![0.1, 0.9], vec![0.9, 0.1]] {
            let end = run_filter(&path, std::slice::from_ref(&prior), 0, &k, |_, _| {}).unwrap();
            let pf = particle_filter(&path, &prior, &k, 100_000, 4);
            assert!((end.pi[0] - pf[0]).abs() < 0.02, "{} vs {}", end.pi[0], pf[0]);
            assert!(end.pi[0] > 0.95, "{}", end.pi[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn posteriors_stay_probability_vectors(seed in 0u64..1000, p0 in 0.01f64..0.99, p1 in 0.01f64..0.99) {
            let m = market();
            let (k, grid) = kernel(&m, 600);
            let path = simulate_latent_path_from(&k, &grid, m.s0, &[0.5, 0.5], None, seed, 0);
            let priors = vec![vec![p0, 1.0 - p0], vec![p1, 1.0 - p1]];
            run_filter(&path, &priors, 0, &k, |_, s| {
                for row in s.pi.chunks(2).chain(s.smooth0.chunks(2)) {
                    assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                }
                assert!(s.z.iter().all(|&z| z > 0.0));
                assert_eq!(s.z[0], 1.0);
            }).unwrap();
        }
    }
}
