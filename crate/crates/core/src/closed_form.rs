//! g1 in closed form when every sub-population holds the same prior, and the error profile of a
//! fitted model against it.
//!
//! With a common measure the density ratios are one and the conditional mean of x = (pi, F) is
//! linear: E[x_u | F_t] = x_t e^{(u-t)L}, L = [[C, kappa theta], [0, -kappa]]. So g1(t) = c(t) x_t^T
//! with c(t) = int_t^T Phi(t, u) 1 l^T e^{(u-t)L^T} du and l = kappa (theta, -1). Splitting the
//! integral at t_{m+1} gives c(t_m) = (I, g2(t_m)) X + Phi(t_m, t_{m+1}) c(t_{m+1}) e^{delta L^T},
//! where X = int_0^delta e^{sD} E e^{sL^T} ds is the same for every step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{MarketModelSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::matrix_exponential;
use crate::lsmc::{LsmcModel, QPaths};
use crate::riccati::RiccatiSolution;

#[derive(Debug, Clone)]
pub struct EqualBeliefsOracle {
    pub grid: TimeGrid,
    pub states: usize,
    /// Per node: K x (J + 1), acting on (pi, F).
    coef: Vec<DMatrix<f64>>,
}

/// The generator L of the conditional mean of (pi, F), row-vector convention.
pub fn mean_generator(market: &MarketModelSpec) -> DMatrix<f64> {
    let j = market.chain.states();
    let mut l = DMatrix::zeros(j + 1, j + 1);
    l.view_mut((0, 0), (j, j)).copy_from(&market.chain.generator_matrix());
    for i in 0..j {
        l[(i, j)] = market.kappa * market.chain.theta[i];
    }
    l[(j, j)] = -market.kappa;
    l
}

/// l with A_hat = (pi, F) . l
pub fn drift_loading(market: &MarketModelSpec) -> DVector<f64> {
    let j = market.chain.states();
    DVector::from_fn(j + 1, |i, _| if i < j { market.kappa * market.chain.theta[i] } else { -market.kappa })
}

impl EqualBeliefsOracle {
    pub fn new(market: &MarketModelSpec, riccati: &RiccatiSolution) -> Result<Self> {
        let priors = &market.chain.priors;
        if priors.iter().any(|r| r != &priors[0]) {
            return Err(Error::Unsupported("the closed form needs every prior to be the same".into()));
        }
        let grid = riccati.grid.clone();
        let (k, j) = (riccati.k(), market.chain.states());
        let d = riccati.propagator_generator();
        let lt = mean_generator(market).transpose();
        let ell = drift_loading(market);
        let delta = grid.delta();

        // top-right block of exp([[D, E], [0, -L^T]] delta) is X e^{-delta L^T}
        let n = 2 * k + j + 1;
        let mut big = DMatrix::zeros(n, n);
        big.view_mut((0, 0), (2 * k, 2 * k)).copy_from(&d);
        for r in 0..k {
            for c in 0..=j {
                big[(r, 2 * k + c)] = ell[c];
            }
        }
        big.view_mut((2 * k, 2 * k), (j + 1, j + 1)).copy_from(&(-&lt));
        let e = matrix_exponential(&(big * delta))?;
        let elt = matrix_exponential(&(&lt * delta))?;
        let x = e.view((0, 2 * k), (2 * k, j + 1)) * &elt;
        let ed = matrix_exponential(&(d * delta))?;
        let ed_left = ed.columns(0, k).into_owned();

        let mut coef = vec![DMatrix::zeros(k, j + 1); grid.nodes()];
        for m in (0..grid.steps).rev() {
            let lift = riccati.lift(m);
            let p = &lift * &ed_left;
            coef[m] = &lift * &x + p * &coef[m + 1] * &elt;
        }
        Ok(Self { grid, states: j, coef })
    }

    pub fn coefficients(&self, m: usize) -> &DMatrix<f64> {
        &self.coef[m]
    }

    /// g1 at node m for the common filter `pi` and price `f`.
    pub fn g1(&self, m: usize, pi: &[f64], f: f64) -> Vec<f64> {
        let c = &self.coef[m];
        (0..c.nrows())
            .map(|r| (0..self.states).map(|i| c[(r, i)] * pi[i]).sum::<f64>() + c[(r, self.states)] * f)
            .collect()
    }
}

/// Per node and sub-population: sum |g1_hat - g1| / sum |g1| over fresh reference-measure paths.
#[derive(Debug, Clone)]
pub struct ErrorProfile {
    pub t: Vec<f64>,
    pub rel: Vec<Vec<f64>>,
}

impl ErrorProfile {
    /// Largest error over all nodes but the terminal one, where both sides vanish. NaN if any is.
    pub fn max(&self) -> f64 {
        self.rel[..self.rel.len() - 1]
            .iter()
            .flatten()
            .fold(0.0, |a, &b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
    }
}

pub fn relative_error_profile(
    model: &LsmcModel,
    oracle: &EqualBeliefsOracle,
    market: &MarketModelSpec,
    n_paths: usize,
    seed: u64,
) -> Result<ErrorProfile> {
    let grid = &model.grid;
    if grid != &oracle.grid {
        return Err(Error::Invalid(vec!["model and oracle grids differ".into()]));
    }
    let k = model.measures;
    let j = model.states;
    let gen = QPaths::new(market, grid, model.q_measure_index, seed, false)?;
    let nodes = grid.nodes();
    let chunk = 256;
    let parts: Vec<Vec<f64>> = (0..n_paths.div_ceil(chunk))
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; 2 * nodes * k];
            let mut fit = vec![0.0; k];
            for path in c * chunk..((c + 1) * chunk).min(n_paths) {
                let mut s = gen.start(path as u64);
                let mut rng = gen.rng(path as u64);
                for m in 0..nodes {
                    model.eval_raw(m, s.f, &s.filter.pi, &s.filter.z, &mut fit);
                    let exact = oracle.g1(m, &s.filter.pi[..j], s.f);
                    for kk in 0..k {
                        acc[2 * (m * k + kk)] += (fit[kk] - exact[kk]).abs();
                        acc[2 * (m * k + kk) + 1] += exact[kk].abs();
                    }
                    if m < grid.steps {
                        gen.advance(&mut rng, m, &mut s)?;
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; 2 * nodes * k];
    for p in &parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let rel = (0..nodes)
        .map(|m| {
            (0..k)
                .map(|kk| {
                    let (num, den) = (total[2 * (m * k + kk)], total[2 * (m * k + kk) + 1]);
                    if den > 0.0 {
                        num / den
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(ErrorProfile { t: (0..nodes).map(|m| grid.t(m)).collect(), rel })
}
