//! Deterministic equilibrium components: the idiosyncratic feedback h2, the mean-field feedback
//! g2 and the coupling matrix G, plus the exact one-step propagators built from them.

use nalgebra::{DMatrix, DVector};

use crate::config::{build_block_matrix_b, build_impact_matrix, PopulationSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::{condition_number, matrix_exponential, right_divide};

/// Past this condition number the anchor of the g2 representation is moved closer.
const REANCHOR_COND: f64 = 1e6;
const SINGULAR_COND: f64 = 1e12;

/// h2 at time to maturity `tau`.
pub fn h2_value(a: f64, phi: f64, psi: f64, tau: f64) -> f64 {
    if phi == 0.0 {
        return -2.0 * a * psi / (a + psi * tau);
    }
    let gamma = (phi / a).sqrt();
    let xi = (phi * a).sqrt();
    let th = (gamma * tau).tanh();
    -2.0 * xi * (psi + xi * th) / (xi + psi * th)
}

/// log D(tau) where h2/(2a) = d/dt log D(T - t); differences give the exact integral of h2/(2a).
pub fn log_decay(a: f64, phi: f64, psi: f64, tau: f64) -> f64 {
    if phi == 0.0 {
        return (a + psi * tau).ln();
    }
    let gamma = (phi / a).sqrt();
    let xi = (phi * a).sqrt();
    gamma * tau - std::f64::consts::LN_2 + ((xi + psi) + (xi - psi) * (-2.0 * gamma * tau).exp()).ln()
}

pub fn solve_h2(pop: &PopulationSpec, grid: &TimeGrid) -> Vec<Vec<f64>> {
    (0..pop.k())
        .map(|k| {
            (0..grid.nodes())
                .map(|m| h2_value(pop.a[k], pop.phi[k], pop.psi[k], grid.tau(m)))
                .collect()
        })
        .collect()
}

/// g2 = Y2 Y1^{-1} on the grid. Y is propagated from the terminal condition while Y1 stays well
/// conditioned; otherwise from the already computed value at the next node.
pub fn solve_g2(pop: &PopulationSpec, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let k = pop.k();
    let b = build_block_matrix_b(pop);
    let terminal = DMatrix::from_diagonal(&DVector::from_iterator(k, pop.psi.iter().map(|p| -2.0 * p)));
    let mut g2 = vec![DMatrix::zeros(k, k); grid.nodes()];
    g2[grid.steps] = terminal.clone();

    let mut anchor = grid.steps;
    let mut anchor_value = terminal;
    for m in (0..grid.steps).rev() {
        let (mut cond, mut y1, mut y2) = propagate_y(&b, &anchor_value, grid.t(anchor) - grid.t(m), k)?;
        if cond > REANCHOR_COND && anchor != m + 1 {
            anchor = m + 1;
            anchor_value = g2[m + 1].clone();
            (cond, y1, y2) = propagate_y(&b, &anchor_value, grid.t(anchor) - grid.t(m), k)?;
        }
        if !(cond <= SINGULAR_COND) {
            return Err(Error::SingularY1 { t: grid.t(m), cond });
        }
        g2[m] = right_divide(&y2, &y1).ok_or(Error::SingularY1 { t: grid.t(m), cond })?;
    }
    Ok(g2)
}

fn propagate_y(
    b: &DMatrix<f64>,
    anchor_value: &DMatrix<f64>,
    span: f64,
    k: usize,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    let e = matrix_exponential(&(b * span))?;
    let y1 = e.view((0, 0), (k, k)) + e.view((0, k), (k, k)) * anchor_value;
    let y2 = e.view((k, 0), (k, k)) + e.view((k, k), (k, k)) * anchor_value;
    Ok((condition_number(&y1), y1, y2))
}

/// G = (Lambda + g2)(2a)^{-1} at every node.
pub fn coupling_matrix_g(g2: &[DMatrix<f64>], pop: &PopulationSpec) -> Vec<DMatrix<f64>> {
    let lam = build_impact_matrix(pop);
    g2.iter()
        .map(|g| {
            let mut out = &lam + g;
            for (c, mut col) in out.column_iter_mut().enumerate() {
                col /= 2.0 * pop.a[c];
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub h2: Vec<Vec<f64>>,
    pub g2: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub impact: DMatrix<f64>,
}

impl RiccatiSolution {
    pub fn solve(pop: &PopulationSpec, grid: &TimeGrid) -> Result<Self> {
        let g2 = solve_g2(pop, grid)?;
        Ok(Self {
            grid: grid.clone(),
            h2: solve_h2(pop, grid),
            g: coupling_matrix_g(&g2, pop),
            g2,
            b: build_block_matrix_b(pop),
            a: pop.a.clone(),
            phi: pop.phi.clone(),
            psi: pop.psi.clone(),
            impact: build_impact_matrix(pop),
        })
    }

    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// exp of the integral of h2/(2a) over [t_m, t_{m+1}]: the one-step shrink of an inventory gap.
    pub fn gap_factor(&self, k: usize, m: usize) -> f64 {
        let (a, phi, psi) = (self.a[k], self.phi[k], self.psi[k]);
        (log_decay(a, phi, psi, self.grid.tau(m + 1)) - log_decay(a, phi, psi, self.grid.tau(m))).exp()
    }

    /// The generator D = [[Lambda (2a)^-1, 2 phi], [(2a)^-1, 0]] of the row system (Phi, Phi g2),
    /// so that Phi(t, u) is the left block of (I, g2(t)) e^{(u-t) D}.
    pub fn propagator_generator(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut d = DMatrix::zeros(2 * k, 2 * k);
        for r in 0..k {
            for c in 0..k {
                d[(r, c)] = self.impact[(r, c)] / (2.0 * self.a[c]);
            }
            d[(r, k + r)] = 2.0 * self.phi[r];
            d[(k + r, r)] = 1.0 / (2.0 * self.a[r]);
        }
        d
    }

    /// The row block (I, g2(t_m)).
    pub fn lift(&self, m: usize) -> DMatrix<f64> {
        let k = self.k();
        let mut l = DMatrix::zeros(k, 2 * k);
        l.view_mut((0, 0), (k, k)).fill_with_identity();
        l.view_mut((0, k), (k, k)).copy_from(&self.g2[m]);
        l
    }

    /// Phi(t_m, t_m + s) with dPhi/du = Phi G_u and Phi(t, t) = I.
    pub fn propagator(&self, m: usize, s: f64) -> Result<DMatrix<f64>> {
        let k = self.k();
        let e = matrix_exponential(&(self.propagator_generator() * s))?;
        Ok(self.lift(m) * e.view((0, 0), (2 * k, k)))
    }

    /// Phi(t_m, t_{m+1}) and its integral over the step.
    pub fn step_propagator(&self, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = self.k();
        let (e, int) = crate::linalg::exp_and_integral(&self.propagator_generator(), self.grid.delta())?;
        let lift = self.lift(m);
        Ok((lift.clone() * e.view((0, 0), (2 * k, k)), lift * int.view((0, 0), (2 * k, k))))
    }
}
