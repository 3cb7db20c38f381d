//! Mean-field inventories and the per-agent feedback around them.
//!
//! Near maturity h2/(2a) and g2/(2a) reach -psi/a (about -1e5 with the desk parameters), so
//! an explicit step of q_bar on a 3600-step grid is unstable. Both the mean field and each
//! agent's gap to it are therefore advanced with their exact step maps.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{gauss_legendre, matrix_exponential};
use crate::riccati::RiccatiSolution;

/// Panels of the graded quadrature over one step; the smallest has width delta / 2^(PANELS-1).
const PANELS: usize = 30;
const GL_POINTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub q_bar: Vec<f64>,
    pub nu_bar: Vec<f64>,
    pub g1: Vec<f64>,
}

/// nu_bar = (2a)^{-1} (g1 + g2 q_bar) at node m.
pub fn mean_field_rate(riccati: &RiccatiSolution, m: usize, g1: &[f64], q_bar: &[f64]) -> Vec<f64> {
    let g2 = &riccati.g2[m];
    (0..riccati.k())
        .map(|r| {
            let v = g1[r] + (0..riccati.k()).map(|c| g2[(r, c)] * q_bar[c]).sum::<f64>();
            v / (2.0 * riccati.a[r])
        })
        .collect()
}

/// nu = nu_bar + h2/(2a) (q - q_bar) for an agent of sub-population k.
pub fn agent_rate(riccati: &RiccatiSolution, m: usize, k: usize, q: f64, q_bar: f64, nu_bar: f64) -> f64 {
    nu_bar + riccati.h2[k][m] / (2.0 * riccati.a[k]) * (q - q_bar)
}

/// The constant rate over step m that shrinks the gap by exactly the gap factor.
pub fn step_agent_rate(riccati: &RiccatiSolution, m: usize, k: usize, gap: f64, nu_bar: f64) -> f64 {
    nu_bar + gap * (riccati.gap_factor(k, m) - 1.0) / riccati.grid.delta()
}

/// q_bar(t_{m+1}) = U_m q_bar(t_m) + W_m g1(t_m), with g1 held at its node value over the step.
///
/// With Y = e^{B(t_{m+1} - s)} (I, g2(t_{m+1})) one has dY1/ds = (2a)^{-1} g2 Y1, so the
/// homogeneous flow from s to t_{m+1} is Y1(s)^{-1}; U_m is its value at s = t_m and W_m its
/// integral over the step times (2a)^{-1}.
#[derive(Debug, Clone)]
pub struct MeanFieldStepper {
    k: usize,
    u: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
}

impl MeanFieldStepper {
    pub fn new(riccati: &RiccatiSolution) -> Result<Self> {
        let k = riccati.k();
        let d = riccati.grid.delta();
        let (x, wt) = gauss_legendre(GL_POINTS);
        // (weight, e^{B r}) at r = t_{m+1} - s, shared by every step.
        let mut nodes = Vec::with_capacity(PANELS * GL_POINTS);
        let mut lo = 0.0;
        for p in 0..PANELS {
            let hi = d / 2f64.powi((PANELS - 1 - p) as i32);
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            for (xi, wi) in x.iter().zip(&wt) {
                let r = mid + half * xi;
                nodes.push((wi * half, matrix_exponential(&(&riccati.b * r))?));
            }
            lo = hi;
        }
        let full = matrix_exponential(&(&riccati.b * d))?;
        let jinv = DMatrix::from_fn(k, k, |r, c| if r == c { 0.5 / riccati.a[r] } else { 0.0 });
        let y1 = |e: &DMatrix<f64>, g: &DMatrix<f64>| e.view((0, 0), (k, k)) + e.view((0, k), (k, k)) * g;
        let inv = |m: DMatrix<f64>, step: usize| {
            m.try_inverse().ok_or(Error::SingularY1 { t: riccati.grid.t(step), cond: f64::INFINITY })
        };

        let mut u = Vec::with_capacity(riccati.grid.steps);
        let mut w = Vec::with_capacity(riccati.grid.steps);
        for m in 0..riccati.grid.steps {
            let g = &riccati.g2[m + 1];
            u.push(inv(y1(&full, g), m)?);
            let mut acc = DMatrix::zeros(k, k);
            for (wi, e) in &nodes {
                acc += inv(y1(e, g), m)? * *wi;
            }
            w.push(acc * &jinv);
        }
        Ok(Self { k, u, w })
    }

    pub fn step(&self, m: usize, q_bar: &[f64], g1: &[f64], out: &mut [f64]) {
        let (u, w) = (&self.u[m], &self.w[m]);
        for r in 0..self.k {
            out[r] = (0..self.k).map(|c| u[(r, c)] * q_bar[c] + w[(r, c)] * g1[c]).sum();
        }
    }

    pub fn homogeneous(&self, m: usize) -> &DMatrix<f64> {
        &self.u[m]
    }

    pub fn forcing(&self, m: usize) -> &DMatrix<f64> {
        &self.w[m]
    }
}
