//! One-step weights of the backward recursion g1(t_m) = E[Q_m A_hat(t_m) + P_m Z-ratio g1(t_{m+1})].
//!
//! Schemes are looked up by name so the solver, the CLI and stored models agree on what was used.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::matrix_exponential;
use crate::riccati::RiccatiSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct StepWeights {
    /// Multiplies the next-step value.
    pub p: DMatrix<f64>,
    /// Multiplies the filtered drift.
    pub q: DMatrix<f64>,
}

pub trait StepScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn weights(&self, riccati: &RiccatiSolution, m: usize) -> Result<StepWeights>;
}

/// exp(G(t_m) delta) for the value and a left-endpoint rectangle for the drift.
pub struct LeftEndpoint;

impl StepScheme for LeftEndpoint {
    fn name(&self) -> &'static str {
        "left-endpoint"
    }

    fn summary(&self) -> &'static str {
        "frozen G over each step: P = exp(G delta), Q = delta I"
    }

    fn weights(&self, riccati: &RiccatiSolution, m: usize) -> Result<StepWeights> {
        let d = riccati.grid.delta();
        let k = riccati.k();
        Ok(StepWeights { p: matrix_exponential(&(&riccati.g[m] * d))?, q: DMatrix::identity(k, k) * d })
    }
}

/// The exact propagator across the step and its integral, so the deterministic part of the
/// recursion carries no time-discretisation error even where G varies within a step.
pub struct ExponentialStep;

impl StepScheme for ExponentialStep {
    fn name(&self) -> &'static str {
        "exponential"
    }

    fn summary(&self) -> &'static str {
        "exact propagator: P = Phi(t_m, t_m+1), Q = integral of Phi over the step"
    }

    fn weights(&self, riccati: &RiccatiSolution, m: usize) -> Result<StepWeights> {
        let (p, q) = riccati.step_propagator(m)?;
        Ok(StepWeights { p, q })
    }
}

pub struct SchemeRegistry {
    schemes: Vec<Box<dyn StepScheme>>,
}

impl Default for SchemeRegistry {
    fn default() -> Self {
        let mut r = Self { schemes: Vec::new() };
        r.register(Box::new(ExponentialStep));
        r.register(Box::new(LeftEndpoint));
        r
    }
}

impl SchemeRegistry {
    pub const DEFAULT: &'static str = "exponential";

    pub fn register(&mut self, scheme: Box<dyn StepScheme>) {
        self.schemes.retain(|s| s.name() != scheme.name());
        self.schemes.push(scheme);
    }

    pub fn get(&self, name: &str) -> Result<&dyn StepScheme> {
        self.schemes
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                Error::Unsupported(format!("unknown step scheme `{name}` (known: {})", self.names().join(", ")))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.schemes.iter().map(|s| s.name()).collect()
    }
}
