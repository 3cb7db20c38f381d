//! Mean-field-game equilibrium trading for agent populations with heterogeneous beliefs about a
//! latent Markov-modulated price drift: Riccati feedback components, a least-squares Monte Carlo
//! solver for the belief-weighted alpha component, and a finite-population market simulator.

pub mod basis;
pub mod closed_form;
pub mod config;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod linalg;
pub mod lsmc;
pub mod report;
pub mod riccati;
pub mod rng;
pub mod simulator;

pub use config::{Config, LatentChainSpec, MarketModelSpec, PopulationSpec, TimeGrid};
pub use error::{Error, Result};
pub use riccati::RiccatiSolution;
