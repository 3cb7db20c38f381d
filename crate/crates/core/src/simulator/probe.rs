//! Unilateral-deviation probe: how much one agent gains by departing from the equilibrium rate
//! while everyone else keeps to it, as the population grows.

use rayon::prelude::*;

use super::{mean_se, AlphaSource, Deviation, Market, RunOptions, Shape};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::riccati::RiccatiSolution;

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    /// Total population sizes, split across sub-populations by the configured proportions.
    pub n_schedule: Vec<usize>,
    pub paths: usize,
    /// Paths of the equilibrium run that sets eps.
    pub pilot_paths: usize,
    /// Bump half-widths as fractions of the horizon.
    pub widths: Vec<f64>,
    /// eps as a fraction of the pilot's mean |nu|.
    pub eps_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            n_schedule: vec![30, 60, 120, 240],
            paths: 10_000,
            pilot_paths: 200,
            widths: vec![0.05, 0.1, 0.2],
            eps_fraction: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub n: usize,
    /// Largest mean gain over the family and its Monte Carlo standard error.
    pub gain: f64,
    pub se: f64,
    pub best: usize,
    /// Mean gain and standard error of every member of the family.
    pub per_deviation: Vec<(f64, f64)>,
    /// Per-path gains of the maximising deviation, for paired comparisons across sizes.
    pub best_samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub eps: f64,
    pub family: Vec<Deviation>,
    pub rows: Vec<ProbeRow>,
}

/// Bumps centred mid-horizon, each width in both directions.
pub fn deviation_family(eps: f64, horizon: f64, widths: &[f64]) -> Vec<Deviation> {
    widths
        .iter()
        .flat_map(|&w| {
            [1.0, -1.0].map(|sign| Deviation {
                shape: Shape::Bump { center: 0.5 * horizon, half_width: w * horizon },
                eps: sign * eps,
            })
        })
        .collect()
}

/// Sub-population counts for a total of n: rounded shares, each at least one.
pub fn split_population(n: usize, p: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = p.iter().map(|s| ((s * n as f64).round() as usize).max(1)).collect();
    let sum: usize = counts.iter().sum();
    let last = counts.len() - 1;
    counts[last] = (counts[last] + n).saturating_sub(sum).max(1);
    counts
}

pub fn epsilon_nash_probe(
    config: &Config,
    riccati: &RiccatiSolution,
    alpha: &dyn AlphaSource,
    settings: &ProbeSettings,
) -> Result<ProbeReport> {
    if settings.n_schedule.is_empty() || settings.paths < 2 {
        return Err(Error::Invalid(vec!["probe needs population sizes and at least two paths".into()]));
    }
    let market = Market::new(config, riccati, alpha)?;
    let pop = &config.population;
    // The deviating agent is the first agent of sub-population 0; it evaluates under its own prior.
    let latent_prior = Some(config.market.chain.priors[0].clone());

    let pilot = RunOptions {
        n_agents: split_population(settings.n_schedule[0], &pop.p),
        latent_prior: latent_prior.clone(),
        ..Default::default()
    };
    let rates: Vec<f64> = (0..settings.pilot_paths as u64)
        .into_par_iter()
        .map(|path| market.run(settings.seed, path, &pilot, None).map(|o| o.mean_abs_rate))
        .collect::<Result<_>>()?;
    let eps = settings.eps_fraction * rates.iter().sum::<f64>() / rates.len().max(1) as f64;
    let family = deviation_family(eps, config.grid.horizon, &settings.widths);

    let mut rows = Vec::new();
    for &n in &settings.n_schedule {
        let opts = RunOptions {
            n_agents: split_population(n, &pop.p),
            latent_prior: latent_prior.clone(),
            deviations: family.clone(),
            ..Default::default()
        };
        let gains: Vec<Vec<f64>> = (0..settings.paths as u64)
            .into_par_iter()
            .map(|path| {
                let o = market.run(settings.seed, path, &opts, None)?;
                Ok(o.deviator.iter().map(|h| h - o.objective[0]).collect())
            })
            .collect::<Result<_>>()?;
        let per_deviation: Vec<(f64, f64)> = (0..family.len())
            .map(|v| mean_se(&gains.iter().map(|g| g[v]).collect::<Vec<_>>()))
            .collect();
        let best = (0..family.len()).max_by(|&a, &b| per_deviation[a].0.total_cmp(&per_deviation[b].0)).unwrap_or(0);
        let (gain, se) = per_deviation.get(best).copied().unwrap_or((0.0, 0.0));
        let best_samples = gains.iter().map(|g| g.get(best).copied().unwrap_or(0.0)).collect();
        rows.push(ProbeRow { n, gain, se, best, per_deviation, best_samples });
    }
    Ok(ProbeReport { eps, family, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_split() {
        assert_eq!(split_population(30, &[2.0 / 3.0, 1.0 / 3.0]), vec![20, 10]);
        assert_eq!(split_population(60, &[0.5, 0.5]), vec![30, 30]);
        assert_eq!(split_population(7, &[0.5, 0.5]), vec![4, 3]);
        assert_eq!(split_population(2, &[0.9, 0.1]), vec![2, 1]);
    }

    #[test]
    fn family_has_three_widths_and_two_signs() {
        let f = deviation_family(5.0, 2.0, &[0.05, 0.1, 0.2]);
        assert_eq!(f.len(), 6);
        assert_eq!(f[0].rate(1.0), 5.0);
        assert_eq!(f[1].rate(1.0), -5.0);
        assert_eq!(f[5].shape, Shape::Bump { center: 1.0, half_width: 0.4 });
    }
}
