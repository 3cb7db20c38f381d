//! Market statistics as the two sub-populations' priors are pulled apart symmetrically:
//! pi_0^1 = (1/2 + d, 1/2 - d), pi_0^2 = (1/2 - d, 1/2 + d).

use rayon::prelude::*;

use super::{mean_se, AlphaSource, Market, RunOptions};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::lsmc::{fit_lsmc, FitOptions};
use crate::riccati::RiccatiSolution;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dpi0: f64,
    pub sd_price: f64,
    pub sd_price_se: f64,
    pub mean_abs_impact: f64,
    pub mean_abs_impact_se: f64,
    pub mean_abs_rate: f64,
    pub mean_abs_rate_se: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub dpi0: Vec<f64>,
    pub paths: usize,
    pub seed: u64,
}

/// The base configuration with disagreement `d` written into the priors.
pub fn with_disagreement(base: &Config, d: f64) -> Result<Config> {
    if base.market.chain.states() != 2 || base.population.k() != 2 {
        return Err(Error::Unsupported("the disagreement sweep needs two latent states and two sub-populations".into()));
    }
    if !(0.0..0.5).contains(&d) {
        return Err(Error::Invalid(vec![format!("disagreement {d} outside [0, 0.5)")]));
    }
    let mut cfg = base.clone();
    cfg.market.chain.priors = vec![vec![0.5 + d, 0.5 - d], vec![0.5 - d, 0.5 + d]];
    Ok(cfg)
}

/// Standard deviation with its delta-method standard error.
pub fn sd_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let sd = var.sqrt();
    let var_se = ((m4 - var * var) / n).max(0.0).sqrt();
    (sd, if sd > 0.0 { var_se / (2.0 * sd) } else { 0.0 })
}

/// Statistics of one configuration under a given alpha, common random numbers keyed by `seed`.
pub fn market_statistics(
    config: &Config,
    riccati: &RiccatiSolution,
    alpha: &dyn AlphaSource,
    paths: usize,
    seed: u64,
) -> Result<SweepRow> {
    let market = Market::new(config, riccati, alpha)?;
    let opts = RunOptions::default();
    let out: Vec<(f64, f64, f64)> = (0..paths as u64)
        .into_par_iter()
        .map(|p| market.run(seed, p, &opts, None).map(|o| (o.s_final, o.mean_abs_impact, o.mean_abs_rate)))
        .collect::<Result<_>>()?;
    let col = |f: fn(&(f64, f64, f64)) -> f64| out.iter().map(f).collect::<Vec<_>>();
    let (sd_price, sd_price_se) = sd_with_se(&col(|o| o.0));
    let (mean_abs_impact, mean_abs_impact_se) = mean_se(&col(|o| o.1));
    let (mean_abs_rate, mean_abs_rate_se) = mean_se(&col(|o| o.2));
    Ok(SweepRow {
        dpi0: f64::NAN,
        sd_price,
        sd_price_se,
        mean_abs_impact,
        mean_abs_impact_se,
        mean_abs_rate,
        mean_abs_rate_se,
    })
}

/// Fits alpha by regression for each disagreement level and simulates the market. The fit uses
/// its own random streams, independent of the market paths.
pub fn disagreement_sweep(base: &Config, settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    let riccati = RiccatiSolution::solve(&base.population, &base.grid)?;
    let lsmc = base.lsmc_settings();
    let fit_seed = crate::experiments::derived_seed(settings.seed);
    settings
        .dpi0
        .iter()
        .map(|&d| {
            let cfg = with_disagreement(base, d)?;
            let model = fit_lsmc(&cfg.market, &riccati, &FitOptions::from_settings(&lsmc, &cfg.market, fit_seed))?;
            let mut row = market_statistics(&cfg, &riccati, &model, settings.paths, settings.seed)?;
            row.dpi0 = d;
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_form::EqualBeliefsOracle;
    use crate::config::tests::table_config;
    use crate::config::TimeGrid;

    #[test]
    fn priors_are_mirrored() {
        let cfg = with_disagreement(&table_config(), 0.3).unwrap();
        assert_eq!(cfg.market.chain.priors, vec![vec![0.8, 0.5 - 0.3], vec![0.5 - 0.3, 0.8]]);
        assert!(with_disagreement(&table_config(), 0.5).is_err());
    }

    #[test]
    fn sd_standard_error_matches_normal_theory() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = Normal::new(1.0, 2.0).unwrap().sample_iter(&mut rng).take(40_000).collect();
        let (sd, se) = sd_with_se(&xs);
        assert!((sd - 2.0).abs() < 4.0 * se);
        // sd / sqrt(2n) for Gaussian data
        assert!((se - 2.0 / (80_000f64).sqrt()).abs() < 0.05 * se);
    }

    #[test]
    fn no_impact_means_no_price_gap() {
        let mut cfg = with_disagreement(&table_config(), 0.0).unwrap();
        cfg.grid = TimeGrid::new(1.0, 100);
        cfg.population.lambda = vec![vec![0.0; 2]; 2];
        cfg.population.inv_sd = vec![50.0; 2];
        let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
        let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
        let row = market_statistics(&cfg, &ric, &oracle, 50, 2).unwrap();
        assert_eq!(row.mean_abs_impact, 0.0);
        assert!(row.mean_abs_rate > 0.0);
    }
}
