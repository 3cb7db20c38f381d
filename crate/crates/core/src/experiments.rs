//! Named, preset-backed experiment drivers. Each preset is a complete configuration shipped with
//! the crate; callers may override fields before running.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::closed_form::{relative_error_profile, EqualBeliefsOracle};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::lsmc::{fit_lsmc, FitOptions};
use crate::report::{write_error_profile, write_sweep, MarketTable};
use crate::riccati::RiccatiSolution;
use crate::simulator::simulate_market;
use crate::simulator::sweep::{disagreement_sweep, SweepSettings};

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Disagreement grid for sweeps; the experiment's own grid when None.
    pub dpi0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Monte Carlo paths used per estimate.
    pub paths: usize,
    /// Human-readable findings, one per line.
    pub lines: Vec<String>,
}

pub trait Experiment: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn preset(&self) -> &'static str;
    /// Runs on `config` (normally the preset, possibly overridden) and writes one CSV to `out`.
    fn run(&self, config: &Config, opts: &ExperimentOptions, out: &Path) -> Result<ExperimentReport>;

    fn config(&self) -> Result<Config> {
        Config::from_json(self.preset())?.validate()
    }
}

/// A second seed for draws that must stay independent of those keyed by `seed`.
pub fn derived_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

fn create(out: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out)?))
}

/// Regression alpha against the closed form in the equal-beliefs case.
pub struct LsmcAccuracy;

impl Experiment for LsmcAccuracy {
    fn name(&self) -> &'static str {
        "fig1"
    }
    fn summary(&self) -> &'static str {
        "relative error of the regression alpha against the equal-beliefs closed form"
    }
    fn preset(&self) -> &'static str {
        include_str!("../presets/fig1.json")
    }
    fn run(&self, config: &Config, _opts: &ExperimentOptions, out: &Path) -> Result<ExperimentReport> {
        let ric = RiccatiSolution::solve(&config.population, &config.grid)?;
        let oracle = EqualBeliefsOracle::new(&config.market, &ric)?;
        let settings = config.lsmc_settings();
        let model = fit_lsmc(&config.market, &ric, &FitOptions::from_settings(&settings, &config.market, config.seed))?;
        let profile = relative_error_profile(&model, &oracle, &config.market, settings.paths, derived_seed(config.seed))?;
        write_error_profile(create(out)?, &profile)?;
        let worst = (0..profile.rel.len() - 1)
            .flat_map(|m| profile.rel[m].iter().enumerate().map(move |(k, &e)| (e, m, k)))
            .fold((0.0, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
        Ok(ExperimentReport {
            paths: settings.paths,
            lines: vec![format!(
                "max relative error {:.4}% (sub-population {}, t = {:.4})",
                100.0 * worst.0,
                worst.2 + 1,
                profile.t[worst.1]
            )],
        })
    }
}

/// One market path with disagreeing sub-populations and a fixed latent path.
pub struct MarketPathExperiment;

impl Experiment for MarketPathExperiment {
    fn name(&self) -> &'static str {
        "fig2"
    }
    fn summary(&self) -> &'static str {
        "single market path with disagreeing priors and a fixed latent switch"
    }
    fn preset(&self) -> &'static str {
        include_str!("../presets/fig2.json")
    }
    fn run(&self, config: &Config, _opts: &ExperimentOptions, out: &Path) -> Result<ExperimentReport> {
        let ric = RiccatiSolution::solve(&config.population, &config.grid)?;
        let settings = config.lsmc_settings();
        let model = fit_lsmc(
            &config.market,
            &ric,
            &FitOptions::from_settings(&settings, &config.market, derived_seed(config.seed)),
        )?;
        let rec = simulate_market(config, &ric, &model, config.seed, 0)?;
        let mut table = MarketTable::new(create(out)?, false)?;
        table.write_path(0, &rec)?;
        table.finish()?;
        Ok(ExperimentReport { paths: settings.paths, lines: market_fingerprint(config, &rec) })
    }
}

/// Aggregate inventories at the start and the end, and the filters' final disagreement.
pub fn market_fingerprint(config: &Config, rec: &crate::simulator::MarketPath) -> Vec<String> {
    let k = config.population.k();
    let j = config.market.chain.states();
    let last = rec.t.len() - 1;
    let mut lines = Vec::new();
    for kk in 0..k {
        let agg = |m: usize| rec.agents.iter().filter(|a| a.subpop == kk).map(|a| a.q[m]).sum::<f64>();
        lines.push(format!("sub-population {} inventory {:.3} -> {:.3}", kk + 1, agg(0), agg(last)));
    }
    let pi = &rec.filter[last].pi;
    let spread = (0..j)
        .map(|i| {
            let col: Vec<f64> = (0..k).map(|kk| pi[kk * j + i]).collect();
            col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    lines.push(format!("largest filter disagreement at T {spread:.4}"));
    lines
}

/// Market statistics against the degree of disagreement.
pub struct DisagreementSweep;

impl Experiment for DisagreementSweep {
    fn name(&self) -> &'static str {
        "fig3"
    }
    fn summary(&self) -> &'static str {
        "price dispersion, impact and trading activity against prior disagreement"
    }
    fn preset(&self) -> &'static str {
        include_str!("../presets/fig3.json")
    }
    fn run(&self, config: &Config, opts: &ExperimentOptions, out: &Path) -> Result<ExperimentReport> {
        let dpi0 = opts.dpi0.clone().unwrap_or_else(|| (0..10).map(|i| 0.05 * i as f64).collect());
        let paths = config.lsmc_settings().paths;
        let rows = disagreement_sweep(config, &SweepSettings { dpi0, paths, seed: config.seed })?;
        write_sweep(create(out)?, &rows)?;
        let lines = rows
            .iter()
            .map(|r| {
                format!(
                    "dpi0 {:.3}: sd(S_T) {:.5} |S-F| {:.5} |nu| {:.4}",
                    r.dpi0, r.sd_price, r.mean_abs_impact, r.mean_abs_rate
                )
            })
            .collect();
        Ok(ExperimentReport { paths, lines })
    }
}

pub struct ExperimentRegistry {
    experiments: Vec<Box<dyn Experiment>>,
}

impl Default for ExperimentRegistry {
    fn default() -> Self {
        let mut r = Self { experiments: Vec::new() };
        r.register(Box::new(LsmcAccuracy));
        r.register(Box::new(MarketPathExperiment));
        r.register(Box::new(DisagreementSweep));
        r
    }
}

impl ExperimentRegistry {
    pub fn register(&mut self, e: Box<dyn Experiment>) {
        self.experiments.retain(|x| x.name() != e.name());
        self.experiments.push(e);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Experiment> {
        self.experiments.iter().find(|e| e.name() == name).map(|e| e.as_ref()).ok_or_else(|| {
            Error::Unsupported(format!("unknown experiment `{name}` (known: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.experiments.iter().map(|e| e.name()).collect()
    }
}
