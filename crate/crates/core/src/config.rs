//! Configuration records, validation and the constant matrices derived from them.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    3600
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        Self { horizon, steps }
    }

    pub fn delta(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time t_m; the last node is exactly the horizon.
    pub fn t(&self, m: usize) -> f64 {
        if m == self.steps {
            self.horizon
        } else {
            self.horizon * m as f64 / self.steps as f64
        }
    }

    /// Time to maturity at node m.
    pub fn tau(&self, m: usize) -> f64 {
        self.horizon * (self.steps - m) as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentChainSpec {
    pub theta: Vec<f64>,
    pub generator: Vec<Vec<f64>>,
    /// Row k is the prior of sub-population k over the latent states.
    pub priors: Vec<Vec<f64>>,
}

impl LatentChainSpec {
    pub fn states(&self) -> usize {
        self.theta.len()
    }

    pub fn generator_matrix(&self) -> DMatrix<f64> {
        let j = self.states();
        DMatrix::from_fn(j, j, |r, c| self.generator[r][c])
    }

    pub fn is_static(&self) -> bool {
        self.generator.iter().flatten().all(|&c| c == 0.0)
    }
}

/// A latent path held fixed instead of sampled: start in `initial` and jump at the given times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSchedule {
    pub initial: usize,
    #[serde(default)]
    pub switches: Vec<Switch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    pub time: f64,
    pub state: usize,
}

impl LatentSchedule {
    pub fn state_at(&self, t: f64) -> usize {
        self.switches
            .iter()
            .filter(|s| s.time <= t)
            .next_back()
            .map_or(self.initial, |s| s.state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModelSpec {
    pub kappa: f64,
    pub sigma: f64,
    pub s0: f64,
    pub chain: LatentChainSpec,
    /// Law of the initial latent state in simulated markets, separate from the agents' priors.
    pub true_prior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_path: Option<LatentSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub m_bar: Vec<f64>,
    pub inv_sd: Vec<f64>,
    pub n_agents: Vec<usize>,
}

impl PopulationSpec {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn total_agents(&self) -> usize {
        self.n_agents.iter().sum()
    }

    /// Impact coefficients seen by the price when every row of lambda agrees.
    pub fn common_impact_row(&self) -> Result<Vec<f64>> {
        let row = &self.lambda[0];
        for (k, other) in self.lambda.iter().enumerate().skip(1) {
            let same = row
                .iter()
                .zip(other)
                .all(|(x, y)| (x - y).abs() <= 1e-14 * x.abs().max(y.abs()));
            if !same {
                return Err(Error::Unsupported(format!(
                    "market simulation needs one impact row shared by all sub-populations, row {k} differs from row 0"
                )));
            }
        }
        Ok(row.clone())
    }
}

/// Optional settings for the regression stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcSettings {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "yes")]
    pub cross_terms: bool,
    #[serde(default = "yes")]
    pub randomize_initial: bool,
    /// Average each regression target over the drift states, weighted by Q's filter, and over
    /// the step's Brownian increment and its mirror image.
    #[serde(default = "yes")]
    pub branch_average: bool,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
}

fn default_degree() -> usize {
    2
}
fn default_paths() -> usize {
    10_000
}
fn yes() -> bool {
    true
}
fn default_scheme() -> String {
    "exponential".into()
}

impl Default for LsmcSettings {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            paths: default_paths(),
            cross_terms: true,
            randomize_initial: true,
            branch_average: true,
            scheme: default_scheme(),
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub market: MarketModelSpec,
    pub population: PopulationSpec,
    pub grid: TimeGrid,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsmc: Option<LsmcSettings>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(self) -> Result<Self> {
        let mut errs = validate_config(&self.market, &self.population, &self.grid);
        if let Some(l) = &self.lsmc {
            if l.paths == 0 {
                errs.push("lsmc.paths must be positive".into());
            }
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Invalid(errs))
        }
    }

    pub fn lsmc_settings(&self) -> LsmcSettings {
        self.lsmc.clone().unwrap_or_default()
    }
}

fn check_finite(errs: &mut Vec<String>, name: &str, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            errs.push(format!("{name}[{i}] is not finite"));
        }
    }
}

fn check_each(errs: &mut Vec<String>, name: &str, xs: &[f64], ok: impl Fn(f64) -> bool, what: &str) {
    for (i, &x) in xs.iter().enumerate() {
        if !ok(x) {
            errs.push(format!("{name}[{i}] must be {what} (got {x})"));
        }
    }
}

/// Collects every invariant violation; an empty list means the inputs are valid.
pub fn validate_config(market: &MarketModelSpec, pop: &PopulationSpec, grid: &TimeGrid) -> Vec<String> {
    let mut errs = Vec::new();

    if !(grid.horizon.is_finite() && grid.horizon > 0.0) {
        errs.push(format!("grid horizon must be positive (got {})", grid.horizon));
    }
    if grid.steps < 2 {
        errs.push(format!("grid needs at least 2 steps (got {})", grid.steps));
    }

    if !market.kappa.is_finite() || market.kappa < 0.0 {
        errs.push(format!("kappa must be non-negative (got {})", market.kappa));
    }
    if !market.sigma.is_finite() || market.sigma <= 0.0 {
        errs.push(format!("sigma must be positive (got {})", market.sigma));
    }
    if !market.s0.is_finite() {
        errs.push("s0 is not finite".into());
    }

    let chain = &market.chain;
    let j = chain.theta.len();
    if j == 0 {
        errs.push("chain needs at least one latent state".into());
    }
    check_finite(&mut errs, "theta", &chain.theta);
    if chain.generator.len() != j || chain.generator.iter().any(|r| r.len() != j) {
        errs.push(format!("generator must be {j}x{j}"));
    } else {
        for (r, row) in chain.generator.iter().enumerate() {
            check_finite(&mut errs, &format!("generator row {r}"), row);
            for (c, &v) in row.iter().enumerate() {
                if r != c && v < 0.0 {
                    errs.push(format!("generator[{r}][{c}] is a negative off-diagonal rate ({v})"));
                }
            }
            let sum: f64 = row.iter().sum();
            let scale = row.iter().map(|v| v.abs()).fold(1.0, f64::max);
            if sum.abs() > SUM_TOL * scale {
                errs.push(format!("generator row {r} sums to {sum}, not 0"));
            }
        }
    }

    let k = pop.a.len();
    if k == 0 {
        errs.push("population needs at least one sub-population".into());
    }
    if chain.priors.len() != k {
        errs.push(format!("expected {k} prior rows, got {}", chain.priors.len()));
    }
    for (r, row) in chain.priors.iter().enumerate() {
        if row.len() != j {
            errs.push(format!("prior row {r} has {} entries, expected {j}", row.len()));
            continue;
        }
        if row.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            errs.push(format!("prior row {r} has entries outside (0, 1]"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            errs.push(format!("prior row {r} does not sum to 1 (sum {sum})"));
        }
    }
    if market.true_prior.len() != j {
        errs.push(format!("true_prior has {} entries, expected {j}", market.true_prior.len()));
    } else {
        if market.true_prior.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            errs.push("true_prior has entries outside [0, 1]".into());
        }
        let sum: f64 = market.true_prior.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            errs.push(format!("true_prior does not sum to 1 (sum {sum})"));
        }
    }
    if let Some(sched) = &market.latent_path {
        if sched.initial >= j {
            errs.push(format!("latent_path initial state {} out of range", sched.initial));
        }
        let mut last = 0.0;
        for (i, s) in sched.switches.iter().enumerate() {
            if s.state >= j {
                errs.push(format!("latent_path switch {i} targets state {} out of range", s.state));
            }
            if !(s.time >= last && s.time <= grid.horizon) {
                errs.push(format!("latent_path switch {i} time {} is out of order or beyond the horizon", s.time));
            }
            last = s.time;
        }
    }

    let lens = [
        ("phi", pop.phi.len()),
        ("psi", pop.psi.len()),
        ("p", pop.p.len()),
        ("lambda", pop.lambda.len()),
        ("m_bar", pop.m_bar.len()),
        ("inv_sd", pop.inv_sd.len()),
        ("n_agents", pop.n_agents.len()),
    ];
    let mut shapes_ok = true;
    for (name, n) in lens {
        if n != k {
            errs.push(format!("{name} has {n} entries, expected {k}"));
            shapes_ok = false;
        }
    }
    if pop.lambda.iter().any(|r| r.len() != k) {
        errs.push(format!("lambda must be {k}x{k}"));
        shapes_ok = false;
    }
    if shapes_ok {
        check_each(&mut errs, "a", &pop.a, |x| x > 0.0 && x.is_finite(), "positive");
        check_each(&mut errs, "phi", &pop.phi, |x| x >= 0.0 && x.is_finite(), "non-negative");
        check_each(&mut errs, "psi", &pop.psi, |x| x > 0.0 && x.is_finite(), "positive");
        check_each(&mut errs, "p", &pop.p, |x| x > 0.0 && x <= 1.0, "in (0, 1]");
        check_finite(&mut errs, "m_bar", &pop.m_bar);
        check_each(&mut errs, "inv_sd", &pop.inv_sd, |x| x >= 0.0 && x.is_finite(), "non-negative");
        let psum: f64 = pop.p.iter().sum();
        if (psum - 1.0).abs() > SUM_TOL {
            errs.push(format!("proportions p do not sum to 1 (sum {psum})"));
        }
        for (r, row) in pop.lambda.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    errs.push(format!("lambda[{r}][{c}] must be positive (got {v})"));
                }
            }
        }
        for (i, &n) in pop.n_agents.iter().enumerate() {
            if n == 0 {
                errs.push(format!("n_agents[{i}] must be positive"));
            }
        }
    }
    errs
}

/// Entry (k, k') is lambda[k][k'] * p[k'].
pub fn build_impact_matrix(pop: &PopulationSpec) -> DMatrix<f64> {
    let k = pop.k();
    DMatrix::from_fn(k, k, |r, c| pop.lambda[r][c] * pop.p[c])
}

/// The 2K x 2K matrix [[0, -(2a)^-1], [-2 phi, Lambda (2a)^-1]].
pub fn build_block_matrix_b(pop: &PopulationSpec) -> DMatrix<f64> {
    let k = pop.k();
    let lam = build_impact_matrix(pop);
    let mut b = DMatrix::zeros(2 * k, 2 * k);
    for i in 0..k {
        b[(i, k + i)] = -1.0 / (2.0 * pop.a[i]);
        b[(k + i, i)] = -2.0 * pop.phi[i];
        for c in 0..k {
            b[(k + i, k + c)] = lam[(i, c)] / (2.0 * pop.a[c]);
        }
    }
    b
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn table_config() -> Config {
        Config {
            market: MarketModelSpec {
                kappa: 5.4,
                sigma: 0.185,
                s0: 5.0,
                chain: LatentChainSpec {
                    theta: vec![4.95, 5.05],
                    generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
                    priors: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                },
                true_prior: vec![0.5, 0.5],
                latent_path: None,
            },
            population: PopulationSpec {
                a: vec![1e-4, 1e-4],
                phi: vec![1e-2, 1e-6],
                psi: vec![10.0, 10.0],
                p: vec![2.0 / 3.0, 1.0 / 3.0],
                lambda: vec![vec![1e-3; 2]; 2],
                m_bar: vec![0.0, 0.0],
                inv_sd: vec![0.0, 0.0],
                n_agents: vec![20, 10],
            },
            grid: TimeGrid::new(1.0, 3600),
            seed: 1,
            lsmc: None,
        }
    }

    fn messages(cfg: Config) -> Vec<String> {
        match cfg.validate() {
            Err(Error::Invalid(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn table_parameters_are_valid() {
        let cfg = table_config();
        assert_eq!(cfg.clone().validate().unwrap(), cfg);
    }

    #[test]
    fn prior_not_summing_to_one() {
        let mut cfg = table_config();
        cfg.market.chain.priors[0] = vec![0.6, 0.6];
        let v = messages(cfg);
        assert!(v.iter().any(|m| m.contains("prior row 0 does not sum to 1")), "{v:?}");
    }

    #[test]
    fn zero_sigma() {
        let mut cfg = table_config();
        cfg.market.sigma = 0.0;
        let v = messages(cfg);
        assert!(v.iter().any(|m| m.contains("sigma must be positive")), "{v:?}");
    }

    #[test]
    fn all_violations_reported() {
        let mut cfg = table_config();
        cfg.population.a[1] = -1.0;
        cfg.market.sigma = -1.0;
        cfg.market.chain.generator[0] = vec![1.0, -1.0];
        cfg.grid.steps = 1;
        let v = messages(cfg);
        assert!(v.iter().any(|m| m.starts_with("a[1] must be positive")));
        assert!(v.iter().any(|m| m.contains("negative off-diagonal")));
        assert!(v.iter().any(|m| m.contains("at least 2 steps")));
        assert!(v.len() >= 4);
    }

    #[test]
    fn impact_matrix_examples() {
        let mut pop = table_config().population;
        let lam = build_impact_matrix(&pop);
        assert!((lam[(0, 0)] - 6.666_666_666_666_667e-4).abs() < 1e-15);
        assert!((lam[(1, 1)] - 3.333_333_333_333_333e-4).abs() < 1e-15);
        assert_eq!(lam[(0, 0)], lam[(1, 0)]);

        pop.lambda = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        pop.p = vec![0.5, 0.5];
        let lam = build_impact_matrix(&pop);
        assert_eq!(lam, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 1.0]));
    }

    #[test]
    fn block_matrix_single_population() {
        let pop = PopulationSpec {
            a: vec![1e-4],
            phi: vec![5e-4],
            psi: vec![1e-4],
            p: vec![1.0],
            lambda: vec![vec![0.05]],
            m_bar: vec![0.0],
            inv_sd: vec![0.0],
            n_agents: vec![1],
        };
        let b = build_block_matrix_b(&pop);
        let want = DMatrix::from_row_slice(2, 2, &[0.0, -5000.0, -1e-3, 250.0]);
        assert!((b - want).amax() < 1e-9);
    }

    #[test]
    fn block_matrix_table_values() {
        let b = build_block_matrix_b(&table_config().population);
        assert_eq!(b.shape(), (4, 4));
        assert_eq!(b[(0, 2)], -5000.0);
        assert_eq!(b.view((0, 0), (2, 2)).amax(), 0.0);
    }

    #[test]
    fn json_round_trip_and_default_steps() {
        let cfg = table_config();
        let back = Config::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["grid"].as_object_mut().unwrap().remove("steps");
        let back: Config = serde_json::from_value(v).unwrap();
        assert_eq!(back.grid.steps, 3600);
    }

    #[test]
    fn schedule_lookup() {
        let s = LatentSchedule { initial: 1, switches: vec![Switch { time: 0.5, state: 0 }] };
        assert_eq!(s.state_at(0.0), 1);
        assert_eq!(s.state_at(0.4999), 1);
        assert_eq!(s.state_at(0.5), 0);
        assert_eq!(s.state_at(1.0), 0);
    }
}
