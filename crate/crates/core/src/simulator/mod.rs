//! The finite-population market run on top of the equilibrium: mean field, agents, impacted
//! price, cash and objectives, plus the deviation probe and the disagreement sweep.
//!
//! Agents observe S and the order flow, so the un-impacted increment dS - impact dt is what
//! drives the (shared) filters. The price feels each sub-population through its empirical share
//! N_k / N and its empirical mean rate.

pub mod mean_field;
pub mod probe;
pub mod sweep;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::closed_form::EqualBeliefsOracle;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::filtering::{simulate_latent_path_from, ChainKernel, FilterState};
use crate::lsmc::LsmcModel;
use crate::riccati::RiccatiSolution;
use crate::rng::{seek_step, stream, Domain};

pub use mean_field::{agent_rate, mean_field_rate, step_agent_rate, MeanFieldState, MeanFieldStepper};

/// Anything that yields g1 at a node from the shared belief state.
pub trait AlphaSource: Sync {
    /// Index of the measure the filter's density ratios are taken against.
    fn reference(&self) -> usize {
        0
    }
    fn g1(&self, m: usize, f: f64, filter: &FilterState, out: &mut [f64]);
}

impl AlphaSource for LsmcModel {
    fn reference(&self) -> usize {
        self.q_measure_index
    }
    fn g1(&self, m: usize, f: f64, filter: &FilterState, out: &mut [f64]) {
        self.eval_raw(m, f, &filter.pi, &filter.z, out);
    }
}

impl AlphaSource for EqualBeliefsOracle {
    fn g1(&self, m: usize, f: f64, filter: &FilterState, out: &mut [f64]) {
        out.copy_from_slice(&EqualBeliefsOracle::g1(self, m, filter.pi_row(0), f));
    }
}

/// g1 = 0: every agent just unwinds toward the mean field under the Riccati feedback.
pub struct ZeroAlpha;

impl AlphaSource for ZeroAlpha {
    fn g1(&self, _m: usize, _f: f64, _filter: &FilterState, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// A perturbation eps * b(t) added to one agent's equilibrium rate.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Raised cosine of half-width `half_width` centred at `center`.
    Bump { center: f64, half_width: f64 },
    /// sin(2 pi cycles t / T).
    Sine { cycles: f64, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    pub shape: Shape,
    pub eps: f64,
}

impl Deviation {
    pub fn rate(&self, t: f64) -> f64 {
        let b = match self.shape {
            Shape::Bump { center, half_width } => {
                let x = (t - center) / half_width;
                if x.abs() < 1.0 {
                    0.5 * (1.0 + (std::f64::consts::PI * x).cos())
                } else {
                    0.0
                }
            }
            Shape::Sine { cycles, horizon } => (2.0 * std::f64::consts::PI * cycles * t / horizon).sin(),
        };
        self.eps * b
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Agents per sub-population; the configured counts when empty.
    pub n_agents: Vec<usize>,
    /// Law of the initial latent state when no fixed path is configured; the physical prior when None.
    pub latent_prior: Option<Vec<f64>>,
    /// Every rate forced to zero.
    pub frozen: bool,
    /// Alternative strategies for agent 0, accounted alongside the equilibrium run.
    pub deviations: Vec<Deviation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPath {
    pub subpop: usize,
    pub q: Vec<f64>,
    /// Rate held over each step; the last entry is the instantaneous feedback rate at T.
    pub nu: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSnapshot {
    pub pi: Vec<f64>,
    pub z: Vec<f64>,
    pub a_hat: Vec<f64>,
}

/// A fully recorded path. Mean-field rates over a step are the step averages
/// (q_bar(t_{m+1}) - q_bar(t_m)) / delta; at T the instantaneous rate is stored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarketPath {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub f: Vec<f64>,
    pub theta_idx: Vec<usize>,
    pub agents: Vec<AgentPath>,
    pub mean_field: Vec<MeanFieldState>,
    pub filter: Vec<FilterSnapshot>,
}

/// Per-path summary used by the Monte Carlo drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub s_final: f64,
    /// Mean of |S - F| over the grid nodes.
    pub mean_abs_impact: f64,
    /// Mean of |nu| over agents and steps.
    pub mean_abs_rate: f64,
    /// Per sub-population, the time average of |empirical mean rate - nu_bar|.
    pub consistency: Vec<f64>,
    pub objective: Vec<f64>,
    /// Agent 0's realised objective under each deviation.
    pub deviator: Vec<f64>,
}

/// X_T + q_T (S_T - psi q_T) - phi sum q_m^2 delta over the left endpoints of the steps.
pub fn objective_value(x_final: f64, q: &[f64], s_final: f64, psi: f64, phi: f64, delta: f64) -> f64 {
    let q_t = *q.last().expect("non-empty inventory path");
    let running: f64 = q[..q.len() - 1].iter().map(|v| v * v).sum();
    x_final + q_t * (s_final - psi * q_t) - phi * running * delta
}

pub struct Market<'a> {
    pub config: &'a Config,
    pub riccati: &'a RiccatiSolution,
    alpha: &'a dyn AlphaSource,
    kernel: ChainKernel,
    stepper: MeanFieldStepper,
    impact: Vec<f64>,
    /// (gap factor - 1) / delta per sub-population and step.
    pull: Vec<Vec<f64>>,
}

struct Variant {
    impact: f64,
    q: f64,
    x: f64,
    running: f64,
}

impl<'a> Market<'a> {
    pub fn new(config: &'a Config, riccati: &'a RiccatiSolution, alpha: &'a dyn AlphaSource) -> Result<Self> {
        if riccati.grid != config.grid {
            return Err(Error::Invalid(vec!["equilibrium was solved on a different grid".into()]));
        }
        let d = config.grid.delta();
        let pull = (0..riccati.k())
            .map(|k| (0..config.grid.steps).map(|m| (riccati.gap_factor(k, m) - 1.0) / d).collect())
            .collect();
        Ok(Self {
            config,
            riccati,
            alpha,
            kernel: ChainKernel::new(&config.market, &config.grid)?,
            stepper: MeanFieldStepper::new(riccati)?,
            impact: config.population.common_impact_row()?,
            pull,
        })
    }

    /// Initial inventory of agent `j`: m_bar + sd * N(0,1), one draw window per agent index.
    pub fn initial_inventory(&self, seed: u64, path: u64, j: usize, k: usize) -> f64 {
        let mut rng = stream(seed, Domain::Inventory, path);
        seek_step(&mut rng, j);
        let z: f64 = rng.sample(StandardNormal);
        self.config.population.m_bar[k] + self.config.population.inv_sd[k] * z
    }

    pub fn run(&self, seed: u64, path: u64, opts: &RunOptions, mut rec: Option<&mut MarketPath>) -> Result<PathOutcome> {
        let cfg = self.config;
        let (grid, pop, market) = (&cfg.grid, &cfg.population, &cfg.market);
        let (k, d, steps) = (pop.k(), grid.delta(), grid.steps);
        let counts = if opts.n_agents.is_empty() { pop.n_agents.clone() } else { opts.n_agents.clone() };
        if counts.len() != k || counts.iter().any(|&n| n == 0) {
            return Err(Error::Invalid(vec![format!("need a positive agent count for each of {k} sub-populations")]));
        }
        let n_total: usize = counts.iter().sum();
        let subpop: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();

        let prior = opts.latent_prior.as_deref().unwrap_or(&market.true_prior);
        let latent =
            simulate_latent_path_from(&self.kernel, grid, market.s0, prior, market.latent_path.as_ref(), seed, path);
        let mut filter = FilterState::new(&market.chain.priors, self.alpha.reference(), market.s0, &self.kernel);

        let mut q: Vec<f64> =
            subpop.iter().enumerate().map(|(j, &kk)| self.initial_inventory(seed, path, j, kk)).collect();
        let mut x = vec![0.0; n_total];
        let mut running = vec![0.0; n_total];
        let mut q_bar = pop.m_bar.clone();
        let mut q_next = vec![0.0; k];
        let mut g1 = vec![0.0; k];
        let mut nu_bar = vec![0.0; k];
        let mut nu = vec![0.0; n_total];

        let k0 = subpop[0];
        let mut variants: Vec<Variant> =
            opts.deviations.iter().map(|_| Variant { impact: 0.0, q: q[0], x: 0.0, running: 0.0 }).collect();

        let mut impact_level = 0.0;
        let mut s = market.s0;
        let mut f_obs = market.s0;
        let mut abs_impact = 0.0;
        let mut abs_rate = 0.0;
        let mut consistency = vec![0.0; k];
        let mut sub_sum = vec![0.0; k];

        if let Some(r) = rec.as_deref_mut() {
            *r = MarketPath::default();
            r.agents = subpop
                .iter()
                .map(|&kk| AgentPath {
                    subpop: kk,
                    q: Vec::with_capacity(steps + 1),
                    nu: Vec::with_capacity(steps + 1),
                    x: Vec::with_capacity(steps + 1),
                })
                .collect();
        }

        for m in 0..=steps {
            self.alpha.g1(m, f_obs, &filter, &mut g1);
            abs_impact += (s - latent.f[m]).abs();
            if m == steps {
                nu_bar = mean_field_rate(self.riccati, m, &g1, &q_bar);
                if let Some(r) = rec.as_deref_mut() {
                    for (j, a) in r.agents.iter_mut().enumerate() {
                        let kk = subpop[j];
                        let v = if opts.frozen {
                            0.0
                        } else {
                            agent_rate(self.riccati, m, kk, q[j], q_bar[kk], nu_bar[kk])
                        };
                        a.q.push(q[j]);
                        a.nu.push(v);
                        a.x.push(x[j]);
                    }
                    record_node(r, grid.t(m), s, &latent, m, &q_bar, &nu_bar, &g1, &filter);
                }
                break;
            }

            self.stepper.step(m, &q_bar, &g1, &mut q_next);
            for kk in 0..k {
                nu_bar[kk] = (q_next[kk] - q_bar[kk]) / d;
            }
            let mut flow = 0.0;
            sub_sum.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n_total {
                let kk = subpop[j];
                nu[j] = if opts.frozen { 0.0 } else { nu_bar[kk] + (q[j] - q_bar[kk]) * self.pull[kk][m] };
                flow += self.impact[kk] * nu[j];
                sub_sum[kk] += nu[j];
            }
            for kk in 0..k {
                consistency[kk] += (sub_sum[kk] / counts[kk] as f64 - nu_bar[kk]).abs() / steps as f64;
            }
            // sum_k lambda_k (N_k / N) mean_k(nu)
            let impact_rate = flow / n_total as f64;

            if let Some(r) = rec.as_deref_mut() {
                for (j, a) in r.agents.iter_mut().enumerate() {
                    a.q.push(q[j]);
                    a.nu.push(nu[j]);
                    a.x.push(x[j]);
                }
                record_node(r, grid.t(m), s, &latent, m, &q_bar, &nu_bar, &g1, &filter);
            }

            let t = grid.t(m);
            for (v, dev) in variants.iter_mut().zip(&opts.deviations) {
                let b = dev.rate(t);
                let nv = nu[0] + b;
                let sv = latent.f[m] + v.impact;
                v.x -= (sv + pop.a[k0] * nv) * nv * d;
                v.running += v.q * v.q;
                v.q += nv * d;
                v.impact += (impact_rate + self.impact[k0] * b / n_total as f64) * d;
            }
            for j in 0..n_total {
                let kk = subpop[j];
                x[j] -= (s + pop.a[kk] * nu[j]) * nu[j] * d;
                running[j] += q[j] * q[j];
                q[j] += nu[j] * d;
                abs_rate += nu[j].abs();
            }

            impact_level += impact_rate * d;
            let s_next = latent.f[m + 1] + impact_level;
            let f_next = f_obs + (s_next - s) - impact_rate * d;
            filter.step(f_obs, f_next, &self.kernel).map_err(|e| match e {
                Error::FilterCollapse { measure, .. } => Error::FilterCollapse { step: m, measure },
                other => other,
            })?;
            f_obs = f_next;
            s = s_next;
            std::mem::swap(&mut q_bar, &mut q_next);
        }

        let objective = (0..n_total)
            .map(|j| {
                let kk = subpop[j];
                let q_t = q[j];
                x[j] + q_t * (s - pop.psi[kk] * q_t) - pop.phi[kk] * running[j] * d
            })
            .collect();
        let deviator = variants
            .iter()
            .map(|v| {
                let sv = latent.f[steps] + v.impact;
                v.x + v.q * (sv - pop.psi[k0] * v.q) - pop.phi[k0] * v.running * d
            })
            .collect();
        Ok(PathOutcome {
            s_final: s,
            mean_abs_impact: abs_impact / grid.nodes() as f64,
            mean_abs_rate: abs_rate / (n_total * steps) as f64,
            consistency,
            objective,
            deviator,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn record_node(
    r: &mut MarketPath,
    t: f64,
    s: f64,
    latent: &crate::filtering::LatentPath,
    m: usize,
    q_bar: &[f64],
    nu_bar: &[f64],
    g1: &[f64],
    filter: &FilterState,
) {
    r.t.push(t);
    r.s.push(s);
    r.f.push(latent.f[m]);
    r.theta_idx.push(latent.theta_idx[m]);
    r.mean_field.push(MeanFieldState { q_bar: q_bar.to_vec(), nu_bar: nu_bar.to_vec(), g1: g1.to_vec() });
    r.filter.push(FilterSnapshot { pi: filter.pi.clone(), z: filter.z.clone(), a_hat: filter.a_hat.clone() });
}

/// One recorded market path with the configured agent counts.
pub fn simulate_market(
    config: &Config,
    riccati: &RiccatiSolution,
    alpha: &dyn AlphaSource,
    seed: u64,
    path: u64,
) -> Result<MarketPath> {
    let market = Market::new(config, riccati, alpha)?;
    let mut rec = MarketPath::default();
    market.run(seed, path, &RunOptions::default(), Some(&mut rec))?;
    Ok(rec)
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests;
