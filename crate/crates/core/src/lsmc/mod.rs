//! Least-squares Monte Carlo for the belief-weighted alpha component g1.
//!
//! Paths are simulated under the reference measure Q. The backward pass regresses, at every
//! grid node, the one-step target Q_m A_hat + P_m diag(z(t_{m+1}) / z(t_m)) g1_hat(t_{m+1}) on
//! products of Hermite polynomials in the standardised state features. Only block boundaries of the forward pass are
//! kept; each block is regenerated from its checkpoint when the backward pass reaches it, which
//! is exact because every draw is addressed by (seed, path, step).
//!
//! The observed state is simulated in innovation form: the drift state of each step is drawn
//! afresh from Q's filter rather than carried along as a persistent hidden chain. The law of
//! (F, pi, Z) is the same, but the noise of the regression targets no longer stays correlated
//! along a path, where it would add up coherently through the recursion.

pub mod persist;
pub mod scheme;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{default_features, BasisDescriptor, CompiledBasis};
use crate::config::{LsmcSettings, MarketModelSpec, TimeGrid};
use crate::error::{Error, Result};
use crate::filtering::{sample_index, step_draws, ChainKernel, FilterState, StateSnapshot};
use crate::riccati::RiccatiSolution;
use crate::rng::{seek_step, stream, Domain};

pub use scheme::{SchemeRegistry, StepScheme, StepWeights};

const CHUNK: usize = 256;
const RIDGE: f64 = 1e-10;
const MAX_COND: f64 = 1e12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LsmcModel {
    pub grid: TimeGrid,
    pub basis: BasisDescriptor,
    pub q_measure_index: usize,
    pub measures: usize,
    pub states: usize,
    pub scheme: String,
    /// Per node: feature centres, and the lower-triangular map (row-major, nf x nf) taking centred
    /// features to the regression variables. A zero row marks a feature constant at that node.
    pub center: Vec<Vec<f64>>,
    pub whiten: Vec<Vec<f64>>,
    /// Per node: L x K coefficients, row-major.
    pub beta: Vec<Vec<f64>>,
    #[serde(skip)]
    compiled: Option<CompiledBasis>,
}

impl LsmcModel {
    pub(crate) fn finish(mut self) -> Result<Self> {
        let c = self.basis.compile()?;
        let (l, k, nf) = (c.len(), self.measures, c.n_features());
        let nodes = self.grid.nodes();
        let shapes_ok = self.beta.len() == nodes
            && self.center.len() == nodes
            && self.whiten.len() == nodes
            && self.beta.iter().all(|b| b.len() == l * k)
            && self.center.iter().all(|v| v.len() == nf)
            && self.whiten.iter().all(|v| v.len() == nf * nf);
        if !shapes_ok {
            return Err(Error::Format("coefficient arrays do not match grid and basis".into()));
        }
        if let Some(mx) = c.max_measure() {
            if mx >= k {
                return Err(Error::Format(format!("basis refers to measure {mx} but the model has {k}")));
            }
        }
        self.compiled = Some(c);
        Ok(self)
    }

    pub fn compiled(&self) -> &CompiledBasis {
        self.compiled.as_ref().expect("model is finished on construction")
    }

    pub fn basis_len(&self) -> usize {
        self.compiled().len()
    }

    /// g1_hat at node m from raw state values; `out` has length K.
    pub fn eval_raw(&self, m: usize, f: f64, pi: &[f64], z: &[f64], out: &mut [f64]) {
        let c = self.compiled();
        let (mut raw, mut x) = ([0.0f64; 32], [0.0f64; 32]);
        let nf = c.n_features();
        c.read_features(f, pi, z, self.states, &mut raw[..nf]);
        standardise(&raw[..nf], &self.center[m], &self.whiten[m], &mut x[..nf]);
        let mut stack = [0.0f64; 128];
        let mut heap;
        let phi: &mut [f64] = if c.len() <= stack.len() {
            &mut stack[..c.len()]
        } else {
            heap = vec![0.0; c.len()];
            &mut heap
        };
        c.expand_hermite(&x[..nf], phi);
        let k = self.measures;
        out.iter_mut().for_each(|o| *o = 0.0);
        let beta = &self.beta[m];
        for (l, v) in phi.iter().enumerate() {
            for kk in 0..k {
                out[kk] += v * beta[l * k + kk];
            }
        }
    }

    pub fn eval_g1(&self, snapshot: &StateSnapshot, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.measures];
        self.eval_raw(m, snapshot.f, &snapshot.pi, &snapshot.z, &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub basis: BasisDescriptor,
    pub n_paths: usize,
    pub seed: u64,
    pub randomize_initial: bool,
    pub branch_average: bool,
    pub scheme: String,
    pub q: usize,
}

impl FitOptions {
    pub fn from_settings(settings: &LsmcSettings, market: &MarketModelSpec, seed: u64) -> Self {
        let features = settings.features.clone().unwrap_or_else(|| default_features(&market.chain.priors, 0));
        Self {
            basis: BasisDescriptor::new(settings.degree, features, settings.cross_terms),
            n_paths: settings.paths,
            seed,
            randomize_initial: settings.randomize_initial,
            branch_average: settings.branch_average,
            scheme: settings.scheme.clone(),
            q: 0,
        }
    }
}

/// Generator of reference-measure state paths, shared by the fit and by evaluation runs.
pub struct QPaths<'a> {
    pub market: &'a MarketModelSpec,
    pub grid: &'a TimeGrid,
    pub kernel: ChainKernel,
    pub q: usize,
    pub seed: u64,
    pub randomize: bool,
    f_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct PathState {
    pub f: f64,
    pub filter: FilterState,
}

impl<'a> QPaths<'a> {
    pub fn new(market: &'a MarketModelSpec, grid: &'a TimeGrid, q: usize, seed: u64, randomize: bool) -> Result<Self> {
        let kernel = ChainKernel::new(market, grid)?;
        let sd = if market.kappa > 0.0 {
            market.sigma / (2.0 * market.kappa).sqrt()
        } else {
            market.sigma * grid.horizon.sqrt()
        };
        let lo = market.chain.theta.iter().cloned().fold(market.s0, f64::min) - 2.0 * sd;
        let hi = market.chain.theta.iter().cloned().fold(market.s0, f64::max) + 2.0 * sd;
        Ok(Self { market, grid, kernel, q, seed, randomize, f_range: (lo, hi) })
    }

    pub fn start(&self, path: u64) -> PathState {
        let priors = &self.market.chain.priors;
        let k = priors.len();
        let j = self.kernel.states();
        let mut rng = stream(self.seed, Domain::Initial, path);
        seek_step(&mut rng, 0);
        let (rho, f0) = if self.randomize {
            let e: Vec<f64> = (0..j).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = e.iter().sum();
            let rho: Vec<f64> = e.iter().map(|v| v / s).collect();
            let f0 = self.f_range.0 + (self.f_range.1 - self.f_range.0) * rng.random::<f64>();
            (rho, f0)
        } else {
            (priors[self.q].clone(), self.market.s0)
        };
        // Measure k conditioned on the same fictitious pre-history as Q's rho.
        let mut weights = Vec::with_capacity(k * j);
        for row in priors {
            for i in 0..j {
                weights.push(rho[i] * row[i] / priors[self.q][i]);
            }
        }
        let filter = FilterState::from_weights(weights, k, self.q, f0, &self.kernel);
        PathState { f: f0, filter }
    }

    pub fn advance(&self, rng: &mut rand_chacha::ChaCha8Rng, m: usize, s: &mut PathState) -> Result<()> {
        let (dw, u) = step_draws(rng, m, self.grid.delta());
        self.advance_with(m, dw, u, s)
    }

    /// One step driven by the given Brownian increment; `u` picks the drift state from Q's filter.
    pub fn advance_with(&self, m: usize, dw: f64, u: f64, s: &mut PathState) -> Result<()> {
        let i = sample_index(s.filter.pi_row(self.q), u);
        self.step_in_state(m, i, dw, s)
    }

    /// One step with the drift of latent state `i`.
    pub fn step_in_state(&self, m: usize, i: usize, dw: f64, s: &mut PathState) -> Result<()> {
        let f_next = self.kernel.next_price(s.f, i, dw);
        s.filter.step(s.f, f_next, &self.kernel).map_err(|e| match e {
            Error::FilterCollapse { measure, .. } => Error::FilterCollapse { step: m, measure },
            other => other,
        })?;
        s.f = f_next;
        Ok(())
    }

    pub fn rng(&self, path: u64) -> rand_chacha::ChaCha8Rng {
        stream(self.seed, Domain::Latent, path)
    }
}

struct Chunk {
    start: usize,
    len: usize,
    weights: Vec<Vec<f64>>,
    /// Per block boundary: per path [f, joint smoother weights].
    ckpt: Vec<Vec<f64>>,
    /// Current block: one row per (step, path), see `RowLayout`.
    data: Vec<f64>,
    target: Vec<f64>,
    /// Path-wise values at the next node, used when targets are not branch-averaged.
    g_next: Vec<f64>,
    z_next: Vec<f64>,
}

/// One (step, path) row: features, a_hat and z at t_m, then per branch its weight and the
/// features and z it leads to at t_{m+1}.
struct RowLayout {
    nf: usize,
    k: usize,
    branches: usize,
}

impl RowLayout {
    fn branch_width(&self) -> usize {
        1 + self.nf + self.k
    }

    fn branch(&self, b: usize) -> usize {
        self.nf + 2 * self.k + b * self.branch_width()
    }

    fn width(&self) -> usize {
        self.branch(self.branches)
    }
}

/// Ridge-regularised normal equations on the columns with a non-zero diagonal.
/// Returns the L x K solution and the ridge used.
/// x = W (raw - center) for lower-triangular W.
fn standardise(raw: &[f64], center: &[f64], w: &[f64], out: &mut [f64]) {
    let nf = raw.len();
    for i in 0..nf {
        out[i] = (0..=i).map(|c| w[i * nf + c] * (raw[c] - center[c])).sum();
    }
}

/// Unit-variance scaling, followed by decorrelation when the basis holds every product up to its
/// degree: a linear change of variables leaves that span unchanged but keeps high powers of
/// strongly correlated filter features from crowding the Gram matrix toward singularity.
fn whitening(mean: &[f64], cov: &DMatrix<f64>, full: bool) -> Vec<f64> {
    let nf = mean.len();
    let inv_sd: Vec<f64> = (0..nf)
        .map(|i| {
            let sd = cov[(i, i)].max(0.0).sqrt();
            if sd > 1e-12 * mean[i].abs().max(1.0) { 1.0 / sd } else { 0.0 }
        })
        .collect();
    let mut w = vec![0.0; nf * nf];
    for i in 0..nf {
        w[i * nf + i] = inv_sd[i];
    }
    let active: Vec<usize> = (0..nf).filter(|&i| inv_sd[i] > 0.0).collect();
    let na = active.len();
    if !full || na < 2 {
        return w;
    }
    let corr = DMatrix::from_fn(na, na, |r, c| {
        cov[(active[r], active[c])] * inv_sd[active[r]] * inv_sd[active[c]]
    });
    let Some(chol) = corr.cholesky() else { return w };
    let l = chol.l();
    // exactly dependent features: leave the degeneracy to the ridge
    if (0..na).any(|i| l[(i, i)] < 1e-6) {
        return w;
    }
    let Some(linv) = l.solve_lower_triangular(&DMatrix::identity(na, na)) else { return w };
    for r in 0..na {
        for c in 0..=r {
            w[active[r] * nf + active[c]] = linv[(r, c)] * inv_sd[active[c]];
        }
    }
    w
}

/// Ridge-floored normal equations on the column-equilibrated Gram matrix, so the floor and the
/// conditioning guard see the geometry of the basis rather than the spread of its column norms.
/// Returns the coefficients and the ridge added to each diagonal entry of `gram`.
pub fn solve_normal_equations(gram: &DMatrix<f64>, xy: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let l = gram.nrows();
    let active: Vec<usize> = (0..l).filter(|&i| gram[(i, i)] > 0.0).collect();
    let mut beta = DMatrix::zeros(l, xy.ncols());
    let mut ridge = DVector::zeros(l);
    if active.is_empty() {
        return Ok((beta, ridge));
    }
    let na = active.len();
    let d: Vec<f64> = active.iter().map(|&i| gram[(i, i)].sqrt().recip()).collect();
    // unit diagonal, so trace / L = 1
    let a = DMatrix::from_fn(na, na, |r, c| {
        gram[(active[r], active[c])] * d[r] * d[c] + if r == c { RIDGE } else { 0.0 }
    });
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let cond = eig.max() / eig.min();
    if !(cond.is_finite() && cond > 0.0 && cond <= MAX_COND) {
        return Err(Error::IllConditioned { step, cond });
    }
    let chol = a.cholesky().ok_or(Error::IllConditioned { step, cond })?;
    let rhs = DMatrix::from_fn(na, xy.ncols(), |r, c| xy[(active[r], c)] * d[r]);
    let sol = chol.solve(&rhs);
    for (r, &i) in active.iter().enumerate() {
        beta.set_row(i, &(sol.row(r) * d[r]));
        ridge[i] = RIDGE * gram[(i, i)];
    }
    Ok((beta, ridge))
}

/// Realised one-step target with explicit loops: for each k,
/// sum_k' Q[k][k'] a_hat[k'] + sum_k' P[k][k'] (z_next[k'] / z[k']) g_next[k'].
pub fn elementwise_recursion_target(
    w: &StepWeights,
    a_hat: &[f64],
    z: &[f64],
    z_next: &[f64],
    g_next: &[f64],
    out: &mut [f64],
) {
    let k = a_hat.len();
    for r in 0..k {
        let mut acc = 0.0;
        for c in 0..k {
            acc += w.q[(r, c)] * a_hat[c] + w.p[(r, c)] * (z_next[c] / z[c]) * g_next[c];
        }
        out[r] = acc;
    }
}

/// The same target in matrix form, Q A_hat + P Z_m^{-1} Z_{m+1} g_next.
pub fn recursion_target(w: &StepWeights, a_hat: &[f64], z: &[f64], z_next: &[f64], g_next: &[f64]) -> DVector<f64> {
    let zm = DMatrix::from_diagonal(&DVector::from_column_slice(z));
    let zn = DMatrix::from_diagonal(&DVector::from_column_slice(z_next));
    let ratio = zm.try_inverse().expect("densities are positive") * zn;
    &w.q * DVector::from_column_slice(a_hat) + &w.p * ratio * DVector::from_column_slice(g_next)
}

pub fn fit_lsmc(market: &MarketModelSpec, riccati: &RiccatiSolution, opts: &FitOptions) -> Result<LsmcModel> {
    let grid = &riccati.grid;
    let k = riccati.k();
    if market.chain.priors.len() != k {
        return Err(Error::Invalid(vec![format!(
            "{} prior rows for {k} sub-populations",
            market.chain.priors.len()
        )]));
    }
    let registry = SchemeRegistry::default();
    let scheme = registry.get(&opts.scheme)?;
    let basis = opts.basis.compile()?;
    if let Some(mx) = basis.max_measure() {
        if mx >= k {
            return Err(Error::Invalid(vec![format!("basis feature refers to measure {mx}, only {k} exist")]));
        }
    }
    let (nl, nf) = (basis.len(), basis.n_features());
    if nf > 32 {
        return Err(Error::Unsupported("at most 32 basis features are supported".into()));
    }
    if opts.n_paths < 10 * nl {
        return Err(Error::Invalid(vec![format!(
            "{} paths is fewer than 10 per basis function ({nl} functions)",
            opts.n_paths
        )]));
    }
    let j = market.chain.states();
    let gen = QPaths::new(market, grid, opts.q, opts.seed, opts.randomize_initial)?;
    let steps = grid.steps;
    let block = ((steps as f64).sqrt().ceil() as usize).max(1);
    let n_blocks = steps.div_ceil(block);
    let ck_w = 1 + j * j;
    let lay = RowLayout { nf, k, branches: if opts.branch_average { 2 * j } else { 0 } };
    let row_w = lay.width();

    let mut chunks: Vec<Chunk> = (0..opts.n_paths.div_ceil(CHUNK))
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(opts.n_paths - start);
            Chunk {
                start,
                len,
                weights: Vec::new(),
                ckpt: vec![vec![0.0; len * ck_w]; n_blocks],
                data: vec![0.0; block * len * row_w],
                target: vec![0.0; len * k],
                g_next: vec![0.0; len * k],
                z_next: vec![0.0; len * k],
            }
        })
        .collect();

    // Forward pass: checkpoints at block starts and the terminal densities.
    chunks.par_iter_mut().try_for_each(|ch| -> Result<()> {
        for p in 0..ch.len {
            let path = (ch.start + p) as u64;
            let mut s = gen.start(path);
            ch.weights.push(s.filter.weights().to_vec());
            let mut rng = gen.rng(path);
            for m in 0..steps {
                if m % block == 0 {
                    let dst = &mut ch.ckpt[m / block][p * ck_w..(p + 1) * ck_w];
                    dst[0] = s.f;
                    dst[1..].copy_from_slice(&s.filter.lam_smooth);
                }
                gen.advance(&mut rng, m, &mut s)?;
            }
            ch.z_next[p * k..(p + 1) * k].copy_from_slice(&s.filter.z);
        }
        Ok(())
    })?;

    let mut beta_all = vec![vec![0.0; nl * k]; steps + 1];
    let mut center_all = vec![vec![0.0; nf]; steps + 1];
    let mut whiten_all = vec![vec![0.0; nf * nf]; steps + 1];
    let n = opts.n_paths as f64;
    let zeros = vec![0.0; k];

    for b in (0..n_blocks).rev() {
        let b0 = b * block;
        let b1 = (b0 + block).min(steps);
        chunks.par_iter_mut().try_for_each(|ch| -> Result<()> {
            for p in 0..ch.len {
                let path = (ch.start + p) as u64;
                let ck = &ch.ckpt[b][p * ck_w..(p + 1) * ck_w];
                let filter = FilterState::restore(ch.weights[p].clone(), k, opts.q, &ck[1..], ck[0], &gen.kernel)?;
                let mut s = PathState { f: ck[0], filter };
                let mut t = s.clone();
                let mut rng = gen.rng(path);
                for m in b0..b1 {
                    let row = &mut ch.data[((m - b0) * ch.len + p) * row_w..][..row_w];
                    basis.read_features(s.f, &s.filter.pi, &s.filter.z, j, &mut row[..nf]);
                    row[nf..nf + k].copy_from_slice(&s.filter.a_hat);
                    row[nf + k..nf + 2 * k].copy_from_slice(&s.filter.z);
                    let (dw, u) = step_draws(&mut rng, m, grid.delta());
                    if lay.branches > 0 && m + 1 < steps {
                        for i in 0..j {
                            let w = 0.5 * s.filter.pi_row(opts.q)[i];
                            for (h, sign) in [1.0, -1.0].into_iter().enumerate() {
                                let off = lay.branch(2 * i + h);
                                row[off] = w;
                                if w == 0.0 {
                                    continue;
                                }
                                t.f = s.f;
                                t.filter.clone_from(&s.filter);
                                gen.step_in_state(m, i, sign * dw, &mut t)?;
                                basis.read_features(t.f, &t.filter.pi, &t.filter.z, j, &mut row[off + 1..off + 1 + nf]);
                                row[off + 1 + nf..off + lay.branch_width()].copy_from_slice(&t.filter.z);
                            }
                        }
                    }
                    if m + 1 < b1 {
                        gen.advance_with(m, dw, u, &mut s)?;
                    }
                }
            }
            Ok(())
        })?;

        for m in (b0..b1).rev() {
            let w = scheme.weights(riccati, m)?;
            let off = m - b0;
            let row_at = |ch: &Chunk, p: usize| -> (usize, usize) {
                let base = (off * ch.len + p) * row_w;
                (base, base + row_w)
            };
            // Branch states are valued with the coefficients of t_{m+1}.
            let next = (lay.branches > 0 && m + 1 < steps)
                .then(|| (&beta_all[m + 1], &center_all[m + 1], &whiten_all[m + 1]));

            // targets and feature sums
            let sums: Vec<Vec<f64>> = chunks
                .par_iter_mut()
                .map(|ch| {
                    let mut s = vec![0.0; nf];
                    let mut x = [0.0f64; 32];
                    let mut phi = vec![0.0; nl];
                    let mut g_b = vec![0.0; k];
                    let mut t_b = vec![0.0; k];
                    for p in 0..ch.len {
                        let (lo, hi) = row_at(ch, p);
                        let row = &ch.data[lo..hi];
                        let (a_hat, z) = (&row[nf..nf + k], &row[nf + k..nf + 2 * k]);
                        let out = &mut ch.target[p * k..(p + 1) * k];
                        if lay.branches == 0 {
                            let (zn, gn) = (&ch.z_next[p * k..(p + 1) * k], &ch.g_next[p * k..(p + 1) * k]);
                            elementwise_recursion_target(&w, a_hat, z, zn, gn, out);
                        } else {
                            elementwise_recursion_target(&w, a_hat, z, z, &zeros, out);
                            if let Some((beta, center, whiten)) = next {
                                for br in 0..lay.branches {
                                    let bo = lay.branch(br);
                                    let wt = row[bo];
                                    if wt == 0.0 {
                                        continue;
                                    }
                                    standardise(&row[bo + 1..bo + 1 + nf], center, whiten, &mut x[..nf]);
                                    basis.expand_hermite(&x[..nf], &mut phi);
                                    for kk in 0..k {
                                        g_b[kk] = (0..nl).map(|l| phi[l] * beta[l * k + kk]).sum();
                                    }
                                    let zb = &row[bo + 1 + nf..bo + lay.branch_width()];
                                    elementwise_recursion_target(&w, &zeros, z, zb, &g_b, &mut t_b);
                                    for kk in 0..k {
                                        out[kk] += wt * t_b[kk];
                                    }
                                }
                            }
                        }
                        for i in 0..nf {
                            s[i] += row[i];
                        }
                    }
                    s
                })
                .collect();
            let mut mean = vec![0.0; nf];
            for s in &sums {
                for i in 0..nf {
                    mean[i] += s[i];
                }
            }
            mean.iter_mut().for_each(|v| *v /= n);
            let sq: Vec<Vec<f64>> = chunks
                .par_iter()
                .map(|ch| {
                    let mut s = vec![0.0; nf * nf];
                    for p in 0..ch.len {
                        let (lo, _) = row_at(ch, p);
                        let d = &ch.data[lo..lo + nf];
                        for r in 0..nf {
                            for c in 0..=r {
                                s[r * nf + c] += (d[r] - mean[r]) * (d[c] - mean[c]);
                            }
                        }
                    }
                    s
                })
                .collect();
            let cov = DMatrix::from_fn(nf, nf, |r, c| {
                let (r, c) = if c > r { (c, r) } else { (r, c) };
                sq.iter().map(|s| s[r * nf + c]).sum::<f64>() / n
            });
            let whiten = whitening(&mean, &cov, opts.basis.include_cross_terms);

            let partial: Vec<(Vec<f64>, Vec<f64>)> = chunks
                .par_iter()
                .map(|ch| {
                    let mut g = vec![0.0; nl * nl];
                    let mut xy = vec![0.0; nl * k];
                    let mut x = [0.0f64; 32];
                    let mut phi = vec![0.0; nl];
                    for p in 0..ch.len {
                        let (lo, _) = row_at(ch, p);
                        standardise(&ch.data[lo..lo + nf], &mean, &whiten, &mut x[..nf]);
                        basis.expand_hermite(&x[..nf], &mut phi);
                        let y = &ch.target[p * k..(p + 1) * k];
                        for r in 0..nl {
                            let pr = phi[r];
                            let grow = &mut g[r * nl..];
                            for c in r..nl {
                                grow[c] += pr * phi[c];
                            }
                            for kk in 0..k {
                                xy[r * k + kk] += pr * y[kk];
                            }
                        }
                    }
                    (g, xy)
                })
                .collect();
            let mut gram = DMatrix::zeros(nl, nl);
            let mut xy = DMatrix::zeros(nl, k);
            for (g, v) in &partial {
                for r in 0..nl {
                    for c in r..nl {
                        gram[(r, c)] += g[r * nl + c];
                    }
                    for kk in 0..k {
                        xy[(r, kk)] += v[r * k + kk];
                    }
                }
            }
            for r in 0..nl {
                for c in 0..r {
                    gram[(r, c)] = gram[(c, r)];
                }
            }
            let (beta, _) = solve_normal_equations(&gram, &xy, m)?;
            let flat: Vec<f64> = (0..nl).flat_map(|r| (0..k).map(move |c| (r, c))).map(|(r, c)| beta[(r, c)]).collect();

            if lay.branches == 0 {
                chunks.par_iter_mut().for_each(|ch| {
                    let mut x = [0.0f64; 32];
                    let mut phi = vec![0.0; nl];
                    for p in 0..ch.len {
                        let (lo, _) = row_at(ch, p);
                        standardise(&ch.data[lo..lo + nf], &mean, &whiten, &mut x[..nf]);
                        basis.expand_hermite(&x[..nf], &mut phi);
                        for kk in 0..k {
                            ch.g_next[p * k + kk] = (0..nl).map(|l| phi[l] * flat[l * k + kk]).sum();
                            ch.z_next[p * k + kk] = ch.data[lo + nf + k + kk];
                        }
                    }
                });
            }
            beta_all[m] = flat;
            center_all[m] = mean;
            whiten_all[m] = whiten;
        }
    }

    LsmcModel {
        grid: grid.clone(),
        basis: opts.basis.clone(),
        q_measure_index: opts.q,
        measures: k,
        states: j,
        scheme: scheme.name().to_string(),
        center: center_all,
        whiten: whiten_all,
        beta: beta_all,
        compiled: None,
    }
    .finish()
}
