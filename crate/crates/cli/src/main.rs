mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mfgsim::closed_form::EqualBeliefsOracle;
use mfgsim::experiments::{derived_seed, ExperimentOptions, ExperimentRegistry};
use mfgsim::filtering::{run_filter, simulate_latent_path, ChainKernel};
use mfgsim::lsmc::{fit_lsmc, persist, FitOptions, LsmcModel};
use mfgsim::report::{write_probe, write_riccati, write_sweep, FilterTable, MarketTable};
use mfgsim::simulator::probe::{epsilon_nash_probe, ProbeSettings};
use mfgsim::simulator::sweep::{disagreement_sweep, SweepSettings};
use mfgsim::simulator::{AlphaSource, Market, MarketPath, RunOptions};
use mfgsim::{Config, Error, Result, RiccatiSolution, TimeGrid};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mfgsim", version, about = "Mean-field equilibrium trading: solve, fit, simulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo paths (regression and evaluation).
    #[arg(long)]
    paths: Option<usize>,
    /// Time steps on [0, T].
    #[arg(long)]
    steps: Option<usize>,
    /// Polynomial degree of the regression basis.
    #[arg(long)]
    degree: Option<usize>,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and list every violation.
    Validate(Common),
    /// Write h2 and g2 on the grid.
    Solve(Common),
    /// Fit the regression alpha and store it (binary, or JSON for a .json path).
    Lsmc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Write filters, density ratios and filtered drifts along simulated paths.
    FilterDemo(Common),
    /// Simulate the finite-population market.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Fitted model; without one the closed form is used when beliefs agree, otherwise a fit is run.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Market statistics against prior disagreement.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// start:stop:count
        #[arg(long, default_value = "0:0.45:10")]
        dpi0: String,
    },
    /// Unilateral-deviation gains against population size.
    NashProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "30,60,120,240")]
        n: Vec<usize>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run a shipped experiment preset.
    Reproduce {
        name: String,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dpi0: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    match run(cli, argv.join(" ")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))
}

/// Loads, applies command-line overrides and validates.
fn load(c: &Common) -> Result<Config> {
    let path = c.config.as_ref().ok_or_else(|| Error::Invalid(vec!["--config is required".into()]))?;
    let mut cfg = Config::load(path)?;
    apply(&mut cfg, c);
    cfg.validate()
}

fn apply(cfg: &mut Config, c: &Common) {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.steps {
        cfg.grid = TimeGrid::new(cfg.grid.horizon, m);
    }
    if c.paths.is_some() || c.degree.is_some() {
        let l = cfg.lsmc.get_or_insert_with(Default::default);
        if let Some(p) = c.paths {
            l.paths = p;
        }
        if let Some(d) = c.degree {
            l.degree = d;
        }
    }
}

fn out_path(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p)?))
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Invalid(vec![format!("expected start:stop:count, got `{s}`")]);
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    Ok(match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    })
}

fn equal_beliefs(cfg: &Config) -> bool {
    cfg.market.chain.priors.windows(2).all(|w| w[0] == w[1])
}

enum Alpha {
    Model(Box<LsmcModel>),
    Oracle(Box<EqualBeliefsOracle>),
}

impl Alpha {
    fn source(&self) -> &dyn AlphaSource {
        match self {
            Alpha::Model(m) => m.as_ref(),
            Alpha::Oracle(o) => o.as_ref(),
        }
    }
}

fn alpha_for(cfg: &Config, ric: &RiccatiSolution, model: Option<&PathBuf>) -> Result<Alpha> {
    if let Some(p) = model {
        let m = persist::load(p)?;
        if m.grid != cfg.grid {
            return Err(Error::Invalid(vec![format!("model grid has {} steps, config has {}", m.grid.steps, cfg.grid.steps)]));
        }
        return Ok(Alpha::Model(Box::new(m)));
    }
    if equal_beliefs(cfg) {
        return Ok(Alpha::Oracle(Box::new(EqualBeliefsOracle::new(&cfg.market, ric)?)));
    }
    let opts = FitOptions::from_settings(&cfg.lsmc_settings(), &cfg.market, derived_seed(cfg.seed));
    Ok(Alpha::Model(Box::new(fit_lsmc(&cfg.market, ric, &opts)?)))
}

fn run(cli: Cli, command: String) -> Result<()> {
    let started = Instant::now();
    let finish = |cfg: &Config, outputs: &[PathBuf], paths: usize| -> Result<()> {
        RunManifest::new(cfg, &command, paths, started.elapsed(), outputs)?.write_beside(&outputs[0])
    };
    match cli.command {
        Command::Validate(c) => {
            let cfg = load(&c)?;
            println!("ok: K = {}, J = {}, {} steps", cfg.population.k(), cfg.market.chain.states(), cfg.grid.steps);
        }
        Command::Solve(c) => {
            threads(c.threads)?;
            let cfg = load(&c)?;
            let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid)?;
            let out = out_path(&c, "odes.csv");
            write_riccati(create(&out)?, &ric)?;
            finish(&cfg, &[out], 0)?;
        }
        Command::Lsmc { common: c, scheme } => {
            threads(c.threads)?;
            let mut cfg = load(&c)?;
            if let Some(s) = scheme {
                cfg.lsmc.get_or_insert_with(Default::default).scheme = s;
            }
            let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid)?;
            let settings = cfg.lsmc_settings();
            let model = fit_lsmc(&cfg.market, &ric, &FitOptions::from_settings(&settings, &cfg.market, cfg.seed))?;
            let out = out_path(&c, "model.bin");
            persist::save(&model, &out)?;
            println!("fitted {} basis functions on {} paths, {} steps", model.basis_len(), settings.paths, cfg.grid.steps);
            finish(&cfg, &[out], settings.paths)?;
        }
        Command::FilterDemo(c) => {
            threads(c.threads)?;
            let cfg = load(&c)?;
            let paths = c.paths.unwrap_or(1);
            let kernel = ChainKernel::new(&cfg.market, &cfg.grid)?;
            let out = out_path(&c, "path.csv");
            let (k, j) = (cfg.population.k(), cfg.market.chain.states());
            let mut table = FilterTable::new(create(&out)?, k, j, paths > 1)?;
            for p in 0..paths {
                let latent = simulate_latent_path(&cfg.market, &cfg.grid, cfg.seed, p as u64)?;
                let mut states = Vec::with_capacity(cfg.grid.nodes());
                run_filter(&latent, &cfg.market.chain.priors, 0, &kernel, |_, s| states.push(s.clone()))?;
                table.write_path(p, &cfg.grid, &latent, &cfg.market.chain.theta, &states)?;
            }
            table.finish()?;
            finish(&cfg, &[out], paths)?;
        }
        Command::Simulate { common: c, model } => {
            threads(c.threads)?;
            let cfg = load(&c)?;
            let paths = c.paths.unwrap_or(1);
            let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid)?;
            let alpha = alpha_for(&cfg, &ric, model.as_ref())?;
            let market = Market::new(&cfg, &ric, alpha.source())?;
            let out = out_path(&c, "market.csv");
            let mut table = MarketTable::new(create(&out)?, paths > 1)?;
            let mut rec = MarketPath::default();
            for p in 0..paths {
                market.run(cfg.seed, p as u64, &RunOptions::default(), Some(&mut rec))?;
                table.write_path(p, &rec)?;
            }
            table.finish()?;
            finish(&cfg, &[out], paths)?;
        }
        Command::Sweep { common: c, dpi0 } => {
            threads(c.threads)?;
            let cfg = load(&c)?;
            let paths = cfg.lsmc_settings().paths;
            let rows = disagreement_sweep(&cfg, &SweepSettings { dpi0: parse_range(&dpi0)?, paths, seed: cfg.seed })?;
            let out = out_path(&c, "sweep.csv");
            write_sweep(create(&out)?, &rows)?;
            finish(&cfg, &[out], paths)?;
        }
        Command::NashProbe { common: c, n, model } => {
            threads(c.threads)?;
            let cfg = load(&c)?;
            let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid)?;
            let alpha = alpha_for(&cfg, &ric, model.as_ref())?;
            let settings =
                ProbeSettings { n_schedule: n, paths: c.paths.unwrap_or(10_000), seed: cfg.seed, ..Default::default() };
            let report = epsilon_nash_probe(&cfg, &ric, alpha.source(), &settings)?;
            for row in &report.rows {
                println!("N = {:4}: max gain {:.6e} (se {:.3e})", row.n, row.gain, row.se);
            }
            let out = out_path(&c, "nash.csv");
            write_probe(create(&out)?, &report)?;
            finish(&cfg, &[out], settings.paths)?;
        }
        Command::Reproduce { name, common: c, dpi0 } => {
            threads(c.threads)?;
            let registry = ExperimentRegistry::default();
            let exp = registry.get(&name)?;
            let mut cfg = match &c.config {
                Some(_) => load(&c)?,
                None => exp.config()?,
            };
            apply(&mut cfg, &c);
            let cfg = cfg.validate()?;
            let opts = ExperimentOptions { dpi0: dpi0.as_deref().map(parse_range).transpose()? };
            let out = out_path(&c, &format!("{name}.csv"));
            let report = exp.run(&cfg, &opts, &out)?;
            for line in &report.lines {
                println!("{line}");
            }
            finish(&cfg, &[out], report.paths)?;
        }
    }
    Ok(())
}
