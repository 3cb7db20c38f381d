use super::*;
use crate::config::tests::table_config;
use crate::config::TimeGrid;
use crate::riccati::h2_value;

fn desk(steps: usize) -> Config {
    let mut cfg = table_config();
    cfg.grid = TimeGrid::new(1.0, steps);
    cfg.population.m_bar = vec![100.0, -20.0];
    cfg.population.inv_sd = vec![50.0, 50.0];
    cfg.population.n_agents = vec![6, 3];
    cfg
}

fn record(cfg: &Config, alpha: &dyn AlphaSource, opts: &RunOptions, path: u64) -> MarketPath {
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let market = Market::new(cfg, &ric, alpha).unwrap();
    let mut rec = MarketPath::default();
    market.run(cfg.seed, path, opts, Some(&mut rec)).unwrap();
    rec
}

/// int_{tau_m}^{T} h2/(2a) dtau for every m by trapezoid, uniform within each step except the
/// last, which is graded toward maturity.
fn decay_exponents(a: f64, phi: f64, psi: f64, grid: &TimeGrid) -> Vec<f64> {
    let f = |tau: f64| h2_value(a, phi, psi, tau) / (2.0 * a);
    let trap = |lo: f64, hi: f64, n: usize| {
        let h = (hi - lo) / n as f64;
        (0..n).map(|i| 0.5 * h * (f(lo + i as f64 * h) + f(lo + (i + 1) as f64 * h))).sum::<f64>()
    };
    let mut piece = vec![0.0; grid.steps];
    for (step, p) in piece.iter_mut().enumerate() {
        let (lo, hi) = (grid.tau(step + 1), grid.tau(step));
        if lo > 0.0 {
            *p = trap(lo, hi, 2000);
        } else {
            let mut top = hi;
            for _ in 0..80 {
                *p += trap(top / 2.0, top, 200);
                top /= 2.0;
            }
        }
    }
    let mut out = vec![0.0; grid.nodes()];
    for m in 1..grid.nodes() {
        out[m] = out[m - 1] + piece[m - 1];
    }
    out
}

#[test]
fn inventory_gap_follows_closed_form_decay() {
    let cfg = desk(600);
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let market = Market::new(&cfg, &ric, &oracle).unwrap();
    let pop = &cfg.population;
    let decay: Vec<Vec<f64>> = (0..2)
        .map(|k| decay_exponents(pop.a[k], pop.phi[k], pop.psi[k], &cfg.grid))
        .collect();
    for path in 0..3 {
        let mut rec = MarketPath::default();
        market.run(cfg.seed, path, &RunOptions::default(), Some(&mut rec)).unwrap();
        for (j, a) in rec.agents.iter().enumerate() {
            let k = a.subpop;
            let q0 = market.initial_inventory(cfg.seed, path, j, k);
            assert_eq!(a.q[0], q0);
            for m in 0..=600 {
                let gap = a.q[m] - rec.mean_field[m].q_bar[k];
                let want = (q0 - pop.m_bar[k]) * decay[k][m].exp();
                assert!((gap - want).abs() < 1e-6, "path {path} agent {j} m {m}: {gap} vs {want}");
                if m > 0 {
                    let prev = (a.q[m - 1] - rec.mean_field[m - 1].q_bar[k]).abs();
                    assert!(gap.abs() <= prev + 1e-12);
                }
            }
        }
    }
}

#[test]
fn accounting_identities_hold_on_each_path() {
    let cfg = desk(300);
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let d = cfg.grid.delta();
    let lam = cfg.population.common_impact_row().unwrap();
    for path in 0..3 {
        let rec = record(&cfg, &oracle, &RunOptions::default(), path);
        let n = rec.agents.len() as f64;
        for m in 0..300 {
            let flow: f64 = rec.agents.iter().map(|a| lam[a.subpop] * a.nu[m]).sum::<f64>() / n;
            let di = (rec.s[m + 1] - rec.f[m + 1]) - (rec.s[m] - rec.f[m]);
            assert!((di - flow * d).abs() < 1e-10, "impact increment at {m}");
        }
        for a in &rec.agents {
            let paid: f64 = (0..300).map(|m| (rec.s[m] + cfg.population.a[a.subpop] * a.nu[m]) * a.nu[m] * d).sum();
            assert!((a.x[300] + paid).abs() < 1e-8, "cash");
            let mut q = a.q[0];
            for m in 0..300 {
                q += a.nu[m] * d;
                assert!((q - a.q[m + 1]).abs() < 1e-10 * (1.0 + q.abs()));
            }
        }
    }
}

#[test]
fn mean_field_columns_follow_the_feedback() {
    let cfg = desk(200);
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let rec = record(&cfg, &oracle, &RunOptions::default(), 0);
    assert_eq!(rec.mean_field[0].q_bar, cfg.population.m_bar);
    let d = cfg.grid.delta();
    for m in 0..200 {
        let mf = &rec.mean_field[m];
        for k in 0..2 {
            assert!((mf.q_bar[k] + mf.nu_bar[k] * d - rec.mean_field[m + 1].q_bar[k]).abs() < 1e-9);
        }
        // The step average departs from the left-endpoint rate at first order in delta |g2/(2a)|.
        if m < 100 {
            let inst = mean_field_rate(&ric, m, &mf.g1, &mf.q_bar);
            let stiff = ric.g2[m].amax() / (2.0 * cfg.population.a[0]);
            for k in 0..2 {
                let tol = d * stiff * inst.iter().map(|v| v.abs()).fold(0.0, f64::max) + 1.0;
                assert!((inst[k] - mf.nu_bar[k]).abs() < tol, "m {m}: {inst:?} {:?}", mf.nu_bar);
            }
        }
    }
}

#[test]
fn no_trading_leaves_price_on_fundamental() {
    let cfg = desk(200);
    let opts = RunOptions { n_agents: vec![1, 1], frozen: true, ..Default::default() };
    let rec = record(&cfg, &ZeroAlpha, &opts, 4);
    assert_eq!(rec.s, rec.f);
    for a in &rec.agents {
        assert!(a.q.iter().all(|&q| q == a.q[0]));
        assert!(a.x.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn zero_impact_keeps_price_on_fundamental() {
    let mut cfg = desk(200);
    cfg.population.lambda = vec![vec![0.0; 2]; 2];
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let rec = record(&cfg, &oracle, &RunOptions::default(), 1);
    for m in 0..=200 {
        assert!((rec.s[m] - rec.f[m]).abs() < 1e-12);
    }
    assert!(rec.agents[0].nu.iter().any(|v| v.abs() > 1.0));
}

#[test]
fn objective_examples() {
    assert_eq!(objective_value(0.0, &[0.0; 5], 5.1, 10.0, 1e-2, 0.1), 0.0);
    let q0 = 40.0;
    let v = objective_value(0.0, &[q0; 4], 5.1, 10.0, 0.0, 0.1);
    assert_eq!(v, q0 * (5.1 - 10.0 * q0));

    let mut cfg = desk(100);
    cfg.population.lambda = vec![vec![0.0; 2]; 2];
    cfg.population.phi = vec![0.0; 2];
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let market = Market::new(&cfg, &ric, &ZeroAlpha).unwrap();
    let opts = RunOptions { frozen: true, ..Default::default() };
    let out = market.run(9, 0, &opts, None).unwrap();
    for (j, h) in out.objective.iter().enumerate() {
        let k = if j < 6 { 0 } else { 1 };
        let q0 = market.initial_inventory(9, 0, j, k);
        assert_eq!(*h, q0 * (out.s_final - cfg.population.psi[k] * q0));
    }
}

#[test]
fn zero_deviation_changes_nothing() {
    let cfg = desk(150);
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let market = Market::new(&cfg, &ric, &oracle).unwrap();
    let zero = Deviation { shape: Shape::Bump { center: 0.5, half_width: 0.2 }, eps: 0.0 };
    let opts = RunOptions { deviations: vec![zero], ..Default::default() };
    for path in 0..4 {
        let out = market.run(cfg.seed, path, &opts, None).unwrap();
        assert_eq!(out.deviator[0], out.objective[0]);
    }
}

#[test]
fn deviation_matches_a_direct_rerun() {
    let cfg = desk(150);
    let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
    let oracle = EqualBeliefsOracle::new(&cfg.market, &ric).unwrap();
    let market = Market::new(&cfg, &ric, &oracle).unwrap();
    let dev = Deviation { shape: Shape::Sine { cycles: 2.0, horizon: 1.0 }, eps: 300.0 };
    let opts = RunOptions { deviations: vec![dev.clone()], ..Default::default() };
    let mut rec = MarketPath::default();
    let out = market.run(cfg.seed, 2, &opts, Some(&mut rec)).unwrap();

    // Rebuild agent 0's account under the deviated rate with the price it would have moved.
    let d = cfg.grid.delta();
    let n = rec.agents.len() as f64;
    let lam = cfg.population.common_impact_row().unwrap();
    let (mut q, mut x, mut run, mut extra) = (rec.agents[0].q[0], 0.0, 0.0, 0.0);
    for m in 0..150 {
        let b = dev.rate(cfg.grid.t(m));
        let nu = rec.agents[0].nu[m] + b;
        let s = rec.s[m] + extra;
        x -= (s + cfg.population.a[0] * nu) * nu * d;
        run += q * q;
        q += nu * d;
        extra += lam[0] * b / n * d;
    }
    let s_t = rec.s[150] + extra;
    let want = x + q * (s_t - cfg.population.psi[0] * q) - cfg.population.phi[0] * run * d;
    assert!((out.deviator[0] - want).abs() < 1e-9 * want.abs().max(1.0), "{} vs {want}", out.deviator[0]);
}

#[test]
fn deviation_shapes() {
    let b = Deviation { shape: Shape::Bump { center: 0.5, half_width: 0.1 }, eps: 2.0 };
    assert_eq!(b.rate(0.5), 2.0);
    assert_eq!(b.rate(0.3), 0.0);
    assert!((b.rate(0.45) - 1.0).abs() < 1e-12);
    let s = Deviation { shape: Shape::Sine { cycles: 1.0, horizon: 2.0 }, eps: 3.0 };
    assert!((s.rate(0.5) - 3.0).abs() < 1e-12);
}

#[test]
fn mean_and_standard_error() {
    let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
}
