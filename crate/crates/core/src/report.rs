//! CSV tables. Floats are written with 17 significant digits; indices in column names are 1-based.

use std::io::Write;

use crate::closed_form::ErrorProfile;
use crate::config::TimeGrid;
use crate::error::Result;
use crate::filtering::{FilterState, LatentPath};
use crate::riccati::RiccatiSolution;
use crate::simulator::probe::ProbeReport;
use crate::simulator::sweep::SweepRow;
use crate::simulator::{MarketPath, Shape};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn writer<W: Write>(w: W, header: Vec<String>) -> Result<csv::Writer<W>> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(&header)?;
    Ok(out)
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

/// t, h2_k, g2_ij (row-major).
pub fn write_riccati<W: Write>(w: W, ric: &RiccatiSolution) -> Result<()> {
    let k = ric.k();
    let mut header = vec!["t".to_string()];
    header.extend(indexed("h2", k));
    for r in 1..=k {
        header.extend((1..=k).map(|c| format!("g2_{r}{c}")));
    }
    let mut out = writer(w, header)?;
    for m in 0..ric.grid.nodes() {
        let mut row = vec![num(ric.grid.t(m))];
        row.extend((0..k).map(|kk| num(ric.h2[kk][m])));
        for r in 0..k {
            row.extend((0..k).map(|c| num(ric.g2[m][(r, c)])));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Streams filter paths: t, F, theta, pi_k_i, z_k, ahat_k, with a leading path column when asked.
pub struct FilterTable<W: Write> {
    out: csv::Writer<W>,
    with_path: bool,
}

impl<W: Write> FilterTable<W> {
    pub fn new(w: W, k: usize, j: usize, with_path: bool) -> Result<Self> {
        let mut header = Vec::new();
        if with_path {
            header.push("path".to_string());
        }
        header.extend(["t", "F", "theta"].map(String::from));
        for kk in 1..=k {
            header.extend((1..=j).map(|i| format!("pi_{kk}_{i}")));
        }
        header.extend(indexed("z", k));
        header.extend(indexed("ahat", k));
        Ok(Self { out: writer(w, header)?, with_path })
    }

    pub fn write_path(
        &mut self,
        path: usize,
        grid: &TimeGrid,
        latent: &LatentPath,
        theta: &[f64],
        states: &[FilterState],
    ) -> Result<()> {
        for (m, st) in states.iter().enumerate() {
            let mut row = Vec::new();
            if self.with_path {
                row.push(path.to_string());
            }
            row.extend([num(grid.t(m)), num(latent.f[m]), num(theta[latent.theta_idx[m]])]);
            row.extend(st.pi.iter().chain(&st.z).chain(&st.a_hat).map(|&v| num(v)));
            self.out.write_record(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Long format, one row per node and agent: t, agent_id, subpop, q, nu, x, S, F, then the
/// agent's sub-population mean field q_bar, nu_bar, g1.
pub struct MarketTable<W: Write> {
    out: csv::Writer<W>,
    with_path: bool,
}

impl<W: Write> MarketTable<W> {
    pub fn new(w: W, with_path: bool) -> Result<Self> {
        let mut header = Vec::new();
        if with_path {
            header.push("path");
        }
        header.extend(["t", "agent_id", "subpop", "q", "nu", "x", "S", "F", "q_bar", "nu_bar", "g1"]);
        Ok(Self { out: writer(w, header.into_iter().map(String::from).collect())?, with_path })
    }

    pub fn write_path(&mut self, path: usize, rec: &MarketPath) -> Result<()> {
        for m in 0..rec.t.len() {
            let mf = &rec.mean_field[m];
            for (j, a) in rec.agents.iter().enumerate() {
                let k = a.subpop;
                let mut row = Vec::with_capacity(12);
                if self.with_path {
                    row.push(path.to_string());
                }
                row.extend([num(rec.t[m]), (j + 1).to_string(), (k + 1).to_string()]);
                row.extend(
                    [a.q[m], a.nu[m], a.x[m], rec.s[m], rec.f[m], mf.q_bar[k], mf.nu_bar[k], mf.g1[k]].map(num),
                );
                self.out.write_record(&row)?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// dpi0, sd_price, mean_abs_impact, mean_abs_rate, then the three standard errors.
pub fn write_sweep<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let header = [
        "dpi0",
        "sd_price",
        "mean_abs_impact",
        "mean_abs_rate",
        "sd_price_se",
        "mean_abs_impact_se",
        "mean_abs_rate_se",
    ];
    let mut out = writer(w, header.map(String::from).to_vec())?;
    for r in rows {
        let vals = [
            r.dpi0,
            r.sd_price,
            r.mean_abs_impact,
            r.mean_abs_rate,
            r.sd_price_se,
            r.mean_abs_impact_se,
            r.mean_abs_rate_se,
        ];
        out.write_record(vals.map(num))?;
    }
    out.flush()?;
    Ok(())
}

/// One row per population size and deviation, plus the maximum.
pub fn write_probe<W: Write>(w: W, report: &ProbeReport) -> Result<()> {
    let header = ["n", "deviation", "half_width", "eps", "gain", "gain_se", "is_max"];
    let mut out = writer(w, header.map(String::from).to_vec())?;
    for row in &report.rows {
        for (v, (dev, (g, se))) in report.family.iter().zip(&row.per_deviation).enumerate() {
            let width = match dev.shape {
                Shape::Bump { half_width, .. } => half_width,
                Shape::Sine { .. } => f64::NAN,
            };
            out.write_record([
                row.n.to_string(),
                (v + 1).to_string(),
                num(width),
                num(dev.eps),
                num(*g),
                num(*se),
                u8::from(v == row.best).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// t, rel_err_k.
pub fn write_error_profile<W: Write>(w: W, profile: &ErrorProfile) -> Result<()> {
    let k = profile.rel.first().map_or(0, |r| r.len());
    let mut header = vec!["t".to_string()];
    header.extend(indexed("rel_err", k));
    let mut out = writer(w, header)?;
    for (t, rel) in profile.t.iter().zip(&profile.rel) {
        let mut row = vec![num(*t)];
        row.extend(rel.iter().map(|&v| num(v)));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::table_config;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            let s = num(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            assert_eq!(s.split('e').next().unwrap().trim_start_matches('-').len(), 18);
        }
    }

    #[test]
    fn riccati_header() {
        let mut cfg = table_config();
        cfg.grid = TimeGrid::new(1.0, 4);
        let ric = RiccatiSolution::solve(&cfg.population, &cfg.grid).unwrap();
        let mut buf = Vec::new();
        write_riccati(&mut buf, &ric).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,h2_1,h2_2,g2_11,g2_12,g2_21,g2_22");
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn sweep_header() {
        let mut buf = Vec::new();
        write_sweep(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            "dpi0,sd_price,mean_abs_impact,mean_abs_rate,sd_price_se,mean_abs_impact_se,mean_abs_rate_se"
        );
    }
}
