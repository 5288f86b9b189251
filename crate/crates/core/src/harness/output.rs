use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::runner::ExperimentResult;
use crate::error::{Error, Result};

/// One output row per SNR point. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub snr_db: f64,
    pub ber: f64,
    pub mse_sum_phase_rad2: f64,
    pub bcrb_rad2: f64,
    pub avg_rx_iters: f64,
    pub avg_total_sd_steps: f64,
    pub frames: usize,
    pub frame_errors: usize,
    pub wallclock_s: f64,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "snr_db",
    "ber",
    "mse_sum_phase_rad2",
    "bcrb_rad2",
    "avg_rx_iters",
    "avg_total_sd_steps",
    "frames",
    "frame_errors",
    "wallclock_s",
];

impl MetricRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.snr_db,
            self.ber,
            self.mse_sum_phase_rad2,
            self.bcrb_rad2,
            self.avg_rx_iters,
            self.avg_total_sd_steps,
            self.frames,
            self.frame_errors,
            self.wallclock_s
        )
    }

    fn parse_line(line: &str) -> Result<Self> {
        let perr = |m: String| Error::Parse {
            what: "metrics CSV".into(),
            message: m,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != CSV_COLUMNS.len() {
            return Err(perr(format!("expected {} fields, got {}", CSV_COLUMNS.len(), f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| perr(format!("{}: {e}", CSV_COLUMNS[k])));
        let int = |k: usize| f[k].parse::<usize>().map_err(|e| perr(format!("{}: {e}", CSV_COLUMNS[k])));
        Ok(MetricRow {
            snr_db: num(0)?,
            ber: num(1)?,
            mse_sum_phase_rad2: num(2)?,
            bcrb_rad2: num(3)?,
            avg_rx_iters: num(4)?,
            avg_total_sd_steps: num(5)?,
            frames: int(6)?,
            frame_errors: int(7)?,
            wallclock_s: num(8)?,
        })
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Ber => "ber",
        Mode::Mse => "mse",
        Mode::Bcrb => "bcrb",
        Mode::Opcount => "opcount",
    }
}

/// Renders the CSV: a `#` comment block (code version, configuration hash,
/// seed, mode), the column header and one line per point. Bound-only runs
/// append the relative spread of the bound over channel draws as trailing
/// comments.
pub fn render_csv(exp: &ExperimentConfig, res: &ExperimentResult) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# pnmimo {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# config_sha256 {}", exp.hash_hex()?);
    let _ = writeln!(s, "# seed {}", exp.seed);
    let _ = writeln!(s, "# mode {}", mode_name(exp.mode));
    let _ = writeln!(s, "{}", CSV_COLUMNS.join(","));
    for r in &res.rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    if exp.mode == Mode::Bcrb {
        for (r, t) in res.rows.iter().zip(&res.totals) {
            let _ = writeln!(s, "# bcrb_rel_std snr_db={} {}", r.snr_db, t.bound_rel_std());
        }
    }
    Ok(s)
}

pub fn write_csv(path: &Path, exp: &ExperimentConfig, res: &ExperimentResult) -> Result<()> {
    std::fs::write(path, render_csv(exp, res)?)?;
    Ok(())
}

/// Parses the rows of a metrics CSV, skipping comments and the header.
pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != CSV_COLUMNS.join(",") {
                return Err(Error::Parse {
                    what: "metrics CSV".into(),
                    message: format!("unexpected header `{line}`"),
                });
            }
            header_seen = true;
            continue;
        }
        rows.push(MetricRow::parse_line(line)?);
    }
    Ok(rows)
}

/// Sidecar path for operation totals: `x.csv` becomes `x.ops.csv`.
pub fn ops_path(path: &Path) -> PathBuf {
    path.with_extension("ops.csv")
}

pub const OPS_COLUMNS: [&str; 12] = [
    "snr_db",
    "frames",
    "total_sd_steps",
    "line_search_evals",
    "sums",
    "products",
    "divisions",
    "lut_accesses",
    "line_search_sums",
    "line_search_products",
    "line_search_divisions",
    "line_search_lut_accesses",
];

pub fn render_ops_csv(exp: &ExperimentConfig, res: &ExperimentResult) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "# pnmimo {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "# config_sha256 {}", exp.hash_hex()?);
    let _ = writeln!(s, "# seed {}", exp.seed);
    let _ = writeln!(s, "{}", OPS_COLUMNS.join(","));
    for (r, t) in res.rows.iter().zip(&res.totals) {
        let (o, l) = (t.ops, t.line_search_ops);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.snr_db,
            t.frames,
            t.sd_steps,
            t.line_search_evals,
            o.sums,
            o.products,
            o.divisions,
            o.lut_accesses,
            l.sums,
            l.products,
            l.divisions,
            l.lut_accesses
        );
    }
    Ok(s)
}

pub fn write_ops_csv(path: &Path, exp: &ExperimentConfig, res: &ExperimentResult) -> Result<()> {
    std::fs::write(path, render_ops_csv(exp, res)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(snr: f64) -> MetricRow {
        MetricRow {
            snr_db: snr,
            ber: 1.25e-3,
            mse_sum_phase_rad2: 4e-4,
            bcrb_rad2: f64::NAN,
            avg_rx_iters: 2.5,
            avg_total_sd_steps: 120.0,
            frames: 8,
            frame_errors: 3,
            wallclock_s: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_keeps_column_order() {
        let exp = ExperimentConfig::desk();
        let res = ExperimentResult {
            rows: vec![row(9.0), row(12.0)],
            totals: vec![Default::default(), Default::default()],
        };
        let text = render_csv(&exp, &res).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# pnmimo "));
        assert!(lines.next().unwrap().starts_with("# config_sha256 "));
        assert_eq!(lines.next().unwrap(), "# seed 1");
        assert_eq!(lines.next().unwrap(), "# mode ber");
        assert_eq!(
            lines.next().unwrap(),
            "snr_db,ber,mse_sum_phase_rad2,bcrb_rad2,avg_rx_iters,avg_total_sd_steps,frames,frame_errors,wallclock_s"
        );
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].snr_db, 12.0);
        assert_eq!(back[1].ber, 1.25e-3);
        assert!(back[1].bcrb_rad2.is_nan());
        assert_eq!(back[0].frame_errors, 3);
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(parse_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(ops_path(Path::new("out/run.csv")), PathBuf::from("out/run.ops.csv"));
    }
}
