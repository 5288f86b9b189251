use std::fmt::Write as _;
use std::path::Path;

use super::output::MetricRow;
use crate::error::{Error, Result};

/// A published operating point: the SNR needed for a target BER and the
/// receiver effort there.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoint {
    pub case: String,
    pub snr_db: f64,
    pub ber: f64,
    pub avg_rx_iters: f64,
    pub avg_total_sd_steps: f64,
}

/// Reference operating points of the full-size setup at BER about 1e-4.
/// Case a is perfect CSI without fading; b-e are E_C/E_s of 20, 15, 10 and
/// 5 dB; f-i are Rice factors of 10, 0, -10 and -100 dB.
pub fn paper_reference() -> Vec<ReferencePoint> {
    const T: [(&str, f64, f64, f64); 9] = [
        ("a", 9.18, 4.87, 246.52),
        ("b", 10.55, 4.61, 218.71),
        ("c", 12.47, 4.54, 193.06),
        ("d", 15.67, 4.55, 153.97),
        ("e", 20.01, 4.61, 15.48),
        ("f", 9.44, 4.72, 243.22),
        ("g", 10.44, 4.74, 249.87),
        ("h", 11.85, 4.78, 250.44),
        ("i", 12.26, 4.51, 250.17),
    ];
    T.iter()
        .map(|&(c, s, i, d)| ReferencePoint {
            case: c.into(),
            snr_db: s,
            ber: 1e-4,
            avg_rx_iters: i,
            avg_total_sd_steps: d,
        })
        .collect()
}

/// Reads reference points from a CSV with columns
/// `case,snr_db,ber,avg_rx_iters,avg_total_sd_steps` (`#` comments allowed).
pub fn load_reference(path: &Path) -> Result<Vec<ReferencePoint>> {
    let text = std::fs::read_to_string(path)?;
    let perr = |m: String| Error::Parse {
        what: "reference CSV".into(),
        message: m,
    };
    let mut out = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') || line.starts_with("case") {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(perr(format!("expected 5 fields in `{line}`")));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| perr(e.to_string()));
        out.push(ReferencePoint {
            case: f[0].into(),
            snr_db: num(1)?,
            ber: num(2)?,
            avg_rx_iters: num(3)?,
            avg_total_sd_steps: num(4)?,
        });
    }
    Ok(out)
}

fn sci(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.3e}")
    }
}

fn fixed(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.2}")
    }
}

/// Aligned text table of the rows. With `reference`, rows whose SNR is
/// within 0.05 dB of a reference point get delta columns against it.
pub fn summarize(rows: &[MetricRow], reference: Option<&[ReferencePoint]>) -> String {
    let mut head = vec!["snr_db", "ber", "mse", "bcrb", "rx_iters", "sd_steps", "frames", "frame_err"];
    if reference.is_some() {
        head.extend(["ref", "d_rx_iters", "d_sd_steps"]);
    }
    let mut table: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![
            format!("{:.2}", r.snr_db),
            sci(r.ber),
            sci(r.mse_sum_phase_rad2),
            sci(r.bcrb_rad2),
            fixed(r.avg_rx_iters),
            fixed(r.avg_total_sd_steps),
            r.frames.to_string(),
            r.frame_errors.to_string(),
        ];
        if let Some(refs) = reference {
            match refs.iter().find(|p| (p.snr_db - r.snr_db).abs() <= 0.05) {
                Some(p) => line.extend([
                    p.case.clone(),
                    format!("{:+.2}", r.avg_rx_iters - p.avg_rx_iters),
                    format!("{:+.2}", r.avg_total_sd_steps - p.avg_total_sd_steps),
                ]),
                None => line.extend(["-".into(), "-".into(), "-".into()]),
            }
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for l in &table {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", cells.join("  "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(snr: f64) -> MetricRow {
        MetricRow {
            snr_db: snr,
            ber: 1e-4,
            mse_sum_phase_rad2: 2e-4,
            bcrb_rad2: 1e-5,
            avg_rx_iters: 5.0,
            avg_total_sd_steps: 250.0,
            frames: 10,
            frame_errors: 1,
            wallclock_s: 0.0,
        }
    }

    #[test]
    fn single_row_gives_header_and_one_line() {
        let t = summarize(&[row(9.0)], None);
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().next().unwrap().contains("snr_db"));
        assert!(!t.contains("d_rx_iters"));
    }

    #[test]
    fn reference_adds_deltas() {
        let refs = paper_reference();
        let t = summarize(&[row(9.18), row(7.0)], Some(&refs));
        assert!(t.contains("d_rx_iters"));
        let line = t.lines().nth(1).unwrap();
        // 5.00 - 4.87 and 250 - 246.52
        assert!(line.contains("+0.13"), "{line}");
        assert!(line.contains("+3.48"), "{line}");
        assert!(t.lines().nth(2).unwrap().trim_end().ends_with('-'));
    }

    #[test]
    fn reference_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.csv");
        std::fs::write(&p, "# comment\ncase,snr_db,ber,avg_rx_iters,avg_total_sd_steps\na,9.18,1e-4,4.87,246.52\n").unwrap();
        let r = load_reference(&p).unwrap();
        assert_eq!(r, paper_reference()[..1].to_vec());
    }
}
