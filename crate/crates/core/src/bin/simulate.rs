use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use pnmimo::harness::{
    load_reference, paper_reference, parse_config_with_base, run_experiment, summarize, ExperimentConfig, Mode, Preset,
};
use pnmimo::Error;

/// Monte Carlo simulation of a phase-noise-impaired massive MIMO uplink.
///
/// Settings come from the preset (desk unless given), then the config file,
/// then the command-line overrides.
#[derive(Parser, Debug)]
#[command(name = "simulate", version)]
struct Args {
    /// TOML configuration; keys not present keep the preset value.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Comma-separated Es/N0 points in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Option<Vec<f64>>,
    /// Maximum frames per SNR point.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV of reference points (case,snr_db,ber,avg_rx_iters,avg_total_sd_steps)
    /// to compare against in the printed summary.
    #[arg(long)]
    reference: Option<PathBuf>,
}

fn build_config(args: &Args) -> pnmimo::Result<ExperimentConfig> {
    let base = ExperimentConfig::preset(args.preset.unwrap_or(Preset::Desk));
    let mut cfg = match &args.config {
        Some(p) => parse_config_with_base(p, &base)?,
        None => base,
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(s) = &args.snr {
        cfg.snr_db_list = s.clone();
    }
    if let Some(f) = args.frames {
        cfg.max_frames = f;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &args.out {
        cfg.output_path = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match build_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let reference = match &args.reference {
        Some(p) => match load_reference(p) {
            Ok(r) => Some(r),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None if args.preset == Some(Preset::Paper) => Some(paper_reference()),
        None => None,
    };
    match run_experiment(&cfg) {
        Ok(rows) => {
            print!("{}", summarize(&rows, reference.as_deref()));
            if let Some(p) = &cfg.output_path {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ (Error::Config { .. } | Error::Parse { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
