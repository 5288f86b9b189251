//! Monte Carlo experiment runner.
//!
//! An [`ExperimentConfig`] names a mode (BER, MSE, bound only, operation
//! counts), the system, phase-noise and receiver settings and a list of SNR
//! points. Each frame draws its data, channel, phase noise, channel-estimate
//! error and noise from separate seeded streams keyed on
//! `(seed, SNR, frame index, purpose)`, so results are reproducible and two
//! configurations see the same frames at the same SNR.

mod config;
mod output;
mod runner;
mod summary;

pub use config::{parse_config, parse_config_str, parse_config_with_base, ExperimentConfig, Mode, Preset};
pub use output::{
    ops_path, parse_csv, render_csv, render_ops_csv, write_csv, write_ops_csv, MetricRow, CSV_COLUMNS, OPS_COLUMNS,
};
pub use runner::{
    effective_receiver, run_experiment, run_frame, run_points, simulate_frame, ExperimentResult, FrameOutcome,
    PointSetup, PointTotals, SimulatedFrame,
};
pub use summary::{load_reference, paper_reference, summarize, ReferencePoint};
