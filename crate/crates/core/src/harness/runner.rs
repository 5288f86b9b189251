use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::config::{ExperimentConfig, Mode};
use super::output::MetricRow;
use crate::bcrb::bound_for_channel;
use crate::channel::{apply_channel, estimate_channel, gen_rician, EstimatedChannel, SystemConfig};
use crate::error::{Error, Result};
use crate::frame::{generate_frame, FrameLayout};
use crate::ldpc::LdpcCode;
use crate::pn::{atomic_to_sum, generate};
use crate::qam::Qam64;
use crate::receiver::{
    count_bit_errors, receive_frame, sum_phase_mse, Genie, OperationCounts, ReceiverConfig, RxContext, Stopping,
};
use crate::streams::{stream, Purpose};

/// Everything the receiver and the metrics need about one simulated frame.
pub struct SimulatedFrame {
    pub info: Vec<Vec<Vec<u8>>>,
    /// `N_r x T` received samples.
    pub y: DMatrix<Complex64>,
    pub h_hat: EstimatedChannel,
    pub h: crate::channel::ChannelMatrix,
    /// True sum phases at the `T` frame slots.
    pub sums: DMatrix<f64>,
}

/// Shared, read-only state of one SNR point.
pub struct PointSetup {
    pub cfg: SystemConfig,
    pub layout: FrameLayout,
    pub code: LdpcCode,
    pub qam: Qam64,
    pub snr_db: f64,
}

impl PointSetup {
    pub fn new(system: &SystemConfig, code: &LdpcCode, snr_db: f64) -> Result<Self> {
        let cfg = SystemConfig {
            sigma2: system.sigma2_for_snr_db(snr_db),
            ..system.clone()
        };
        cfg.validate()?;
        let layout = FrameLayout::new(&cfg, code.n())?;
        Ok(PointSetup {
            qam: Qam64::new(cfg.es),
            cfg,
            layout,
            code: code.clone(),
            snr_db,
        })
    }

    /// The stream coordinate of this point: the bit pattern of its SNR, so
    /// that runs with different SNR lists still share frames at equal SNR.
    pub fn point_key(&self) -> u64 {
        self.snr_db.to_bits()
    }
}

/// Draws frame `frame` of a point: data, channel, phase noise, channel
/// estimate and received samples, each from its own stream.
pub fn simulate_frame(exp: &ExperimentConfig, p: &PointSetup, frame: u64) -> Result<SimulatedFrame> {
    let (seed, key) = (exp.seed, p.point_key());
    let cfg = &p.cfg;
    let fd = generate_frame(&p.layout, &p.code, &p.qam, &mut stream(seed, key, frame, Purpose::Data))?;
    let h = gen_rician(cfg, &mut stream(seed, key, frame, Purpose::Channel))?;
    let t = p.layout.n_slots();
    let traj = generate(&exp.pn, cfg.n_osc(), t + 1, &mut stream(seed, key, frame, Purpose::PhaseNoise))?;
    let h_hat = estimate_channel(&h, &traj.slot(0), cfg, &mut stream(seed, key, frame, Purpose::CsiError))?;
    let mut noise = stream(seed, key, frame, Purpose::Noise);
    let mut y = DMatrix::zeros(cfg.n_r, t);
    for n in 0..t {
        let col = apply_channel(cfg, &h, &traj.slot(n + 1), &fd.x.column(n).into_owned(), &mut noise)?;
        y.set_column(n, &col);
    }
    let sums = atomic_to_sum(&traj, cfg.o_t, cfg.o_r)?.phases.columns(1, t).into_owned();
    Ok(SimulatedFrame {
        info: fd.info,
        y,
        h_hat,
        h,
        sums,
    })
}

/// Per-frame outcome, reduced in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    /// `false` for bound-only frames.
    pub receiver_ran: bool,
    pub bit_errors: usize,
    pub info_bits: usize,
    pub mse: f64,
    pub bound: Option<f64>,
    pub rx_iters: usize,
    pub sd_steps: usize,
    pub line_search_evals: usize,
    pub ops: OperationCounts,
    pub line_search_ops: OperationCounts,
}

/// The receiver settings a mode runs with: MSE mode never stops early.
pub fn effective_receiver(exp: &ExperimentConfig) -> ReceiverConfig {
    let mut rx = exp.receiver.clone();
    if exp.mode == Mode::Mse {
        rx.stopping = Stopping::None;
    }
    rx
}

pub fn run_frame(exp: &ExperimentConfig, p: &PointSetup, rx: &ReceiverConfig, frame: u64) -> Result<FrameOutcome> {
    let rho2 = exp.rho2();
    let sim = simulate_frame(exp, p, frame)?;
    let bound = |sim: &SimulatedFrame| -> Result<f64> {
        Ok(bound_for_channel(&sim.h, &p.cfg, p.cfg.sigma2, rho2, p.layout.n_slots())?.mean_over(&p.layout.data_slots))
    };
    if exp.mode == Mode::Bcrb {
        return Ok(FrameOutcome {
            receiver_ran: false,
            bit_errors: 0,
            info_bits: 0,
            mse: f64::NAN,
            bound: Some(bound(&sim)?),
            rx_iters: 0,
            sd_steps: 0,
            line_search_evals: 0,
            ops: OperationCounts::default(),
            line_search_ops: OperationCounts::default(),
        });
    }
    let ctx = RxContext {
        cfg: &p.cfg,
        layout: &p.layout,
        code: &p.code,
        qam: &p.qam,
        rho2,
    };
    let genie = Genie {
        info: &sim.info,
        sum_phases: None,
    };
    let out = receive_frame(&ctx, &sim.y, &sim.h_hat, rx, Some(genie))?;
    Ok(FrameOutcome {
        receiver_ran: true,
        bit_errors: count_bit_errors(&sim.info, &out.decoded),
        info_bits: sim.info.iter().flatten().map(Vec::len).sum(),
        mse: sum_phase_mse(&out.phase, &sim.sums, &p.layout, &p.cfg),
        bound: if exp.mode == Mode::Mse { Some(bound(&sim)?) } else { None },
        rx_iters: out.iterations,
        sd_steps: out.total_sd_steps,
        line_search_evals: out.line_search_evals,
        ops: out.ops,
        line_search_ops: out.line_search_ops,
    })
}

/// Totals of one SNR point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointTotals {
    pub frames: usize,
    /// Frames on which the receiver ran (all but bound-only runs).
    pub rx_frames: usize,
    pub frame_errors: usize,
    pub bit_errors: usize,
    pub info_bits: usize,
    pub mse_sum: f64,
    pub bound_sum: f64,
    pub bound_sq_sum: f64,
    pub bound_count: usize,
    pub rx_iters: usize,
    pub sd_steps: usize,
    pub line_search_evals: usize,
    pub ops: OperationCounts,
    pub line_search_ops: OperationCounts,
    /// Per-frame sum-phase MSE, kept for confidence intervals.
    pub frame_mse: Vec<f64>,
    /// Per-frame bit errors.
    pub frame_bit_errors: Vec<usize>,
    /// Per-frame bound, in frame order, when computed.
    pub frame_bound: Vec<f64>,
}

impl PointTotals {
    fn add(&mut self, o: &FrameOutcome) {
        self.frames += 1;
        self.rx_frames += usize::from(o.receiver_ran);
        self.frame_errors += usize::from(o.bit_errors > 0);
        self.bit_errors += o.bit_errors;
        self.info_bits += o.info_bits;
        if o.mse.is_finite() {
            self.mse_sum += o.mse;
            self.frame_mse.push(o.mse);
        }
        if let Some(b) = o.bound {
            self.bound_sum += b;
            self.bound_sq_sum += b * b;
            self.bound_count += 1;
            self.frame_bound.push(b);
        }
        self.rx_iters += o.rx_iters;
        self.sd_steps += o.sd_steps;
        self.line_search_evals += o.line_search_evals;
        self.ops += o.ops;
        self.line_search_ops += o.line_search_ops;
        self.frame_bit_errors.push(o.bit_errors);
    }

    pub fn row(&self, snr_db: f64, wallclock_s: f64) -> MetricRow {
        let nan_if_empty = |n: usize, v: f64| if n == 0 { f64::NAN } else { v / n as f64 };
        MetricRow {
            snr_db,
            ber: if self.info_bits == 0 {
                f64::NAN
            } else {
                self.bit_errors as f64 / self.info_bits as f64
            },
            mse_sum_phase_rad2: nan_if_empty(self.frame_mse.len(), self.mse_sum),
            bcrb_rad2: nan_if_empty(self.bound_count, self.bound_sum),
            avg_rx_iters: nan_if_empty(self.rx_frames, self.rx_iters as f64),
            avg_total_sd_steps: nan_if_empty(self.rx_frames, self.sd_steps as f64),
            frames: self.frames,
            frame_errors: self.frame_errors,
            wallclock_s,
        }
    }

    /// Relative standard deviation of the per-frame bound.
    pub fn bound_rel_std(&self) -> f64 {
        if self.bound_count == 0 {
            return f64::NAN;
        }
        let n = self.bound_count as f64;
        let mean = self.bound_sum / n;
        ((self.bound_sq_sum / n - mean * mean).max(0.0)).sqrt() / mean
    }
}

/// Result of a full experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<MetricRow>,
    pub totals: Vec<PointTotals>,
}

fn pool(exp: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = exp.threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs every SNR point. Frames are simulated in parallel batches and
/// reduced in frame order; BER-type modes stop a point at the frame whose
/// error brings the count to `max_frame_errors`, so the output does not
/// depend on the batch size or the number of workers.
pub fn run_points(exp: &ExperimentConfig) -> Result<ExperimentResult> {
    exp.validate()?;
    let code = LdpcCode::reference();
    let rx = effective_receiver(exp);
    let pool = pool(exp)?;
    let batch = (pool.current_num_threads() * 2).max(1);
    let stops_on_errors = matches!(exp.mode, Mode::Ber | Mode::Opcount);
    let mut rows = Vec::with_capacity(exp.snr_db_list.len());
    let mut all = Vec::with_capacity(exp.snr_db_list.len());
    for &snr in &exp.snr_db_list {
        let started = Instant::now();
        let p = PointSetup::new(&exp.system, &code, snr)?;
        let mut totals = PointTotals::default();
        let mut next = 0usize;
        'frames: while next < exp.max_frames {
            let end = (next + batch).min(exp.max_frames);
            let outcomes: Vec<Result<FrameOutcome>> =
                pool.install(|| (next..end).into_par_iter().map(|f| run_frame(exp, &p, &rx, f as u64)).collect());
            for o in outcomes {
                totals.add(&o?);
                if stops_on_errors && totals.frame_errors >= exp.max_frame_errors {
                    break 'frames;
                }
            }
            next = end;
        }
        let wall = if exp.record_wallclock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        rows.push(totals.row(snr, wall));
        all.push(totals);
    }
    Ok(ExperimentResult { rows, totals: all })
}

/// Runs the experiment and writes the CSV (and, in opcount mode, the
/// operation sidecar) when an output path is configured.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    let res = run_points(exp)?;
    if let Some(path) = &exp.output_path {
        super::output::write_csv(path, exp, &res)?;
        if exp.mode == Mode::Opcount {
            super::output::write_ops_csv(&super::output::ops_path(path), exp, &res)?;
        }
    }
    Ok(res.rows)
}
