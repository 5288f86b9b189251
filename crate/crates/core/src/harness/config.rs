use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::SystemConfig;
use crate::error::{Error, Result};
use crate::pn::PnConfig;
use crate::receiver::{ReceiverConfig, Stopping};

/// What an experiment measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bit error rate, stopping a point after `max_frame_errors` frame errors.
    Ber,
    /// Sum-phase MSE with every receiver iteration run, plus the bound on
    /// each frame's channel.
    Mse,
    /// The bound alone, averaged over `max_frames` channel draws.
    Bcrb,
    /// Like `ber`, and also writes operation totals next to the CSV.
    Opcount,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ber" => Ok(Mode::Ber),
            "mse" => Ok(Mode::Mse),
            "bcrb" => Ok(Mode::Bcrb),
            "opcount" => Ok(Mode::Opcount),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::config("preset", format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub snr_db_list: Vec<f64>,
    pub max_frames: usize,
    /// BER and opcount modes stop a point once this many frames had errors.
    pub max_frame_errors: usize,
    /// Worker threads; unset uses every core. Results do not depend on it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Record elapsed time in the CSV. Off by default so that repeated runs
    /// produce identical files.
    pub record_wallclock: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    pub system: SystemConfig,
    pub pn: PnConfig,
    pub receiver: ReceiverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

impl ExperimentConfig {
    /// Small geometry sized for a workstation: 8 transmit antennas on 4
    /// users, 16 receive antennas on 2 oscillators, 120 data slots.
    pub fn desk() -> Self {
        ExperimentConfig {
            mode: Mode::Ber,
            seed: 1,
            snr_db_list: vec![9.0, 12.0, 15.0],
            max_frames: 200,
            max_frame_errors: 100,
            threads: None,
            record_wallclock: false,
            output_path: None,
            system: SystemConfig::default(),
            pn: PnConfig::wiener(0.2),
            receiver: ReceiverConfig::default(),
        }
    }

    /// The full-size reference setup (16 users, 64 receive antennas,
    /// 1086 data slots). Long-running.
    pub fn paper() -> Self {
        ExperimentConfig {
            mode: Mode::Ber,
            seed: 1,
            snr_db_list: vec![3.0, 5.0, 7.0, 9.0, 11.0, 13.0],
            max_frames: 1_000_000,
            max_frame_errors: 100,
            threads: None,
            record_wallclock: false,
            output_path: None,
            system: SystemConfig::reference(),
            pn: PnConfig::wiener(0.2),
            receiver: ReceiverConfig {
                stopping: Stopping::Genie,
                ..ReceiverConfig::default()
            },
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => ExperimentConfig::paper(),
            Preset::Desk => ExperimentConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db_list.is_empty() {
            return Err(Error::config("snr_db_list", "must not be empty"));
        }
        if let Some(k) = self.snr_db_list.iter().position(|s| !s.is_finite()) {
            return Err(Error::config(format!("snr_db_list[{k}]"), "must be finite"));
        }
        if self.max_frames == 0 {
            return Err(Error::config("max_frames", "must be >= 1"));
        }
        if self.max_frame_errors == 0 {
            return Err(Error::config("max_frame_errors", "must be >= 1"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be >= 1"));
        }
        self.system.validate()?;
        self.pn.validate()?;
        self.receiver.validate()?;
        if self.receiver.phase_detection && self.mode != Mode::Bcrb && !(self.pn.equivalent_increment_std() > 0.0) {
            return Err(Error::config("pn.rho", "must be > 0 when phase detection is enabled"));
        }
        if self.mode == Mode::Bcrb && !(self.pn.equivalent_increment_std() > 0.0) {
            return Err(Error::config("pn.rho", "the bound needs a positive increment variance"));
        }
        Ok(())
    }

    /// Increment variance the receiver prior and the bound assume.
    pub fn rho2(&self) -> f64 {
        self.pn.equivalent_increment_std().powi(2)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse {
            what: "configuration".into(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the settings that influence results: output path, thread
    /// count and the wallclock switch are left out.
    pub fn hash_hex(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_path = None;
        c.threads = None;
        c.record_wallclock = false;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Parses TOML text on top of `base`: tables merge key by key, any other
/// value replaces the base value. Unknown keys are rejected.
pub fn parse_config_str(text: &str, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let perr = |m: String| Error::Parse {
        what: "configuration".into(),
        message: m,
    };
    let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| perr(e.to_string()))?;
    let mut merged: toml::Table = toml::Table::try_from(base).map_err(|e| perr(e.to_string()))?;
    merge(&mut merged, overlay);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| perr(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Reads a configuration file over the desk defaults.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with_base(path, &ExperimentConfig::default())
}

pub fn parse_config_with_base(path: &Path, base: &ExperimentConfig) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, base)
}
