//! Optional TOML config file. Every key mirrors a flag of the same name with
//! dashes turned into underscores; flags win over file values.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use tlq_core::calibration::{CalibConfig, RatioGrid, StatMode, Strategy};
use tlq_core::distcal::TransportKind;
use tlq_core::quantizer::QuantScheme;

/// Bad flags, config keys or paths; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Exit code for a failed command: 1 for usage and config errors, 2 for
/// everything that went wrong while running.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<toml::de::Error>().is_some() {
        return 1;
    }
    match err.downcast_ref::<tlq_core::Error>() {
        Some(e) if e.code() == "config" => 1,
        _ => 2,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub result: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub memory_out: Option<PathBuf>,
    pub precision: Option<String>,

    pub depth: Option<usize>,
    pub channels: Option<usize>,
    pub outlier_fraction: Option<f64>,
    pub outlier_gain: Option<f64>,
    pub null_channels: Option<usize>,
    pub bias: Option<f64>,
    pub batch: Option<usize>,
    pub tokens: Option<usize>,
    pub visual_fraction: Option<f64>,
    pub redundancy: Option<f64>,
    pub visual_magnitude: Option<f64>,

    pub preset: Option<String>,
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub strategy: Option<String>,
    pub stat_mode: Option<String>,
    pub fraction: Option<f64>,
    pub grid_start: Option<f64>,
    pub grid_stop: Option<f64>,
    pub grid_step: Option<f64>,

    pub workers: Option<usize>,
    pub transport: Option<String>,
    pub timeout_ms: Option<u64>,
    pub overhead_coeff: Option<f64>,

    pub layer: Option<usize>,
    pub token_budget: Option<usize>,
    pub channel_budget: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("config: {}", e.message().trim())))
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

/// Flag value if given, else the file value.
pub fn pick<T>(flag: Option<T>, file: &Option<T>) -> Option<T>
where
    T: Clone,
{
    flag.or_else(|| file.clone())
}

pub fn require<T>(v: Option<T>, name: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| usage(format!("missing required option `{name}`")))
}

/// An input path that must exist before anything runs.
pub fn input_path(v: Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    let p = require(v, name)?;
    if !p.is_file() {
        return Err(usage(format!("{name} file {} does not exist", p.display())));
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn parse(s: Option<&str>) -> anyhow::Result<Self> {
        match s.unwrap_or("f64") {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(usage(format!("unknown precision `{other}` (f64, f32)"))),
        }
    }
}

/// Named calibration recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Scale ≡ 1, no search.
    Rtn,
    /// Eq. 7 square-root balance, no search.
    Sq,
    /// Top-K statistic, PassAct2, grid search.
    Tlq,
}

impl Preset {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        match s {
            "rtn" => Ok(Preset::Rtn),
            "sq" => Ok(Preset::Sq),
            "tlq" => Ok(Preset::Tlq),
            other => Err(usage(format!("unknown preset `{other}` (rtn, sq, tlq)"))),
        }
    }
}

/// Calibration options before merging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibOptions {
    pub preset: Option<String>,
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub strategy: Option<String>,
    pub stat_mode: Option<String>,
    pub fraction: Option<f64>,
    pub grid_start: Option<f64>,
    pub grid_stop: Option<f64>,
    pub grid_step: Option<f64>,
}

pub const DEFAULT_BITS_W: u32 = 4;
pub const DEFAULT_BITS_A: u32 = 8;

/// Merges flags over the file and resolves presets. Explicit strategy or
/// stat-mode options override the `tlq` preset.
pub fn calib_config(flags: &CalibOptions, file: &FileConfig) -> anyhow::Result<(Option<Preset>, CalibConfig)> {
    let preset = pick(flags.preset.clone(), &file.preset)
        .map(|p| Preset::parse(&p))
        .transpose()?;
    let scheme = QuantScheme::new(
        pick(flags.bits_w, &file.bits_w).unwrap_or(DEFAULT_BITS_W),
        pick(flags.bits_a, &file.bits_a).unwrap_or(DEFAULT_BITS_A),
    )?;
    let strategy = match pick(flags.strategy.clone(), &file.strategy) {
        Some(s) => Strategy::parse(&s)?,
        None => Strategy::PassAct2,
    };
    let stat_mode = match pick(flags.stat_mode.clone(), &file.stat_mode) {
        Some(s) => StatMode::parse(&s)?,
        None => StatMode::TopK,
    };
    let mut cfg = CalibConfig::new(scheme, strategy, stat_mode);
    if let Some(f) = pick(flags.fraction, &file.fraction) {
        cfg.fraction = f;
    }
    let d = RatioGrid::default();
    cfg.grid = RatioGrid::new(
        pick(flags.grid_start, &file.grid_start).unwrap_or(d.start),
        pick(flags.grid_stop, &file.grid_stop).unwrap_or(d.stop),
        pick(flags.grid_step, &file.grid_step).unwrap_or(d.step),
    )?;
    cfg.validate()?;
    Ok((preset, cfg))
}

pub fn transport(flag: Option<String>, file: &FileConfig) -> anyhow::Result<TransportKind> {
    match pick(flag, &file.transport) {
        Some(s) => Ok(TransportKind::parse(&s)?),
        None => Ok(TransportKind::Channel),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = FileConfig::parse("bits_w = 4\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn flags_win() {
        let file = FileConfig::parse("bits_a = 6\nstrategy = \"none\"\n").unwrap();
        let flags = CalibOptions {
            bits_a: Some(8),
            ..CalibOptions::default()
        };
        let (_, cfg) = calib_config(&flags, &file).unwrap();
        assert_eq!(cfg.scheme.activations.bits, 8);
        assert_eq!(cfg.strategy, Strategy::None);
    }

    #[test]
    fn bad_bits_is_config_error() {
        let flags = CalibOptions {
            bits_w: Some(1),
            ..CalibOptions::default()
        };
        let err = calib_config(&flags, &FileConfig::default()).unwrap_err();
        assert_eq!(exit_code(&err), 1);
    }
}
