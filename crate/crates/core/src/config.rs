//! Pipeline configuration and the `key = value` config file grammar.
//!
//! Grammar: one `key = value` pair per line; `#` starts a comment that runs
//! to the end of the line; blank lines are ignored; keys are the long CLI
//! flag names with `-` or `_` accepted interchangeably. Unknown keys and
//! unparsable values are errors.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::events::StreamFormat;
use crate::recon::{BackendKind, ReconConfig};
use crate::tokenizer::{DEFAULT_N_TIME, DEFAULT_TPF};
use crate::trigger::{DEFAULT_BATCH_US, DEFAULT_THETA};

pub const SEED_ENV: &str = "EVART_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Frt,
    Art,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "frt" => Ok(Mode::Frt),
            "art" => Ok(Mode::Art),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

pub fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "integrator" => Ok(BackendKind::Integrator),
        "convlstm" => Ok(BackendKind::Convlstm),
        other => Err(format!("unknown backend {other:?} (integrator|convlstm)")),
    }
}

pub fn parse_format(s: &str) -> Result<StreamFormat, String> {
    match s.to_ascii_lowercase().as_str() {
        "binary" | "bin" | "evs" => Ok(StreamFormat::Binary),
        "csv" => Ok(StreamFormat::Csv),
        other => Err(format!("unknown format {other:?} (binary|csv)")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Reconstruction rate for FRT.
    pub fps: f64,
    /// Optional lower rate the FRT frames are subsampled to before tokenizing.
    pub token_fps: Option<f64>,
    pub theta: f64,
    pub tpf: usize,
    pub batch_ms: u64,
    pub bins: usize,
    pub backend: BackendKind,
    pub n_text: usize,
    pub n_time: usize,
    pub seed: u64,
    pub levels: usize,
    pub base_channels: usize,
    pub global_dim: usize,
    pub contrast: f64,
    /// Overrides the recording end (µs) read from the file.
    pub duration_us: Option<u64>,
    pub format: Option<StreamFormat>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// Keys set explicitly (file or flags), for mode-irrelevance warnings.
    pub explicit: BTreeSet<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let recon = ReconConfig::default();
        Self {
            mode: Mode::Frt,
            fps: 24.0,
            token_fps: None,
            theta: DEFAULT_THETA,
            tpf: DEFAULT_TPF,
            batch_ms: DEFAULT_BATCH_US / 1000,
            bins: recon.bins,
            backend: recon.backend,
            n_text: 0,
            n_time: DEFAULT_N_TIME,
            seed: 0,
            levels: recon.levels,
            base_channels: recon.base_channels,
            global_dim: recon.global_dim,
            contrast: recon.contrast,
            duration_us: None,
            format: None,
            input: None,
            output: None,
            weights: None,
            explicit: BTreeSet::new(),
        }
    }
}

const FRT_ONLY: &[&str] = &["fps", "token_fps"];
const ART_ONLY: &[&str] = &["theta", "tpf", "batch_ms"];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl PipelineConfig {
    /// Applies one setting; `key` uses either `-` or `_` separators.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let raw = raw.trim();
        let bad = |reason: String| ConfigError::BadValue {
            key: key.clone(),
            reason,
        };
        match key.as_str() {
            "mode" => self.mode = raw.parse().map_err(bad)?,
            "fps" => self.fps = parse_value(&key, raw)?,
            "token_fps" => self.token_fps = Some(parse_value(&key, raw)?),
            "theta" => self.theta = parse_value(&key, raw)?,
            "tpf" => self.tpf = parse_value(&key, raw)?,
            "batch_ms" => self.batch_ms = parse_value(&key, raw)?,
            "bins" => self.bins = parse_value(&key, raw)?,
            "backend" => self.backend = parse_backend(raw).map_err(bad)?,
            "n_text" => self.n_text = parse_value(&key, raw)?,
            "n_time" => self.n_time = parse_value(&key, raw)?,
            "seed" => self.seed = parse_value(&key, raw)?,
            "levels" => self.levels = parse_value(&key, raw)?,
            "base_channels" => self.base_channels = parse_value(&key, raw)?,
            "global_dim" => self.global_dim = parse_value(&key, raw)?,
            "contrast" => self.contrast = parse_value(&key, raw)?,
            "duration_us" => self.duration_us = Some(parse_value(&key, raw)?),
            "format" => self.format = Some(parse_format(raw).map_err(bad)?),
            "input" => self.input = Some(PathBuf::from(raw)),
            "output" => self.output = Some(PathBuf::from(raw)),
            "weights" => self.weights = Some(PathBuf::from(raw)),
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Applies every pair of a config file's text.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                reason: format!("expected `key = value`, got {content:?}"),
            })?;
            self.set(key, value).map_err(|e| match e {
                ConfigError::BadValue { key, reason } => ConfigError::BadValue {
                    key,
                    reason: format!("{reason} (line {})", i + 1),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Explicitly set keys that the current mode does not use.
    pub fn irrelevant_keys(&self) -> Vec<&str> {
        let skip = match self.mode {
            Mode::Frt => ART_ONLY,
            Mode::Art => FRT_ONLY,
        };
        self.explicit
            .iter()
            .map(String::as_str)
            .filter(|k| skip.contains(k))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return fail("fps must be positive");
        }
        if let Some(t) = self.token_fps {
            if !(t > 0.0 && t <= self.fps) {
                return fail("token_fps must be positive and at most fps");
            }
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return fail("theta must be positive");
        }
        if self.tpf == 0 || self.batch_ms == 0 || self.bins == 0 {
            return fail("tpf, batch_ms and bins must be positive");
        }
        self.recon_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            backend: self.backend,
            bins: self.bins,
            global_dim: self.global_dim,
            base_channels: self.base_channels,
            levels: self.levels,
            contrast: self.contrast,
            ..ReconConfig::default()
        }
    }

    pub fn batch_us(&self) -> u64 {
        self.batch_ms * 1000
    }
}
