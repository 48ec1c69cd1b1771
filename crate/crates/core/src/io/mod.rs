//! File formats: versioned TOML configs, JSON-lines input streams and CSV
//! command logs.
//!
//! Every format carries a version. An unknown version is an error; unknown
//! fields are ignored with a warning.

mod log;
mod stream;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::armik::{ArmIkConfig, ArmModel, ArmVector, ARM_DOF};
use crate::hand::HandGeometry;
use crate::retarget::{Keyvector, KeyvectorSpec, RetargetConfig};

pub use log::{
    parse_command_log, parse_latency_log, read_command_log, read_latency_log, write_command_log, write_command_log_file,
    write_latency_log, write_latency_log_file, COMMAND_LOG_VERSION,
};
pub use stream::{
    parse_glove_stream, parse_wrist_stream, read_glove_stream, read_wrist_stream, write_glove_stream,
    write_glove_stream_file, write_wrist_stream, write_wrist_stream_file, LabelAliases, WristSample, GLOVE_FORMAT,
    STREAM_VERSION, WRIST_FORMAT,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: timestamp {current} does not increase past {previous}")]
    NonMonotoneTimestamp { line: usize, previous: f64, current: f64 },
    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        found: String,
        expected: u32,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        IoError::Parse {
            line,
            reason: reason.into(),
        }
    }

    /// Parse-type failures (as opposed to configuration or filesystem errors).
    pub fn is_parse_error(&self) -> bool {
        matches!(
            self,
            IoError::Parse { .. } | IoError::NonMonotoneTimestamp { .. } | IoError::Version { .. }
        )
    }
}

/// Collects ignored field paths so each one is warned about once per file.
#[derive(Default)]
pub(crate) struct IgnoredFields {
    seen: BTreeSet<String>,
}

impl IgnoredFields {
    pub(crate) fn note(&mut self, what: &str, path: String) {
        if self.seen.insert(path.clone()) {
            ::log::warn!("{what}: ignoring unknown field '{path}'");
        }
    }
}

/// Read a versioned TOML file into `T`, warning about unknown fields.
pub fn load_toml<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_toml(&text, what)
}

pub fn parse_toml<T: DeserializeOwned>(text: &str, what: &'static str) -> Result<T, IoError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| IoError::Config(format!("{what}: {e}")))?;
    match table.get("format_version") {
        Some(toml::Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
        Some(v) => {
            return Err(IoError::Version {
                what,
                found: v.to_string(),
                expected: CONFIG_VERSION,
            })
        }
        None => {
            return Err(IoError::Version {
                what,
                found: "missing".into(),
                expected: CONFIG_VERSION,
            })
        }
    }
    let mut ignored = IgnoredFields::default();
    serde_ignored::deserialize(toml::Value::Table(table), |p| ignored.note(what, p.to_string()))
        .map_err(|e: toml::de::Error| IoError::Config(format!("{what}: {e}")))
}

pub fn save_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let text = toml::to_string(value).map_err(|e| IoError::Config(e.to_string()))?;
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandConfigFile {
    pub format_version: u32,
    pub geometry: HandGeometry,
}

impl HandConfigFile {
    pub fn new(geometry: HandGeometry) -> Self {
        Self {
            format_version: CONFIG_VERSION,
            geometry,
        }
    }

    pub fn load(path: &Path) -> Result<HandGeometry, IoError> {
        let f: Self = load_toml(path, "hand config")?;
        f.geometry.validate().map_err(|e| IoError::Config(e.to_string()))?;
        Ok(f.geometry)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetargetConfigFile {
    pub format_version: u32,
    pub retarget: RetargetConfig,
    pub keyvectors: Vec<Keyvector>,
}

impl RetargetConfigFile {
    pub fn new(retarget: RetargetConfig, spec: KeyvectorSpec) -> Self {
        Self {
            format_version: CONFIG_VERSION,
            retarget,
            keyvectors: spec.keyvectors,
        }
    }

    pub fn load(path: &Path) -> Result<(RetargetConfig, KeyvectorSpec), IoError> {
        let f: Self = load_toml(path, "retarget config")?;
        let spec = KeyvectorSpec { keyvectors: f.keyvectors };
        f.retarget.validate().map_err(|e| IoError::Config(e.to_string()))?;
        spec.validate().map_err(|e| IoError::Config(e.to_string()))?;
        Ok((f.retarget, spec))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmConfigFile {
    pub format_version: u32,
    #[serde(rename = "initial_q_rad")]
    pub initial_q: [f64; ARM_DOF],
    pub model: ArmModel,
    pub ik: ArmIkConfig,
}

impl ArmConfigFile {
    pub fn new(model: ArmModel, ik: ArmIkConfig, initial_q: ArmVector) -> Self {
        Self {
            format_version: CONFIG_VERSION,
            initial_q: initial_q.into(),
            model,
            ik,
        }
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let f: Self = load_toml(path, "arm config")?;
        f.model.validate().map_err(|e| IoError::Config(e.to_string()))?;
        f.ik.validate().map_err(|e| IoError::Config(e.to_string()))?;
        let (lo, hi) = (f.model.lower(), f.model.upper());
        if (0..ARM_DOF).any(|i| !(lo[i] <= f.initial_q[i] && f.initial_q[i] <= hi[i])) {
            return Err(IoError::Config("arm config: initial_q_rad outside joint limits".into()));
        }
        Ok(f)
    }
}
