//! Pipeline behind the `initforge` command: harvest → train generators →
//! initialise → evaluate → report, driven by one TOML config per command.

pub mod commands;
pub mod config;
pub mod experiments;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use initforge::data::{load_tensor_file, synthetic_textures, Domain, LabeledDataset, Split};
use initforge::error::Error;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// A required input artifact is absent (exit 3).
    Missing(String),
    /// Divergence or non-finite values (exit 4).
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing(m) => write!(f, "missing artifact: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Architecture(_)
            | Error::TooFewSamples { .. }
            | Error::LabelRange { .. } => CliError::Config(e.to_string()),
            Error::Diverged { .. } | Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Fails with [`CliError::Missing`] naming `what` if `path` is absent.
pub fn require(path: &Path, what: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Missing(format!("{what} not found at {}", path.display())))
    }
}

/// Loads `source` (`synthetic`, a directory or a `.bin` tensor file).
pub fn load_dataset(source: &str, n: usize, domain: Domain, seed: u64) -> CliResult<LabeledDataset> {
    if source == "synthetic" {
        return Ok(synthetic_textures(n, domain, seed));
    }
    let p = require(Path::new(source), "dataset")?;
    if p.is_dir() {
        Ok(initforge::data::load_image_dir(&p, Split::Train)?)
    } else {
        Ok(load_tensor_file(&p, Split::Train)?)
    }
}

/// Writes `bytes` to `dir/name`, creating `dir`, and returns the path.
pub fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, bytes)?;
    Ok(p)
}
