//! Stage artifacts on disk: hash-stamped JSON and delimited text, and the
//! per-stage run manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use engshift_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

pub const ARTIFACT_VERSION: u32 = 1;
const CSV_MARK: &str = "# engshift";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// An upstream artifact is missing.
    Dependency { stage: &'static str, path: PathBuf },
    /// An artifact was written under a different configuration.
    HashMismatch { path: PathBuf, found: String, expected: String },
    Artifact(String),
}

impl CliError {
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Dependency { .. } => "dependency",
            CliError::HashMismatch { .. } => "config_hash_mismatch",
            CliError::Artifact(_) => "artifact",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Dependency { stage, path } => {
                write!(f, "missing {} (run `engshift {stage}` first)", path.display())
            }
            CliError::HashMismatch { path, found, expected } => write!(
                f,
                "{} was produced with config hash {found}, current config hashes to {expected}",
                path.display()
            ),
            CliError::Artifact(m) => write!(f, "bad artifact: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    stage: String,
    config_hash: String,
    seed: u64,
    data: T,
}

#[derive(Debug, Clone, Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    config_hash: &'a str,
    seed: u64,
    engshift_version: &'a str,
    elapsed_seconds: f64,
    outputs: &'a [OutputEntry],
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writer for one stage's outputs under the output directory. Timings live
/// only in the manifest, so the artifacts themselves are reproducible.
pub struct Stage<'a> {
    pub cfg: &'a PipelineConfig,
    pub hash: String,
    name: &'static str,
    started: Instant,
    outputs: Vec<OutputEntry>,
}

impl<'a> Stage<'a> {
    pub fn new(cfg: &'a PipelineConfig, name: &'static str) -> Self {
        Self { cfg, hash: cfg.hash(), name, started: Instant::now(), outputs: Vec::new() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.cfg.paths.output_dir.join(rel)
    }

    fn write_bytes(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
        }
        std::fs::write(path, bytes).map_err(Error::from)?;
        let shown = path.strip_prefix(&self.cfg.paths.output_dir).unwrap_or(path);
        self.outputs.push(OutputEntry { path: shown.display().to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, path: &Path, data: &T) -> CliResult<()> {
        let env = Envelope {
            format_version: ARTIFACT_VERSION,
            stage: self.name.to_string(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            data,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(Error::from)?;
        text.push('\n');
        self.write_bytes(path, text.as_bytes())
    }

    /// Writes delimited text produced by `body` after a hash-stamped comment line.
    pub fn write_table<F>(&mut self, path: &Path, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> engshift_core::Result<()>,
    {
        let mut buf = format!("{CSV_MARK} stage={} config_hash={}\n", self.name, self.hash).into_bytes();
        body(&mut buf)?;
        self.write_bytes(path, &buf)
    }

    pub fn write_text(&mut self, path: &Path, text: &str) -> CliResult<()> {
        self.write_bytes(path, text.as_bytes())
    }

    pub fn finish(self) -> CliResult<()> {
        let manifest = Manifest {
            stage: self.name,
            config_hash: &self.hash,
            seed: self.cfg.seed,
            engshift_version: env!("CARGO_PKG_VERSION"),
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            outputs: &self.outputs,
        };
        let path = self.cfg.paths.output_dir.join("manifest").join(format!("{}.json", self.name));
        std::fs::create_dir_all(path.parent().expect("manifest dir")).map_err(Error::from)?;
        let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
        std::fs::write(&path, text).map_err(Error::from)?;
        log::info!("{}: wrote {} files in {:.2}s", self.name, self.outputs.len(), manifest.elapsed_seconds);
        Ok(())
    }
}

fn read_upstream(path: &Path, stage: &'static str) -> CliResult<String> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::Dependency { stage, path: path.to_path_buf() }),
        Err(e) => Err(Error::from(e).into()),
    }
}

fn check_hash(path: &Path, found: &str, expected: &str) -> CliResult<()> {
    if found != expected {
        return Err(CliError::HashMismatch { path: path.to_path_buf(), found: found.to_string(), expected: expected.to_string() });
    }
    Ok(())
}

/// Reads a JSON artifact written by `stage` under the same configuration.
pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str, hash: &str) -> CliResult<T> {
    let text = read_upstream(path, stage)?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    if env.format_version != ARTIFACT_VERSION {
        return Err(CliError::Artifact(format!("{}: format version {}", path.display(), env.format_version)));
    }
    check_hash(path, &env.config_hash, hash)?;
    Ok(env.data)
}

/// Splits a stamped table into its hash and body; unstamped text passes
/// through with no hash.
pub fn split_stamp(text: &str) -> (Option<&str>, &str) {
    match text.strip_prefix(CSV_MARK) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let hash = line.split_whitespace().find_map(|t| t.strip_prefix("config_hash="));
            (hash, body)
        }
        None => (None, text),
    }
}

/// Reads a stamped table written by `stage` and returns its body.
pub fn read_table(path: &Path, stage: &'static str, hash: &str) -> CliResult<String> {
    let text = read_upstream(path, stage)?;
    match split_stamp(&text) {
        (Some(found), body) => {
            check_hash(path, found, hash)?;
            Ok(body.to_string())
        }
        (None, _) => Err(CliError::Artifact(format!("{} has no config hash stamp", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_split_cleanly() {
        let (h, body) = split_stamp("# engshift stage=ingest config_hash=abc\na,b\n1,2\n");
        assert_eq!(h, Some("abc"));
        assert_eq!(body, "a,b\n1,2\n");
        assert_eq!(split_stamp("a,b\n"), (None, "a,b\n"));
    }

    #[test]
    fn error_classes_are_stable() {
        let e = CliError::Dependency { stage: "ingest", path: "x".into() };
        assert_eq!(e.class(), "dependency");
        assert!(e.to_string().contains("engshift ingest"));
        assert_eq!(CliError::from(Error::Config("x".into())).class(), "config");
    }
}
