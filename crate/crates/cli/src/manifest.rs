//! The run record every command leaves next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
    /// SHA-256 over the sorted `path\0digest\n` lines of `outputs`.
    pub content_hash: String,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file under `dir` except the manifest itself, as sorted
/// relative paths with `/` separators.
fn list_outputs(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
        if entry.path().is_dir() {
            list_outputs(&entry.path(), &rel, out)?;
        } else if rel != FILE_NAME {
            out.push(rel);
        }
    }
    Ok(())
}

pub struct Recorder {
    command: String,
    started: Instant,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Recorder {
            command: command.to_string(),
            started: Instant::now(),
        }
    }

    /// Hashes everything in `out_dir` and writes the manifest there.
    pub fn finish(
        self,
        out_dir: &Path,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
    ) -> Result<RunManifest, CliError> {
        let mut names = Vec::new();
        list_outputs(out_dir, "", &mut names)?;
        names.sort();
        let outputs = names
            .into_iter()
            .map(|path| {
                let sha256 = sha256_file(&out_dir.join(&path))?;
                Ok(OutputFile { path, sha256 })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut h = Sha256::new();
        for o in &outputs {
            h.update(format!("{}\0{}\n", o.path, o.sha256));
        }
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            out_dir: out_dir.to_path_buf(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs,
            content_hash: hex::encode(h.finalize()),
        };
        let path = out_dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
