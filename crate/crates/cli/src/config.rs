//! TOML schemas of the command configuration files. Paths inside a file
//! are resolved relative to the file's directory, except manifests, which
//! are relative to their dataset root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use resframe::framestore::PackedDtype;
use resframe::models::{Downsample, ModelConfig};
use resframe::motioninput::{ClipMode, ClipSpec, DEFAULT_TEST_CLIPS};
use resframe::neuralcore::Activation;
use resframe::trainer::TrainConfig;

use crate::CliError;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// `path` relative to the directory holding `config_file`, unless absolute.
pub fn resolve(config_file: &Path, path: &Path) -> PathBuf {
    match config_file.parent() {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn default_clips() -> usize {
    DEFAULT_TEST_CLIPS
}

fn default_manifest() -> PathBuf {
    "manifest.tsv".into()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeName {
    U8,
    F32,
}

impl From<DtypeName> for PackedDtype {
    fn from(d: DtypeName) -> Self {
        match d {
            DtypeName::U8 => PackedDtype::U8,
            DtypeName::F32 => PackedDtype::F32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackConfig {
    /// Dataset root holding the frame directories.
    pub dataset: PathBuf,
    #[serde(default = "default_manifest")]
    pub manifest: PathBuf,
    pub dtype: DtypeName,
    /// Evenly spaced test clips per video.
    #[serde(default = "default_clips")]
    pub clips_per_video: usize,
    pub clip: ClipSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub dataset: PathBuf,
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    pub model: ModelConfig,
    pub clip: ClipSpec,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    /// Parameter file written by `train`.
    pub params: PathBuf,
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    #[serde(default = "default_clips")]
    pub num_clips: usize,
    pub clip: ClipSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseFile {
    pub predictions_a: PathBuf,
    pub predictions_b: PathBuf,
    pub dataset: PathBuf,
    /// Labels of the fused videos.
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelateFile {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
    /// One class name per line; `class_<k>` names otherwise.
    #[serde(default)]
    pub classes: Option<PathBuf>,
}

/// The grid of input mode x downsampling x activation x feature
/// differencing, trained on top of a base configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateFile {
    pub dataset: PathBuf,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub model: ModelConfig,
    pub clip: ClipSpec,
    pub train: TrainConfig,
    #[serde(default = "default_clips")]
    pub num_clips: usize,
    pub grid: Grid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub mode: Vec<ClipMode>,
    pub downsample: Vec<Downsample>,
    pub activation: Vec<Activation>,
    pub fea_diff: Vec<bool>,
}
