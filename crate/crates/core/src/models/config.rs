use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neuralcore::{Activation, DiffKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    /// 3D network over stacked (RGB or residual) frames.
    Motion3d,
    /// 2D network over a single RGB frame.
    Appearance2d,
}

/// Where spatial-temporal downsampling happens in stages 2-4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsample {
    /// Stride-2 convolution in the first block of the stage.
    Stride,
    /// Stride-1 convolutions and a 2x max-pool at the end of the stage.
    Pool,
}

const BASE_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub path: PathKind,
    pub downsample: Downsample,
    pub activation: Activation,
    /// Absolute temporal differences of the stem features (RGB input).
    #[serde(default)]
    pub fea_diff: bool,
    #[serde(default)]
    pub fea_diff_kind: DiffKind,
    pub width_multiplier: f64,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    /// `[C, T, H, W]` for the motion path, `[C, H, W]` for the appearance path.
    pub input_shape: Vec<usize>,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// ResNet-18-3D at full width over 16x112x112 clips.
    pub fn full_motion(num_classes: usize) -> Self {
        ModelConfig {
            path: PathKind::Motion3d,
            downsample: Downsample::Pool,
            activation: Activation::Elu,
            fea_diff: false,
            fea_diff_kind: DiffKind::Absolute,
            width_multiplier: 1.0,
            blocks_per_stage: 2,
            num_classes,
            input_shape: vec![3, 16, 112, 112],
            batchnorm: true,
        }
    }

    /// Quarter width, one block per stage, 16x56x56 clips.
    pub fn desk_motion(num_classes: usize) -> Self {
        ModelConfig {
            width_multiplier: 0.25,
            blocks_per_stage: 1,
            input_shape: vec![3, 16, 56, 56],
            ..Self::full_motion(num_classes)
        }
    }

    /// ResNet-18 over 224x224 frames.
    pub fn full_appearance(num_classes: usize) -> Self {
        ModelConfig {
            path: PathKind::Appearance2d,
            downsample: Downsample::Stride,
            activation: Activation::Relu,
            input_shape: vec![3, 224, 224],
            ..Self::full_motion(num_classes)
        }
    }

    pub fn desk_appearance(num_classes: usize) -> Self {
        ModelConfig {
            width_multiplier: 0.25,
            blocks_per_stage: 1,
            input_shape: vec![3, 56, 56],
            ..Self::full_appearance(num_classes)
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|w| ((w as f64 * self.width_multiplier).round() as usize).max(1))
    }

    pub fn stem_width(&self) -> usize {
        self.stage_widths()[0]
    }

    /// Network input shape without the batch axis, as `[C, T, H, W]`
    /// (`T = 1` for the appearance path).
    pub fn input_cthw(&self) -> [usize; 4] {
        match self.path {
            PathKind::Motion3d => {
                let s = &self.input_shape;
                [s[0], s[1], s[2], s[3]]
            }
            PathKind::Appearance2d => {
                let s = &self.input_shape;
                [s[0], 1, s[1], s[2]]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rank = match self.path {
            PathKind::Motion3d => 4,
            PathKind::Appearance2d => 3,
        };
        if self.input_shape.len() != rank || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "{:?} path needs a positive input shape of rank {rank}, got {:?}",
                self.path, self.input_shape
            )));
        }
        if self.fea_diff && self.path != PathKind::Motion3d {
            return Err(Error::Config("fea_diff requires the motion3d path".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "width_multiplier must lie in (0, 1], got {}",
                self.width_multiplier
            )));
        }
        if self.blocks_per_stage == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "blocks_per_stage and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}
