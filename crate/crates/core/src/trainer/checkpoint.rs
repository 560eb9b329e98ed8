//! Checkpoints are `RMP1` files holding the parameters, running statistics
//! and `momentum/<param>` velocity tensors (all `f64`). The metadata carries
//! both configurations, counters, history and the generator position.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EpochRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::models::{build, Dtype, ModelConfig, Network, TensorFile};

const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// `u128` does not fit a JSON number.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: usize,
    rng: RngState,
    history: Vec<EpochRecord>,
    best_val_top1: Option<f64>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

pub fn save_checkpoint(path: &Path, net: &Network, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let mut tensors = net.export_tensors();
    for (p, v) in net.params().iter().zip(&state.momentum) {
        tensors.push((format!("{MOMENTUM_PREFIX}{}", p.name), v.clone()));
    }
    let meta = Meta {
        kind: "checkpoint".into(),
        model: net.config().clone(),
        train: config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        history: state.history.clone(),
        best_val_top1: state.best_val_top1,
    };
    TensorFile {
        config_hash: net.config().hash(),
        dtype: Dtype::F64,
        metadata: json!(meta),
        tensors,
    }
    .write(path)
}

/// Restores the network, optimizer state and training configuration.
/// Fails with a hash mismatch when the checkpoint was written for a model
/// other than `model`.
pub fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<(Network, TrainState, TrainConfig)> {
    let file = TensorFile::read(path)?;
    if file.config_hash != model.hash() {
        return Err(Error::HashMismatch {
            expected: model.hash_hex(),
            found: hex::encode(file.config_hash),
        });
    }
    if file.dtype != Dtype::F64 {
        return Err(bad("checkpoints must be stored as f64"));
    }
    let meta: Meta = serde_json::from_value(file.metadata).map_err(|e| bad(e.to_string()))?;
    if meta.kind != "checkpoint" {
        return Err(bad(format!("file kind is {:?}", meta.kind)));
    }

    let (momentum, params): (Vec<_>, Vec<_>) = file
        .tensors
        .into_iter()
        .partition(|(name, _)| name.starts_with(MOMENTUM_PREFIX));
    let mut net = build(model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    net.import_tensors(&params)?;
    let velocity = net
        .params()
        .iter()
        .map(|p| {
            let name = format!("{MOMENTUM_PREFIX}{}", p.name);
            let (_, t) = momentum
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| bad(format!("missing {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!("{name}: shape {:?}", t.shape())));
            }
            Ok(t.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    if velocity.len() != momentum.len() {
        return Err(bad("unexpected momentum tensors"));
    }

    let seed: [u8; 32] = hex::decode(&meta.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("generator seed"))?;
    let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| bad("generator position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    meta.train.validate()?;
    let state = TrainState {
        epoch: meta.epoch,
        step: meta.step,
        momentum: velocity,
        rng,
        history: meta.history,
        best_val_top1: meta.best_val_top1,
    };
    Ok((net, state, meta.train))
}
