//! Motion-path and appearance-path networks, their configuration and
//! parameter files.

pub mod config;
pub mod layers;
pub mod network;
pub mod params_io;

pub use config::{Downsample, ModelConfig, PathKind};
pub use layers::{BatchNormLayer, Param};
pub use network::{
    build, build_appearance2d, build_fea_diff, build_motion3d, layer_shapes, Network,
};
pub use params_io::{load_params, load_params_embedded, save_params, Dtype, TensorFile};
