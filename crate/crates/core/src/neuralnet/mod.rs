//! Layers, networks, optimizer and model files for the learned projector
//! and its classifiers.

mod arch;
pub mod gradcheck;
mod io;
mod layers;
mod network;

pub use arch::{
    build_classifier, build_projector, chw_to_hwc, hwc_to_chw, ClassifierArch, ProjectionNetwork, ProjectorArch,
};
pub use io::{decode_networks, encode_networks, FORMAT_VERSION, MAGIC};
pub use layers::{elu, elu_derivative, BottleneckMode, LayerSpec, Shape};
pub use network::{clip_weights, Adam, AdamConfig, Network};
