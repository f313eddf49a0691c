//! Three-stream PoseBox fusion network at toy scale.
//!
//! Two convolutional streams (original image, PoseBox) with separate weights,
//! a 14 -> 14 confidence FC, a fused classifier over the concatenated stream
//! embeddings, and one auxiliary classifier per image stream.

mod config;
mod file;
pub mod gradcheck;
mod layers;
mod model;
mod train;

pub use config::{baseline_config, ConfigFile, NetConfig, Streams, TrainConfig, Variant};
pub use file::{decode_params, encode_params, read_params, write_params};
pub use layers::{Conv3x3, Dense};
pub use model::{
    backward, backward_into, extract_pie, forward, image_to_input, init_params, relu_embedding,
    total_loss, ForwardOutput, LossReport, NetInput, NetParams, PieLayer, StreamParams,
};
pub use train::{learning_rate, train, TrainResult, TrainSample};

/// Width of the confidence vector and of its FC projection.
pub const CONF_WIDTH: usize = crate::io::NUM_JOINTS;
