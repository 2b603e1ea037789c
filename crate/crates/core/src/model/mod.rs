//! The pose regressor: a convolutional backbone whose stride-8 and
//! stride-16 activation maps feed two Transformer encoder branches, one
//! regressing position and one regressing orientation.

pub mod checkpoint;
mod config;
mod network;

pub use config::{Endpoint, ModelConfig};
pub use network::{
    cell_index, extract_token_attention, is_position_head, sequence_indices, token_attention_map,
    ActivationMap, Backbone, Branch, BranchOutput, Features, ForwardOutput, Model,
    PositionalEncoding, Prediction, BACKBONE_PREFIX, LOSS_PREFIX, ORIENTATION_HEAD_HIDDEN,
    ORIENTATION_PREFIX, POSITION_PREFIX,
};
