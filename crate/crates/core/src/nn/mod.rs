//! Layers composed into the pose regressor: linear maps, LayerNorm,
//! multi-head self-attention, pre-norm encoder blocks and MLP heads.
//!
//! Layers hold [`ParamId`](crate::tensor::ParamId)s into a shared
//! [`ParamStore`](crate::tensor::ParamStore) and record their forward pass on
//! the tape carried by a [`Ctx`].

mod attention;
mod layers;

pub use attention::{
    AttentionOutput, Encoder, EncoderBlock, EncoderOutput, MultiHeadAttention, PosEncodingMode,
};
pub use layers::{xavier_uniform, Ctx, LayerNorm, Linear, RegressionHead};
