//! Patchification, masking, positional encodings and the encoder/decoder
//! transformer stacks.

mod config;
mod forward;
mod mask;
mod params;
mod patch;
mod posenc;

pub use config::{DecoderConfig, EncoderConfig, ModelConfig, Pooling};
pub use forward::{Decoded, Encoded};
pub use mask::{check_masks, random_mask, visible_patches, MaskSpec};
pub use params::{
    BlockIds, BoundModel, DecoderIds, EncoderIds, Layout, LinearIds, MlpIds, ModelParams, NormIds,
    ParamId,
};
pub use patch::{grid_for, patchify, unpatchify, PatchSequence};
pub use posenc::{positional_encoding, PositionalMode};
