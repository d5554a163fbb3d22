//! The supervised baseline: patch embedding, positional encodings, divided
//! space-time attention blocks and a prior-initialized classification head.

mod attention;
mod checkpoint;
mod spacetime;

pub use attention::{
    divided_block, mhsa, register_attn, register_ff, spatial_mask, temporal_mask, AttnAdapters,
    AttnIdx, AttnWeights, BlockWeights, FfIdx, LoraIds, INIT_STD,
};
pub(crate) use attention::{feed_forward_ids, mhsa_ids};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use spacetime::{add_positional, init_head_bias, PatchConfig, SpaceTimeModel};
