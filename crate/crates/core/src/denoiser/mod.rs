//! Joint multi-level patch denoiser.
//!
//! Each pyramid level is tokenized into a lattice of `d`-dimensional tokens
//! plus a private set of latent tokens. A stack of read/compute/write blocks
//! (latents attend to tokens, latents attend to themselves, tokens attend to
//! latents) updates all levels with shared weights. Before every block a
//! level's tokens are fused with trilinearly sampled tokens of all coarser
//! levels and with raw coordinate channels. Block `b` only processes the
//! first `num_levels_per_block[b]` levels.

mod config;
mod model;
mod params;

pub use config::{ContextMode, DenoiserConfig};
pub use model::{
    Bound,
    fourier_features, patchify, unpatchify, ContextSource, Denoiser, ForwardOutput, LevelInput,
};
pub use params::Params;
