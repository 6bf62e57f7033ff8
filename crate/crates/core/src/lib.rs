//! Hierarchical patch diffusion for video.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] is a small dense tensor library with a define-by-run tape
//!   for reverse-mode differentiation, trilinear grid sampling, an AdamW
//!   optimizer and a checkpoint format.
//! * [`patchgeom`] holds the coordinate algebra of nested patch pyramids and
//!   inference tilings.
//! * [`denoiser`] is the joint multi-level network: per-level tokenizers,
//!   read/compute/write latent blocks, deep context fusion and adaptive
//!   computation over pyramid levels.
//! * [`diffusion`] provides noise sampling, preconditioning, sigma grids and
//!   the reverse-process steppers; [`train`] drives optimisation.
//! * [`tiled`] generates videos level by level with overlapped tiles and a
//!   parent activation cache.
//! * [`data`] produces the synthetic moving-shapes dataset and the binary
//!   video format; [`config`] and [`cli`] wire everything to the `hpdm`
//!   binary.

pub mod cli;
mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod par;
pub mod patchgeom;
pub mod rng;
pub mod tiled;
pub mod train;

pub use error::{Error, Result};
