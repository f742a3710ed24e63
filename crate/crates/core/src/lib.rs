//! Expanding autoregressive generation over spiral-ordered token grids.
//!
//! Tokens are unfolded from the grid center outward ([`spiral`]), grouped
//! into decoding steps ([`schedule`]), and predicted a whole step at a time
//! from learned mask tokens under a step-aware attention mask ([`mask`]).
//! Inference reuses keys and values through an overwrite-on-advance cache
//! ([`kv_cache`]).

pub mod analysis;
pub mod cli;
pub mod error;
pub mod generator;
pub mod kv_cache;
pub mod mask;
pub mod model;
pub mod schedule;
pub mod spiral;
pub mod trainer;

pub use error::{EarError, Result};
