//! Cross-layer transcoders for a toy Vision Transformer.
//!
//! The crate captures MLP inputs and outputs from a frozen toy ViT, trains
//! sparse cross-layer transcoders (CLTs) on them, and evaluates the result:
//! per-layer reconstruction, projection-based attribution, cascaded
//! replacement faithfulness, source-layer ablation and cosine retrieval.

pub mod ablation;
pub mod attribution;
pub mod checkpoint;
pub mod clt;
pub mod config;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod replacement;
pub mod retrieval;
pub mod sparsify;
pub mod store;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};

/// Mixes a base seed with a stream index into an independent seed
/// (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
