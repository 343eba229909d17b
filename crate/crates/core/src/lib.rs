//! Transfer of pretrained RGB first-layer filters to hyperspectral inputs.
//!
//! Each filter of a pretrained `C_out × 3 × k1 × k2` bank is decomposed
//! (CP or spectral-mode Tucker) into frozen spatial and 3-channel spectral
//! components. The spectral components are swapped for trainable
//! `Ĉ_in`-channel ones, and the resulting layer runs as a pointwise
//! convolution followed by depthwise (CP) or grouped (Tucker) spatial
//! convolutions.

mod binio;
pub mod cli;
pub mod data;
pub mod decomp;
pub mod error;
pub mod filteradapt;
pub mod linalg;
pub mod nn;
pub mod tensor;

pub use binio::write_atomic;
pub use error::{Error, Result};

/// Mixes a base seed with a path of indices (splitmix64 finalizer) so that
/// per-item random streams do not depend on scheduling order.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
