//! A desk-scale driving model that answers questions about a scene, plans a
//! future trajectory with flow matching, and predicts future frames, together
//! with the synthetic world, dataset builders, training loop and metrics
//! around it.

pub mod dataqa;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod experts;
pub mod flowcore;
pub mod graph;
pub mod mot;
pub mod params;
pub mod tensor;
pub mod toyworld;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use params::{Expert, ExpertSet};
pub use tensor::Matrix;

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
