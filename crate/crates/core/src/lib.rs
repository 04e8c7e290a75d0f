//! Cascaded 3D hand pose estimation from single depth frames.
//!
//! An initial network predicts a pose from a cube-normalised depth patch;
//! each later stage crops feature regions around the previous stage's joint
//! estimates, fuses them hierarchically (per finger, then across fingers)
//! and regresses a refined pose.

pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

/// Mixes a base seed with a stream index (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
