//! Reference-driven image completion.
//!
//! A scene is a handful of reference photos plus a target image with a hole
//! (or a frame to extend). Low-rank adapters are fine-tuned on the scene with
//! a masked denoising loss, candidates are sampled and composited into the
//! target, ranked by keypoint correspondences with the references, and
//! scored against ground truth when it is available.

pub mod bench;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod sampler;
pub mod scene;
pub mod select;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

/// Short SHA-256 digest of a value's JSON form; used to key artifacts by
/// the configuration that produced them.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("configs serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}
