//! Motion in-betweening by latent diffusion over an implicit neural motion
//! representation.
//!
//! The pipeline is: [`motion`] data, an INR variational autoencoder
//! ([`inrvae`]), a keyframe-conditioned latent diffusion model ([`ldm`]),
//! guided sampling ([`guidance`]) and evaluation ([`metrics`]).

pub mod checkpoint;
pub mod gradcheck;
pub mod guidance;
pub mod inrvae;
pub mod ldm;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod rotmath;
pub mod svg;

use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("rotation is not orthonormal: {0}")]
    NotOrthonormal(String),
    #[error("invalid keyframes: {0}")]
    Keyframes(String),
    #[error("schema error at {0}")]
    Schema(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("autodiff: {0}")]
    Diff(#[from] DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
