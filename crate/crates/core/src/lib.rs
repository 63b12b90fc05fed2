//! Feature-fusion visual tracking.
//!
//! Two feature branches (31-channel HOG and a small convolutional network)
//! each produce a correlation-filter template solved in closed form in the
//! Fourier domain. Templates are re-weighted per channel by a small attention
//! MLP, correlated against the search region, and the per-branch response
//! maps are fused by learned kernels plus an affine scale/bias. The crate also
//! ships a desk-scale trainer for the fusion and attention parameters and an
//! OTB-style benchmark harness.

pub mod attention;
pub mod error;
pub mod evalbench;
pub mod features;
pub mod fusion;
pub mod imaging;
pub mod spectral;
pub mod tracker;
pub mod training;
pub mod verify;

pub use error::{Error, IngestError, Result, WeightStoreError};
pub use imaging::{BoundingBox, PatchMapping, Tensor3};

/// Side of the square patch fed to both feature extractors.
pub const PATCH_SIDE: usize = 255;

/// Side of every branch response map.
pub const RESPONSE_SIDE: usize = 33;
