//! Equiprobable "fryum wheel" segmentation of a spatially entangled photon
//! beam for high-dimensional QKD: segmentation geometry, secure key rates,
//! an exhaustive segmentation optimizer, a frame-level protocol simulator and
//! analytic tiling benchmarks.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

// `!(x > 0)` is how parameter checks reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod biphoton;
pub mod error;
pub mod fryum;
pub mod keyrate;
pub mod optimizer;
pub mod quad;
pub mod root;
pub mod scalar;
pub mod simulator;
pub mod tilingbench;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use biphoton::Basis;
pub use fryum::{AngularSpec, DiscardMode, Macropixel, MacropixelId, Party};
pub use keyrate::BasisPair;

pub type SourceParams = biphoton::SourceParams<f64>;
pub type BeamStats = biphoton::BeamStats<f64>;
pub type PhotonPair = biphoton::PhotonPair<f64>;
pub type Segmentation = fryum::Segmentation<f64>;
pub type PixelGrid = fryum::PixelGrid<f64>;
pub type ErrorMatrix = keyrate::ErrorMatrix<f64>;
pub type RateReport = keyrate::RateReport<f64>;
