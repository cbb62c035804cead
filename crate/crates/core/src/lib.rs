//! Fire and smoke detection with a dense-connection backbone, a fire/normal
//! classifier head and a three-scale anchor-based detector.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar for common use.

pub mod anchors;
pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod boxes;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type BBox64 = boxes::BBox<f64>;
pub type BBox32 = boxes::BBox<f32>;
pub type Detection64 = detector::Detection<f64>;
pub type Detection32 = detector::Detection<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
