//! Annotation-free cell counting by density regression with adversarial
//! feature adaptation.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! Training and inference use `f32`; the aliases below name the common
//! instantiations.

pub mod adaptation;
pub mod config;
pub mod densitymap;
pub mod error;
pub mod evalcount;
pub mod grid;
pub mod io;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod source_training;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DrmParams = model::DrmParams<f32>;
pub type DamParams = model::DamParams<f32>;
pub type DcmParams = model::DcmParams<f32>;
pub type Encoder = model::Encoder<f32>;
pub type Decoder = model::Decoder<f32>;
pub type FeatureMap = model::FeatureMap<f32>;

pub type DrmParams64 = model::DrmParams<f64>;
pub type DamParams64 = model::DamParams<f64>;
pub type DcmParams64 = model::DcmParams<f64>;
