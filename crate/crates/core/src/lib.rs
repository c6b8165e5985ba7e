//! Dual-stream windowed cross-attention transformer for deformable 3D image
//! registration, with the training, inference and evaluation machinery
//! around it.
//!
//! All numerics are generic over [`Scalar`]; training uses `f32` and the
//! gradient checks use `f64`. Concrete aliases are provided below.

pub mod architecture;
pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod registration;
pub mod scalar;
pub mod tensorcore;
pub mod volume;
pub mod windowing;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensorcore::{Graph, Tensor, TensorId};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
