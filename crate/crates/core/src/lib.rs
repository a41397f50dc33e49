//! Range-view LiDAR segmentation core: projection, synthetic weather,
//! abnormality suppression, reflectance calibration, a small dense
//! segmentation network with hand-written gradients, and evaluation
//! metrics.
//!
//! The crate is `no_std` + `alloc`; everything that touches files or
//! threads lives in the companion `rvseg` CLI crate. All floating-point
//! routines are generic over [`Real`] so training runs at `f32` while
//! gradient checking runs the same code at `f64`. Every reduction runs in
//! a fixed serial order, so results are reproducible bit for bit.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod classes;
pub mod gas;
pub mod kernels;
pub mod metrics;
pub mod net;
pub mod projection;
pub mod rdc;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod weather;

pub use real::Real;
pub use tensor::{ChannelStats, LabelImage, Mask, ParamTensor, Tensor};
