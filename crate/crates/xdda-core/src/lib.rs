//! Desk-scale cross-domain object detection with dual-branch self
//! distillation: Fourier style transfer, a miniature two-stage detector,
//! geometry-weighted proposal cross-attention, and a three-stage
//! teacher-student training protocol, all on a small f64 autodiff engine.

pub mod data;
pub mod detector;
pub mod distill;
pub mod fourier;
pub mod image;
pub mod perceiver;
pub mod rng;
pub mod tensor;

pub use detector::{BBox, Detection, GtBox};
pub use image::ImageF;
pub use tensor::{Parameter, Tensor, TensorError};
