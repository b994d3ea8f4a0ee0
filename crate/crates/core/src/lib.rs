//! Convolutional defect classification from scratch: tensors with reverse-mode
//! differentiation, layers and optimizer, class-weighted losses and metrics,
//! augmentation, dataset handling, two-phase transfer learning and Grad-CAM.

pub mod augment;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use raster::Image;
pub use tensor::{Scalar, Tape, Tensor, Var};
