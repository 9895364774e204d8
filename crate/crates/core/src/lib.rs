//! Multi-scale wavelet backbone and ray-attenuation encoder built on a small
//! reverse-mode autodiff core.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`fft`] and [`gradcheck`]: dense tensors, the
//!   recording tape with hand-written backward rules, 2-D transforms and a
//!   central-difference checker.
//! * [`wavelet`]: four-band separable decomposition, convolutional
//!   modulation blocks, pair-fusion pooling and the pyramidal backbone.
//! * [`ray`]: learnable ray origins, distance field, PSF/decay attenuation
//!   maps and frequency-domain modulation layers.
//! * [`model`], [`optim`], [`metrics`], [`train`]: classifier assembly,
//!   AdamW with a one-cycle cosine schedule, and the training loop.
//! * [`data`]: PPM/PGM codecs, manifests, synthetic datasets, checkpoints
//!   and map export.

pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ray;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use error::{Result, TensorError};
pub use kernels::{Conv2dCfg, FilterAxis};
pub use scalar::{Precision, Real};
pub use tape::{Tape, Var};
pub use tensor::{ComplexTensor, Tensor};
