//! Reflect-, rotate-, and scale-equivariant convolution kernels with an
//! invariant-pooling gait-recognition stack built on top of them.
//!
//! The crate is organized in layers:
//!
//! * [`tensor`] — a dense, axis-labeled tensor and the [`element::Element`]
//!   abstraction that lets every kernel run in `f32` for speed and `f64`
//!   for finite-difference gradient checks.
//! * [`ops`] — convolution, resampling, pooling, normalization, dense
//!   algebra, and layout ops, each with a hand-written adjoint.
//! * [`tape`] — a reverse-mode tape over those ops, plus the central-
//!   difference oracle used to validate every registered gradient.
//! * mechanism modules ([`reflect`], [`rotate`], [`scale`]) — the three
//!   geometric blocks: mirror-paired convolution stacks with pair-max
//!   pooling, a kernel-space rotation branch with a predicted angle, and a
//!   multi-scale token-attention recalibration.
//! * model and harness modules — the full backbone, part heads, losses,
//!   synthetic walker data, training, retrieval metrics, checkpoints, and
//!   the equivariance audit used by the CLI.
//!
//! Everything is deterministic given a seed: parameter init, data
//! synthesis, batch sampling, and evaluation order.

pub mod element;
pub mod error;
pub mod gemm;
pub mod head;
pub mod loss;
pub mod ops;
pub mod params;
pub mod reflect;
pub mod rng;
pub mod rotate;
pub mod scale;
pub mod tape;
pub mod tensor;

pub use element::Element;
pub use error::{Error, Result};
pub use tensor::{Axis, Shape, Tensor};
