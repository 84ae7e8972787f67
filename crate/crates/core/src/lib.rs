//! Object-centric 3D generative video modeling.
//!
//! A self-contained CPU implementation of a generative video model that
//! explains each video as the view of a camera moving through a 3D scene:
//! a deformable textured background shell plus a grid of candidate objects
//! with learned appearance and kinematics. Everything needed to train and
//! evaluate the model lives here:
//!
//! - [`tensor`] — a small reverse-mode autodiff engine over dense arrays,
//!   with the convolution/normalization ops the networks need, Adam, and a
//!   binary tensor container format used for checkpoints and datasets.
//! - [`geometry`] — pinhole cameras, rigid poses, rays, ellipsoids.
//! - [`mesh`] — UV-sphere construction, vertex-transform deformation, a
//!   differentiable rasterizer, and mesh shape regularizers.
//! - [`voxel`] — a differentiable volume renderer for voxel objects and
//!   layer-over-layer scene compositing.
//! - [`model`] — the generative model itself: encoders, decoders,
//!   kinematics unrolling and scene rendering.
//! - [`loss`] — the training objective: pyramid likelihood, weighted KL,
//!   and the shape/motion/mask regularizers.
//! - [`metrics`] — segmentation, tracking, depth and 3D detection metrics.
//! - [`data`] — a synthetic rooms-style dataset generator with exact
//!   ground truth, rendered by the same renderers the model uses.
//! - [`pipeline`] — batch entry points (dataset creation, training,
//!   reconstruction, sampling, evaluation, gradient self-checks) shared by
//!   the CLI and the Python bindings.

pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod ppm;
pub mod tensor;
pub mod voxel;

pub use error::Error;
pub use tensor::{Scalar, Tensor};
