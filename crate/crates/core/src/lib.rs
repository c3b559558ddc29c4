//! From-scratch deep-learning core for a three-branch CNN that stages
//! dementia from 100x100 MRI slices into three classes.
//!
//! Layers:
//!
//! - [`tensor`]: dense row-major tensors, GEMM kernels.
//! - [`ops`]: forward/backward for convolution, pooling, batch
//!   normalization, dense, dropout, activations, reshape.
//! - [`graph`]: static DAG, activation tape, reverse-mode gradients.
//! - [`optim`]: cross-entropy loss and Adam.
//! - [`model`]: the architecture, shape trace, parameter audit.
//! - [`data`], [`metrics`], [`weights`], [`train`], [`gradcheck`]:
//!   pipeline pieces used by the command-line tool.
//!
//! Kernels take an [`Exec`]; with the `parallel` feature (default) the
//! `Parallel` mode spreads independent work across rayon workers.

pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use exec::Exec;
pub use graph::{backward, backward_from, forward, Graph, OpKind, OpNode, Tape};
pub use model::{build_adnet, param_count, summarize, BranchSpec, FilterScale, ModelConfig, ParamCount};
pub use ops::Mode;
pub use params::{GradMap, ParamStore};
pub use tensor::{DType, Scalar, Shape4, Tensor};
