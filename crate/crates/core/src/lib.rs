//! Federated supernet training simulator.
//!
//! One weight-sharing convolutional supernet is trained across simulated
//! non-i.i.d. clients. Child architectures of varying depth, width and kernel
//! size are views into the shared parameters. Two protocols are provided:
//!
//! * **FedSup**: clients receive the whole supernet and train `M` sampled
//!   children per local iteration (sandwich rule, in-place distillation).
//! * **E-FedSup**: clients receive one FLOPS-budgeted sub-model, train it, and
//!   the server fills untouched parameters from the previous broadcast before
//!   averaging.
//!
//! Plain FedAvg over the biggest child is available as a baseline.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod kernel;
pub mod network;
pub mod norm;
pub mod partition;
pub mod rng;
pub mod supernet;
pub mod tensor;

pub use arch::{ArchSpace, LayerChoice, Preset, StageChoice, StageSpec, SubnetSpec};
pub use error::{Error, Result};
pub use norm::{NormKind, Phase};
pub use supernet::{MaterializedModel, SubnetView, Supernet};
pub use tensor::{Scalar, Tensor};
