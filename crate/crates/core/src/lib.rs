//! Best rank-(2,2,2) approximation, closure-of-rank-2 approximation, and
//! existence checks for best rank-2 approximations of real order-3 tensors.

pub mod classify;
pub mod engines;
pub mod error;
pub mod existence;
pub mod harness;
pub mod kernels;
pub mod seeds;
pub mod tensor;

pub use classify::{classify_orbit, OrbitClassification, OrbitLabel, TriangularCore222};
pub use engines::{hooi, hosvd_init, masked_givens, CoreMask, EngineConfig, LocalMinimum, Problem};
pub use error::{ExistenceError, HarnessError, KernelError, TensorError};
pub use tensor::{FactorTriple, Matrix, Mode, Tensor3};
