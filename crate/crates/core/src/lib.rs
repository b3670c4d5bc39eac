//! Query-and-Attend (QnA) local attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, window reductions, the allocation ledger and
//!   the `QNAT` container.
//! - [`qna`]: the QnA layer computed with the shared-query algorithm, plus its
//!   analytic backward pass.
//! - [`oracle`]: naive per-window reference implementations and the unfold
//!   baselines.
//! - [`model`]: QnA-ViT assembly, inference and parameter/FLOP accounting.
//! - [`complexity`]: the window-size sweep comparing latency and memory.
//! - [`verify`]: oracle grids, gradient checks and invariance checks.
//! - [`toy`]: a one-layer motif detector trained with the analytic gradients.

pub mod complexity;
pub mod error;
pub mod model;
pub mod oracle;
pub mod qna;
pub mod tensor;
pub mod toy;
pub mod verify;

pub use error::{QnaError, Result};
pub use tensor::{AllocationLedger, DType, Padding, RngSeed, Scalar, Tensor, Window};
