//! Cross-modal embedding alignment with similarity-graph regularized
//! optimal transport.
//!
//! The crate works on precomputed feature vectors. It provides entropic
//! balanced and unbalanced Sinkhorn solvers with reverse-mode gradients,
//! batch similarity graphs, CLIP / SigLIP / optimal-transport losses with
//! analytic gradients, a small trainer for linear projection heads, and
//! retrieval metrics.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod numerics;
pub mod ot;
pub mod training;

pub use error::{Error, Result};
pub use numerics::DenseMatrix;
