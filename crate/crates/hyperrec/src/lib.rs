//! Knowledge-aware recommendation with a contrastively trained
//! hypergraph view.
//!
//! The crate couples three signal paths: a qualifier-aware statement
//! encoder that seeds item embeddings from knowledge-graph context, a
//! degree-normalized collaborative propagation over the user-item
//! bipartite graph, and a dynamic top-K cosine hypergraph convolution
//! rebuilt from the current embeddings at every layer. A cross-view
//! contrastive loss ties the local and hypergraph views together on top
//! of a pairwise ranking objective.
//!
//! Everything runs on a small reverse-mode autodiff tape over dense f64
//! tensors; no external ML framework is involved.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod hypergraph;
pub mod numerics;
pub mod objective;
pub mod propagation;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
