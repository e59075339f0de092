//! Minimal reverse-mode automatic differentiation used by every trainable
//! module. Values are dense `f64` matrices; operations that dominate the
//! model's cost (GRU steps, causal attention, layer norm, softmax
//! cross-entropy) are fused nodes with hand-written adjoints.

pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Segment, Var};
pub(crate) use graph::softmax_rows;
pub use optim::{global_norm, AdamW, AdamWConfig};
pub use params::{Init, ParamId, ParamStore};
