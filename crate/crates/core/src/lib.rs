//! GateNet: context-aware neural gating of flow cytometry events.
//!
//! Every event is classified together with a random draw of other events from
//! the same sample. The pooled context representation lets the network undo
//! per-sample shifts of population locations (batch effects).

pub mod checkpoint;
pub mod cyto;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imbalance;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
