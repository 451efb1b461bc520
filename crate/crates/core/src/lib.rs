//! Route-aware message passing over relational databases.
//!
//! A relational schema is compiled into *atomic routes*: direct
//! `src -> dst` links for single-foreign-key tables and composite
//! `src -> mid -> dst` paths through tables holding several foreign keys.
//! The model exchanges information along each route in a single step.

pub mod entity_graph;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod sampler;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{sym_eig, Gradients, SymEig, Tape, Tensor, Var};
