//! Scene graph generation from detected entity proposals.
//!
//! Given per-image entity boxes, appearance features and initial class
//! scores, this crate learns and infers entity labels and pairwise
//! predicate labels. The pipeline projects visual features and label
//! word embeddings into a common relation space (translation-style
//! semantic loss), embeds entities with multi-head graph self-attention
//! over a spatial adjacency, and classifies entities and relations with
//! MLP heads conditioned on a global graph representation. Training,
//! checkpointing and the Recall@K evaluation protocols (SGCls/PredCls,
//! constrained and unconstrained) are included, along with a synthetic
//! dataset generator for end-to-end verification.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod semantic;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use data::{Box2D, DataError, SceneInstance, Vocab};
pub use eval::{EvalResult, Task};
pub use model::{ModelError, ModelParams, PredictedGraph};



pub use tensor::{Tape, Tensor, TensorError, Var};
