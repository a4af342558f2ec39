//! Collaboration between a conversational recommender system (CRS) and an
//! instruction-tuned language model (LLM) on four pre-sales dialogue tasks:
//! dialogue understanding, user needs elicitation, needs-based
//! recommendation and response generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: dialogues, catalogs, the line-delimited loader and a seeded
//!   synthetic generator.
//! * [`tasks`]: task instances and 20-candidate sampling.
//! * [`crs`]: the unified prompt-based CRS, its recommendation head and
//!   two-stage training.
//! * [`llm`]: instruction data, output parsing and LLM backends.
//! * [`collab`]: both collaboration directions and the eight named variants.
//! * [`eval`]: metrics and their aggregation.
//! * [`experiment`]: configuration, the run matrix, tables and the
//!   annotation service.

pub mod collab;
pub mod corpus;
pub mod crs;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod llm;
pub mod tasks;
pub mod util;

pub use error::{Error, Result};
pub use tasks::{TaskInstance, TaskKind};
