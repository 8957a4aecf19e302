//! Core of labelforge: a human-in-the-loop workflow for building labeled
//! text datasets with an ensemble of LLMs.
//!
//! The workflow has five steps, each backed by a module:
//!
//! 1. [`corpus`] normalizes documents into a canonical table and binds them
//!    to a [`taxonomy`].
//! 2. [`strategies`] classifies each document with one or more models
//!    (through the [`gateway`]) and merges the proposals into a
//!    deduplicated candidate set.
//! 3. [`verification`] assigns documents to human coders, who reject the
//!    candidates that do not apply; it also computes inter-coder reliability.
//! 4. [`pipeline`] exports the human-filtered set as instruction-tuning data.
//! 5. [`pipeline`] runs the tuned model over unseen documents with
//!    checkpointed, resumable batch inference.
//!
//! [`metrics`] scores predictions against gold labels for both mutually
//! exclusive and multi-label taxonomies.

pub mod corpus;
pub mod gateway;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod strategies;
pub mod taxonomy;
pub mod verification;

pub use corpus::{Corpus, Document};
pub use taxonomy::{Label, LabelId, Taxonomy};
