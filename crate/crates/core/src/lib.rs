//! Implicit information extraction toolkit.
//!
//! The crate turns a context sentence into a two-tier knowledge graph with a
//! black-box chat model, and compares the model's output against human
//! annotations.
//!
//! * [`triplet`] holds the triplet grammar: domain types, strict parsers for
//!   every reply format the model produces, canonical rendering and lints.
//! * [`kg`] builds and serializes the relational + temporal graph.
//! * [`gateway`] renders prompt templates and talks to completion backends,
//!   recording a replayable transcript.
//! * [`pipeline`] drives the eleven extraction/validation/temporal steps.
//! * [`verbalizer`] turns triplets into short hypothesis sentences.
//! * [`eval`] implements agreement metrics and significance tests.
//! * [`nli`] aggregates entailment scores of verbalized triplets.
//! * [`annotation`] holds the annotation form and response schema shared by
//!   the harness service and the evaluation ingest.

pub mod annotation;
pub mod eval;
pub mod gateway;
pub mod kg;
pub mod nli;
pub mod pipeline;
pub mod triplet;
pub mod verbalizer;

pub use kg::TwoTierKg;
pub use triplet::{Entity, EntityType, Term, Triplet};
