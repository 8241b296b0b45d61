//! Building blocks for synthesizing empathetic-dialogue corpora with LLMs.
//!
//! The crate is organised around the stage sequence of the corpus builder:
//!
//! * [`corpus_model`] holds the record types that flow between stages and their
//!   JSONL persistence.
//! * [`suffix_dedup`] removes exact repeated substrings with a suffix array.
//! * [`llm_gateway`] talks to OpenAI-compatible chat endpoints (or a
//!   deterministic mock) with retries, routing and bounded concurrency.
//! * [`prompt_kit`] renders the brainstorm, rewrite and respond prompts,
//!   including the four Chain-of-Empathy system messages.
//! * [`pipeline`] runs brainstorm → dedup → rewrite → dedup → respond → dedup →
//!   filter with checkpoints.
//! * [`curation`] does the sensitive-word filter and corpus statistics.
//! * [`eval_harness`] scores responses on the ER/IP/EX empathy axes and
//!   compares models.
//! * `cli` (feature `cli`) is the `empathy-corpus` command.

#[cfg(feature = "cli")]
pub mod cli;
pub mod corpus_model;
pub mod curation;
pub mod eval_harness;
pub mod llm_gateway;
pub mod pipeline;
pub mod prompt_kit;
pub mod stats;
pub mod suffix_dedup;

pub use corpus_model::{
    CorpusRecord, Explanation, GenerationParams, Scenario, StageManifest, StageName, Story,
    TherapyStyle,
};
