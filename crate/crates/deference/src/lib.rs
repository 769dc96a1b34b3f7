//! Paired-condition evaluation harness for framing-induced judgment shifts.
//!
//! The same content is rendered twice: once as a bare statement to verify
//! (C1, factual inquiry) and once attributed to a speaker in a two-party
//! chatlog (C2, conversational judgment). Comparing correctness across the
//! paired cells yields the Dialogic Deference Score (DDS) and the flip
//! analyses built on top of it.

pub mod backend;
pub mod conditions;
pub mod consensus;
pub mod dataset;
pub mod metrics;
pub mod parse;
pub mod report;
pub mod runner;
pub mod taxonomy;
