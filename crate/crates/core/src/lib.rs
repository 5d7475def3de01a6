//! Fairness evaluation harness for opinion summarisation with frequency-framed
//! (REFER) prompting.
//!
//! The flow is: sample fixed-proportion collections ([`corpus`]), render prompts
//! ([`promptkit`]), generate through a cached, retrying gateway ([`llmgateway`]),
//! decompose summaries into propositions ([`pipeline`]), classify them
//! ([`valuation`]), score fairness ([`fairmetrics`]), test differences
//! ([`stattools`]) and write reports ([`reporter`]). [`cli`] ties these to a run
//! directory.

pub mod cli;
pub mod corpus;
pub mod fairmetrics;
pub mod llmgateway;
pub mod pipeline;
pub mod promptkit;
pub mod reporter;
pub mod stattools;
pub mod valuation;
