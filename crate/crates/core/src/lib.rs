//! Deterministic simulator of an information marketplace where buyer agents
//! tender for, inspect, purchase and forget priced text passages sold by
//! vendor agents.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] loads passages and queries and prices passages.
//! * [`market`] holds the bulletin board, the credit ledger and settlement.
//! * [`retrieval`] is the vendor side: BM25 pre-filter, embeddings, quoting.
//! * [`selection`] is the buyer side: dedup, rerank, purchase decisions.
//! * [`gateway`] renders prompts, talks to chat providers and parses replies.
//! * [`tree`] builds the follow-up question tree and refines answers.
//! * [`evaluation`] holds the pairwise judge, Elo tournaments and win matrices.
//! * [`engine`] runs whole simulations and records them as event logs.
//! * [`experiment`] and [`report`] drive batch experiments for the CLI.

pub mod config;
pub mod corpus;
pub mod engine;
pub mod evaluation;
pub mod experiment;
pub mod gateway;
pub mod ids;
pub mod market;
pub mod report;
pub mod retrieval;
pub mod selection;
pub mod text;
pub mod tree;

/// Market credits. All money in the simulator is integral.
pub type Credits = u64;

pub use corpus::{Corpus, Passage, QuerySpec};
pub use ids::{AgentId, Contestant, NodeId, PassageId, QuoteId, TenderId};
