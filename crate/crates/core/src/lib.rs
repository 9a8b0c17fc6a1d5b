//! Sketch-based translation of natural language questions into single-table
//! SQL queries.
//!
//! The pipeline: [`tokenize`] the question, mark lexical overlap with the
//! column names ([`knowledge`]), encode question and headers ([`encoder`]),
//! predict the six sketch slots ([`heads`]), assemble a query ([`decode`]) and
//! score it by logical form and by execution ([`evaluate`]).

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod heads;
pub mod knowledge;
pub mod model;
pub mod nn;
pub mod sketch;
pub mod synth;
pub mod tokenize;

pub use error::{Error, Result};
