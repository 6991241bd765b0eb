//! Retrieval-augmented synthesis and verification harness for proof-oriented
//! programs.

pub mod check;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod generate;
mod http;
pub mod lang;
pub mod metrics;
pub mod pipeline;
pub mod premsel;
pub mod prompt;
pub mod retrieve;
pub mod retry;

#[cfg(test)]
mod testing;
