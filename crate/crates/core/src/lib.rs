//! Dialogue response selection by retrieval.
//!
//! Responses are retrieved from a database of past (context, response)
//! pairs by comparing a query context against stored contexts, sessions or
//! responses. Sparse retrieval uses BM25; dense retrieval uses dual encoders
//! that can be distilled from a cross-encoder teacher.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod dense;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod retrieval;
pub mod sparse;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
