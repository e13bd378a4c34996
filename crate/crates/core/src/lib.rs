//! Retrieval of continuous-time event sequences with neural marked temporal
//! point processes.
//!
//! The crate covers the data model and synthetic benchmark ([`seq`],
//! [`synth`]), the monotone query unwarper ([`unwarp`]), attention-based
//! MTPP encoders ([`mtpp`]), relevance scoring ([`relevance`]), training
//! ([`train`]), hash indexing ([`hashindex`]), retrieval pipelines
//! ([`retrieval`]) and ranking metrics ([`eval`]).

pub mod bundle;
pub mod error;
pub mod eval;
pub mod hashindex;
pub mod mtpp;
pub mod parallel;
pub mod quadrature;
pub mod relevance;
pub mod retrieval;
pub mod seq;
pub mod synth;
pub mod train;
pub mod unwarp;

pub use error::{CoreError, Result};
pub use seq::{Dataset, Event, EventSequence, QueryLabels, RelevanceLabels};
