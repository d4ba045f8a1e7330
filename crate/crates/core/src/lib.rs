//! Intrusion-detection agent for IoT healthcare traffic.
//!
//! Requests pass three phases: authentication against a hash-chained
//! ledger ([`ledger`]), lookup in a store of known patterns
//! ([`patterns`]), and classification by a bidirectional LSTM
//! ([`bilstm`]) trained on features chosen by binary whale optimization
//! ([`woa`]). [`agent`] wires the phases together and [`metrics`] /
//! [`stats`] score the outcome.

pub mod agent;
pub mod bilstm;
pub mod canonical;
pub mod data;
pub mod error;
pub mod ledger;
pub mod metrics;
pub mod patterns;
pub mod stats;
pub mod woa;

pub use error::{Error, Result};
