//! Adaptive intrusion detection over raw traffic flows.
//!
//! The crate turns packet captures into fixed-size flow matrices, trains
//! small convolutional and recurrent detectors on them, and keeps those
//! detectors current as new attack classes appear:
//!
//! * [`ingest`] parses classic pcap captures, groups packets into
//!   bidirectional flows, and encodes each flow as a 100x200 byte matrix.
//!   It also generates labeled synthetic corpora for repeatable experiments.
//! * [`nn`] is a compact neural network engine (dense, 2-d convolution,
//!   many-to-many LSTM) with exact analytic gradients and plain SGD.
//! * [`continual`] grows a trained network when a new attack class arrives,
//!   trains the added capacity first, and falls back to full retraining
//!   regularized by a Fisher-weighted penalty when that is not enough.
//! * [`sampling`] balances each update set against pools of previously seen
//!   attack and benign traffic.
//! * [`federated`] runs several detection agents that distill their local
//!   updates into one shared main model through an asynchronous server.
//! * [`seqlabel`] labels flows packet by packet with a streaming LSTM and
//!   measures how early a flow can be decided.
//! * [`scenario`] wires the above into reproducible end-to-end experiments.

pub mod continual;
pub mod error;
pub mod federated;
pub mod ingest;
pub mod nn;
pub mod sampling;
pub mod scenario;
pub mod seqlabel;

pub use error::{Error, Result};
