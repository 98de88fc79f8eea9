//! Story-point estimation from issue text.
//!
//! The main estimator embeds the words of an issue's title and description,
//! accumulates them with an LSTM, averages the LSTM states, refines the
//! average through a stack of weight-shared highway layers, and regresses
//! story points from the result. The crate also carries language-model
//! pre-training, the classical comparison estimators, the accuracy metrics
//! and significance tests used to compare them, and a JIRA ingestion client.

pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod baselines;
pub mod corpus;
pub mod numerics;
pub mod model;
pub mod pretrain;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
