//! Market-clustering analytics for granular trading data.
//!
//! The library measures, per security and month, how homogeneously the pool
//! of trading firms overlaps compared to a maximum-entropy bipartite
//! benchmark that preserves only degree sequences, and relates that score to
//! tail statistics of daily log returns through nonparametric group tests.
//!
//! Pipeline: [`graph`] ingests trades and builds monthly bipartite
//! snapshots; [`nullmodel`] solves the entropy-maximizing link
//! probabilities; [`clustering`] turns observed and expected motif counts
//! into scores; [`instability`] computes tail/risk statistics from daily
//! returns; [`grouptests`] compares score terciles; [`synth`] provides
//! generators and exhaustive oracles; [`pipeline`] wires the stages into
//! the CLI and exports the panel dataset.

pub mod clustering;
pub mod error;
pub mod graph;
pub mod grouptests;
pub mod instability;
pub mod month;
pub mod nullmodel;
pub mod pipeline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use month::{Month, MonthRange};
