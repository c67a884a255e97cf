//! Rationale alignment between case pairs by inverse optimal transport, and an
//! explainable three-way matcher built on the extracted rationales.
//!
//! Stage 1 learns an affinity matrix between the sentences of two cases so that
//! the entropic transport plan reproduces the (partially) observed alignments.
//! Thresholding the plan yields pro and con rationales, which are rendered into
//! one candidate explanation per match label. Stage 3 scores the candidates and
//! predicts whether the cases match.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod extract;
pub mod io;
pub mod iot;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sinkhorn;
pub mod types;

pub use config::{ArchConfig, CostGradient, InputMode, TrainConfig};
pub use error::{Error, Result};
pub use extract::{extract_rationale_pairs, ExtractionResult};
pub use sinkhorn::{solve, solve_entropic_ot};
pub use types::{AlignmentLabels, Case, CasePairRecord, MatchLabel, RationaleKind, TransportPlan, TransportProblem};
