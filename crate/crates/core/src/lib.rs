//! Transported average treatment effects across time from collections of
//! randomized trials.
//!
//! The estimation core is generic over the floating point type
//! ([`scalar::Scalar`], implemented for `f32` and `f64`); the aliases at the
//! crate root fix it to `f64`.

pub mod cli;
pub mod cluster;
pub mod dr;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nuisance;
pub mod scalar;
pub mod simlab;
pub mod stats;
pub mod tmle;
pub mod transport;

pub use dr::{InfluenceForm, MeanEstimator};
pub use error::{Result, TateError};
pub use model::{CommonArmAnchor, Strategy, TransportQuery, TreatmentId, TrialId, Violation};
pub use scalar::Scalar;
pub use simlab::{DgpConfig, EstimatorKind};
pub use tmle::{Link, TmleVariant};
pub use transport::{Contrast, EstimationOptions};

pub type Dataset = model::Dataset<f64>;
pub type Observation = model::Observation<f64>;
pub type TrialSpec = model::TrialSpec<f64>;
pub type CrossFittedNuisance = nuisance::CrossFittedNuisance<f64>;
pub type EstimateWithIF = dr::EstimateWithIF<f64>;
pub type TateResult = transport::TateResult<f64>;
pub type AnchorRatioSet = transport::AnchorRatioSet<f64>;
pub type SpecTest = transport::SpecTest<f64>;
pub type EmbeddingCorpus = cluster::EmbeddingCorpus<f64>;
pub type ClusterAssignment = cluster::ClusterAssignment<f64>;
