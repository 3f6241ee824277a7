//! Query pipeline, evaluation protocol, ingest helpers and the synthetic
//! dataset generator.

mod config;
mod eval;
mod ingest;
mod query;
mod synth;

use thiserror::Error;

pub use config::{Algorithm, QueryConfig};
pub use eval::{run_eval, EvalOptions, EvalReport, EvalRow};
pub use ingest::{ingest, IngestEntry, IngestManifest, INGEST_MANIFEST};
pub use query::{run_query, run_query_features, QueryTiming, RankedResult};
pub use synth::{gen_synthetic, render_label_image, SynthParams};

use crate::catalog::CatalogError;
use crate::features::{DescriptorVariant, FeatureError};
use crate::matching::{Backend, MatchError};
use crate::scoring::ScoringError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("generation uses the {built} backend but the query asks for {requested}")]
    BackendMismatch { built: Backend, requested: Backend },
    #[error("generation holds {built} descriptors but the query asks for {requested}")]
    VariantMismatch { built: DescriptorVariant, requested: DescriptorVariant },
    #[error("no eligible queries: no label has two or more images")]
    NoEligibleQueries,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
