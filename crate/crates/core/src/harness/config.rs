use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::ann::ForestParams;
use crate::catalog::BuildParams;
use crate::features::DescriptorVariant;
use crate::matching::{Backend, ScoringFn, DEFAULT_T_RATIO};
use crate::scoring::{DEFAULT_K_SR, DEFAULT_T_SP_FRAC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1v1")]
    OneVsOne,
    #[default]
    #[serde(rename = "1vM")]
    OneVsMany,
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "1v1" => Ok(Algorithm::OneVsOne),
            "1vm" => Ok(Algorithm::OneVsMany),
            _ => Err(format!("unknown algorithm {s:?} (1v1, 1vM)")),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::OneVsOne => "1v1",
            Algorithm::OneVsMany => "1vM",
        })
    }
}

/// Every knob of a query, echoed into results and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub algorithm: Algorithm,
    /// Neighbors scored per query descriptor (1vM).
    pub k: usize,
    pub delta: ScoringFn,
    /// Ratio threshold on squared distances (1v1).
    pub t_ratio: f64,
    /// Images spatially reranked; `0` reranks none, `null` reranks all.
    pub k_sr: Option<usize>,
    pub t_sp_frac: f64,
    pub descriptor_variant: DescriptorVariant,
    pub backend: Backend,
    pub num_trees: usize,
    /// Forest check budget; `null` searches exactly.
    pub max_checks: Option<usize>,
    pub seed: u64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        let forest = ForestParams::default();
        Self {
            algorithm: Algorithm::OneVsMany,
            k: 1,
            delta: ScoringFn::Lnrat,
            t_ratio: DEFAULT_T_RATIO,
            k_sr: Some(DEFAULT_K_SR),
            t_sp_frac: DEFAULT_T_SP_FRAC,
            descriptor_variant: DescriptorVariant::RootSift,
            backend: Backend::KdForest,
            num_trees: forest.num_trees,
            max_checks: forest.max_checks,
            seed: forest.seed,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.t_ratio.is_finite() && self.t_ratio > 0.0) {
            return bad("t_ratio must be positive");
        }
        if !(self.t_sp_frac.is_finite() && self.t_sp_frac > 0.0) {
            return bad("t_sp_frac must be positive");
        }
        if self.num_trees == 0 {
            return bad("num_trees must be at least 1");
        }
        if self.max_checks == Some(0) {
            return bad("max_checks must be positive or null");
        }
        Ok(())
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams { num_trees: self.num_trees, max_checks: self.max_checks, seed: self.seed }
    }

    /// Index build parameters matching this configuration.
    pub fn build_params(&self) -> BuildParams {
        BuildParams { backend: self.backend, forest: self.forest_params(), seed: self.seed, variant: self.descriptor_variant }
    }

    /// Row tag in the style `1vM+PQ+RA+S`.
    pub fn tag(&self) -> String {
        let mut tag = self.algorithm.to_string();
        if self.backend == Backend::Pq {
            tag.push_str("+PQ");
        }
        match self.k_sr {
            Some(0) => tag.push_str("+R0"),
            None => tag.push_str("+RA"),
            Some(_) => {}
        }
        if self.descriptor_variant == DescriptorVariant::Sift {
            tag.push_str("+S");
        }
        tag
    }
}
