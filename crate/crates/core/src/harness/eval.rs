use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{run_query_features, HarnessError, QueryConfig};
use crate::ann::ImageId;
use crate::catalog::Generation;
use crate::scoring::{rank_of, LabelId};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Evaluate only the first `n` eligible queries (by image id).
    pub max_queries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_image_id: ImageId,
    pub true_label: LabelId,
    pub true_label_name: String,
    pub rank_label_scoring: usize,
    pub rank_image_scoring: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: QueryConfig,
    pub generation: u64,
    pub eligible_queries: usize,
    pub descriptor_count: usize,
    /// PQ code pool size when the PQ backend is used.
    pub code_bytes: Option<usize>,
    pub rows: Vec<EvalRow>,
    pub label_rank_gt1: usize,
    pub image_rank_gt1: usize,
    pub label_rank_gt5: usize,
    pub image_rank_gt5: usize,
    /// Mean time per query, seconds.
    pub mean_tpq: f64,
}

impl EvalReport {
    /// Builds the aggregates from the rows.
    pub fn from_rows(
        config: QueryConfig,
        generation: &Generation,
        eligible_queries: usize,
        mut rows: Vec<EvalRow>,
    ) -> Self {
        rows.sort_by_key(|r| r.query_image_id);
        let count = |f: &dyn Fn(&EvalRow) -> bool| rows.iter().filter(|r| f(r)).count();
        let mean_tpq = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.seconds).sum::<f64>() / rows.len() as f64 };
        Self {
            config,
            generation: generation.id(),
            eligible_queries,
            descriptor_count: generation.index.pool().len(),
            code_bytes: generation.meta.code_bytes,
            label_rank_gt1: count(&|r| r.rank_label_scoring > 1),
            image_rank_gt1: count(&|r| r.rank_image_scoring > 1),
            label_rank_gt5: count(&|r| r.rank_label_scoring > 5),
            image_rank_gt5: count(&|r| r.rank_image_scoring > 5),
            mean_tpq,
            rows,
        }
    }

    pub fn queries(&self) -> usize {
        self.rows.len()
    }

    /// Fraction of queries whose true label ranks within `n` under label scoring.
    pub fn top_n_accuracy(&self, n: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.rank_label_scoring <= n).count() as f64 / self.rows.len() as f64
    }

    /// True when every aggregate matches a recount of the rows.
    pub fn is_consistent(&self) -> bool {
        let n = |f: &dyn Fn(&EvalRow) -> bool| self.rows.iter().filter(|r| f(r)).count();
        self.label_rank_gt1 == n(&|r| r.rank_label_scoring > 1)
            && self.image_rank_gt1 == n(&|r| r.rank_image_scoring > 1)
            && self.label_rank_gt5 == n(&|r| r.rank_label_scoring > 5)
            && self.image_rank_gt5 == n(&|r| r.rank_image_scoring > 5)
    }

    /// Aligned text table: one configuration row with rank counts under both
    /// scorings and time per query.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header = ["Algorithm", "k", "delta", "Rank>1 label", "Rank>1 image", "Rank>5 label", "Rank>5 image", "TPQ (sec)"];
        let row = [
            self.config.tag(),
            self.config.k.to_string(),
            self.config.delta.to_string(),
            self.label_rank_gt1.to_string(),
            self.image_rank_gt1.to_string(),
            self.label_rank_gt5.to_string(),
            self.image_rank_gt5.to_string(),
            format!("{:.3}", self.mean_tpq),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: Vec<&str>| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join(" | ")
        };
        writeln!(out, "{}", line(header.to_vec())).unwrap();
        writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")).unwrap();
        writeln!(out, "{}", line(row.iter().map(String::as_str).collect())).unwrap();
        writeln!(out, "queries: {} of {} eligible", self.rows.len(), self.eligible_queries).unwrap();
        if let Some(bytes) = self.code_bytes {
            let raw = self.descriptor_count * 512;
            writeln!(
                out,
                "pq codes: {bytes} bytes for {} descriptors; raw f32 descriptors {raw} bytes ({:.0}x larger)",
                self.descriptor_count,
                raw as f64 / bytes.max(1) as f64
            )
            .unwrap();
        }
        out
    }
}

/// Issues every catalog image whose label has at least two images as a
/// query, with its own descriptors excluded by ownership, and records the
/// rank of its true label under both scorings.
pub fn run_eval(generation: &Generation, config: &QueryConfig, opts: &EvalOptions) -> Result<EvalReport, HarnessError> {
    config.validate()?;
    let mut eligible: Vec<(ImageId, LabelId)> = generation
        .image_ids()
        .iter()
        .filter_map(|&id| generation.label_of(id).map(|l| (id, l)))
        .filter(|&(_, l)| generation.label_multiplicity(l) >= 2)
        .collect();
    eligible.sort_unstable();
    if eligible.is_empty() {
        return Err(HarnessError::NoEligibleQueries);
    }
    let total = eligible.len();
    let take = opts.max_queries.map_or(total, |n| n.min(total));

    let mut rows = Vec::with_capacity(take);
    for &(id, label) in &eligible[..take] {
        let features = generation.features(id).expect("generation image has features");
        let result = run_query_features(generation, &features, Some(id), config)?;
        let rank_label = rank_of(&result.labels, label).expect("every label is ranked");
        let rank_image = rank_of(&result.image_scoring, label).expect("every label is ranked");
        log::debug!("query {id}: label rank {rank_label}, image rank {rank_image}");
        rows.push(EvalRow {
            query_image_id: id,
            true_label: label,
            true_label_name: generation.label_name(label).unwrap_or_default().to_string(),
            rank_label_scoring: rank_label,
            rank_image_scoring: rank_image,
            seconds: result.timing.total_secs,
        });
    }
    Ok(EvalReport::from_rows(*config, generation, total, rows))
}
