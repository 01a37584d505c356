//! Rank-scaled accuracy of variants and pipelines.
//!
//! There is no direct way to measure end-to-end accuracy of a pipeline
//! without labeled data, so variants are ranked per stage instead: the least
//! accurate variant scores 0, the most accurate 1, and intermediate variants
//! are spaced evenly by rank (`i / (k-1)` for rank `i` of `k`). Pipeline
//! accuracy is the sum of the active variants' scaled scores.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::catalog::{Configuration, Pipeline, Stage};

/// Per-variant scaled accuracy in `[0, 1]` for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledAccuracy {
    scores: BTreeMap<String, f64>,
}

impl ScaledAccuracy {
    pub fn get(&self, variant_id: &str) -> Option<f64> {
        self.scores.get(variant_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.scores.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Error)]
pub enum AccuracyError {
    #[error("configuration references unknown variant '{variant_id}' in stage '{stage_id}'")]
    UnknownVariant {
        stage_id: String,
        variant_id: String,
    },
    #[error("configuration is missing an entry for stage '{stage_id}'")]
    MissingStage { stage_id: String },
}

/// Scales a stage's variants onto `[0, 1]` by quality rank.
///
/// Quality is direction-adjusted first (lower-is-better measures are
/// negated), then variants are ranked ascending; rank `i` of `k` scores
/// `i / (k-1)`. Ties receive the mean of the ranks they span, so the result
/// is independent of input order. A single-variant stage scores 1.0.
pub fn scaled_accuracies(stage: &Stage) -> ScaledAccuracy {
    let k = stage.variants.len();
    let mut scores = BTreeMap::new();
    if k == 1 {
        scores.insert(stage.variants[0].id.clone(), 1.0);
        return ScaledAccuracy { scores };
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        stage.variants[a]
            .quality
            .directed()
            .partial_cmp(&stage.variants[b].quality.directed())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| stage.variants[a].id.cmp(&stage.variants[b].id))
    });

    let denom = (k - 1) as f64;
    let mut i = 0;
    while i < k {
        // group ties and hand every member the mean of the spanned ranks
        let mut j = i + 1;
        let q = stage.variants[order[i]].quality.directed();
        while j < k && stage.variants[order[j]].quality.directed() == q {
            j += 1;
        }
        let mean_rank = (i + j - 1) as f64 / 2.0;
        let score = mean_rank / denom;
        for &idx in &order[i..j] {
            scores.insert(stage.variants[idx].id.clone(), score);
        }
        i = j;
    }
    ScaledAccuracy { scores }
}

/// Sum over stages of the active variant's scaled accuracy.
pub fn pipeline_accuracy(
    pipeline: &Pipeline,
    config: &Configuration,
) -> Result<f64, AccuracyError> {
    let mut total = 0.0;
    for stage in &pipeline.stages {
        let sc = config
            .stage(&stage.id)
            .ok_or_else(|| AccuracyError::MissingStage {
                stage_id: stage.id.clone(),
            })?;
        let scaled = scaled_accuracies(stage);
        let score = scaled
            .get(&sc.variant_id)
            .ok_or_else(|| AccuracyError::UnknownVariant {
                stage_id: stage.id.clone(),
                variant_id: sc.variant_id.clone(),
            })?;
        total += score;
    }
    Ok(total)
}
