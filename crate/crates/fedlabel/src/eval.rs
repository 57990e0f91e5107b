//! Ranking metrics for multi-label prediction: precision@k and mean
//! average precision, both computed from full score matrices.
//!
//! Ties are broken the same way everywhere — higher score first, then lower
//! label index — so the metrics match [`crate::model::top_k_labels`] bit for
//! bit and are invariant under strictly monotone score transforms.

use crate::error::{Error, Result};
use crate::model::top_k_labels;

/// How mean average precision aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapVariant {
    /// Average precision per class over the instance ranking, averaged over
    /// classes that have at least one positive instance. The usual choice
    /// for label-skewed benchmarks, and the default.
    MacroByClass,
    /// Average precision per instance over the label ranking, averaged over
    /// instances.
    ByInstance,
}

impl std::str::FromStr for MapVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(MapVariant::MacroByClass),
            "instance" => Ok(MapVariant::ByInstance),
            other => Err(Error::InvalidArgument(format!(
                "unknown map variant `{other}` (expected `macro` or `instance`)"
            ))),
        }
    }
}

/// A batch of score rows with the matching ground-truth label sets.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    num_classes: u32,
    scores: Vec<Vec<f64>>,
    true_sets: Vec<Vec<u32>>,
}

impl PredictionBatch {
    /// Validates shape: every score row has `num_classes` finite entries and
    /// every true set is non-empty, sorted, duplicate-free, and in range.
    pub fn new(num_classes: u32, scores: Vec<Vec<f64>>, true_sets: Vec<Vec<u32>>) -> Result<Self> {
        if scores.len() != true_sets.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: true_sets.len(),
                context: "score rows vs true sets",
            });
        }
        if scores.is_empty() {
            return Err(Error::Degenerate("empty prediction batch".into()));
        }
        for (i, row) in scores.iter().enumerate() {
            if row.len() != num_classes as usize {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: num_classes as usize,
                    context: "score row vs class count",
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!(
                    "non-finite score in row {i}"
                )));
            }
        }
        for (i, set) in true_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Degenerate(format!(
                    "instance {i} has an empty true label set"
                )));
            }
            if !set.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "true label set of instance {i} is not sorted and duplicate-free"
                )));
            }
            if set.last().copied().unwrap_or(0) >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: *set.last().unwrap() as usize,
                    bound: num_classes as usize,
                    context: "true label",
                });
            }
        }
        Ok(Self {
            num_classes,
            scores,
            true_sets,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn true_sets(&self) -> &[Vec<u32>] {
        &self.true_sets
    }
}

/// Mean over instances of `|top-k ∩ true| / k`. The divisor is always `k`,
/// even when an instance has fewer than `k` true labels — the standard
/// convention, which caps attainable P@k below 1 on sparse instances.
pub fn precision_at_k(batch: &PredictionBatch, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("precision@k needs k >= 1".into()));
    }
    let mut sum = 0.0;
    for (row, truth) in batch.scores.iter().zip(&batch.true_sets) {
        let top = top_k_labels(row, k);
        let hits = top.iter().filter(|l| truth.binary_search(l).is_ok()).count();
        sum += hits as f64 / k as f64;
    }
    Ok(sum / batch.len() as f64)
}

/// Mean average precision. See [`MapVariant`] for the two aggregations.
pub fn mean_average_precision(batch: &PredictionBatch, variant: MapVariant) -> Result<f64> {
    match variant {
        MapVariant::MacroByClass => map_macro(batch),
        MapVariant::ByInstance => map_by_instance(batch),
    }
}

fn map_macro(batch: &PredictionBatch) -> Result<f64> {
    let n = batch.len();
    let mut ap_sum = 0.0;
    let mut classes_with_positives = 0usize;
    for class in 0..batch.num_classes {
        let positive: Vec<bool> = batch
            .true_sets
            .iter()
            .map(|set| set.binary_search(&class).is_ok())
            .collect();
        let num_pos = positive.iter().filter(|p| **p).count();
        if num_pos == 0 {
            continue; // class absent from this batch: no ranking to score
        }
        // Instances ranked by score for this class; ties fall back to the
        // lower instance index, mirroring the label-side tie rule.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            batch.scores[b][class as usize]
                .total_cmp(&batch.scores[a][class as usize])
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if positive[i] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / num_pos as f64;
        classes_with_positives += 1;
    }
    if classes_with_positives == 0 {
        return Err(Error::Degenerate(
            "no class has a positive instance in this batch".into(),
        ));
    }
    Ok(ap_sum / classes_with_positives as f64)
}

fn map_by_instance(batch: &PredictionBatch) -> Result<f64> {
    let mut ap_sum = 0.0;
    for (row, truth) in batch.scores.iter().zip(&batch.true_sets) {
        let order = top_k_labels(row, batch.num_classes as usize);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, label) in order.iter().enumerate() {
            if truth.binary_search(label).is_ok() {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / truth.len() as f64;
    }
    Ok(ap_sum / batch.len() as f64)
}
