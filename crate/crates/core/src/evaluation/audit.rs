//! High-confidence disagreements between the classifier and human labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{predict, EvalError, FloodClassifier};
use crate::catalog::{CuratedIndex, Label};
use crate::dataset::{AugmentationPolicy, ImageCache, LabeledSample};

pub const DEFAULT_AUDIT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub image_id: String,
    pub url: String,
    pub human_label: Label,
    pub predicted_label: Label,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub threshold: f64,
    pub index_size: usize,
    pub skipped: usize,
    /// Sorted by confidence, highest first.
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn summary(&self) -> String {
        format!(
            "{} of {} images flagged at confidence >= {} ({} skipped)",
            self.entries.len(),
            self.index_size,
            self.threshold,
            self.skipped
        )
    }

    /// CSV with columns image_id,url,human_label,predicted_label,confidence.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: csv::Error| EvalError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["image_id", "url", "human_label", "predicted_label", "confidence"])
            .map_err(io)?;
        for e in &self.entries {
            w.write_record([
                e.image_id.as_str(),
                e.url.as_str(),
                &e.human_label.as_u8().to_string(),
                &e.predicted_label.as_u8().to_string(),
                &format!("{:.6}", e.confidence),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn audit_samples<C: FloodClassifier + ?Sized>(
    classifier: &C,
    samples: &[LabeledSample],
    threshold: f64,
    cache: &ImageCache,
    policy: &AugmentationPolicy,
    parallelism: usize,
) -> Result<AuditReport, EvalError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let outcome = predict(classifier, samples, cache, policy, parallelism)?;
    let mut entries: Vec<AuditEntry> = outcome
        .predictions
        .into_iter()
        .filter(|p| p.prediction.label != p.sample.label && p.prediction.confidence >= threshold)
        .map(|p| AuditEntry {
            image_id: p.sample.image_id,
            url: p.sample.url,
            human_label: p.sample.label,
            predicted_label: p.prediction.label,
            confidence: p.prediction.confidence,
        })
        .collect();
    // stable: equal confidences keep index order
    entries.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(AuditReport {
        threshold,
        index_size: samples.len(),
        skipped: outcome.skipped.len(),
        entries,
    })
}

/// Flag every index record whose prediction disagrees with its human label
/// at confidence ≥ `threshold`. Thresholds above 1 yield an empty report.
pub fn audit<C: FloodClassifier + ?Sized>(
    classifier: &C,
    index: &CuratedIndex,
    threshold: f64,
    cache: &ImageCache,
    policy: &AugmentationPolicy,
    parallelism: usize,
) -> Result<AuditReport, EvalError> {
    let samples: Vec<LabeledSample> = index
        .entries
        .iter()
        .map(|e| LabeledSample {
            image_id: e.record.image_id.clone(),
            url: e.record.url.clone(),
            label: e.label,
        })
        .collect();
    audit_samples(classifier, &samples, threshold, cache, policy, parallelism)
}
