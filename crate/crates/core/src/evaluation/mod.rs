//! Confusion-matrix metrics, batched prediction, reports, prediction grids
//! and the suspicious-label audit.

mod audit;
mod grid;

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Label;
use crate::dataset::{
    eval_transform, fetch_all, AugmentationPolicy, DatasetError, ImageArray, ImageCache, LabeledSample,
};
use crate::models::{ModelError, ModelHandle, ModelKind};

pub use audit::{audit, audit_samples, AuditEntry, AuditReport, DEFAULT_AUDIT_THRESHOLD};
pub use grid::{render_grid, GridCell, PredictionGrid, GRID_COLS, GRID_ROWS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("no predictions to score")]
    EmptyInput,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("need {required} samples, have {available}")]
    InsufficientSamples { required: usize, available: usize },
    #[error("threshold must be a non-negative number, got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Encode { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Count the four outcomes, with flood (1) as the positive class.
pub fn confusion(preds: &[Label], truths: &[Label]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truths) {
        match (p, t) {
            (Label::Flood, Label::Flood) => cm.tp += 1,
            (Label::Flood, Label::NonFlood) => cm.fp += 1,
            (Label::NonFlood, Label::NonFlood) => cm.tn += 1,
            (Label::NonFlood, Label::Flood) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Accuracy, precision and recall. Precision or recall is `None` when its
/// denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Probability of the predicted class, in [0.5, 1].
    pub confidence: f64,
}

impl Prediction {
    /// Softmax over a logit pair; ties go to class 0.
    pub fn from_logits(z0: f64, z1: f64) -> Self {
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        if z1 > z0 {
            Prediction {
                label: Label::Flood,
                confidence: p1,
            }
        } else {
            Prediction {
                label: Label::NonFlood,
                confidence: p0,
            }
        }
    }
}

/// Anything that maps normalized images to predictions.
pub trait FloodClassifier {
    fn classify(&self, images: &[ImageArray]) -> Result<Vec<Prediction>, EvalError>;

    fn input_size(&self) -> i64;
}

impl FloodClassifier for ModelHandle {
    fn classify(&self, images: &[ImageArray]) -> Result<Vec<Prediction>, EvalError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(images)?.to_kind(tch::Kind::Double);
        let flat = Vec::<f64>::try_from(logits.flatten(0, -1)).map_err(ModelError::from)?;
        Ok(flat.chunks(2).map(|z| Prediction::from_logits(z[0], z[1])).collect())
    }

    fn input_size(&self) -> i64 {
        self.spec().input_size
    }
}

/// A prediction for one sample, keyed by its position in the input.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub index: usize,
    pub sample: LabeledSample,
    pub prediction: Prediction,
}

#[derive(Debug, Default)]
pub struct PredictOutcome {
    pub predictions: Vec<SamplePrediction>,
    /// (image id, reason) for samples that could not be fetched or decoded.
    pub skipped: Vec<(String, String)>,
}

pub const PREDICT_BATCH: usize = 16;

/// Fetch, center-crop and classify `samples` in input order. Per-sample fetch
/// or decode failures are recorded in `skipped`.
pub fn predict<C: FloodClassifier + ?Sized>(
    classifier: &C,
    samples: &[LabeledSample],
    cache: &ImageCache,
    policy: &AugmentationPolicy,
    parallelism: usize,
) -> Result<PredictOutcome, EvalError> {
    let mut out = PredictOutcome::default();
    for (chunk_no, chunk) in samples.chunks(PREDICT_BATCH).enumerate() {
        let offset = chunk_no * PREDICT_BATCH;
        let arrays = fetch_all(chunk, cache, parallelism, |img| eval_transform(&img, policy));
        let mut kept = Vec::new();
        let mut images = Vec::new();
        for (i, result) in arrays.into_iter().enumerate() {
            match result {
                Ok(arr) => {
                    kept.push(offset + i);
                    images.push(arr);
                }
                Err(e) if e.is_per_sample() => {
                    log::warn!("skipping {}: {e}", chunk[i].image_id);
                    out.skipped.push((chunk[i].image_id.clone(), e.to_string()));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let preds = classifier.classify(&images)?;
        for (index, prediction) in kept.into_iter().zip(preds) {
            out.predictions.push(SamplePrediction {
                index,
                sample: samples[index].clone(),
                prediction,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub data_seed: u64,
    pub model_seed: u64,
    pub augment_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub size_mb: f64,
    pub n_test: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedProvenance>,
}

impl EvalReport {
    pub fn from_predictions(
        model: ModelKind,
        outcome: &PredictOutcome,
        size_mb: f64,
        seeds: Option<SeedProvenance>,
    ) -> Result<Self, EvalError> {
        let preds: Vec<Label> = outcome.predictions.iter().map(|p| p.prediction.label).collect();
        let truths: Vec<Label> = outcome.predictions.iter().map(|p| p.sample.label).collect();
        let cm = confusion(&preds, &truths)?;
        let m = metrics(&cm)?;
        Ok(EvalReport {
            model,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            confusion: cm,
            size_mb,
            n_test: preds.len(),
            skipped: outcome.skipped.len(),
            seeds,
        })
    }

    /// Row of the accuracy / size comparison table.
    pub fn table_row(&self) -> String {
        format!(
            "{:<14} {:>12.1} {:>10.1}",
            self.model.display_name(),
            self.accuracy * 100.0,
            self.size_mb
        )
    }
}

pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut out = format!("{:<14} {:>12} {:>10}\n", "Model", "Accuracy (%)", "Size (MB)");
    for r in reports {
        let _ = writeln!(out, "{}", r.table_row());
    }
    out
}

/// Percentage or "undefined" for a metric.
pub fn format_metric(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.2}%", v * 100.0),
        None => "undefined".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const F: Label = Label::Flood;
    const N: Label = Label::NonFlood;

    fn labels(bits: &[u8]) -> Vec<Label> {
        bits.iter().map(|&b| if b == 1 { F } else { N }).collect()
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&labels(&[1, 0, 1]), &labels(&[1, 0, 1])).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (2, 1, 0, 0));
        let cm = confusion(&labels(&[1, 1, 0, 0]), &labels(&[1, 0, 1, 0])).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (1, 1, 1, 1));
        let truths = labels(&[1, 0, 0, 1, 1]);
        let flipped: Vec<Label> = truths.iter().map(|&l| if l == F { N } else { F }).collect();
        let cm = confusion(&flipped, &truths).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[F], &[F, N]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(EvalError::EmptyInput)));
        assert!(matches!(metrics(&ConfusionMatrix::default()), Err(EvalError::EmptyMatrix)));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionMatrix { tp: 159, fp: 41, tn: 157, fn_: 43 }).unwrap();
        assert_eq!(m.accuracy, 316.0 / 400.0);
        assert!((m.accuracy - 0.79).abs() < 1e-12);
        assert!((m.precision.unwrap() - 0.795).abs() < 1e-12);
        assert!((m.recall.unwrap() - 159.0 / 202.0).abs() < 1e-12);

        let m = metrics(&ConfusionMatrix { tp: 1, ..Default::default() }).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (1.0, Some(1.0), Some(1.0)));

        let m = metrics(&ConfusionMatrix { tp: 0, fp: 0, fn_: 5, tn: 5 }).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.5, None, Some(0.0)));
    }

    #[test]
    fn softmax_predictions() {
        let p = Prediction::from_logits(3.0, -1.0);
        assert_eq!(p.label, N);
        let e = std::f64::consts::E;
        let expected = e.powi(3) / (e.powi(3) + e.powi(-1));
        assert!((p.confidence - expected).abs() < 1e-12);
        assert!((p.confidence - 0.982).abs() < 1e-3);

        let tie = Prediction::from_logits(0.0, 0.0);
        assert_eq!((tie.label, tie.confidence), (N, 0.5));
        assert_eq!(Prediction::from_logits(-2.0, 5.0).label, F);
        assert!(Prediction::from_logits(1000.0, -1000.0).confidence.is_finite());
    }

    #[test]
    fn accuracy_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let len = rng.gen_range(1..60);
            let p: Vec<Label> = (0..len).map(|_| if rng.gen_bool(0.5) { F } else { N }).collect();
            let t: Vec<Label> = (0..len).map(|_| if rng.gen_bool(0.5) { F } else { N }).collect();
            let m = metrics(&confusion(&p, &t).unwrap()).unwrap();
            let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
            assert_eq!(m.accuracy, hits as f64 / len as f64);
            for v in [m.precision, m.recall].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn report_json_and_table() {
        let report = EvalReport {
            model: ModelKind::MobileNetV2,
            accuracy: 0.73,
            precision: None,
            recall: Some(0.5),
            confusion: ConfusionMatrix { tp: 1, fp: 0, tn: 0, fn_: 1 },
            size_mb: 8.9,
            n_test: 2,
            skipped: 0,
            seeds: None,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"precision\":null"));
        assert!(json.contains("\"fn\":1"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let table = comparison_table(&[report]);
        assert!(table.starts_with("Model"));
        assert!(table.contains("MobileNetV2"));
        assert!(table.contains("73.0"));
        assert_eq!(format_metric(None), "undefined");
    }
}
