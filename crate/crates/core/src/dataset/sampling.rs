use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_name, DatasetError};
use crate::catalog::{CuratedIndex, Label};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub image_id: String,
    pub url: String,
    pub label: Label,
}

/// A seeded, class-balanced draw from a curated index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDraw {
    pub samples: Vec<LabeledSample>,
    pub seed: u64,
    pub ratio: f64,
    pub n: usize,
}

impl SampleDraw {
    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }
}

/// Number of positives in a draw of `n` at positive fraction `ratio`.
pub fn positives_for(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).round() as usize
}

/// Unused samples of each class, in draw order, for back-filling failures.
#[derive(Debug, Clone, Default)]
pub struct Reserve {
    positives: VecDeque<LabeledSample>,
    negatives: VecDeque<LabeledSample>,
}

impl Reserve {
    /// Next unused sample of `label`, if any remain.
    pub fn take(&mut self, label: Label) -> Option<LabeledSample> {
        match label {
            Label::Flood => self.positives.pop_front(),
            Label::NonFlood => self.negatives.pop_front(),
        }
    }

    pub fn remaining(&self, label: Label) -> usize {
        match label {
            Label::Flood => self.positives.len(),
            Label::NonFlood => self.negatives.len(),
        }
    }
}

/// Uniform sampling without replacement within each class.
pub fn draw_balanced(index: &CuratedIndex, n: usize, ratio: f64, seed: u64) -> Result<SampleDraw, DatasetError> {
    draw_balanced_with_reserve(index, n, ratio, seed).map(|(draw, _)| draw)
}

/// Like [`draw_balanced`], also returning the shuffled remainder of each class
/// so failed samples can be replaced without disturbing class counts.
pub fn draw_balanced_with_reserve(
    index: &CuratedIndex,
    n: usize,
    ratio: f64,
    seed: u64,
) -> Result<(SampleDraw, Reserve), DatasetError> {
    if n == 0 {
        return Err(DatasetError::InvalidDraw("n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DatasetError::InvalidDraw(format!("ratio {ratio} outside [0, 1]")));
    }
    let wanted_pos = positives_for(n, ratio);
    let wanted_neg = n - wanted_pos;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = [Label::Flood, Label::NonFlood].map(|label| {
        index
            .entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| LabeledSample {
                image_id: e.record.image_id.clone(),
                url: e.record.url.clone(),
                label,
            })
            .collect::<Vec<_>>()
    });
    for (pool, (label, wanted)) in pools
        .iter()
        .zip([(Label::Flood, wanted_pos), (Label::NonFlood, wanted_neg)])
    {
        if pool.len() < wanted {
            return Err(DatasetError::InsufficientClass {
                label: label_name(label),
                required: wanted,
                available: pool.len(),
            });
        }
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let [mut pos, mut neg] = pools;
    let pos_rest: VecDeque<_> = pos.split_off(wanted_pos).into();
    let neg_rest: VecDeque<_> = neg.split_off(wanted_neg).into();

    let mut samples = pos;
    samples.extend(neg);
    samples.shuffle(&mut rng);
    Ok((
        SampleDraw {
            samples,
            seed,
            ratio,
            n,
        },
        Reserve {
            positives: pos_rest,
            negatives: neg_rest,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            stratified: true,
            seed: 0,
        }
    }
}

/// Disjoint, exhaustive train/test partition of a draw.
pub fn split(draw: &SampleDraw, spec: &SplitSpec) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::InvalidDraw(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    if draw.samples.is_empty() {
        return Err(DatasetError::DegenerateSplit { train: 0, test: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<LabeledSample>> = if spec.stratified {
        [Label::Flood, Label::NonFlood]
            .iter()
            .map(|&label| {
                draw.samples
                    .iter()
                    .filter(|s| s.label == label)
                    .cloned()
                    .collect()
            })
            .collect()
    } else {
        vec![draw.samples.clone()]
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in groups {
        group.shuffle(&mut rng);
        let cut = (group.len() as f64 * spec.train_fraction).round() as usize;
        let rest = group.split_off(cut.min(group.len()));
        train.extend(group);
        test.extend(rest);
    }
    if train.is_empty() || test.is_empty() {
        return Err(DatasetError::DegenerateSplit {
            train: train.len(),
            test: test.len(),
        });
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok((train, test))
}

/// Write samples as CSV with columns image_id,url,label.
pub fn write_samples(path: &Path, samples: &[LabeledSample]) -> Result<(), DatasetError> {
    let io = |e: csv::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["image_id", "url", "label"]).map_err(io)?;
    for s in samples {
        w.write_record([s.image_id.as_str(), s.url.as_str(), &s.label.as_u8().to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_samples(path: &Path) -> Result<Vec<LabeledSample>, DatasetError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let bad = |reason: String| DatasetError::InvalidDraw(format!("{}: row {}: {reason}", path.display(), i + 2));
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", row.len())));
        }
        let label = match &row[2] {
            "0" => Label::NonFlood,
            "1" => Label::Flood,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(LabeledSample {
            image_id: row[0].to_string(),
            url: row[1].to_string(),
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashSet};

    use proptest::prelude::*;

    use super::*;
    use crate::catalog::{CatalogRecord, IndexEntry, Provenance};

    pub(crate) fn pool(pos: usize, neg: usize) -> CuratedIndex {
        let mut entries = Vec::new();
        for i in 0..pos + neg {
            let label = if i < pos { Label::Flood } else { Label::NonFlood };
            entries.push(IndexEntry {
                record: CatalogRecord {
                    image_id: format!("img{i:06}"),
                    url: format!("https://x/{i}.jpg"),
                    damage_labels: BTreeSet::from(["x".to_string()]),
                    infrastructure_labels: BTreeSet::new(),
                },
                label,
            });
        }
        CuratedIndex {
            entries,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn full_scale_draw() {
        let index = pool(1500, 1500);
        let draw = draw_balanced(&index, 2000, 0.5, 11).unwrap();
        assert_eq!(draw.count(Label::Flood), 1000);
        assert_eq!(draw.count(Label::NonFlood), 1000);
        let ids: HashSet<_> = draw.samples.iter().map(|s| &s.image_id).collect();
        assert_eq!(ids.len(), 2000);
    }

    #[test]
    fn smallest_balanced_draw() {
        let draw = draw_balanced(&pool(3, 3), 2, 0.5, 0).unwrap();
        assert_eq!((draw.count(Label::Flood), draw.count(Label::NonFlood)), (1, 1));
    }

    #[test]
    fn insufficient_positives() {
        match draw_balanced(&pool(4, 20), 10, 0.5, 0) {
            Err(DatasetError::InsufficientClass {
                label, available, ..
            }) => {
                assert!(label.starts_with("positive"));
                assert_eq!(available, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let index = pool(50, 50);
        let a = draw_balanced(&index, 20, 0.5, 3).unwrap();
        let b = draw_balanced(&index, 20, 0.5, 3).unwrap();
        let c = draw_balanced(&index, 20, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn reserve_holds_the_rest() {
        let index = pool(6, 8);
        let (draw, mut reserve) = draw_balanced_with_reserve(&index, 8, 0.5, 1).unwrap();
        assert_eq!(reserve.remaining(Label::Flood), 2);
        assert_eq!(reserve.remaining(Label::NonFlood), 4);
        let extra = reserve.take(Label::Flood).unwrap();
        assert!(draw.samples.iter().all(|s| s.image_id != extra.image_id));
        assert_eq!(extra.label, Label::Flood);
    }

    #[test]
    fn full_scale_split() {
        let draw = draw_balanced(&pool(1500, 1500), 2000, 0.5, 5).unwrap();
        let (train, test) = split(&draw, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (1600, 400));
        assert_eq!(train.iter().filter(|s| s.label == Label::Flood).count(), 800);
        assert_eq!(test.iter().filter(|s| s.label == Label::Flood).count(), 200);
    }

    #[test]
    fn small_stratified_split() {
        let draw = draw_balanced(&pool(5, 5), 10, 0.5, 5).unwrap();
        let (train, test) = split(&draw, &SplitSpec::default()).unwrap();
        assert_eq!(train.iter().filter(|s| s.label == Label::Flood).count(), 4);
        assert_eq!(train.iter().filter(|s| s.label == Label::NonFlood).count(), 4);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn degenerate_split() {
        let draw = draw_balanced(&pool(1, 1), 2, 0.5, 5).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.999,
            ..Default::default()
        };
        assert!(matches!(split(&draw, &spec), Err(DatasetError::DegenerateSplit { .. })));
    }

    proptest! {
        #[test]
        fn class_counts_follow_rounding(n in 1usize..400, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let index = pool(400, 400);
            let draw = draw_balanced(&index, n, ratio, seed).unwrap();
            let pos = (n as f64 * ratio).round() as usize;
            prop_assert_eq!(draw.count(Label::Flood), pos);
            prop_assert_eq!(draw.count(Label::NonFlood), n - pos);
            let ids: HashSet<_> = draw.samples.iter().map(|s| s.image_id.clone()).collect();
            prop_assert_eq!(ids.len(), n);
        }

        #[test]
        fn split_partitions_the_draw(n in 4usize..300, frac in 0.05f64..0.95, stratified in any::<bool>(), seed in any::<u64>()) {
            let index = pool(300, 300);
            let draw = draw_balanced(&index, n, 0.5, seed).unwrap();
            let spec = SplitSpec { train_fraction: frac, stratified, seed };
            match split(&draw, &spec) {
                Ok((train, test)) => {
                    prop_assert_eq!(train.len() + test.len(), draw.samples.len());
                    let a: HashSet<_> = train.iter().map(|s| s.image_id.clone()).collect();
                    let b: HashSet<_> = test.iter().map(|s| s.image_id.clone()).collect();
                    prop_assert!(a.is_disjoint(&b));
                    let all: HashSet<_> = draw.samples.iter().map(|s| s.image_id.clone()).collect();
                    prop_assert_eq!(a.union(&b).cloned().collect::<HashSet<_>>(), all);
                }
                Err(DatasetError::DegenerateSplit { train, test }) => {
                    prop_assert!(train == 0 || test == 0);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
