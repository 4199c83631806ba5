//! Weighted multi-source training sets: aggregation, per-source splits and batch sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FAMILY_NAMES;
use crate::synth::io::{read_manifest, resolve};
use crate::synth::AnnotationRecord;

pub const DEFAULT_VAL_RATIO: f64 = 3.0 / 20.0;

/// Training sample weights of the known datasets.
pub const DEFAULT_WEIGHTS: [(&str, f64); 7] = [
    ("Animal3D", 1.0),
    ("CtrlAni3D", 0.5),
    ("AnimalPose", 0.15),
    ("AwA", 0.15),
    ("ZebraSynthetic", 0.05),
    ("StanfordExtra", 0.15),
    ("APT-36K", 0.15),
];

pub fn default_weight(id: &str) -> Option<f64> {
    DEFAULT_WEIGHTS
        .iter()
        .find(|(k, _)| *k == id)
        .map(|(_, w)| *w)
}

/// Index of a family name in the toy family list, for contrastive grouping.
pub fn family_label(family: &str) -> Option<usize> {
    FAMILY_NAMES.iter().position(|f| *f == family)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Full3d,
    Kp2dOnly,
}

/// How a source weight turns into record probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSemantics {
    /// Every record of a source is drawn with relative weight `w`.
    #[default]
    PerRecord,
    /// A source's total mass is proportional to `w`, split evenly over its records.
    PerDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub id: String,
    pub manifest: Option<PathBuf>,
    pub label_kind: LabelKind,
    pub weight: f64,
    pub records: Vec<AnnotationRecord>,
    /// Record files, parallel to `records` when loaded from a manifest.
    pub paths: Vec<PathBuf>,
}

impl DatasetSource {
    pub fn new(
        id: &str,
        label_kind: LabelKind,
        weight: f64,
        records: Vec<AnnotationRecord>,
    ) -> Result<Self> {
        let s = DatasetSource {
            id: id.into(),
            manifest: None,
            label_kind,
            weight,
            records,
            paths: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.paths.is_empty() && self.paths.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                what: "source record paths",
                expected: self.records.len(),
                got: self.paths.len(),
            });
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "source {} weight must be >= 0, got {}",
                self.id, self.weight
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            let ok = match self.label_kind {
                LabelKind::Full3d => r.has_params(),
                LabelKind::Kp2dOnly => r.beta.is_none() && r.theta.is_none(),
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "record {i} of {} does not match label kind {:?}",
                    self.id, self.label_kind
                )));
            }
        }
        Ok(())
    }
}

/// Groups a manifest's records by source id. Label kinds are inferred from
/// the records; weights come from `weights`, then the known defaults, then 1.
pub fn load_sources(
    manifest: &Path,
    weights: &BTreeMap<String, f64>,
) -> Result<Vec<DatasetSource>> {
    let mut grouped: BTreeMap<String, (Vec<AnnotationRecord>, Vec<PathBuf>)> = BTreeMap::new();
    for entry in read_manifest(manifest)? {
        let path = resolve(manifest, &entry.record);
        let record = AnnotationRecord::load(&path)?;
        let group = grouped.entry(entry.source).or_default();
        group.0.push(record);
        group.1.push(path);
    }
    grouped
        .into_iter()
        .map(|(id, (records, paths))| {
            let full = records.iter().filter(|r| r.has_params()).count();
            let label_kind = if full == records.len() {
                LabelKind::Full3d
            } else if full == 0 {
                LabelKind::Kp2dOnly
            } else {
                return Err(Error::Validation(format!(
                    "source {id} mixes 3D and 2D-only records"
                )));
            };
            let weight = weights
                .get(&id)
                .copied()
                .or_else(|| default_weight(&id))
                .unwrap_or(1.0);
            let mut s = DatasetSource::new(&id, label_kind, weight, records)?;
            s.manifest = Some(manifest.to_path_buf());
            s.paths = paths;
            Ok(s)
        })
        .collect()
}

/// Sources (sorted by id) with the per-record draw probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub sources: Vec<DatasetSource>,
    pub semantics: WeightSemantics,
    /// Flattened in source order, then record order.
    pub probabilities: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-source summary of an [`Aggregate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub id: String,
    pub label_kind: LabelKind,
    pub n_records: usize,
    pub weight: f64,
    pub record_probability: f64,
    pub total_probability: f64,
}

pub fn aggregate(mut sources: Vec<DatasetSource>, semantics: WeightSemantics) -> Result<Aggregate> {
    for s in &sources {
        s.validate()?;
    }
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = sources.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidArgument(format!(
            "duplicate source id {}",
            w[0].id
        )));
    }
    let mass = |s: &DatasetSource| match semantics {
        WeightSemantics::PerRecord => s.weight * s.records.len() as f64,
        WeightSemantics::PerDataset if s.records.is_empty() => 0.0,
        WeightSemantics::PerDataset => s.weight,
    };
    let total: f64 = sources.iter().map(mass).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "at least one non-empty source needs a positive weight".into(),
        ));
    }
    let mut probabilities = Vec::new();
    let mut offsets = Vec::with_capacity(sources.len() + 1);
    for s in &sources {
        offsets.push(probabilities.len());
        let p = if s.records.is_empty() {
            0.0
        } else {
            mass(s) / total / s.records.len() as f64
        };
        probabilities.extend(std::iter::repeat(p).take(s.records.len()));
    }
    offsets.push(probabilities.len());
    Ok(Aggregate {
        sources,
        semantics,
        probabilities,
        offsets,
    })
}

impl Aggregate {
    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Source position and index within that source for a flattened index.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        let s = self.offsets.partition_point(|o| *o <= index) - 1;
        (s, index - self.offsets[s])
    }

    pub fn record(&self, index: usize) -> (&DatasetSource, &AnnotationRecord) {
        let (s, i) = self.locate(index);
        (&self.sources[s], &self.sources[s].records[i])
    }

    /// File the record was loaded from, if it came from a manifest.
    pub fn path(&self, index: usize) -> Option<&Path> {
        let (s, i) = self.locate(index);
        self.sources[s].paths.get(i).map(PathBuf::as_path)
    }

    pub fn source_range(&self, source: usize) -> std::ops::Range<usize> {
        self.offsets[source]..self.offsets[source + 1]
    }

    pub fn table(&self) -> Vec<SourceRow> {
        self.sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let range = self.source_range(i);
                let p = self.probabilities.get(range.start).copied().unwrap_or(0.0);
                SourceRow {
                    id: s.id.clone(),
                    label_kind: s.label_kind,
                    n_records: s.records.len(),
                    weight: s.weight,
                    record_probability: if range.is_empty() { 0.0 } else { p },
                    total_probability: self.probabilities[range].iter().sum(),
                }
            })
            .collect()
    }
}

/// Flattened record indices of each side of a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Shuffles each source with its own seed and sends `round(ratio * n)` records to validation.
pub fn split(aggregate: &Aggregate, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (i, s) in aggregate.sources.iter().enumerate() {
        if s.records.is_empty() {
            return Err(Error::InvalidArgument(format!("source {} is empty", s.id)));
        }
        let mut idx: Vec<usize> = aggregate.source_range(i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.id));
        idx.shuffle(&mut rng);
        let n_val = (ratio * idx.len() as f64).round() as usize;
        out.val.extend_from_slice(&idx[..n_val]);
        out.train.extend_from_slice(&idx[n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    Ok(out)
}

/// I.i.d. draws with replacement from the probability table restricted to a subset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    indices: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl BatchSampler {
    pub fn new(aggregate: &Aggregate, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot sample from an empty split".into(),
            ));
        }
        let weights: Vec<f64> = subset.iter().map(|i| aggregate.probabilities[*i]).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| {
            Error::InvalidArgument(format!("split has no positive probability: {e}"))
        })?;
        Ok(BatchSampler {
            indices: subset.to_vec(),
            dist,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.indices[self.dist.sample(rng)]
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.draw(rng)).collect()
    }
}

/// `size` records drawn from the train side of `split`.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    aggregate: &'a Aggregate,
    split: &Split,
    rng: &mut R,
    size: usize,
) -> Result<Vec<&'a AnnotationRecord>> {
    let sampler = BatchSampler::new(aggregate, &split.train)?;
    Ok(sampler
        .batch(rng, size)
        .into_iter()
        .map(|i| aggregate.record(i).1)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::losses::DEFAULT_BATCH_SIZE;
    use crate::synth::CameraRecord;

    fn rec(tag: usize, full: bool) -> AnnotationRecord {
        AnnotationRecord {
            image: format!("{tag}.png"),
            species: "dog".into(),
            family: "canidae".into(),
            beta: full.then(|| vec![0.0; 2]),
            theta: full.then(|| vec![0.0; 3]),
            gamma: None,
            camera: CameraRecord::from_camera(&Camera::default()),
            keypoints3d: None,
            keypoints2d: vec![[1.0, 1.0, 1.0]],
            bbox: [0.0, 0.0, 2.0, 2.0],
            mask: None,
            depth: None,
            source: String::new(),
            pose_source: None,
        }
    }

    fn source(id: &str, n: usize, w: f64) -> DatasetSource {
        DatasetSource::new(
            id,
            LabelKind::Kp2dOnly,
            w,
            (0..n).map(|i| rec(i, false)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn uniform_two_sources() {
        let a = aggregate(
            vec![source("a", 10, 1.0), source("b", 10, 1.0)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        assert!(a.probabilities.iter().all(|p| (p - 0.05).abs() < 1e-15));
        assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_weights_by_id() {
        let sources: Vec<_> = DEFAULT_WEIGHTS
            .iter()
            .map(|(id, _)| source(id, 4, default_weight(id).unwrap()))
            .collect();
        let a = aggregate(sources, WeightSemantics::PerRecord).unwrap();
        let table = a.table();
        let total: f64 = DEFAULT_WEIGHTS.iter().map(|(_, w)| w).sum();
        for (id, w) in DEFAULT_WEIGHTS {
            let row = table.iter().find(|r| r.id == id).unwrap();
            assert_eq!(row.weight, w);
            assert!((row.total_probability - w / total).abs() < 1e-12);
        }
        assert_eq!(default_weight("Animal3D"), Some(1.0));
        assert_eq!(default_weight("ZebraSynthetic"), Some(0.05));
        assert_eq!(default_weight("unknown"), None);
    }

    #[test]
    fn zero_weight_source_gets_no_mass() {
        let a = aggregate(
            vec![source("a", 3, 0.0), source("b", 2, 1.0)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        assert_eq!(&a.probabilities[..3], &[0.0; 3]);
        assert!(aggregate(vec![source("a", 3, 0.0)], WeightSemantics::PerRecord).is_err());
    }

    #[test]
    fn per_dataset_semantics() {
        let a = aggregate(
            vec![source("a", 10, 1.0), source("b", 40, 1.0)],
            WeightSemantics::PerDataset,
        )
        .unwrap();
        let t = a.table();
        assert!((t[0].total_probability - 0.5).abs() < 1e-12);
        assert!((t[1].record_probability - 0.5 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn label_kind_is_checked() {
        let mixed = vec![rec(0, true), rec(1, false)];
        assert!(DatasetSource::new("x", LabelKind::Full3d, 1.0, mixed.clone()).is_err());
        assert!(DatasetSource::new("x", LabelKind::Kp2dOnly, 1.0, mixed).is_err());
        assert!(DatasetSource::new("x", LabelKind::Full3d, -1.0, vec![]).is_err());
    }

    #[test]
    fn split_counts_and_determinism() {
        let a = aggregate(
            vec![source("a", 20, 1.0), source("b", 2, 1.0)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        let s = split(&a, 3.0 / 20.0, 7).unwrap();
        let s_b = split(&a, 0.5, 7).unwrap();
        assert_eq!(
            s.val
                .iter()
                .filter(|i| a.source_range(0).contains(i))
                .count(),
            3
        );
        assert_eq!(
            s_b.val
                .iter()
                .filter(|i| a.source_range(1).contains(i))
                .count(),
            1
        );
        assert_eq!(split(&a, 3.0 / 20.0, 7).unwrap(), s);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..22).collect::<Vec<_>>());
        assert!(split(&a, 0.0, 7).is_err());
        let with_empty = aggregate(
            vec![source("a", 2, 1.0), source("z", 0, 1.0)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        assert!(split(&with_empty, 0.5, 0).is_err());
    }

    #[test]
    fn order_of_sources_does_not_matter() {
        let x = aggregate(
            vec![source("a", 5, 1.0), source("b", 7, 0.5)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        let y = aggregate(
            vec![source("b", 7, 0.5), source("a", 5, 1.0)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        assert_eq!(x, y);
        let sx = split(&x, 0.3, 1).unwrap();
        assert_eq!(sx, split(&y, 0.3, 1).unwrap());
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let bx: Vec<_> = sample_batch(&x, &sx, &mut r1, 20).unwrap();
        let by: Vec<_> = sample_batch(&y, &sx, &mut r2, 20).unwrap();
        assert_eq!(bx, by);
    }

    #[test]
    fn batches() {
        let a = aggregate(vec![source("a", 1, 1.0)], WeightSemantics::PerRecord).unwrap();
        let all = Split {
            train: vec![0],
            val: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&a, &all, &mut rng, DEFAULT_BATCH_SIZE).unwrap();
        assert_eq!(b.len(), 16);
        assert!(b.iter().all(|r| r.image == "0.png"));
        let none = Split {
            train: vec![],
            val: vec![0],
        };
        assert!(sample_batch(&a, &none, &mut rng, 4).is_err());
        assert_eq!(family_label(&b[0].family), Some(1));
    }

    #[test]
    fn two_to_one_frequency() {
        let a = aggregate(
            vec![source("a", 50, 1.0), source("b", 50, 0.5)],
            WeightSemantics::PerRecord,
        )
        .unwrap();
        let sampler = BatchSampler::new(&a, &(0..100).collect::<Vec<_>>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let from_a = (0..n).filter(|_| sampler.draw(&mut rng) < 50).count();
        let ratio = from_a as f64 / (n - from_a) as f64;
        assert!((ratio - 2.0).abs() / 2.0 < 0.01, "ratio {ratio}");
    }
}
