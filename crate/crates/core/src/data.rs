//! Datasets and mini-batch plans.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Batch, ModelError};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("unknown synthetic dataset kind '{0}'")]
    UnknownKind(String),
    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Samples stored row-major with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: usize,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    /// First `n` samples (all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            features: self.features,
            classes: self.classes,
            inputs: self.inputs[..n * self.features].to_vec(),
            targets: self.targets[..n].to_vec(),
        }
    }

    pub fn to_batch(&self) -> Result<Batch, ModelError> {
        Batch::new(self.inputs.clone(), self.features, self.targets.clone())
    }

    /// Gathers the given rows, in the given order, into a batch.
    pub fn select(&self, indices: &[usize]) -> Result<Batch, ModelError> {
        let mut inputs = Vec::with_capacity(indices.len() * self.features);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Batch::new(inputs, self.features, targets)
    }
}

fn read_u32_be(bytes: &[u8], at: usize, path: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_string(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

/// Parses an IDX3 image file body; pixel bytes are scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, Vec<f64>), DataError> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let features = rows * cols;
    let payload = bytes
        .get(16..16 + count * features)
        .ok_or_else(|| DataError::Truncated {
            path: path.to_string(),
        })?;
    Ok((features, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>, DataError> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let payload = bytes.get(8..8 + count).ok_or_else(|| DataError::Truncated {
        path: path.to_string(),
    })?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images_name = images_path.display().to_string();
    let labels_name = labels_path.display().to_string();
    let (features, inputs) = parse_idx_images(&read_file(images_path)?, &images_name)?;
    let targets = parse_idx_labels(&read_file(labels_path)?, &labels_name)?;
    let images = if features == 0 { 0 } else { inputs.len() / features };
    if images != targets.len() {
        return Err(DataError::CountMismatch {
            images,
            labels: targets.len(),
        });
    }
    let classes = targets.iter().max().map_or(0, |&m| m + 1).max(10);
    Ok(Dataset {
        name: images_path
            .file_name()
            .map_or_else(|| images_name.clone(), |n| n.to_string_lossy().into_owned()),
        features,
        classes,
        inputs,
        targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoGaussians,
    Xor,
    Spiral,
}

impl std::str::FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "two_gaussians" => Ok(Self::TwoGaussians),
            "xor" => Ok(Self::Xor),
            "spiral" => Ok(Self::Spiral),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

/// Largest radius produced by the spiral generator.
pub const SPIRAL_MAX_RADIUS: f64 = 1.0;
const SPIRAL_TURNS: f64 = 1.5;

/// Small 2-D classification sets.
///
/// * `two_gaussians`: class c centered at (±2, ±2), unit-ish spread, alternating labels.
/// * `xor`: corners of the unit square (plus noise when p > 4), label = x XOR y.
/// * `spiral`: two interleaved arms of radius ≤ [`SPIRAL_MAX_RADIUS`].
pub fn make_synthetic(kind: SyntheticKind, p: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * p);
    let mut targets = Vec::with_capacity(p);
    let name = match kind {
        SyntheticKind::TwoGaussians => {
            for i in 0..p {
                let c = i % 2;
                let center = if c == 0 { -2.0 } else { 2.0 };
                inputs.push(center + gaussian(&mut rng) * 0.5);
                inputs.push(center + gaussian(&mut rng) * 0.5);
                targets.push(c);
            }
            "two_gaussians"
        }
        SyntheticKind::Xor => {
            let noise = if p > 4 { 0.1 } else { 0.0 };
            for i in 0..p {
                let (a, b) = ((i & 1) as f64, ((i >> 1) & 1) as f64);
                inputs.push(a + noise * gaussian(&mut rng));
                inputs.push(b + noise * gaussian(&mut rng));
                targets.push(((i & 1) ^ ((i >> 1) & 1)) as usize);
            }
            "xor"
        }
        SyntheticKind::Spiral => {
            for i in 0..p {
                let arm = i % 2;
                let t: f64 = rng.gen_range(0.0..1.0);
                let radius = SPIRAL_MAX_RADIUS * t;
                let angle = SPIRAL_TURNS * std::f64::consts::TAU * t
                    + std::f64::consts::PI * arm as f64
                    + rng.gen_range(-0.1..0.1);
                inputs.push(radius * angle.cos());
                inputs.push(radius * angle.sin());
                targets.push(arm);
            }
            "spiral"
        }
    };
    Dataset {
        name: name.to_string(),
        features: 2,
        classes: 2,
        inputs,
        targets,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Overlapping mini-batches.
///
/// The shuffled dataset is cut into `batch_count` disjoint cores of
/// ⌊p / batch_count⌋ samples (the remainder joins the last core). Batch i is
/// its own core plus ⌊overlap · core_size⌋ samples drawn without replacement
/// from every other core. Index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batch_count: usize,
    pub overlap_fraction: f64,
    pub seed: u64,
    pub cores: Vec<Vec<usize>>,
    pub index_lists: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn batch_sizes(&self) -> Vec<usize> {
        self.index_lists.iter().map(Vec::len).collect()
    }

    pub fn batches(&self, dataset: &Dataset) -> Result<Vec<Batch>, ModelError> {
        self.index_lists.iter().map(|idx| dataset.select(idx)).collect()
    }
}

pub fn make_batches(
    p: usize,
    batch_count: usize,
    overlap_fraction: f64,
    seed: u64,
) -> Result<BatchPlan, DataError> {
    if batch_count == 0 {
        return Err(DataError::InvalidPlan("batch count must be at least 1".into()));
    }
    if batch_count > p {
        return Err(DataError::InvalidPlan(format!(
            "batch count {batch_count} exceeds dataset size {p}"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(DataError::InvalidPlan(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    let core_size = p / batch_count;
    let foreign = (overlap_fraction * core_size as f64).floor() as usize;
    if foreign > core_size {
        return Err(DataError::InvalidPlan(format!(
            "overlap demand {foreign} exceeds core size {core_size}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    if batch_count > 1 {
        order.shuffle(&mut rng);
    }
    let cores: Vec<Vec<usize>> = (0..batch_count)
        .map(|b| {
            let end = if b + 1 == batch_count { p } else { (b + 1) * core_size };
            order[b * core_size..end].to_vec()
        })
        .collect();

    let mut index_lists = Vec::with_capacity(batch_count);
    for (b, core) in cores.iter().enumerate() {
        let mut list = core.clone();
        for (other, other_core) in cores.iter().enumerate() {
            if other != b && foreign > 0 {
                list.extend(other_core.choose_multiple(&mut rng, foreign).copied());
            }
        }
        list.sort_unstable();
        index_lists.push(list);
    }
    Ok(BatchPlan {
        batch_count,
        overlap_fraction,
        seed,
        cores,
        index_lists,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_parse_and_scale() {
        let (features, px) = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102]), "t").unwrap();
        assert_eq!(features, 2);
        assert_eq!(px, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 7]), "t").unwrap(), vec![3, 7]);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let mut wrong = idx_labels(&[1]);
        wrong[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let err = parse_idx_labels(&wrong, "labels").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
        assert!(matches!(
            parse_idx_images(&idx_images(3, 2, 2, &[0; 8]), "img"),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&[0, 0, 8], "lbl"),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn load_idx_files_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img-idx3-ubyte");
        let lbl = dir.path().join("lbl-idx1-ubyte.gz");
        std::fs::write(&img, idx_images(2, 2, 2, &[0; 8])).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_labels(&[1, 2])).unwrap();
        std::fs::write(&lbl, gz.finish().unwrap()).unwrap();
        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!((ds.len(), ds.features), (2, 4));

        std::fs::write(&lbl, idx_labels(&[1, 2, 3])).unwrap();
        let plain = dir.path().join("lbl3");
        std::fs::write(&plain, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(
            load_idx(&img, &plain),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn synthetic_sets() {
        let g = make_synthetic(SyntheticKind::TwoGaussians, 100, 1);
        assert_eq!(g.targets.iter().filter(|&&t| t == 0).count(), 50);
        // well separated: the sign of x+y identifies the class
        assert!((0..100).all(|i| {
            let r = g.row(i);
            ((r[0] + r[1]) > 0.0) == (g.targets[i] == 1)
        }));

        let x = make_synthetic(SyntheticKind::Xor, 4, 0);
        assert_eq!(x.inputs, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(x.targets, vec![0, 1, 1, 0]);

        let s = make_synthetic(SyntheticKind::Spiral, 200, 3);
        assert!((0..200).all(|i| s.row(i)[0].hypot(s.row(i)[1]) <= SPIRAL_MAX_RADIUS + 1e-12));
        assert_eq!(make_synthetic(SyntheticKind::Spiral, 200, 3), s);

        assert!("moons".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn overlap_arithmetic_example() {
        let plan = make_batches(50_000, 20, 0.01, 0).unwrap();
        assert_eq!(2_500 + 19 * 25, 2_975);
        assert!(plan.batch_sizes().iter().all(|&s| s == 2_975));
    }

    #[test]
    fn zero_overlap_is_partition() {
        let plan = make_batches(100, 4, 0.0, 5).unwrap();
        assert_eq!(plan.batch_sizes(), vec![25; 4]);
        let all: HashSet<usize> = plan.index_lists.iter().flatten().copied().collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn single_batch_is_dataset_in_order() {
        let plan = make_batches(10, 1, 0.0, 99).unwrap();
        assert_eq!(plan.index_lists, vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn plan_errors() {
        assert!(make_batches(3, 4, 0.0, 0).is_err());
        assert!(make_batches(3, 0, 0.0, 0).is_err());
        assert!(make_batches(30, 3, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn prop_plan_invariants(p in 1usize..400, nb in 1usize..12, overlap in 0.0f64..0.99, seed in any::<u64>()) {
            prop_assume!(nb <= p);
            let plan = make_batches(p, nb, overlap, seed).unwrap();
            prop_assert_eq!(&plan, &make_batches(p, nb, overlap, seed).unwrap());
            let core_size = p / nb;
            let foreign = (overlap * core_size as f64).floor() as usize;
            let mut seen = vec![false; p];
            for core in &plan.cores {
                for &i in core {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
            for (b, list) in plan.index_lists.iter().enumerate() {
                let core_len = plan.cores[b].len();
                prop_assert_eq!(list.len(), core_len + (nb - 1) * foreign);
                let set: HashSet<_> = list.iter().collect();
                prop_assert_eq!(set.len(), list.len());
            }
            if p % nb == 0 {
                let sizes = plan.batch_sizes();
                prop_assert!(sizes.iter().all(|&s| s == sizes[0]));
            }
        }
    }
}
