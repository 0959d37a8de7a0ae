//! Labelled datasets, worker partitions, and IDX (MNIST) files.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<usize>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<usize>, n_features: usize, n_classes: usize) -> Result<Self> {
        if n_features == 0 || n_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "dataset needs features > 0 and classes >= 2, got {n_features} and {n_classes}"
            )));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * n_features,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidParameter(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Settings for [`synthetic_clusters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub features: usize,
    pub samples_per_class: usize,
    /// Standard deviation of samples around their class center.
    pub spread: f64,
    pub seed: u64,
}

/// Gaussian clusters: each class center is drawn from `N(0, I)` and each
/// sample is its center plus `spread · N(0, I)`. Samples are ordered by
/// class.
pub fn synthetic_clusters(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples_per_class == 0 || !(spec.spread >= 0.0) {
        return Err(Error::InvalidParameter(
            "synthetic data needs samples_per_class > 0 and spread >= 0".into(),
        ));
    }
    let mut rng = stream(spec.seed, Purpose::Data, &[]);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.features).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut features = Vec::with_capacity(spec.classes * spec.samples_per_class * spec.features);
    let mut labels = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &mu in center {
                let e: f64 = rng.sample(StandardNormal);
                features.push((mu + spec.spread * e) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, spec.features, spec.classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Each class is shuffled and dealt round-robin to all workers.
    Iid,
    /// Worker `n` only holds class `n mod C`; workers sharing a class split
    /// it round-robin, and classes with no worker are dropped.
    LabelSeparated,
}

/// Splits `data` into one index shard per honest worker.
pub fn partition(data: &Dataset, n_workers: usize, mode: PartitionMode, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_workers == 0 {
        return Err(Error::InvalidParameter("partition needs at least one worker".into()));
    }
    let mut shards = vec![Vec::new(); n_workers];
    let by_class = data.indices_by_class();
    match mode {
        PartitionMode::Iid => {
            let mut next = 0;
            for (c, mut idx) in by_class.into_iter().enumerate() {
                idx.shuffle(&mut stream(seed, Purpose::Partition, &[c as u64]));
                for i in idx {
                    shards[next].push(i);
                    next = (next + 1) % n_workers;
                }
            }
        }
        PartitionMode::LabelSeparated => {
            let c = data.n_classes();
            for (class, idx) in by_class.into_iter().enumerate() {
                let owners: Vec<usize> = (0..n_workers).filter(|n| n % c == class).collect();
                if owners.is_empty() {
                    continue;
                }
                for (j, i) in idx.into_iter().enumerate() {
                    shards[owners[j % owners.len()]].push(i);
                }
            }
        }
    }
    if let Some(n) = shards.iter().position(|s| s.is_empty()) {
        return Err(Error::InvalidParameter(format!("worker {n} received no samples")));
    }
    Ok(shards)
}

const IDX_UBYTE: u8 = 0x08;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// An IDX tensor of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    /// Values rescaled from `0..=255` to `[0, 1]`.
    pub fn scaled(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

/// Parses an IDX file, transparently gunzipping it if needed.
pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(BufReader::new(raw.as_slice()))
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx(format!("{}: {e}", path.display())))?;
        raw = out;
    }
    parse_idx(&raw)
}

pub fn parse_idx(raw: &[u8]) -> Result<IdxTensor> {
    if raw.len() < 4 {
        return Err(Error::Idx("file shorter than the 4-byte magic".into()));
    }
    if raw[0] != 0 || raw[1] != 0 {
        return Err(Error::Idx(format!("bad magic bytes {:#04x} {:#04x}", raw[0], raw[1])));
    }
    if raw[2] != IDX_UBYTE {
        return Err(Error::Idx(format!("unsupported type code {:#04x}", raw[2])));
    }
    let ndim = raw[3] as usize;
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(Error::Idx(format!("truncated header: {ndim} dimensions declared")));
    }
    let dims: Vec<usize> = raw[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx("dimension product overflows".into()))?;
    let payload = &raw[header..];
    if payload.len() < count {
        return Err(Error::Idx(format!(
            "truncated payload: expected {count} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(Error::Idx(format!("{} trailing bytes after payload", payload.len() - count)));
    }
    Ok(IdxTensor {
        dims,
        data: payload.to_vec(),
    })
}

/// Writes an unsigned-byte IDX file (uncompressed).
pub fn write_idx(path: &Path, tensor: &IdxTensor) -> Result<()> {
    let count: usize = tensor.dims.iter().product();
    if count != tensor.data.len() || tensor.dims.len() > u8::MAX as usize {
        return Err(Error::Idx("dimensions do not match the payload".into()));
    }
    let mut out = vec![0, 0, IDX_UBYTE, tensor.dims.len() as u8];
    for &d in &tensor.dims {
        let d = u32::try_from(d).map_err(|_| Error::Idx(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    File::create(path)?.write_all(&out)?;
    Ok(())
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let img = load_idx(&find_file(dir, images)?)?;
    let lab = load_idx(&find_file(dir, labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
        return Err(Error::Idx(format!(
            "image dims {:?} do not match label dims {:?}",
            img.dims, lab.dims
        )));
    }
    let n_features = img.dims[1] * img.dims[2];
    Dataset::new(img.scaled(), lab.data.iter().map(|&l| l as usize).collect(), n_features, 10)
}

/// Loads the MNIST training and test sets from the four standard IDX files
/// (optionally gzipped) in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        load_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let features = labels.iter().map(|&l| l as f32).collect();
        Dataset::new(features, labels, 1, classes).unwrap()
    }

    #[test]
    fn iid_partition_balances_classes() {
        let data = toy(10, 2);
        let shards = partition(&data, 2, PartitionMode::Iid, 7).unwrap();
        for s in &shards {
            for c in 0..2 {
                assert_eq!(s.iter().filter(|&&i| data.label(i) == c).count(), 5);
            }
        }
        assert_eq!(shards.iter().map(Vec::len).sum::<usize>(), data.len());
        assert_eq!(shards, partition(&data, 2, PartitionMode::Iid, 7).unwrap());
    }

    #[test]
    fn label_separated_shards_are_pure() {
        let data = toy(6, 10);
        let shards = partition(&data, 10, PartitionMode::LabelSeparated, 0).unwrap();
        for (n, s) in shards.iter().enumerate() {
            assert!(s.iter().all(|&i| data.label(i) == n));
        }
        assert_eq!(shards.iter().map(Vec::len).sum::<usize>(), data.len());

        let shared = partition(&toy(6, 2), 4, PartitionMode::LabelSeparated, 0).unwrap();
        assert_eq!(shared.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 3]);
    }

    #[test]
    fn empty_shard_is_rejected() {
        assert!(partition(&toy(1, 2), 3, PartitionMode::Iid, 0).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.idx");
        let tensor = IdxTensor {
            dims: vec![2, 2, 2],
            data: vec![0, 1, 2, 3, 252, 253, 254, 255],
        };
        write_idx(&path, &tensor).unwrap();
        assert_eq!(load_idx(&path).unwrap(), tensor);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(tensor.scaled()[7], 1.0);
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a.idx");
        let tensor = IdxTensor {
            dims: vec![3],
            data: vec![7, 8, 9],
        };
        write_idx(&plain, &tensor).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        let gz = dir.path().join("a.idx.gz");
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&gz).unwrap(), tensor);
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 1, 5]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 5]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 4, 5]), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&[0, 0, 8, 2, 0, 0]), Err(Error::Idx(_))));
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec {
            classes: 3,
            features: 4,
            samples_per_class: 5,
            spread: 0.5,
            seed: 1,
        };
        let a = synthetic_clusters(&spec).unwrap();
        assert_eq!(a, synthetic_clusters(&spec).unwrap());
        assert_eq!(a.len(), 15);
        assert_eq!(a.label(14), 2);
    }
}
