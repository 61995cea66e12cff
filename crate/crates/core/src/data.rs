//! Synthetic datasets, label randomization and the CIFAR-10 binary loader.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::{Batch, Matrix};

pub const CIFAR10_RECORD_BYTES: usize = 3073;
pub const CIFAR10_PIXELS: usize = 3072;
pub const CIFAR10_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label randomization needs a classification dataset")]
    NotClassification,
    #[error("empty request: max_records must be positive")]
    EmptyRequest,
    #[error("truncated record at byte offset {offset} (file length {len} is not a multiple of 3073)")]
    TruncatedRecord { offset: usize, len: usize },
    #[error("label {label} out of range at byte offset {offset}")]
    BadLabel { label: u8, offset: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix,
    /// One-hot rows for classification, one column of reals for regression.
    pub targets: Matrix,
    /// `Some(K)` for classification.
    pub num_classes: Option<usize>,
    /// Samples whose label went through randomization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub randomized_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.num_classes?;
        Some(
            self.targets
                .iter_rows()
                .map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0))
                .collect(),
        )
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select_rows(idx),
            num_classes: self.num_classes,
            randomized_mask: self
                .randomized_mask
                .as_ref()
                .map(|m| idx.iter().map(|&i| m[i]).collect()),
        }
    }

    /// CSV with columns `x0..x{d-1}` followed by `label` (classification) or `y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let d = self.input_dim();
        let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let last = if self.num_classes.is_some() { "label" } else { "y" };
        let _ = writeln!(out, "{},{last}", header.join(","));
        let labels = self.labels();
        for i in 0..self.len() {
            let xs: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            let y = match &labels {
                Some(l) => l[i].to_string(),
                None => self.targets.get(i, 0).to_string(),
            };
            let _ = writeln!(out, "{},{y}", xs.join(","));
        }
        out
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        m.row_mut(i)[l] = 1.0;
    }
    m
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `k` isotropic Gaussian clusters in `d` dimensions; centers uniform in
/// `[-4, 4]^d`.
pub fn gaussian_blobs(
    k: usize,
    n_per_class: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if k < 2 || n_per_class == 0 || d == 0 {
        return Err(DataError::InvalidArgument(
            "need k >= 2 classes, n_per_class >= 1, d >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect())
        .collect();
    let mut xs = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in center {
                xs.push(mu + spread * gauss(&mut rng));
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        name: format!("blobs-k{k}-d{d}"),
        inputs: Matrix::from_vec(labels.len(), d, xs).expect("sized"),
        targets: one_hot(&labels, k),
        num_classes: Some(k),
        randomized_mask: None,
    })
}

/// Two interleaving half circles (class 0 outer, class 1 inner).
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 4 {
        return Err(DataError::InvalidArgument("two_moons needs n >= 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = std::f64::consts::PI * i as f64 / (n_out - 1) as f64;
        xs.push(t.cos());
        xs.push(t.sin());
        labels.push(0);
    }
    for i in 0..n_in {
        let t = std::f64::consts::PI * i as f64 / (n_in - 1) as f64;
        xs.push(1.0 - t.cos());
        xs.push(0.5 - t.sin());
        labels.push(1);
    }
    if noise > 0.0 {
        for x in xs.iter_mut() {
            *x += noise * gauss(&mut rng);
        }
    }
    Ok(Dataset {
        name: "two-moons".into(),
        inputs: Matrix::from_vec(n, 2, xs).expect("sized"),
        targets: one_hot(&labels, 2),
        num_classes: Some(2),
        randomized_mask: None,
    })
}

/// Uniform grid `x_i = −π + 2π i / n` (right endpoint excluded) with
/// `y = Σ a_j sin(ω_j x)`. Integer frequencies fall on exact DFT bins.
pub fn freq_target_1d(
    frequencies: &[f64],
    amplitudes: &[f64],
    n_points: usize,
) -> Result<Dataset, DataError> {
    if frequencies.len() != amplitudes.len() || frequencies.is_empty() || n_points < 2 {
        return Err(DataError::InvalidArgument(
            "frequencies and amplitudes must be nonempty and of equal length; n_points >= 2".into(),
        ));
    }
    let xs: Vec<f64> = (0..n_points)
        .map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / n_points as f64)
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            frequencies
                .iter()
                .zip(amplitudes)
                .map(|(w, a)| a * (w * x).sin())
                .sum()
        })
        .collect();
    Ok(Dataset {
        name: "freq-target-1d".into(),
        inputs: Matrix::from_vec(n_points, 1, xs).expect("sized"),
        targets: Matrix::from_vec(n_points, 1, ys).expect("sized"),
        num_classes: None,
        randomized_mask: None,
    })
}

/// Fraction of labels to randomize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RandomizationLevel(f64);

impl RandomizationLevel {
    pub fn new(r: f64) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(DataError::InvalidArgument(format!(
                "randomization level {r} outside [0, 1]"
            )));
        }
        Ok(Self(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RandomizationLevel {
    type Error = DataError;
    fn try_from(r: f64) -> Result<Self, Self::Error> {
        Self::new(r)
    }
}

impl From<RandomizationLevel> for f64 {
    fn from(r: RandomizationLevel) -> f64 {
        r.0
    }
}

/// Selects each sample with probability `r` and redraws its label uniformly
/// over all classes (it may land on the original class).
pub fn randomize_labels(
    data: &Dataset,
    r: RandomizationLevel,
    seed: u64,
) -> Result<Dataset, DataError> {
    let k = data.num_classes.ok_or(DataError::NotClassification)?;
    let mut labels = data.labels().expect("classification");
    let mut mask = vec![false; labels.len()];
    if r.0 > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (label, selected) in labels.iter_mut().zip(mask.iter_mut()) {
            if rng.random::<f64>() < r.0 {
                *selected = true;
                *label = rng.random_range(0..k);
            }
        }
    }
    Ok(Dataset {
        name: data.name.clone(),
        inputs: data.inputs.clone(),
        targets: one_hot(&labels, k),
        num_classes: Some(k),
        randomized_mask: Some(mask),
    })
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes, each 32×32 row-major). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10_bin(bytes: &[u8], max_records: usize) -> Result<Dataset, DataError> {
    if max_records == 0 {
        return Err(DataError::EmptyRequest);
    }
    let len = bytes.len();
    if !len.is_multiple_of(CIFAR10_RECORD_BYTES) {
        return Err(DataError::TruncatedRecord {
            offset: len - len % CIFAR10_RECORD_BYTES,
            len,
        });
    }
    let n = (len / CIFAR10_RECORD_BYTES).min(max_records);
    if n == 0 {
        return Err(DataError::InvalidArgument("file contains no records".into()));
    }
    let mut xs = Vec::with_capacity(n * CIFAR10_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).take(n).enumerate() {
        let label = rec[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(DataError::BadLabel {
                label,
                offset: i * CIFAR10_RECORD_BYTES,
            });
        }
        labels.push(label as usize);
        xs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        name: "cifar10".into(),
        inputs: Matrix::from_vec(n, CIFAR10_PIXELS, xs).expect("sized"),
        targets: one_hot(&labels, CIFAR10_CLASSES),
        num_classes: Some(CIFAR10_CLASSES),
        randomized_mask: None,
    })
}

pub fn load_cifar10_bin(path: &Path, max_records: usize) -> Result<Dataset, DataError> {
    if max_records == 0 {
        return Err(DataError::EmptyRequest);
    }
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cifar10_bin(&bytes, max_records)
}

/// Inverse of [`parse_cifar10_bin`] for `(label, 3072 pixel bytes)` records.
pub fn encode_cifar10_bin(records: &[(u8, Vec<u8>)]) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(records.len() * CIFAR10_RECORD_BYTES);
    for (label, pixels) in records {
        if pixels.len() != CIFAR10_PIXELS {
            return Err(DataError::InvalidArgument(format!(
                "record has {} pixel bytes, expected {CIFAR10_PIXELS}",
                pixels.len()
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    Ok(out)
}

/// Seeded shuffle split into `(train, val)` index sets.
pub fn split_indices(
    n: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "split fraction {fraction} must lie in (0, 1)"
        )));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(DataError::InvalidArgument(format!(
            "split of {n} samples at {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn train_val_split(
    data: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let (tr, va) = split_indices(data.len(), fraction, seed)?;
    Ok((data.subset(&tr), data.subset(&va)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        assert_eq!(two_moons(50, 0.1, 3).unwrap(), two_moons(50, 0.1, 3).unwrap());
        assert_ne!(two_moons(50, 0.1, 3).unwrap(), two_moons(50, 0.1, 4).unwrap());
        assert_eq!(
            gaussian_blobs(3, 10, 4, 0.5, 1).unwrap(),
            gaussian_blobs(3, 10, 4, 0.5, 1).unwrap()
        );
    }

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let d = two_moons(200, 0.0, 0).unwrap();
        let labels = d.labels().unwrap();
        for (i, row) in d.inputs.iter_rows().enumerate() {
            let (cx, cy) = if labels[i] == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tone_peaks_at_one() {
        let d = freq_target_1d(&[1.0], &[1.0], 256).unwrap();
        let max = d.targets.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((max - 1.0).abs() < 1e-6);
    }

    #[test]
    fn randomize_zero_is_identity() {
        let d = gaussian_blobs(3, 20, 2, 0.3, 5).unwrap();
        let r = randomize_labels(&d, RandomizationLevel::new(0.0).unwrap(), 9).unwrap();
        assert_eq!(r.targets, d.targets);
        assert!(r.randomized_mask.unwrap().iter().all(|m| !m));
    }

    #[test]
    fn randomize_moderate_and_high_levels() {
        let d = gaussian_blobs(4, 50, 2, 0.3, 5).unwrap();
        for r in [0.2, 0.8] {
            let out = randomize_labels(&d, RandomizationLevel::new(r).unwrap(), 1).unwrap();
            let k = out.num_classes.unwrap();
            assert!(out.targets.iter_rows().all(|row| {
                row.iter().sum::<f64>() == 1.0 && row.iter().filter(|&&v| v == 1.0).count() == 1
            }));
            assert_eq!(k, 4);
        }
        assert!(RandomizationLevel::new(1.2).is_err());
    }

    #[test]
    fn full_randomization_binomial() {
        let labels: Vec<usize> = (0..10_000).map(|i| i % 10).collect();
        let d = Dataset {
            name: "t".into(),
            inputs: Matrix::zeros(10_000, 1),
            targets: one_hot(&labels, 10),
            num_classes: Some(10),
            randomized_mask: None,
        };
        let r = randomize_labels(&d, RandomizationLevel::new(1.0).unwrap(), 42).unwrap();
        let changed = r
            .labels()
            .unwrap()
            .iter()
            .zip(&labels)
            .filter(|(a, b)| a != b)
            .count() as f64;
        let n = 10_000.0;
        let sd = (n * 0.9 * 0.1f64).sqrt();
        assert!((changed - 0.9 * n).abs() <= 3.0 * sd, "changed {changed}");
    }

    #[test]
    fn regression_randomization_rejected() {
        let d = freq_target_1d(&[1.0], &[1.0], 16).unwrap();
        assert!(matches!(
            randomize_labels(&d, RandomizationLevel::new(0.5).unwrap(), 0),
            Err(DataError::NotClassification)
        ));
    }

    fn synthetic_records(n: usize) -> Vec<(u8, Vec<u8>)> {
        (0..n)
            .map(|i| {
                let px = (0..CIFAR10_PIXELS).map(|j| ((i * 31 + j * 7) % 256) as u8).collect();
                ((i % 10) as u8, px)
            })
            .collect()
    }

    #[test]
    fn cifar_parse_round_trip() {
        let recs = synthetic_records(12);
        let bytes = encode_cifar10_bin(&recs).unwrap();
        let d = parse_cifar10_bin(&bytes, 5).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.input_dim(), 3072);
        assert_eq!(d.num_classes, Some(10));
        for (i, (label, px)) in recs.iter().take(5).enumerate() {
            assert_eq!(d.labels().unwrap()[i], *label as usize);
            for (j, &b) in px.iter().enumerate() {
                assert_eq!((d.inputs.get(i, j) * 255.0).round() as u8, b);
            }
        }
    }

    #[test]
    fn cifar_malformed_inputs() {
        let mut bytes = encode_cifar10_bin(&synthetic_records(2)).unwrap();
        bytes.extend_from_slice(&[1, 2, 3]);
        match parse_cifar10_bin(&bytes, 10) {
            Err(DataError::TruncatedRecord { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = encode_cifar10_bin(&synthetic_records(2)).unwrap();
        bad[3073] = 11;
        match parse_cifar10_bin(&bad, 10) {
            Err(DataError::BadLabel { label, offset }) => {
                assert_eq!((label, offset), (11, 3073));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_cifar10_bin(&bad, 0), Err(DataError::EmptyRequest)));
    }

    #[test]
    fn split_sizes_and_partition() {
        let (tr, va) = split_indices(100, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.8, 3).unwrap(), (tr, va));
        assert!(split_indices(3, 0.1, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn csv_export_has_header() {
        let d = two_moons(4, 0.0, 0).unwrap();
        let csv = d.to_csv();
        assert!(csv.starts_with("x0,x1,label\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
