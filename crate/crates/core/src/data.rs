//! Classification data and its split across devices.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::{keyed_rng, Stream};

/// Labelled feature vectors stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(SimError::precondition("feature matrix does not match label count"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(SimError::precondition(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        by_class
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub feature_dim: usize,
    /// Per-coordinate distance between class centroids, in units of the noise std.
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            samples_per_class: 200,
            test_samples_per_class: 100,
            feature_dim: 16,
            separation: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// Class centroids sit on hypercube corners `±separation/2`; samples add unit
/// Gaussian noise. Corners are redrawn until all classes differ in at least
/// two coordinates (or one, when the dimension is too small for that).
pub fn class_centroids(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(seed, Stream::Dataset, 0, 0);
    let min_hamming = if spec.feature_dim >= 8 { 2 } else { 1 };
    let half = spec.separation / 2.0;
    let mut codes: Vec<Vec<bool>> = Vec::with_capacity(spec.num_classes);
    let mut attempts = 0;
    while codes.len() < spec.num_classes {
        let code: Vec<bool> = (0..spec.feature_dim).map(|_| rng.random()).collect();
        attempts += 1;
        let far_enough = codes
            .iter()
            .all(|c| c.iter().zip(&code).filter(|(a, b)| a != b).count() >= min_hamming);
        if far_enough || attempts > 10_000 {
            codes.push(code);
        }
    }
    codes
        .into_iter()
        .map(|code| code.into_iter().map(|b| if b { half } else { -half }).collect())
        .collect()
}

fn draw_split(centroids: &[Vec<f64>], per_class: usize, seed: u64, split: u64) -> Result<Dataset> {
    let dim = centroids.first().map(Vec::len).unwrap_or(0);
    let mut rng = keyed_rng(seed, Stream::Dataset, 1, split);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut order: Vec<u32> = (0..centroids.len() as u32)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    order.shuffle(&mut rng);
    let mut features = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        features.extend(centroids[c as usize].iter().map(|m| m + noise.sample(&mut rng)));
    }
    Dataset::new(features, order, dim, centroids.len())
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TrainTest> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.feature_dim == 0 || spec.test_samples_per_class == 0 {
        return Err(SimError::precondition("synthetic dataset counts must be positive"));
    }
    let centroids = class_centroids(spec, seed);
    Ok(TrainTest {
        train: draw_split(&centroids, spec.samples_per_class, seed, 0)?,
        test: draw_split(&centroids, spec.test_samples_per_class, seed, 1)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataRegime {
    Iid,
    /// Percentage of devices holding class-skewed data.
    NonIid(u8),
}

impl DataRegime {
    pub fn non_iid_percent(self) -> u8 {
        match self {
            DataRegime::Iid => 0,
            DataRegime::NonIid(m) => m,
        }
    }
}

/// Sample indices held by each device, indexed by device position.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPartition {
    pub assignment: Vec<Vec<usize>>,
    pub classes_present: Vec<BTreeSet<u32>>,
    pub non_iid: Vec<bool>,
}

impl DataPartition {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.assignment.iter().map(Vec::len).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.classes_present.iter().map(BTreeSet::len).collect()
    }
}

/// Normalized Gamma draws; falls back to a single random winner if every draw underflows.
fn dirichlet_weights(rng: &mut impl Rng, n: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut w: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        w.iter_mut().for_each(|x| *x /= sum);
    } else {
        let winner = rng.random_range(0..n);
        w = (0..n).map(|i| if i == winner { 1.0 } else { 0.0 }).collect();
    }
    w
}

/// Integer split of `total` following `weights`, by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(out.iter().sum());
    for i in order.into_iter().cycle() {
        if missing == 0 {
            break;
        }
        out[i] += 1;
        missing -= 1;
    }
    out
}

/// Per-device share weights: equal when `size_skew` is zero, otherwise a
/// power law over a seeded device order.
fn share_weights(rng: &mut impl Rng, n: usize, size_skew: f64) -> Vec<f64> {
    if size_skew == 0.0 {
        return vec![1.0; n];
    }
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(rng);
    rank.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(size_skew)).collect()
}

/// Splits `dataset` across `num_devices` devices.
///
/// IID devices receive class-interleaved blocks, so every class appears in
/// near-equal proportion. For `NonIid(m)`, `⌊m% · N⌋` seeded devices share a
/// class-stratified pool in which each class is spread over them by a
/// Dirichlet(`concentration`) draw.
pub fn partition(
    dataset: &Dataset,
    num_devices: usize,
    regime: DataRegime,
    concentration: f64,
    size_skew: f64,
    seed: u64,
) -> Result<DataPartition> {
    let percent = regime.non_iid_percent();
    if ![0, 50, 75, 100].contains(&percent) {
        return Err(SimError::precondition(format!("non-IID percentage must be 0, 50, 75 or 100, got {percent}")));
    }
    if !(concentration > 0.0) {
        return Err(SimError::precondition("Dirichlet concentration must be positive"));
    }
    if num_devices == 0 || num_devices > dataset.len() {
        return Err(SimError::precondition(format!(
            "cannot split {} samples over {num_devices} devices",
            dataset.len()
        )));
    }
    let mut rng = keyed_rng(seed, Stream::Partition, 0, 0);

    let mut device_order: Vec<usize> = (0..num_devices).collect();
    device_order.shuffle(&mut rng);
    let n_non_iid = percent as usize * num_devices / 100;
    let mut non_iid = vec![false; num_devices];
    for &d in &device_order[..n_non_iid] {
        non_iid[d] = true;
    }

    // one guaranteed sample each, the rest by weight
    let sizes: Vec<usize> = apportion(dataset.len() - num_devices, &share_weights(&mut rng, num_devices, size_skew))
        .into_iter()
        .map(|s| s + 1)
        .collect();
    let non_iid_budget: usize = (0..num_devices).filter(|&d| non_iid[d]).map(|d| sizes[d]).sum::<usize>().min(dataset.len());

    let mut by_class = dataset.indices_by_class();
    for class in &mut by_class {
        class.shuffle(&mut rng);
    }
    let class_sizes: Vec<f64> = by_class.iter().map(|c| c.len() as f64).collect();
    let non_iid_quota = apportion(non_iid_budget, &class_sizes);

    let mut assignment = vec![Vec::new(); num_devices];

    // IID pool, interleaved across classes
    let mut iid_pool = Vec::with_capacity(dataset.len() - non_iid_budget);
    let mut cursors: Vec<usize> = non_iid_quota.clone();
    loop {
        let mut progressed = false;
        for (c, class) in by_class.iter().enumerate() {
            if cursors[c] < class.len() {
                iid_pool.push(class[cursors[c]]);
                cursors[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    let iid_devices: Vec<usize> = (0..num_devices).filter(|&d| !non_iid[d]).collect();
    let mut offset = 0;
    for (pos, &d) in iid_devices.iter().enumerate() {
        let take = if pos + 1 == iid_devices.len() {
            iid_pool.len() - offset
        } else {
            sizes[d].min(iid_pool.len() - offset)
        };
        assignment[d].extend_from_slice(&iid_pool[offset..offset + take]);
        offset += take;
    }

    // non-IID pool, one Dirichlet draw per class over the non-IID devices
    let skewed: Vec<usize> = (0..num_devices).filter(|&d| non_iid[d]).collect();
    if !skewed.is_empty() {
        for (c, class) in by_class.iter().enumerate() {
            let quota = non_iid_quota[c];
            if quota == 0 {
                continue;
            }
            let weights = dirichlet_weights(&mut rng, skewed.len(), concentration);
            let counts = apportion(quota, &weights);
            let mut next = 0;
            for (slot, &count) in counts.iter().enumerate() {
                assignment[skewed[slot]].extend_from_slice(&class[next..next + count]);
                next += count;
            }
        }
        // every device keeps at least one sample
        for &d in &skewed {
            if assignment[d].is_empty() {
                let donor = *skewed
                    .iter()
                    .max_by_key(|&&o| (assignment[o].len(), std::cmp::Reverse(o)))
                    .expect("non-empty");
                if let Some(sample) = assignment[donor].pop() {
                    assignment[d].push(sample);
                }
            }
        }
    }
    if let Some(d) = (0..num_devices).find(|&d| assignment[d].is_empty()) {
        return Err(SimError::precondition(format!("device {d} received no samples")));
    }

    let classes_present = assignment
        .iter()
        .map(|idx| idx.iter().map(|&i| dataset.label(i)).collect())
        .collect();
    Ok(DataPartition {
        assignment,
        classes_present,
        non_iid,
    })
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(path: &Path, message: impl Into<String>) -> SimError {
    SimError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    if read_u32(&img, 0) != Some(0x0000_0803) {
        return Err(format_err(images, "bad image magic"));
    }
    if read_u32(&lab, 0) != Some(0x0000_0801) {
        return Err(format_err(labels, "bad label magic"));
    }
    let n = read_u32(&img, 4).ok_or_else(|| format_err(images, "truncated header"))? as usize;
    let rows = read_u32(&img, 8).ok_or_else(|| format_err(images, "truncated header"))? as usize;
    let cols = read_u32(&img, 12).ok_or_else(|| format_err(images, "truncated header"))? as usize;
    let n_labels = read_u32(&lab, 4).ok_or_else(|| format_err(labels, "truncated header"))? as usize;
    if n != n_labels {
        return Err(format_err(labels, format!("{n_labels} labels for {n} images")));
    }
    let dim = rows * cols;
    let pixels = img
        .get(16..16 + n * dim)
        .ok_or_else(|| format_err(images, "truncated pixel data"))?;
    let label_bytes = lab.get(8..8 + n).ok_or_else(|| format_err(labels, "truncated label data"))?;
    let num_classes = label_bytes.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    Dataset::new(
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        label_bytes.iter().map(|&l| l as u32).collect(),
        dim,
        num_classes,
    )
}
