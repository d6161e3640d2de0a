//! Deterministic desk-scale datasets and seeded mini-batch ordering.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Samples drawn for output-similarity measurements.
pub const CKA_SAMPLE_LIMIT: usize = 6400;

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    features: Array2<S>,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        features: Array2<S>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return invalid("num_classes must be positive");
        }
        if features.nrows() != labels.len() {
            return invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            ));
        }
        if labels.len() < num_classes {
            return invalid(format!(
                "{} samples cannot cover {} classes",
                labels.len(),
                num_classes
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {bad} outside [0, {num_classes})"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return invalid("features contain non-finite values");
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> ArrayView2<'_, S> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Array2<S>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    fn subset(&self, indices: &[usize], suffix: &str) -> Self {
        let (features, labels) = self.gather(indices);
        Self {
            features,
            labels,
            num_classes: self.num_classes,
            name: format!("{}{}", self.name, suffix),
        }
    }

    /// Seeded train/test partition.
    pub fn split(&self, seed: u64) -> Result<Split<S>> {
        let n = self.len();
        let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
        if n_train == 0 || n_train == n {
            return invalid(format!("{n} samples are too few to split"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Split {
            train: self.subset(&order[..n_train], ""),
            test: self.subset(&order[n_train..], ""),
        })
    }

    /// First `min(6400, n)` rows of a seeded permutation.
    pub fn cka_samples(&self, seed: u64) -> Array2<S> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(CKA_SAMPLE_LIMIT.min(self.len()));
        self.features.select(Axis(0), &order)
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            features: self.features.mapv(|v| T::from_f64_lossy(v.to_f64_lossy())),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }
}

/// Fixed train/test partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<S> {
    pub train: Dataset<S>,
    pub test: Dataset<S>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Isotropic Gaussian clusters.
///
/// With `num_classes <= dim` class `c` sits at `2·e_c`; otherwise the centers
/// are the vertices of a regular polygon of radius 2 in the first two
/// coordinates.
pub fn gen_gaussian_blobs<S: Scalar>(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes == 0 || samples_per_class == 0 || dim == 0 {
        return invalid("blob counts must be positive");
    }
    if spread < 0.0 || !spread.is_finite() {
        return invalid("spread must be a finite non-negative number");
    }
    if num_classes > dim && dim < 2 {
        return invalid("more classes than dimensions needs dim >= 2");
    }
    let center = |c: usize| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        if num_classes <= dim {
            v[c] = 2.0;
        } else {
            let a = 2.0 * PI * c as f64 / num_classes as f64;
            v[0] = 2.0 * a.cos();
            v[1] = 2.0 * a.sin();
        }
        v
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let mu = center(c);
        for _ in 0..samples_per_class {
            for &m in &mu {
                data.push(S::from_f64_lossy(m + spread * normal(&mut rng)));
            }
            labels.push(c);
        }
    }
    let features = Array2::from_shape_vec((n, dim), data).expect("shape");
    Dataset::new(features, labels, num_classes, "blobs")
}

/// Interleaved Archimedean spirals in the plane.
///
/// Arm `c` follows radius = angle `φ ∈ (0, 2π·turns]`, rotated by `2πc/K`.
/// Gaussian noise of standard deviation `noise` is added in that frame, then
/// coordinates are divided by the maximum radius so features lie roughly in
/// `[-1, 1]`.
pub fn gen_spirals<S: Scalar>(
    num_classes: usize,
    samples_per_class: usize,
    noise: f64,
    turns: f64,
    seed: u64,
) -> Result<Dataset<S>> {
    if num_classes == 0 || samples_per_class == 0 {
        return invalid("spiral counts must be positive");
    }
    if !(turns > 0.0 && turns.is_finite()) {
        return invalid("turns must be positive");
    }
    if noise < 0.0 || !noise.is_finite() {
        return invalid("noise must be a finite non-negative number");
    }
    let max_angle = 2.0 * PI * turns;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let offset = 2.0 * PI * c as f64 / num_classes as f64;
        for i in 0..samples_per_class {
            let phi = max_angle * (i + 1) as f64 / samples_per_class as f64;
            let x = phi * (phi + offset).cos() + noise * normal(&mut rng);
            let y = phi * (phi + offset).sin() + noise * normal(&mut rng);
            data.push(S::from_f64_lossy(x / max_angle));
            data.push(S::from_f64_lossy(y / max_angle));
            labels.push(c);
        }
    }
    let features = Array2::from_shape_vec((n, 2), data).expect("shape");
    Dataset::new(features, labels, num_classes, "spirals")
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!(
                    "{} file truncated: needed {len} bytes for {what} at offset {}",
                    self.file, self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "{} file has magic {got:#010x}, expected {expected:#010x}",
                    self.file
                ),
            });
        }
        Ok(())
    }
}

/// Parses an IDX image/label pair into a class-balanced subset.
pub fn parse_idx<S: Scalar>(
    images: &[u8],
    labels: &[u8],
    max_per_class: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
        file: "images",
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let n_images = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let pixels = img.take(n_images * rows * cols, "pixel data")?;

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
        file: "labels",
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let n_labels = lab.u32("label count")? as usize;
    if n_labels != n_images {
        return Err(Error::Format {
            offset: 4,
            message: format!("labels file lists {n_labels} items, images file {n_images}"),
        });
    }
    let raw_labels = lab.take(n_labels, "label data")?;
    if n_images == 0 {
        return invalid("IDX files contain no samples");
    }

    let num_classes = *raw_labels.iter().max().unwrap() as usize + 1;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in raw_labels.iter().enumerate() {
        per_class[y as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for idx in &mut per_class {
        idx.shuffle(&mut rng);
        idx.truncate(max_per_class);
        chosen.extend_from_slice(idx);
    }
    chosen.sort_unstable();

    let d = rows * cols;
    let mut data = Vec::with_capacity(chosen.len() * d);
    for &i in &chosen {
        data.extend(
            pixels[i * d..(i + 1) * d]
                .iter()
                .map(|&p| S::from_f64_lossy(p as f64 / 255.0)),
        );
    }
    let features = Array2::from_shape_vec((chosen.len(), d), data).expect("shape");
    let labels = chosen.iter().map(|&i| raw_labels[i] as usize).collect();
    Dataset::new(features, labels, num_classes, "idx")
}

/// Loads an IDX image/label file pair.
pub fn load_idx_subset<S: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    max_per_class: usize,
    seed: u64,
) -> Result<Dataset<S>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, max_per_class, seed)
}

/// Seeded epoch-by-epoch mini-batch order over a dataset of `len` rows.
#[derive(Debug, Clone)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if len == 0 {
            return invalid("cannot stream an empty dataset");
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Epochs handed out so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Permutation for the next epoch; the last batch may be short.
    pub fn next_epoch(&mut self) -> EpochOrder {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut self.rng);
        self.epoch += 1;
        EpochOrder {
            order,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochOrder {
    order: Vec<usize>,
    batch_size: usize,
}

impl EpochOrder {
    pub fn indices(&self) -> &[usize] {
        &self.order
    }

    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_blobs_sit_on_centers() {
        let d = gen_gaussian_blobs::<f64>(2, 10, 2, 0.0, 99).unwrap();
        assert_eq!(d.len(), 20);
        for (row, &y) in d.features().rows().into_iter().zip(d.labels()) {
            let expect = if y == 0 { [2.0, 0.0] } else { [0.0, 2.0] };
            assert_eq!(row.to_vec(), expect.to_vec());
        }
    }

    #[test]
    fn generators_are_reproducible() {
        let a = gen_gaussian_blobs::<f32>(3, 100, 2, 0.5, 7).unwrap();
        let b = gen_gaussian_blobs::<f32>(3, 100, 2, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let a = gen_spirals::<f32>(2, 50, 0.15, 1.75, 3).unwrap();
        let b = gen_spirals::<f32>(2, 50, 0.15, 1.75, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_spirals::<f32>(2, 50, 0.15, 1.75, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_spirals_are_disjoint() {
        let d = gen_spirals::<f64>(2, 200, 0.0, 1.75, 0).unwrap();
        let x = d.features();
        let mut min = f64::INFINITY;
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d.labels()[i] != d.labels()[j] {
                    let dx = x[[i, 0]] - x[[j, 0]];
                    let dy = x[[i, 1]] - x[[j, 1]];
                    min = min.min((dx * dx + dy * dy).sqrt());
                }
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn spirals_reject_zero_turns() {
        assert!(gen_spirals::<f32>(2, 10, 0.1, 0.0, 0).is_err());
    }

    #[test]
    fn epoch_is_a_permutation_with_short_tail() {
        let mut s = BatchStream::new(10, 4, 5).unwrap();
        let e = s.next_epoch();
        let mut seen = e.indices().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let sizes: Vec<usize> = e.batches().map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(e.num_batches(), 3);
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn batch_streams_depend_only_on_seed() {
        let mut a = BatchStream::new(100, 8, 1).unwrap();
        let mut b = BatchStream::new(100, 8, 1).unwrap();
        let mut c = BatchStream::new(100, 8, 2).unwrap();
        for _ in 0..3 {
            let ea = a.next_epoch();
            assert_eq!(ea, b.next_epoch());
            assert_ne!(ea, c.next_epoch());
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let d = gen_gaussian_blobs::<f32>(2, 50, 2, 0.3, 1).unwrap();
        let s = d.split(9).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.test.len(), 20);
        assert_eq!(s, d.split(9).unwrap());
    }

    #[test]
    fn cka_samples_cap_at_dataset_size() {
        let d = gen_gaussian_blobs::<f32>(2, 50, 2, 0.3, 1).unwrap();
        assert_eq!(d.cka_samples(0).nrows(), 100);
    }
}
