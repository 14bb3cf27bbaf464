//! Labeled image datasets: the CIFAR binary format and a seeded synthetic
//! generator of Gaussian class blobs.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N, C, H, W]` with one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, ..) = images.dims4("dataset images")?;
        if n != labels.len() {
            return Err(Error::Data(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let make = |idx: &[usize]| {
            let (images, labels) = self.batch(idx);
            Dataset {
                images,
                labels,
                num_classes: self.num_classes,
            }
        };
        (make(&head), make(&tail))
    }

    /// Consecutive index batches of at most `batch_size`, in a seeded random order.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }
}

/// Per-channel `(x - mean) / std` applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn cifar10() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }

    pub fn cifar100() -> Self {
        Normalization {
            mean: [0.5071, 0.4865, 0.4409],
            std: [0.2673, 0.2564, 0.2762],
        }
    }

    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses a CIFAR-10/100 binary batch file. For CIFAR-100 the coarse label
/// byte is skipped and the fine label is used.
pub fn load_cifar_binary(
    path: &Path,
    variant: CifarVariant,
    norm: &Normalization,
    expected_records: Option<usize>,
) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    let record = variant.label_bytes() + CIFAR_PIXELS;
    if bytes.is_empty() {
        return Err(fmt(0, "empty file".into()));
    }
    if bytes.len() % record != 0 {
        let last = bytes.len() / record * record;
        return Err(fmt(
            last,
            format!(
                "truncated record ({} of {record} bytes)",
                bytes.len() - last
            ),
        ));
    }
    let n = bytes.len() / record;
    if let Some(want) = expected_records {
        if want != n {
            return Err(fmt(
                bytes.len(),
                format!("expected {want} records, found {n}"),
            ));
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (r, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(fmt(
                r * record + variant.label_bytes() - 1,
                format!("label {label} out of range"),
            ));
        }
        labels.push(label);
        for (c, plane) in rec[variant.label_bytes()..].chunks_exact(1024).enumerate() {
            pixels.extend(
                plane
                    .iter()
                    .map(|&p| (p as f32 / 255.0 - norm.mean[c]) / norm.std[c]),
            );
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        labels,
        variant.num_classes(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_shape: [usize; 3],
    /// Scale of the class prototypes relative to unit pixel noise.
    pub margin: f32,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(
                "synthetic.num_classes",
                "need at least two classes",
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config(
                "synthetic.samples_per_class",
                "must be positive",
            ));
        }
        if self.image_shape.contains(&0) {
            return Err(Error::config(
                "synthetic.image_shape",
                "extents must be positive",
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("synthetic.margin", "must be positive"));
        }
        Ok(())
    }
}

/// Unit-RMS class prototype: a per-channel offset plus a few low-frequency
/// plane waves.
fn prototype(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut p = vec![0f32; c * h * w];
    for ch in 0..c {
        let offset: f32 = StandardNormal.sample(rng);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                let amp: f32 = StandardNormal.sample(rng);
                (
                    amp,
                    rng.random_range(0..3) as f32,
                    rng.random_range(0..3) as f32,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = offset;
                for &(a, fy, fx, phase) in &waves {
                    v += a
                        * (2.0 * PI * (fy * y as f32 / h as f32 + fx * x as f32 / w as f32)
                            + phase)
                            .cos();
                }
                p[(ch * h + y) * w + x] = v;
            }
        }
    }
    let rms = (p.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / p.len() as f64).sqrt() as f32;
    p.iter_mut().for_each(|v| *v /= rms.max(1e-6));
    p
}

/// Sample `i` belongs to class `i % num_classes`, so any prefix whose length
/// is a multiple of the class count is balanced.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| prototype(spec.image_shape, &mut rng))
        .collect();
    let n = spec.num_classes * spec.samples_per_class;
    let dim: usize = spec.image_shape.iter().product();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        labels.push(class);
        data.extend(protos[class].iter().map(|&p| {
            let z: f32 = StandardNormal.sample(&mut rng);
            spec.margin * p + z
        }));
    }
    let [c, h, w] = spec.image_shape;
    Dataset::new(
        Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        spec.num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(margin: f32) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 30,
            image_shape: [3, 8, 8],
            margin,
            seed: 42,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&spec(1.0)).unwrap();
        let b = generate_synthetic(&spec(1.0)).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 30);
        }
        let other = generate_synthetic(&SyntheticDatasetSpec {
            seed: 43,
            ..spec(1.0)
        })
        .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn large_margin_nearest_centroid_is_perfect() {
        let d = generate_synthetic(&spec(3.0)).unwrap();
        let dim = 3 * 8 * 8;
        let (train, test) = d.split_at(80);
        let mut centroids = vec![vec![0f64; dim]; 4];
        for (i, &l) in train.labels.iter().enumerate() {
            for (c, &v) in centroids[l]
                .iter_mut()
                .zip(&train.images.data()[i * dim..(i + 1) * dim])
            {
                *c += v as f64 / 20.0;
            }
        }
        for (i, &l) in test.labels.iter().enumerate() {
            let x = &test.images.data()[i * dim..(i + 1) * dim];
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(x)
                        .map(|(c, &v)| (c - v as f64).powi(2))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(x)
                        .map(|(c, &v)| (c - v as f64).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best, l);
        }
    }

    fn write_file(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    fn record(labels: &[u8], fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = labels.to_vec();
        r.extend((0..CIFAR_PIXELS).map(fill));
        r
    }

    #[test]
    fn cifar10_fixture_parses() {
        let mut bytes = record(&[3], |i| (i % 256) as u8);
        bytes.extend(record(&[9], |i| if i < 1024 { 255 } else { 0 }));
        let f = write_file(&bytes);
        let d = load_cifar_binary(
            f.path(),
            CifarVariant::C10,
            &Normalization::identity(),
            Some(2),
        )
        .unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        // record 0, green plane, row 0, column 5 is byte 1024 + 5
        assert_eq!(d.images.data()[1024 + 5], ((1024 + 5) % 256) as f32 / 255.0);
        assert_eq!(d.images.data()[CIFAR_PIXELS], 1.0);
        assert_eq!(d.images.data()[CIFAR_PIXELS + 1024], 0.0);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let f = write_file(&record(&[7, 42], |_| 128));
        let norm = Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let d = load_cifar_binary(f.path(), CifarVariant::C100, &norm, None).unwrap();
        assert_eq!(d.labels, vec![42]);
        assert!((d.images.data()[0] - (128.0 / 255.0 - 0.5) / 0.5).abs() < 1e-7);
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let f = write_file(&[]);
        assert!(matches!(
            load_cifar_binary(
                f.path(),
                CifarVariant::C10,
                &Normalization::identity(),
                None
            ),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bytes = record(&[1], |_| 0);
        bytes.extend([2, 0, 0]);
        let f = write_file(&bytes);
        assert!(matches!(
            load_cifar_binary(
                f.path(),
                CifarVariant::C10,
                &Normalization::identity(),
                None
            ),
            Err(Error::Format { offset: 3073, .. })
        ));
        let f = write_file(&record(&[1], |_| 0));
        assert!(load_cifar_binary(
            f.path(),
            CifarVariant::C10,
            &Normalization::identity(),
            Some(2)
        )
        .is_err());
        let f = write_file(&record(&[10], |_| 0));
        assert!(load_cifar_binary(
            f.path(),
            CifarVariant::C10,
            &Normalization::identity(),
            None
        )
        .is_err());
    }
}
