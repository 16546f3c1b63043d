//! Datasets: a seeded synthetic generator and the CIFAR-10 binary format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Normalization;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tensor};

/// Images stored normalized, `[N×C×H×W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Real>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub normalization: Normalization,
}

/// Random crop after zero padding (zero is the channel mean once
/// normalized) and a horizontal flip with probability one half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { pad: 4, flip: true }
    }
}

impl Augment {
    /// Augmented copy of one `[C×H×W]` image; randomness comes from `r`.
    pub fn apply(&self, src: &[Real], channels: usize, height: usize, width: usize, r: &mut Rng) -> Vec<Real> {
        let dy = r.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let dx = r.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let flip = self.flip && r.random_bool(0.5);
        let mut out = vec![0.0; src.len()];
        for c in 0..channels {
            for y in 0..height {
                let sy = y as isize + dy;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for x in 0..width {
                    let xx = if flip { width - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    out[(c * height + y) * width + x] = src[(c * height + sy as usize) * width + sx as usize];
                }
            }
        }
        out
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[Real] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images `[1×C×H×W]` for a single index.
    pub fn single(&self, i: usize) -> Result<Tensor> {
        self.batch(&[i], None).map(|(x, _)| x)
    }

    /// Gather a batch. With `augment = Some((aug, seed, epoch))` every image
    /// is transformed by the stream keyed `(seed, epoch, index)`.
    pub fn batch(&self, indices: &[usize], augment: Option<(&Augment, u64, u64)>) -> Result<(Tensor, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("index {i} outside dataset of {}", self.len())));
            }
            match augment {
                Some((aug, seed, epoch)) => {
                    let mut r = rng::stream(seed, epoch, i as u64);
                    data.extend(aug.apply(self.image(i), self.channels, self.height, self.width, &mut r));
                }
                None => data.extend_from_slice(self.image(i)),
            }
            labels.push(self.labels[i]);
        }
        let x = Tensor::new([indices.len(), self.channels, self.height, self.width], data)?;
        Ok((x, labels))
    }

    /// The first `count` images.
    pub fn take(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        Dataset {
            images: self.images[..count * self.image_len()].to_vec(),
            labels: self.labels[..count].to_vec(),
            normalization: self.normalization.clone(),
            ..*self
        }
    }
}

/// Visiting order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, epoch, u64::MAX));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    /// Square image side.
    pub size: usize,
    pub count: usize,
    /// Half-width of the uniform background noise.
    pub noise: Real,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            size: 16,
            count: 512,
            noise: 0.5,
        }
    }
}

const PALETTE: [[Real; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Whether cell `(y, x)` of an `s×s` patch belongs to shape `kind`:
/// 0 filled square, 1 plus sign, 2 diagonal cross.
fn in_shape(kind: usize, y: usize, x: usize, s: usize) -> bool {
    match kind {
        0 => true,
        1 => y == s / 2 || x == s / 2,
        _ => y == x || y + x == s - 1,
    }
}

/// Image `i` has class `i mod K`. The class picks a colour (`k mod 6`) and a
/// shape (`(k + k/6) mod 3`), painted as an `(size/4 + 1)`-pixel patch at a
/// random position over uniform noise. Each image draws from the stream
/// keyed `(seed, 0, i)`.
pub fn synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.size < 4 || spec.count == 0 || !(spec.noise >= 0.0) {
        return Err(Error::config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let (side, s) = (spec.size, spec.size / 4 + 1);
    let plane = side * side;
    let mut images = Vec::with_capacity(spec.count * 3 * plane);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let k = i % spec.classes;
        let mut r = rng::stream(seed, 0, i as u64);
        let mut img: Vec<Real> = (0..3 * plane)
            .map(|_| {
                if spec.noise > 0.0 {
                    r.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                }
            })
            .collect();
        let (oy, ox) = (r.random_range(0..=side - s), r.random_range(0..=side - s));
        let colour = PALETTE[k % PALETTE.len()];
        let kind = (k + k / PALETTE.len()) % 3;
        for y in 0..s {
            for x in 0..s {
                if in_shape(kind, y, x, s) {
                    for (c, &v) in colour.iter().enumerate() {
                        img[c * plane + (oy + y) * side + ox + x] = v;
                    }
                }
            }
        }
        images.extend(img);
        labels.push(k);
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: side,
        width: side,
        classes: spec.classes,
        normalization: Normalization {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        },
    })
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Parse CIFAR-10 records: one label byte (0–9) then 1024 red, green and
/// blue bytes each, row-major 32×32. Byte `v` of channel `c` becomes
/// `(v/255 − mean_c)/std_c`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records; trailing record starts at offset {offset}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Data(format!(
                "label {label} at offset {} outside 0-9",
                r * CIFAR_RECORD
            )));
        }
        labels.push(label as usize);
        for (i, &v) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            images.push(((v as f64 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]) as Real);
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
        normalization: Normalization {
            mean: CIFAR_MEAN.to_vec(),
            std: CIFAR_STD.to_vec(),
        },
    })
}

pub fn read_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Load the training or test split from a directory of `.bin` batches, or
/// a single batch file.
pub fn load_cifar10(path: &Path, train: bool) -> Result<Dataset> {
    if path.is_file() {
        return read_cifar10_file(path);
    }
    let files: Vec<&str> = if train { CIFAR_TRAIN_FILES.to_vec() } else { vec![CIFAR_TEST_FILE] };
    let mut out: Option<Dataset> = None;
    for f in files {
        let d = read_cifar10_file(&path.join(f))?;
        match &mut out {
            None => out = Some(d),
            Some(acc) => {
                acc.images.extend(d.images);
                acc.labels.extend(d.labels);
            }
        }
    }
    Ok(out.expect("at least one file"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            count: 100,
            ..SyntheticSpec::default()
        };
        let a = synthetic(&spec, 3).unwrap();
        assert_eq!(a, synthetic(&spec, 3).unwrap());
        assert_ne!(a.images, synthetic(&spec, 4).unwrap().images);
        let mut counts = [0usize; 3];
        for &l in &a.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let spec = SyntheticSpec {
            count: 300,
            ..SyntheticSpec::default()
        };
        let train = synthetic(&spec, 1).unwrap();
        let test = synthetic(&spec, 2).unwrap();
        let n = train.image_len();
        let mut centroids = vec![vec![0.0; n]; spec.classes];
        let mut counts = vec![0.0; spec.classes];
        for i in 0..train.len() {
            counts[train.labels[i]] += 1.0;
            for (c, v) in centroids[train.labels[i]].iter_mut().zip(train.image(i)) {
                *c += v;
            }
        }
        for (c, k) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= k);
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let dist = |c: &Vec<Real>| c.iter().zip(test.image(i)).map(|(a, b)| (a - b) * (a - b)).sum::<Real>();
                let best = (0..spec.classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == test.labels[i]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 1.0 / spec.classes as f64 + 0.1, "accuracy {acc}");
    }

    #[test]
    fn cifar_normalization_and_count() {
        let mut bytes = record(3, 255);
        bytes.extend(record(9, 0));
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, [3, 9]);
        for c in 0..3 {
            let expected = ((1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]) as Real;
            assert_eq!(d.image(0)[c * 1024 + 17], expected);
            assert_eq!(d.image(1)[c * 1024], (-CIFAR_MEAN[c] / CIFAR_STD[c]) as Real);
        }
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
        assert_eq!(30_730_000 % CIFAR_RECORD, 0);
    }

    #[test]
    fn cifar_rejects_bad_label_with_offset() {
        let mut bytes = record(0, 1);
        bytes.extend(record(255, 1));
        let msg = parse_cifar10(&bytes).unwrap_err().to_string();
        assert!(msg.contains("label 255") && msg.contains("offset 3073"), "{msg}");
    }

    #[test]
    fn cifar_rejects_misaligned_file_with_offset() {
        let mut bytes = record(0, 1);
        bytes.extend(&record(1, 1)[..100]);
        let msg = parse_cifar10(&bytes).unwrap_err().to_string();
        assert!(msg.contains("offset 3073"), "{msg}");
        assert!(parse_cifar10(&[]).is_err());
    }

    #[test]
    fn cifar_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
            std::fs::write(dir.path().join(f), record(i as u8, 7)).unwrap();
        }
        std::fs::write(dir.path().join(CIFAR_TEST_FILE), record(9, 7)).unwrap();
        assert_eq!(load_cifar10(dir.path(), true).unwrap().labels, [0, 1, 2, 3, 4]);
        assert_eq!(load_cifar10(dir.path(), false).unwrap().labels, [9]);
        let missing = load_cifar10(&dir.path().join("nope"), true).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
    }

    #[test]
    fn augmentation_is_keyed_and_shape_preserving() {
        let d = synthetic(&SyntheticSpec::default(), 0).unwrap();
        let aug = Augment::default();
        let (a, _) = d.batch(&[0, 1, 2], Some((&aug, 5, 1))).unwrap();
        let (b, _) = d.batch(&[0, 1, 2], Some((&aug, 5, 1))).unwrap();
        let (c, _) = d.batch(&[0, 1, 2], Some((&aug, 5, 2))).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), [3, 3, 16, 16]);
        let identity = Augment { pad: 0, flip: false };
        let (x, _) = d.batch(&[4], Some((&identity, 5, 1))).unwrap();
        assert_eq!(x.data(), d.image(4));
    }

    #[test]
    fn flip_mirrors_rows() {
        let img: Vec<Real> = (0..4).map(|v| v as Real).collect();
        let aug = Augment { pad: 0, flip: true };
        let flipped = (0..64)
            .map(|e| aug.apply(&img, 1, 1, 4, &mut rng::stream(0, e, 0)))
            .find(|v| *v != img)
            .unwrap();
        assert_eq!(flipped, [3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(50, 1, 2);
        assert_eq!(o, epoch_order(50, 1, 2));
        assert_ne!(o, epoch_order(50, 1, 3));
        o.sort_unstable();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
