//! Datasets: MNIST IDX files, CIFAR-10 binary batches, synthetic blobs.
//!
//! Loaders return pixels scaled to `[0, 1]`. Standardization is a separate
//! step so that a validation split can reuse the training constants.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Per-channel `(x - mean) / std` constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_count: usize, split: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::dim("images", format!("expected [N, C, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim("samples", format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Contract(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self { images, labels, class_count, split: split.into(), normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Per-channel mean and population std over the whole split.
    pub fn fit_normalization(&self) -> Normalization {
        let [n, c, h, w] = self.images.shape()[..] else { unreachable!("checked in new") };
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for i in 0..n {
                let at = (i * c + ch) * plane;
                for &v in &self.images.data()[at..at + plane] {
                    s += v as f64;
                }
            }
            let count = (n * plane) as f64;
            let m = s / count;
            for i in 0..n {
                let at = (i * c + ch) * plane;
                for &v in &self.images.data()[at..at + plane] {
                    ss += (v as f64 - m).powi(2);
                }
            }
            mean[ch] = m;
            std[ch] = (ss / count).sqrt();
        }
        Normalization { mean, std }
    }

    /// Applies `norm` in place. A zero std leaves the channel centred only.
    pub fn apply_normalization(&mut self, norm: &Normalization) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::State(format!("split `{}` is already standardized", self.split)));
        }
        let [_, c, h, w] = self.images.shape()[..] else { unreachable!("checked in new") };
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::dim("channels", format!("{} constants for {c} channels", norm.mean.len())));
        }
        let plane = h * w;
        for (k, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            let s = if norm.std[ch] > 0.0 { norm.std[ch] } else { 1.0 };
            for v in chunk {
                *v = ((*v as f64 - norm.mean[ch]) / s) as f32;
            }
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }

    /// Fits constants on this split and applies them.
    pub fn standardize(&mut self) -> Result<Normalization> {
        let norm = self.fit_normalization();
        self.apply_normalization(&norm)?;
        Ok(norm)
    }

    /// `k` samples with equal per-class counts (the first `k % classes`
    /// classes get one extra), chosen by a seeded shuffle and kept in their
    /// original order.
    pub fn stratified_subset(&self, k: usize, seed: u64) -> Result<Dataset> {
        let classes = self.class_count;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = rng::stream(seed, Domain::Subset);
        let mut chosen = Vec::with_capacity(k);
        for (c, idx) in by_class.iter_mut().enumerate() {
            let want = k / classes + usize::from(c < k % classes);
            if idx.len() < want {
                return Err(Error::Config(format!(
                    "subset of {k} needs {want} samples of class {c}, split `{}` has {}",
                    self.split,
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            chosen.extend_from_slice(&idx[..want]);
        }
        chosen.sort_unstable();
        self.select(&chosen)
    }

    /// A new dataset holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch::<f32>(indices)?;
        Ok(Dataset {
            images,
            labels,
            class_count: self.class_count,
            split: self.split.clone(),
            normalization: self.normalization.clone(),
        })
    }

    /// Gathers samples into a `[k, C, H, W]` tensor of `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend(self.images.data()[i * len..(i + 1) * len].iter().map(|&v| T::lit(v as f64)));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::from_vec(&shape, data)?, labels))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| Error::Parse {
        offset: offset as u64,
        detail: format!("truncated header: need 4 bytes, file has {}", bytes.len()),
    })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad magic: expected {expected:#010x}, found {found:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        detail: format!("truncated payload: expected {len} bytes from offset {start}, file ends early"),
    })
}

/// Parses an IDX image file: `[N, 1, rows, cols]` scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Parse { offset: 8, detail: format!("zero image size {rows}x{cols}") });
    }
    let px = payload(bytes, 16, n * rows * cols)?;
    if bytes.len() != 16 + px.len() {
        return Err(Error::Parse {
            offset: (16 + px.len()) as u64,
            detail: format!("{} trailing bytes after {n} images", bytes.len() - 16 - px.len()),
        });
    }
    Tensor::from_vec(&[n, 1, rows, cols], px.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let raw = payload(bytes, 8, n)?;
    if bytes.len() != 8 + n {
        return Err(Error::Parse {
            offset: (8 + n) as u64,
            detail: format!("{} trailing bytes after {n} labels", bytes.len() - 8 - n),
        });
    }
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// MNIST-style image and label files; 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            detail: format!(
                "{} has {} images but {} has {} labels",
                images_path.display(),
                images.shape()[0],
                labels_path.display(),
                labels.len()
            ),
        });
    }
    let split = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(images, labels, 10, split)
}

/// The standard MNIST file pair names in a directory: `(train, test)`.
pub fn mnist_files(dir: &Path) -> [(std::path::PathBuf, std::path::PathBuf); 2] {
    [
        (dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")),
        (dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte")),
    ]
}

/// MNIST train and test splits from `dir`, pixels in `[0, 1]`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let [(ti, tl), (vi, vl)] = mnist_files(dir);
    let mut train = load_idx(&ti, &tl)?;
    let mut test = load_idx(&vi, &vl)?;
    train.split = "mnist-train".into();
    test.split = "mnist-test".into();
    Ok((train, test))
}

fn to_byte(v: f32) -> Result<u8> {
    let b = (v as f64 * 255.0).round();
    if !(0.0..=255.0).contains(&b) {
        return Err(Error::Contract(format!("pixel {v} is not in [0, 1]; write unstandardized data")));
    }
    Ok(b as u8)
}

/// Inverse of [`parse_idx_images`] and [`parse_idx_labels`] for
/// single-channel data in `[0, 1]`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [n, c, h, w] = ds.images.shape()[..] else { unreachable!("checked in new") };
    if c != 1 {
        return Err(Error::dim("channels", format!("IDX images are single-channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in ds.images.data() {
        img.push(to_byte(v)?);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit a byte")))?);
    }
    Ok((img, lab))
}

/// Parses CIFAR-10 binary records (label byte, then 3x32x32 pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Parse {
            offset: (whole * CIFAR_RECORD) as u64,
            detail: format!("truncated record {whole}: {} of {CIFAR_RECORD} bytes", bytes.len() % CIFAR_RECORD),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut px = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Parse {
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label {} outside [0, 10)", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        px.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::from_vec(&[n, 3, 32, 32], px)?, labels))
}

/// Concatenated CIFAR-10 batch files, pixels in `[0, 1]`.
pub fn read_cifar10<P: AsRef<Path>>(files: &[P]) -> Result<Dataset> {
    let mut px = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (t, l) = parse_cifar10(&read(f.as_ref())?)?;
        px.extend_from_slice(t.data());
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], px)?, labels, 10, "cifar10")
}

/// [`read_cifar10`] followed by standardization with the split's own
/// constants (kept in `normalization`).
pub fn load_cifar10<P: AsRef<Path>>(files: &[P]) -> Result<Dataset> {
    let mut ds = read_cifar10(files)?;
    ds.standardize()?;
    Ok(ds)
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(Error::dim("sample", format!("CIFAR-10 is [3, 32, 32], got {:?}", ds.sample_shape())));
    }
    let len = ds.sample_len();
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} does not fit a byte")))?);
        for &v in &ds.images.data()[i * len..(i + 1) * len] {
            out.push(to_byte(v)?);
        }
    }
    Ok(out)
}

/// Balanced Gaussian clusters that a linear classifier separates exactly.
///
/// Class centres are random points at distance 4 from the origin; every
/// sample lies within `0.4 * d_min` of its own centre (`d_min` the closest
/// centre pair), so the nearest-centre rule, which is linear, labels every
/// sample correctly. Labels cycle `0, 1, .., classes-1`.
pub fn synth_blobs(classes: usize, samples: usize, shape: &[usize], seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let dims: usize = shape.iter().product();
    if dims == 0 || shape.len() != 3 {
        return Err(Error::Config(format!("sample shape must be [C, H, W] with no zero axis, got {shape:?}")));
    }
    let mut rng = rng::stream(seed, Domain::Data);
    let mut centres = Vec::with_capacity(classes);
    for _ in 0..classes {
        let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        centres.push(v.into_iter().map(|x| 4.0 * x / norm).collect::<Vec<f64>>());
    }
    let mut d_min = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d = centres[a].iter().zip(&centres[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            d_min = d_min.min(d);
        }
    }
    let radius = 0.4 * d_min;
    let spread = 0.25 * d_min / (dims as f64).sqrt();
    let mut data = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        let mut noise: Vec<f64> = (0..dims).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = noise.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > radius {
            noise.iter_mut().for_each(|x| *x *= radius / norm);
        }
        data.extend(centres[c].iter().zip(&noise).map(|(m, e)| (m + e) as f32));
        labels.push(c);
    }
    let mut full = vec![samples];
    full.extend_from_slice(shape);
    Dataset::new(Tensor::from_vec(&full, data)?, labels, classes, "synthetic")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 1]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (img, lab)
    }

    #[test]
    fn parses_handmade_idx() {
        let (img, lab) = fixture();
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(t.data()[7], 1.0 / 255.0);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let (img, lab) = fixture();
        let ds = Dataset::new(parse_idx_images(&img).unwrap(), parse_idx_labels(&lab).unwrap(), 10, "t").unwrap();
        assert_eq!(encode_idx(&ds).unwrap(), (img, lab));
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let (mut img, lab) = fixture();
        let mut bad = img.clone();
        bad[3] = 1;
        match parse_idx_images(&bad) {
            Err(Error::Parse { offset: 0, detail }) => {
                assert!(detail.contains("0x00000803") && detail.contains("0x00000801"))
            }
            other => panic!("{other:?}"),
        }
        img.pop();
        assert!(matches!(parse_idx_images(&img), Err(Error::Parse { offset: 23, .. })));
        assert!(matches!(parse_idx_labels(&lab[..6]), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lab) = fixture();
        lab[7] = 1;
        lab.pop();
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), lab).unwrap();
        let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(matches!(load_idx(&dir.path().join("x"), &dir.path().join("l")), Err(Error::Io { .. })));
    }

    fn cifar_record(label: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(|i| (i % 256) as u8));
        r
    }

    #[test]
    fn cifar_records() {
        let (t, l) = parse_cifar10(&cifar_record(7)).unwrap();
        assert_eq!((t.shape(), l), (&[1, 3, 32, 32][..], vec![7]));
        assert_eq!(t.data()[255], 1.0);
        let five: Vec<u8> = (0..5).flat_map(cifar_record).collect();
        assert_eq!(parse_cifar10(&five).unwrap().1.len(), 5);
        assert!(matches!(
            parse_cifar10(&five[..five.len() - 10]),
            Err(Error::Parse { offset, .. }) if offset == 4 * CIFAR_RECORD as u64
        ));
    }

    #[test]
    fn cifar_round_trip_and_standardize() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..4)
            .flat_map(|i| {
                let mut r = cifar_record(i);
                r[1 + i as usize] = 200;
                r
            })
            .collect();
        let p = dir.path().join("b.bin");
        fs::write(&p, &bytes).unwrap();
        assert_eq!(encode_cifar10(&read_cifar10(&[&p]).unwrap()).unwrap(), bytes);
        let ds = load_cifar10(&[&p]).unwrap();
        let again = ds.fit_normalization();
        for c in 0..3 {
            assert!(again.mean[c].abs() <= 1e-6);
            assert!((again.std[c] - 1.0).abs() <= 1e-4);
        }
        assert!(ds.normalization.is_some());
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = synth_blobs(2, 64, &[1, 2, 2], 5).unwrap();
        assert_eq!(a.images.shape(), &[64, 1, 2, 2]);
        assert_eq!(a.class_counts(), vec![32, 32]);
        assert_eq!(a, synth_blobs(2, 64, &[1, 2, 2], 5).unwrap());
        assert_ne!(a, synth_blobs(2, 64, &[1, 2, 2], 6).unwrap());
    }

    #[test]
    fn blobs_are_separated_by_nearest_centre() {
        let ds = synth_blobs(4, 200, &[1, 3, 3], 2).unwrap();
        let d = 9;
        let mut means = vec![vec![0.0f64; d]; 4];
        for (i, &l) in ds.labels.iter().enumerate() {
            for (m, &v) in means[l].iter_mut().zip(&ds.images.data()[i * d..(i + 1) * d]) {
                *m += v as f64 / 50.0;
            }
        }
        for (i, &l) in ds.labels.iter().enumerate() {
            let x = &ds.images.data()[i * d..(i + 1) * d];
            let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            assert_eq!(best, l);
        }
    }

    #[test]
    fn stratified_subset_is_balanced_and_seeded() {
        let ds = synth_blobs(3, 90, &[1, 1, 2], 1).unwrap();
        let s = ds.stratified_subset(10, 4).unwrap();
        assert_eq!(s.class_counts(), vec![4, 3, 3]);
        assert_eq!(s, ds.stratified_subset(10, 4).unwrap());
        assert!(matches!(ds.stratified_subset(91, 4), Err(Error::Config(_))));
    }

    #[test]
    fn train_constants_carry_to_validation() {
        let mut train = synth_blobs(2, 20, &[2, 2, 2], 1).unwrap();
        let mut val = synth_blobs(2, 10, &[2, 2, 2], 2).unwrap();
        let norm = train.standardize().unwrap();
        val.apply_normalization(&norm).unwrap();
        assert_eq!(val.normalization.as_ref(), Some(&norm));
        assert!(matches!(val.apply_normalization(&norm), Err(Error::State(_))));
    }
}
