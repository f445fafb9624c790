//! Datasets: seeded synthetic vision and text tasks, the CIFAR-10 binary
//! reader, and per-epoch shuffled batching.
//!
//! Samples `0..n_train` form the train split and `n_train..len` the
//! validation split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, Stream};
use crate::tensor::archive::{ArchiveData, ArchiveEntry};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: usize = 0;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_SIDE: usize = 32;
pub const CIFAR10_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Inputs {
    /// `[n, channels, side, side]` pixels in `[0, 1]`.
    Images {
        channels: usize,
        side: usize,
        pixels: Vec<f32>,
    },
    /// `[n, seq_len]` token ids, left-padded with [`PAD_ID`].
    Tokens { seq_len: usize, ids: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Inputs,
    labels: Vec<usize>,
    n_classes: usize,
    n_train: usize,
}

impl Dataset {
    pub fn new(
        inputs: Inputs,
        labels: Vec<usize>,
        n_classes: usize,
        n_train: usize,
    ) -> Result<Self> {
        let per_sample = match &inputs {
            Inputs::Images {
                channels,
                side,
                pixels,
            } => {
                if pixels.len() % (channels * side * side).max(1) != 0 {
                    return Err(Error::Domain(
                        "pixel buffer is not a whole number of images".into(),
                    ));
                }
                pixels.len() / (channels * side * side).max(1)
            }
            Inputs::Tokens { seq_len, ids } => ids.len() / (*seq_len).max(1),
        };
        if per_sample != labels.len() {
            return Err(Error::Domain(format!(
                "{per_sample} inputs but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if n_train > labels.len() {
            return Err(Error::Domain(format!(
                "n_train {n_train} exceeds {} samples",
                labels.len()
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
            n_train,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_val(&self) -> usize {
        self.len() - self.n_train
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Train => (0..self.n_train).collect(),
            Split::Val => (self.n_train..self.len()).collect(),
        }
    }

    /// Model input and labels for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Batch<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let batch = match &self.inputs {
            Inputs::Images {
                channels,
                side,
                pixels,
            } => {
                let per = channels * side * side;
                let mut data = Vec::with_capacity(indices.len() * per);
                for &i in indices {
                    data.extend(
                        pixels[i * per..(i + 1) * per]
                            .iter()
                            .map(|&v| T::from_f64(v as f64)),
                    );
                }
                Batch::Images(Tensor::new(
                    vec![indices.len(), *channels, *side, *side],
                    data,
                )?)
            }
            Inputs::Tokens { seq_len, ids } => {
                let mut out = Vec::with_capacity(indices.len() * seq_len);
                for &i in indices {
                    out.extend_from_slice(&ids[i * seq_len..(i + 1) * seq_len]);
                }
                Batch::Tokens {
                    ids: out,
                    batch: indices.len(),
                    seq_len: *seq_len,
                }
            }
        };
        Ok((batch, labels))
    }

    /// FNV-1a over labels and raw input bytes.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(&(self.n_train as u64).to_le_bytes());
        for &l in &self.labels {
            h.write(&(l as u64).to_le_bytes());
        }
        match &self.inputs {
            Inputs::Images { pixels, .. } => pixels.iter().for_each(|p| h.write(&p.to_le_bytes())),
            Inputs::Tokens { ids, .. } => {
                ids.iter().for_each(|&i| h.write(&(i as u64).to_le_bytes()))
            }
        }
        h.0
    }

    /// Inputs and labels as tensor-archive entries (`inputs`, `labels`).
    pub fn to_archive_entries(&self) -> Vec<ArchiveEntry> {
        let n = self.len();
        let inputs = match &self.inputs {
            Inputs::Images {
                channels,
                side,
                pixels,
            } => ArchiveEntry {
                name: "inputs".into(),
                shape: vec![n, *channels, *side, *side],
                data: ArchiveData::F32(pixels.clone()),
            },
            Inputs::Tokens { seq_len, ids } => ArchiveEntry {
                name: "inputs".into(),
                shape: vec![n, *seq_len],
                data: ArchiveData::F64(ids.iter().map(|&i| i as f64).collect()),
            },
        };
        let labels = ArchiveEntry {
            name: "labels".into(),
            shape: vec![n],
            data: ArchiveData::F64(self.labels.iter().map(|&l| l as f64).collect()),
        };
        vec![inputs, labels]
    }

    /// Train split of `self` followed by every sample of `val` as validation.
    pub fn with_validation(self, val: Dataset) -> Result<Dataset> {
        if self.n_classes != val.n_classes {
            return Err(Error::Domain("class counts differ".into()));
        }
        let n_train = self.n_train;
        let inputs = match (self.inputs, val.inputs) {
            (
                Inputs::Images {
                    channels,
                    side,
                    mut pixels,
                },
                Inputs::Images {
                    channels: c2,
                    side: s2,
                    pixels: p2,
                },
            ) if channels == c2 && side == s2 => {
                pixels.truncate(n_train * channels * side * side);
                pixels.extend(p2);
                Inputs::Images {
                    channels,
                    side,
                    pixels,
                }
            }
            (
                Inputs::Tokens { seq_len, mut ids },
                Inputs::Tokens {
                    seq_len: l2,
                    ids: i2,
                },
            ) if seq_len == l2 => {
                ids.truncate(n_train * seq_len);
                ids.extend(i2);
                Inputs::Tokens { seq_len, ids }
            }
            _ => {
                return Err(Error::Domain(
                    "train and validation inputs differ in kind or shape".into(),
                ))
            }
        };
        let mut labels = self.labels;
        labels.truncate(n_train);
        labels.extend(val.labels);
        Dataset::new(inputs, labels, self.n_classes, n_train)
    }
}

#[derive(Clone, Copy)]
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Class-template images: every class has a fixed random template, and each
/// sample is its template plus Gaussian noise, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionGen {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub side: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub n_classes: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn one() -> usize {
    1
}

fn default_noise() -> f64 {
    0.3
}

impl VisionGen {
    /// Class templates, `[n_classes, channels·side·side]`.
    pub fn templates(&self) -> Vec<Vec<f32>> {
        let mut r = rng::stream(self.seed, Stream::Data);
        let per = self.channels * self.side * self.side;
        (0..self.n_classes)
            .map(|_| (0..per).map(|_| r.gen::<f64>() as f32).collect())
            .collect()
    }
}

pub fn gen_vision(spec: &VisionGen) -> Result<Dataset> {
    if spec.side == 0 || spec.channels == 0 || spec.n_classes < 2 || spec.n_train + spec.n_val == 0
    {
        return Err(Error::Domain(format!("invalid vision generator {spec:?}")));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Domain(format!(
            "noise_std {} must be finite and non-negative",
            spec.noise_std
        )));
    }
    let templates = spec.templates();
    let n = spec.n_train + spec.n_val;
    let per = spec.channels * spec.side * spec.side;
    let mut noise = rng::stream_at(spec.seed, Stream::Data, 1);
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.n_classes;
        labels.push(label);
        for &t in &templates[label] {
            let v = t as f64 + spec.noise_std * rng::normal(&mut noise);
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(
        Inputs::Images {
            channels: spec.channels,
            side: spec.side,
            pixels,
        },
        labels,
        spec.n_classes,
        spec.n_train,
    )
}

/// Class-conditional token sequences. Each class owns a disjoint block of
/// `markers_per_class` marker tokens. Every content token is, with
/// probability `marker_rate`, one of the sample's class markers, and
/// otherwise uniform over all non-pad ids. Lengths are uniform in
/// `[min_len, max_len]`; shorter sequences are left-padded with id 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextGen {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub n_classes: usize,
    #[serde(default = "default_markers")]
    pub markers_per_class: usize,
    #[serde(default = "default_marker_rate")]
    pub marker_rate: f64,
    /// Shifts the marker blocks, so two tasks over one vocabulary can use disjoint markers.
    #[serde(default)]
    pub marker_offset: usize,
}

fn default_markers() -> usize {
    4
}

fn default_marker_rate() -> f64 {
    0.3
}

impl TextGen {
    pub fn markers(&self, class: usize) -> std::ops::Range<usize> {
        let start = 1 + self.marker_offset + class * self.markers_per_class;
        start..start + self.markers_per_class
    }
}

pub fn gen_text(spec: &TextGen) -> Result<Dataset> {
    let bad = |m: String| Err(Error::Domain(m));
    if spec.n_classes < 2 || spec.markers_per_class == 0 || spec.n_train + spec.n_val == 0 {
        return bad(format!("invalid text generator {spec:?}"));
    }
    if 1 + spec.marker_offset + spec.n_classes * spec.markers_per_class > spec.vocab_size {
        return bad(format!(
            "vocab_size {} cannot hold {} classes x {} markers at offset {}",
            spec.vocab_size, spec.n_classes, spec.markers_per_class, spec.marker_offset
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return bad(format!(
            "need 0 < min_len <= max_len, got {}..{}",
            spec.min_len, spec.max_len
        ));
    }
    if !(0.0..=1.0).contains(&spec.marker_rate) {
        return bad(format!("marker_rate {} outside [0, 1]", spec.marker_rate));
    }
    let n = spec.n_train + spec.n_val;
    let mut r = rng::stream(spec.seed, Stream::Data);
    let mut ids = Vec::with_capacity(n * spec.max_len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % spec.n_classes;
        labels.push(label);
        let len = r.gen_range(spec.min_len..=spec.max_len);
        ids.extend(std::iter::repeat(PAD_ID).take(spec.max_len - len));
        let markers = spec.markers(label);
        for _ in 0..len {
            let tok = if r.gen::<f64>() < spec.marker_rate {
                r.gen_range(markers.clone())
            } else {
                r.gen_range(1..spec.vocab_size)
            };
            ids.push(tok);
        }
    }
    Dataset::new(
        Inputs::Tokens {
            seq_len: spec.max_len,
            ids,
        },
        labels,
        spec.n_classes,
        spec.n_train,
    )
}

/// Reads the CIFAR-10 binary layout: records of one label byte (0-9) then
/// 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each 32x32 row-major),
/// scaled to `[0, 1]`. Every record lands in the train split.
pub fn read_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes, path)
}

pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::format(
            path,
            format!(
                "length {} is not a positive multiple of {CIFAR10_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::format(
                path,
                format!("record {i}: label byte {label} > 9"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Inputs::Images {
            channels: 3,
            side: CIFAR10_SIDE,
            pixels,
        },
        labels,
        CIFAR10_CLASSES,
        n,
    )
}

/// Sample order for one epoch: `indices` shuffled by `(seed, epoch)` and cut
/// into batches of `batch_size`, keeping a final partial batch.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut r = rng::stream_at(seed, Stream::Shuffle, epoch as u32);
    order.shuffle(&mut r);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
