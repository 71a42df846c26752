//! Manifest ingestion, image decoding, resizing, normalization and the
//! train/validation split.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output-neuron order.
pub const CLASS_NAMES: [&str; 3] = ["glioma", "meningioma", "pituitary"];
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

pub fn class_index(label: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == label)
}

pub fn one_hot(label: usize) -> Tensor {
    let mut v = vec![0.0; CLASS_NAMES.len()];
    v[label] = 1.0;
    Tensor::new(vec![CLASS_NAMES.len()], v).expect("length matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub label: usize,
    pub split: Option<SplitTag>,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub source: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let counts = self.counts();
        write!(f, "{} images:", self.len())?;
        for (name, n) in CLASS_NAMES.iter().zip(counts) {
            write!(f, " {name} {n}")?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct Row {
    path: String,
    label: String,
    #[serde(default)]
    split: Option<String>,
}

/// Parse manifest text. `base` resolves relative image paths; `source` is
/// only used in error messages.
pub fn parse_manifest(text: &str, base: &Path, source: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let err = |line: usize, msg: String| Error::Manifest {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    for required in ["path", "label"] {
        if !headers.iter().any(|h| h == required) {
            return Err(err(1, format!("header must be `path,label,split`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| err(line, e.to_string()))?;
        if row.path.is_empty() {
            return Err(err(line, "empty image path".into()));
        }
        let label = class_index(&row.label).ok_or_else(|| Error::UnknownLabel {
            path: source.to_path_buf(),
            line,
            label: row.label.clone(),
        })?;
        let split = match row.split.as_deref().unwrap_or("") {
            "" => None,
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            other => return Err(err(line, format!("split must be blank, `train` or `val`, got `{other}`"))),
        };
        let path = base.join(&row.path);
        if !seen.insert(path.clone()) {
            return Err(Error::DuplicatePath {
                path: source.to_path_buf(),
                line,
                image: path,
            });
        }
        entries.push(ManifestEntry {
            path,
            label,
            split,
            line,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        source: source.to_path_buf(),
        entries,
    })
}

/// Read and validate a manifest. Images are decoded later by [`load_samples`].
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, path)
}

/// Decoded grayscale image with raw sample values.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    /// Full-scale value: 255 for 8-bit, 65535 for 16-bit.
    pub max_value: f32,
    pub data: Vec<f32>,
}

pub fn decode_png(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (max_value, data) = match img {
        image::DynamicImage::ImageLuma8(buf) => (255.0, buf.into_raw().into_iter().map(f32::from).collect()),
        image::DynamicImage::ImageLuma16(buf) => (65535.0, buf.into_raw().into_iter().map(f32::from).collect()),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("expected 8- or 16-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    if width == 0 || height == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: "image has no pixels".into(),
        });
    }
    Ok(GrayImage {
        height,
        width,
        max_value,
        data,
    })
}

/// Bilinear resize of a single-channel row-major image with half-pixel
/// sample centers. Same-size input is returned unchanged.
pub fn resize_bilinear(data: &[f32], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(data.len(), height * width, "image buffer does not match its size");
    if height == out_h && width == out_w {
        return data.to_vec();
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = axis(height, out_h);
    let cols = axis(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let p = |r: usize, c: usize| data[r * width + c] as f64;
            let top = p(r0, c0) + (p(r0, c1) - p(r0, c0)) * fx;
            let bottom = p(r1, c0) + (p(r1, c1) - p(r1, c0)) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

/// Map raw values to [-1, 1] and replicate to 3 channels: `[H, W, 3]`.
pub fn to_model_input(data: &[f32], height: usize, width: usize, max_value: f32) -> Tensor {
    let half = max_value / 2.0;
    let mut out = Vec::with_capacity(data.len() * 3);
    for &v in data {
        let x = (v / half - 1.0).clamp(-1.0, 1.0);
        out.extend_from_slice(&[x, x, x]);
    }
    Tensor::new(vec![height, width, 3], out).expect("length matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]` in [-1, 1].
    pub input: Tensor,
    pub label: usize,
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode_png(path)?;
    let resized = resize_bilinear(&img.data, img.height, img.width, size, size);
    Ok(to_model_input(&resized, size, size, img.max_value))
}

/// Decode, resize and normalize entries in parallel, keeping manifest order.
pub fn load_samples(entries: &[ManifestEntry], size: usize) -> Result<Vec<Sample>> {
    entries
        .par_iter()
        .map(|e| {
            Ok(Sample {
                input: load_image(&e.path, size)?,
                label: e.label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    /// Indices into the dataset, ascending.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub warnings: Vec<String>,
}

fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Partition `ds` into train and validation indices. Entries with a fixed
/// split keep it; the rest are shuffled by `seed` (per class when
/// `stratified`) and the first `floor(fraction * n)` go to training.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64, stratified: bool) -> Result<Split> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!("train_fraction must lie in [0, 1], got {train_fraction}")));
    }
    let mut out = Split::default();
    let mut free: Vec<usize> = Vec::new();
    for (i, e) in ds.entries.iter().enumerate() {
        match e.split {
            Some(SplitTag::Train) => out.train.push(i),
            Some(SplitTag::Val) => out.val.push(i),
            None => free.push(i),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            if ds.entries.iter().all(|e| e.label != c) {
                out.warnings.push(format!("class `{name}` has no samples"));
            }
        }
        (0..CLASS_NAMES.len())
            .map(|c| free.iter().copied().filter(|&i| ds.entries[i].label == c).collect())
            .collect()
    } else {
        vec![free]
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        let k = train_count(group.len(), train_fraction);
        out.train.extend_from_slice(&group[..k]);
        out.val.extend_from_slice(&group[k..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    Ok(out)
}
