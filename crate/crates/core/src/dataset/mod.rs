//! Labelled image manifests, the synthetic benchmark, and seeded splits.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch_graph::ImageSample;
use crate::rng;
use crate::tensor::Tensor;

pub const MAX_AGE: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub age: f64,
    pub split: Option<Split>,
    pub sample: ImageSample,
}

/// An entry that was listed but could not be loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Hex SHA-256 of the label file (or of the generated label table).
    pub checksum: String,
    pub errors: Vec<EntryError>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self) -> Vec<ImageSample> {
        self.entries.iter().map(|e| e.sample.clone()).collect()
    }

    /// Samples assigned to `split`, in manifest order.
    pub fn split_samples(&self, split: Split) -> Vec<ImageSample> {
        self.entries
            .iter()
            .filter(|e| e.split == Some(split))
            .map(|e| e.sample.clone())
            .collect()
    }

    /// `filename,age,split` listing.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,age,split\n");
        for e in &self.entries {
            let split = e.split.map_or("", Split::name);
            out.push_str(&format!("{},{},{split}\n", e.path, e.age));
        }
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn check_age(age: f64, line: usize, path: &str) -> Result<f64> {
    if !(0.0..=MAX_AGE).contains(&age) {
        return Err(Error::Data(format!(
            "labels line {line} ({path}): age {age} outside [0, {MAX_AGE}]"
        )));
    }
    Ok(age)
}

/// Decodes an image, center-crops it to the target aspect ratio, resizes it
/// to `height × width`, and scales channels to [0,1].
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    // largest window with the target aspect ratio
    let (cw, ch) = if w0 * height > h0 * width {
        (h0 * width / height, h0)
    } else {
        (w0, w0 * height / width)
    };
    let (cw, ch) = (cw.max(1), ch.max(1));
    let (x0, y0) = ((w0 - cw) / 2, (h0 - ch) / 2);
    let cropped = image::imageops::crop_imm(&img, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
    let resized = if (cw, ch) == (width, height) {
        cropped
    } else {
        image::imageops::resize(&cropped, width as u32, height as u32, FilterType::Triangle)
    };
    let values = resized.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![height, width, 3], values)
}

/// Reads a `filename,age` CSV and loads each image relative to `root`.
/// Unreadable images are collected in `errors`; bad labels fail the load.
pub fn load_manifest(labels_csv: &Path, root: &Path, height: usize, width: usize) -> Result<DatasetManifest> {
    let bytes = std::fs::read(labels_csv).map_err(|e| Error::io(labels_csv, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", labels_csv.display())))?
        .clone();
    if headers.len() < 2 || &headers[0] != "filename" || &headers[1] != "age" {
        return Err(Error::Data(format!(
            "{}: expected header `filename,age`",
            labels_csv.display()
        )));
    }
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", labels_csv.display())))?;
        let path = record.get(0).unwrap_or_default().to_string();
        let raw_age = record.get(1).unwrap_or_default();
        let age: f64 = raw_age.parse().map_err(|_| {
            Error::Data(format!("labels line {line} ({path}): age `{raw_age}` is not a number"))
        })?;
        let age = check_age(age, line, &path)?;
        if !seen.insert(path.clone()) {
            return Err(Error::Data(format!("labels line {line}: duplicate path {path}")));
        }
        let full = root.join(&path);
        match load_image(&full, height, width).and_then(|px| ImageSample::new(path.clone(), px, Some(age))) {
            Ok(sample) => entries.push(ManifestEntry {
                path,
                age,
                split: None,
                sample,
            }),
            Err(e) => {
                warn!("skipping {}: {e}", full.display());
                errors.push(EntryError {
                    path: full,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        checksum: sha256_hex(&bytes),
        errors,
    })
}

/// Label of a synthetic image: 100 × the mean of channel 0, i.e. the DC
/// band of the first channel.
pub fn synthetic_label(pixels: &Tensor) -> f64 {
    let v = pixels.values();
    let count = v.len() / 3;
    100.0 * v.iter().step_by(3).sum::<f64>() / count as f64
}

/// Smooth random images: per channel a constant level plus Gaussian blobs,
/// clamped to [0,1]. Labels come from [`synthetic_label`].
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let mut values = vec![0.0; h * w * 3];
    let size = h.max(w) as f64;
    for c in 0..3 {
        let base: f64 = r.gen_range(0.05..0.6);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..r.gen_range(2..6))
            .map(|_| {
                (
                    r.gen_range(0.0..h as f64),
                    r.gen_range(0.0..w as f64),
                    r.gen_range(0.08..0.3) * size,
                    r.gen_range(-0.35..0.45),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = base;
                for &(cy, cx, sigma, amp) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                values[(y * w + x) * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![h, w, 3], values).expect("extent matches")
}

pub fn make_synthetic(count: usize, h: usize, w: usize, seed: u64) -> Result<DatasetManifest> {
    if count == 0 || h == 0 || w == 0 {
        return Err(Error::Config("synthetic dataset needs count, h and w ≥ 1".into()));
    }
    let mut table = String::from("filename,age\n");
    let entries = (0..count)
        .map(|i| {
            let pixels = synthetic_image(h, w, rng::derive(seed, &[i as u64]));
            let age = synthetic_label(&pixels);
            let path = format!("synthetic/{i:05}");
            table.push_str(&format!("{path},{age}\n"));
            Ok(ManifestEntry {
                sample: ImageSample::new(path.clone(), pixels, Some(age))?,
                path,
                age,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        root: PathBuf::from("<synthetic>"),
        entries,
        checksum: sha256_hex(table.as_bytes()),
        errors: Vec::new(),
    })
}

/// Seeded shuffle, then contiguous train/val/test slices with boundaries at
/// the rounded cumulative fractions.
pub fn split(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let first = (fractions[0] * n as f64).round() as usize;
    let second = (((fractions[0] + fractions[1]) * n as f64).round() as usize).max(first);
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = Some(if rank < first {
            Split::Train
        } else if rank < second {
            Split::Val
        } else {
            Split::Test
        });
    }
    for (s, &f) in Split::ALL.iter().zip(&fractions) {
        if f > 0.0 && !out.entries.iter().any(|e| e.split == Some(*s)) {
            warn!("{s} split is empty ({f} of {n} entries)");
        }
    }
    Ok(out)
}
