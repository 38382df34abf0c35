//! FashionMNIST ingestion from (optionally gzipped) IDX files.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, QfedError, Result};
use crate::scalar::Real;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const N_CLASSES: usize = 10;

/// FashionMNIST label names in label order.
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "T-shirt/top",
    "Trouser",
    "Pullover",
    "Dress",
    "Coat",
    "Sandal",
    "Shirt",
    "Sneaker",
    "Bag",
    "Ankle boot",
];

/// Environment variable that overrides the configured data directory.
pub const DATA_DIR_ENV: &str = "QFED_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Borrowed view of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a, T> {
    pub pixels: &'a [T],
    pub label: usize,
}

/// Ordered images, stored back to back as `len x 784` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub split: Split,
    pixels: Vec<T>,
    labels: Vec<u8>,
}

impl<T: Real> Dataset<T> {
    pub fn new(split: Split, pixels: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(QfedError::Data(format!(
                "{} labels but {} pixel values",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(QfedError::Data(format!("label {l} out of range 0..{N_CLASSES}")));
        }
        if pixels.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
            return Err(QfedError::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { split, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> LabeledImage<'_, T> {
        LabeledImage {
            pixels: &self.pixels[i * PIXELS..(i + 1) * PIXELS],
            label: self.labels[i] as usize,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = LabeledImage<'_, T>> {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// New dataset holding the given samples in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.get(i).pixels);
            labels.push(self.labels[i]);
        }
        Self {
            split: self.split,
            pixels,
            labels,
        }
    }

    /// Packs samples into one contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let mut xs = Vec::with_capacity(indices.len() * PIXELS);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.get(i);
            xs.extend_from_slice(s.pixels);
            ys.push(s.label);
        }
        (xs, ys)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| QfedError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| QfedError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, file: &str, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| QfedError::Parse {
            file: file.into(),
            offset,
            expected: format!("4-byte {what}"),
            found: format!("end of file ({} bytes)", bytes.len()),
        })
}

/// Parses an IDX3 image file; returns `(count, raw pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, file, "magic number")?;
    if magic != IMAGE_MAGIC {
        return Err(QfedError::Parse {
            file: file.into(),
            offset: 0,
            expected: format!("image magic {IMAGE_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, file, "image count")? as usize;
    for (offset, what) in [(8, "row count"), (12, "column count")] {
        let d = be_u32(bytes, offset, file, what)?;
        if d as usize != SIDE {
            return Err(QfedError::Parse {
                file: file.into(),
                offset,
                expected: format!("{what} {SIDE}"),
                found: d.to_string(),
            });
        }
    }
    let need = 16 + count * PIXELS;
    if bytes.len() < need {
        return Err(QfedError::Parse {
            file: file.into(),
            offset: bytes.len(),
            expected: format!("{count} images ({need} bytes)"),
            found: format!("truncated file of {} bytes", bytes.len()),
        });
    }
    Ok((count, bytes[16..need].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, file, "magic number")?;
    if magic != LABEL_MAGIC {
        return Err(QfedError::Parse {
            file: file.into(),
            offset: 0,
            expected: format!("label magic {LABEL_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(bytes, 4, file, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(QfedError::Parse {
            file: file.into(),
            offset: bytes.len(),
            expected: format!("{count} labels ({need} bytes)"),
            found: format!("truncated file of {} bytes", bytes.len()),
        });
    }
    Ok(bytes[8..need].to_vec())
}

/// Loads an image/label IDX pair; pixel bytes are divided by 255.
pub fn load_idx<T: Real>(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset<T>> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (count, raw) = parse_idx_images(&read_maybe_gz(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, &lbl_name)?;
    if labels.len() != count {
        return Err(QfedError::Parse {
            file: lbl_name,
            offset: 4,
            expected: format!("{count} labels to match {img_name}"),
            found: labels.len().to_string(),
        });
    }
    let scale = T::lit(255.0);
    let pixels = raw.into_iter().map(|b| T::from_u8(b).unwrap() / scale).collect();
    Dataset::new(split, pixels, labels)
}

/// Locations of the four standard FashionMNIST files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// Standard file names inside `dir`, preferring the `.gz` variant when
    /// both exist.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |stem: &str| {
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                dir.join(stem)
            }
        };
        Self {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load_train<T: Real>(&self) -> Result<Dataset<T>> {
        load_idx(&self.train_images, &self.train_labels, Split::Train)
    }

    pub fn load_test<T: Real>(&self) -> Result<Dataset<T>> {
        load_idx(&self.test_images, &self.test_labels, Split::Test)
    }
}

/// Seeded class-stratified sample of `n` images, returned in shuffled order.
///
/// Classes are filled round-robin, so per-class counts differ by at most one
/// unless a class runs out of samples.
pub fn subset<T: Real>(dataset: &Dataset<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    if n > dataset.len() {
        return Err(config_err!(
            "subset of {n} requested from a dataset of {}",
            dataset.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for class in &mut by_class {
        class.shuffle(&mut rng);
    }
    let mut picked = Vec::with_capacity(n);
    let mut depth = 0;
    while picked.len() < n {
        for class in &by_class {
            if picked.len() == n {
                break;
            }
            if let Some(&i) = class.get(depth) {
                picked.push(i);
            }
        }
        depth += 1;
    }
    picked.shuffle(&mut rng);
    Ok(dataset.select(&picked))
}
