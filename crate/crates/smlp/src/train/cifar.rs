//! CIFAR-10 binary format: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, row-major within each plane.
//!
//! Pixels are scaled to [0, 1] and normalized by per-channel mean/std from
//! the run configuration. Training augmentation is random horizontal flip
//! plus a 4-pixel-pad random crop, nothing else.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const IMG_SIDE: usize = 32;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;
pub const RECORD_BYTES: usize = 1 + 3 * IMG_PIXELS;
pub const NUM_CLASSES: usize = 10;
const PAD: usize = 4;

#[derive(Clone, Debug)]
pub struct Dataset {
    labels: Vec<u8>,
    /// `len * 3072` plane-major bytes.
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn from_records(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
            return Err(Error::format(
                origin,
                format!(
                    "size {} is not a positive multiple of the {RECORD_BYTES}-byte record",
                    bytes.len()
                ),
            ));
        }
        let n = bytes.len() / RECORD_BYTES;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * 3 * IMG_PIXELS);
        for rec in bytes.chunks_exact(RECORD_BYTES) {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::format(
                    origin,
                    format!("label byte {} exceeds 9", rec[0]),
                ));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self { labels, pixels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Plane-major raw bytes of one image.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * 3 * IMG_PIXELS..(i + 1) * 3 * IMG_PIXELS]
    }

    pub fn subset(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n * 3 * IMG_PIXELS].to_vec(),
        }
    }

    pub fn concat(mut self, other: &Dataset) -> Self {
        self.labels.extend_from_slice(&other.labels);
        self.pixels.extend_from_slice(&other.pixels);
        self
    }
}

pub fn load_file(path: &Path) -> Result<Dataset> {
    let bytes =
        fs::read(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    Dataset::from_records(&bytes, &path.display().to_string())
}

/// Loads every `data_batch_<k>.bin` present in the directory (at least one
/// must exist).
pub fn load_train_dir(dir: &Path) -> Result<Dataset> {
    let mut merged: Option<Dataset> = None;
    for k in 1..=5 {
        let path = dir.join(format!("data_batch_{k}.bin"));
        if !path.exists() {
            continue;
        }
        let batch = load_file(&path)?;
        merged = Some(match merged {
            None => batch,
            Some(acc) => acc.concat(&batch),
        });
    }
    merged.ok_or_else(|| {
        Error::format(
            dir.display().to_string(),
            "no data_batch_<k>.bin files found",
        )
    })
}

pub fn load_test_dir(dir: &Path) -> Result<Dataset> {
    load_file(&dir.join("test_batch.bin"))
}

/// Per-channel normalization constants, applied after the [0, 1] scaling.
/// The neutral default leaves pixels unchanged; dataset statistics belong in
/// the run configuration file.
#[derive(Clone, Copy, Debug)]
pub struct Normalize {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalize {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

/// Assembles `(N, 32, 32, 3)` inputs plus labels for the given sample
/// indices. With an RNG the flip/pad-crop augmentation is applied per sample
/// (training); without, images pass through untouched (evaluation).
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalize,
    mut augment: Option<&mut ChaCha8Rng>,
) -> (Tensor<T>, Vec<usize>) {
    let n = indices.len();
    let mut out = vec![T::zero(); n * IMG_PIXELS * 3];
    let mut labels = Vec::with_capacity(n);
    let inv_std = [1.0 / norm.std[0], 1.0 / norm.std[1], 1.0 / norm.std[2]];
    for (s, &idx) in indices.iter().enumerate() {
        labels.push(ds.label(idx));
        let img = ds.image(idx);
        let (flip, dy, dx) = match augment.as_deref_mut() {
            Some(rng) => (
                rng.gen::<f64>() < 0.5,
                rng.gen_range(0..=2 * PAD),
                rng.gen_range(0..=2 * PAD),
            ),
            None => (false, PAD, PAD),
        };
        let base = s * IMG_PIXELS * 3;
        for r in 0..IMG_SIDE {
            for c in 0..IMG_SIDE {
                // position in the 4-pixel zero-padded source
                let pr = r + dy;
                let pc = c + dx;
                let in_bounds =
                    (PAD..PAD + IMG_SIDE).contains(&pr) && (PAD..PAD + IMG_SIDE).contains(&pc);
                for k in 0..3 {
                    let raw = if in_bounds {
                        let sr = pr - PAD;
                        let mut sc = pc - PAD;
                        if flip {
                            sc = IMG_SIDE - 1 - sc;
                        }
                        img[k * IMG_PIXELS + sr * IMG_SIDE + sc] as f64 / 255.0
                    } else {
                        0.0
                    };
                    out[base + (r * IMG_SIDE + c) * 3 + k] =
                        cast((raw - norm.mean[k]) * inv_std[k]);
                }
            }
        }
    }
    (
        Tensor::new(vec![n, IMG_SIDE, IMG_SIDE, 3], out).expect("batch shape"),
        labels,
    )
}

/// Writes a synthetic dataset in the exact binary layout: balanced labels,
/// each class tinted with its own RGB direction plus pixel noise, so the
/// classes are learnable from a small sample. Useful where the real archive
/// is unavailable; the reader cannot tell the difference.
pub fn write_synthetic_dir(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synthetic_records(train_n, &mut rng);
    fs::write(dir.join("data_batch_1.bin"), train)?;
    let test = synthetic_records(test_n, &mut rng);
    fs::write(dir.join("test_batch.bin"), test)?;
    Ok(())
}

/// RGB mix per class; scale-invariant directions so the pad-crop darkening
/// cannot alias two classes.
const CLASS_TINT: [[f64; 3]; NUM_CLASSES] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.0, 1.0, 0.5],
    [0.5, 0.0, 1.0],
];

fn synthetic_records(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * RECORD_BYTES);
    for i in 0..n {
        let class = i % NUM_CLASSES;
        out.push(class as u8);
        for tint in CLASS_TINT[class] {
            let base = 40.0 + 170.0 * tint;
            for _ in 0..IMG_PIXELS {
                let noise: f64 = rng.gen_range(-20.0..20.0);
                out.push((base + noise).clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}
