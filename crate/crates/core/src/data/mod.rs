//! Dataset manifests, image I/O, splitting, augmentation and synthetic data.

mod augment;
mod manifest;
mod pnm;
mod raw;
mod synthetic;


use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{apply_augment, augment, AugmentConfig, AugmentParams};
pub use manifest::{DatasetManifest, SampleRecord, SampleTask, MANIFEST_VERSION};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm, Pnm};
pub use raw::{
    decode_raw, decode_raw_from, encode_raw, encode_raw_into, read_raw, write_raw, RawDtype,
    RAW_MAGIC,
};
pub use synthetic::{gen_synthetic, synth_cls, synth_seg, Ellipse, SynthSample};

use crate::error::{Error, Result};
use crate::losses::Way;
use crate::model::{ModelConfig, PromptSet, Task};
use crate::tensor::kernels::bilinear_taps;
use crate::tensor::Tensor;

/// Stable 64-bit seed for per-sample randomness, independent of visiting
/// order: FNV-1a over the inputs followed by a SplitMix64 finalizer.
pub fn sample_seed(seed: u64, epoch: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed.to_le_bytes().into_iter().chain(epoch.to_le_bytes()).chain(id.bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// A loaded sample, resized to the model's input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, S, S]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `S×S` class indices.
    pub mask: Option<Vec<usize>>,
    pub label: Option<usize>,
    pub way: Option<Way>,
    pub prompts: PromptSet,
}

/// Reads a PGM, PPM or raw tensor image as `[C, H, W]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        let t = decode_raw(&bytes).map_err(|d| Error::format(path, d))?;
        let s = t.shape().to_vec();
        return match s.len() {
            2 => t.reshape(&[1, s[0], s[1]]),
            3 => Ok(t),
            _ => Err(Error::format(path, format!("image tensor of rank {}", s.len()))),
        };
    }
    decode_pnm(&bytes)
        .map(|img| img.to_tensor())
        .map_err(|d| Error::format(path, d))
}

/// Reads a class-index mask from a PGM or a rank-2 raw tensor.
/// Returns `(height, width, labels)`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        let t = decode_raw(&bytes).map_err(|d| Error::format(path, d))?;
        if t.rank() != 2 {
            return Err(Error::format(path, format!("mask tensor of rank {}", t.rank())));
        }
        let mut labels = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if !(v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64) {
                return Err(Error::format(path, format!("mask value {v} is not a class index")));
            }
            labels.push(v as usize);
        }
        return Ok((t.shape()[0], t.shape()[1], labels));
    }
    let img = decode_pnm(&bytes).map_err(|d| Error::format(path, d))?;
    if img.channels != 1 {
        return Err(Error::format(path, "mask must be a single-channel PGM"));
    }
    let labels = img.samples.iter().map(|&v| v as usize).collect();
    Ok((img.height, img.width, labels))
}

/// Bilinear resize of every plane of a `[C, H, W]` tensor (half-pixel centers).
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in t.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out).expect("resize shape")
}

/// Nearest-neighbor resize of a row-major label map.
pub fn resize_nearest(labels: &[usize], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<usize> {
    let pick = |i: usize, n: usize, out: usize| (((i as f64 + 0.5) * n as f64 / out as f64) as usize).min(n - 1);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(labels[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}

/// Adapts a `[C, H, W]` image read from `path` to the model input: gray
/// images are replicated across `cfg.in_channels`, then resized to
/// `cfg.input_size`.
pub fn prepare_image(image: Tensor, cfg: &ModelConfig, path: &Path) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let image = if c == cfg.in_channels {
        image
    } else if c == 1 {
        Tensor::new(vec![cfg.in_channels, h, w], image.data().repeat(cfg.in_channels))?
    } else {
        return Err(Error::format(path, format!("{c} channels, model expects {}", cfg.in_channels)));
    };
    Ok(resize_bilinear(&image, cfg.input_size, cfg.input_size))
}

/// Loads one record relative to `root`, adapting channels and resizing to
/// `cfg.input_size`.
pub fn load_sample(root: &Path, record: &SampleRecord, cfg: &ModelConfig) -> Result<Sample> {
    record.validate()?;
    record.prompts.validate(cfg)?;
    let size = cfg.input_size;
    let image_path = root.join(&record.image_path);
    let image = prepare_image(read_image(&image_path)?, cfg, &image_path)?;

    let mask = match &record.mask_path {
        Some(rel) => {
            let path = root.join(rel);
            let (h, w, labels) = read_mask(&path)?;
            if let Some(bad) = labels.iter().find(|&&l| l >= cfg.seg_classes) {
                return Err(Error::format(
                    &path,
                    format!("mask class {bad} >= seg_classes {}", cfg.seg_classes),
                ));
            }
            Some(resize_nearest(&labels, h, w, size, size))
        }
        None => None,
    };
    Ok(Sample {
        id: record.id.clone(),
        image,
        mask,
        label: record.label,
        way: record.way,
        prompts: record.prompts,
    })
}

/// Loads every record of a manifest stored at `manifest_path`.
pub fn load_all(manifest_path: &Path, manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.samples.iter().map(|r| load_sample(root, r, cfg)).collect()
}

/// Seeded shuffle, then contiguous cuts at `floor(0.7n)` and `floor(0.8n)`.
pub fn split_dataset(
    manifest: &DatasetManifest,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let n = manifest.len();
    if n == 0 {
        return Err(Error::Invalid("cannot split an empty manifest".into()));
    }
    if n < 10 {
        return Err(Error::Invalid(format!("need at least 10 samples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = (n * 7 / 10, n * 8 / 10);
    let part = |r: &[usize]| manifest.with_samples(r.iter().map(|&i| manifest.samples[i].clone()).collect());
    Ok((part(&order[..a]), part(&order[a..b]), part(&order[b..])))
}

/// A stacked minibatch for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, C, S, S]`
    pub images: Tensor,
    pub prompts: Vec<PromptSet>,
    /// `B·S·S` class indices for segmentation batches, empty otherwise.
    pub masks: Vec<usize>,
    /// Classification labels and their heads, empty for segmentation.
    pub labels: Vec<usize>,
    pub ways: Vec<Way>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Stacks samples into a batch for `task`; every sample must carry that
/// task's annotation.
pub fn collate(samples: &[&Sample], task: Task) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("cannot collate an empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut batch = Batch {
        ids: Vec::new(),
        images: Tensor::zeros(&[0]),
        prompts: Vec::new(),
        masks: Vec::new(),
        labels: Vec::new(),
        ways: Vec::new(),
    };
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape(
                "collate",
                format!("{} has image {:?}, batch uses {shape:?}", s.id, s.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
        batch.ids.push(s.id.clone());
        batch.prompts.push(s.prompts);
        match task {
            Task::Seg => {
                let m = s.mask.as_ref().ok_or_else(|| {
                    Error::Invalid(format!("sample {} has no mask for a seg batch", s.id))
                })?;
                batch.masks.extend_from_slice(m);
            }
            Task::Cls => match (s.label, s.way) {
                (Some(l), Some(w)) => {
                    batch.labels.push(l);
                    batch.ways.push(w);
                }
                _ => {
                    return Err(Error::Invalid(format!(
                        "sample {} has no label for a cls batch",
                        s.id
                    )))
                }
            },
        }
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    batch.images = Tensor::new(full, data)?;
    Ok(batch)
}
