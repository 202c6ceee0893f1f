//! Ultrasound-like synthetic samples: a speckled background with one
//! elliptical hypoechoic lesion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, SampleRecord, SampleTask};
use super::pnm::{write_pnm, Pnm};
use super::{resize_bilinear, resize_nearest, sample_seed, Sample};
use crate::error::{Error, Result};
use crate::losses::Way;
use crate::model::{ModelConfig, PromptSet};
use crate::tensor::Tensor;

/// Mean brightness and relative speckle std. The lesion is darker and more
/// homogeneous than the surrounding tissue.
const BACKGROUND: (f64, f64) = (0.55, 0.3);
const LESION: (f64, f64) = (0.2, 0.05);
/// Semi-axis ranges as fractions of the side. Classification lesions stay
/// smaller so a quadrant-placed one fits inside the frame.
const SEG_AXES: (f64, f64) = (0.15, 0.25);
const CLS_AXES: (f64, f64) = (0.10, 0.18);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in pixels.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Tests the pixel center `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.a;
        let v = (-dx * sin + dy * cos) / self.b;
        u * u + v * v <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }

    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub fn quadrant(&self, size: usize) -> usize {
        let half = size as f64 / 2.0;
        2 * (self.cy >= half) as usize + (self.cx >= half) as usize
    }
}

/// An in-memory generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub mask: Option<Vec<u8>>,
    pub label: Option<usize>,
    pub way: Option<Way>,
    pub prompts: PromptSet,
    pub lesion: Option<Ellipse>,
}

impl SynthSample {
    /// The sample as the loader would return it for `cfg`, without a trip
    /// through the filesystem.
    pub fn to_sample(&self, cfg: &ModelConfig) -> Result<Sample> {
        let size = cfg.input_size;
        let plane: Vec<f64> = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let image = Tensor::new(
            vec![cfg.in_channels, self.size, self.size],
            plane.repeat(cfg.in_channels),
        )?;
        let mask = self.mask.as_ref().map(|m| {
            let m: Vec<usize> = m.iter().map(|&v| v as usize).collect();
            resize_nearest(&m, self.size, self.size, size, size)
        });
        Ok(Sample {
            id: self.id.clone(),
            image: resize_bilinear(&image, size, size),
            mask,
            label: self.label,
            way: self.way,
            prompts: self.prompts,
        })
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Invalid(format!(
            "synthetic image size {size} must be a positive multiple of 32"
        )));
    }
    Ok(())
}

/// Center ranges and semi-axis range are fractions of the image side.
fn random_ellipse(
    rng: &mut ChaCha8Rng,
    size: usize,
    cx: (f64, f64),
    cy: (f64, f64),
    axis: (f64, f64),
) -> Ellipse {
    let s = size as f64;
    Ellipse {
        cx: rng.random_range(cx.0..cx.1) * s,
        cy: rng.random_range(cy.0..cy.1) * s,
        a: rng.random_range(axis.0..axis.1) * s,
        b: rng.random_range(axis.0..axis.1) * s,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    }
}

fn render(rng: &mut ChaCha8Rng, size: usize, lesion: Option<&Ellipse>) -> (Vec<u8>, Vec<u8>) {
    let speckle = Normal::new(0.0, 1.0).unwrap();
    let mut pixels = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let inside = lesion.is_some_and(|e| e.contains(x, y));
            let (mean, std) = if inside { LESION } else { BACKGROUND };
            // Multiplicative, as in B-mode images.
            let v: f64 = mean * (1.0 + std * speckle.sample(rng));
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            mask.push(inside as u8);
        }
    }
    (pixels, mask)
}

/// Segmentation sample `index`: one lesion near the center, mask = interior.
pub fn synth_seg(index: usize, size: usize, seed: u64) -> Result<SynthSample> {
    check_size(size)?;
    let id = format!("seg_{index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 0, &id));
    let e = random_ellipse(&mut rng, size, (0.3, 0.7), (0.3, 0.7), SEG_AXES);
    let (pixels, mask) = render(&mut rng, size, Some(&e));
    Ok(SynthSample {
        id,
        size,
        pixels,
        mask: Some(mask),
        label: None,
        way: None,
        prompts: PromptSet::new(index % 2, index % 7, 0, 0),
        lesion: Some(e),
    })
}

/// Classification sample `index`. Even indices are 2-way (lesion present or
/// not), odd indices are 4-way (quadrant of the lesion center); labels cycle
/// so small sets stay balanced.
pub fn synth_cls(index: usize, size: usize, seed: u64) -> Result<SynthSample> {
    check_size(size)?;
    let id = format!("cls_{index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 0, &id));
    let (way, label, lesion) = if index % 2 == 0 {
        let label = (index / 2) % 2;
        let e = (label == 1).then(|| random_ellipse(&mut rng, size, (0.3, 0.7), (0.3, 0.7), CLS_AXES));
        (Way::Two, label, e)
    } else {
        let label = (index / 2) % 4;
        let span = |hi: bool| if hi { (0.68, 0.78) } else { (0.22, 0.32) };
        let e = random_ellipse(&mut rng, size, span(label % 2 == 1), span(label >= 2), CLS_AXES);
        (Way::Four, label, Some(e))
    };
    let (pixels, _) = render(&mut rng, size, lesion.as_ref());
    let kind = (way == Way::Four) as usize;
    Ok(SynthSample {
        id,
        size,
        pixels,
        mask: None,
        label: Some(label),
        way: Some(way),
        prompts: PromptSet::new(index % 2, index % 7, 1, kind),
        lesion,
    })
}

/// Writes `n_seg + n_cls` samples plus `manifest.json` under `out`.
pub fn gen_synthetic(
    out: &Path,
    n_seg: usize,
    n_cls: usize,
    size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    check_size(size)?;
    for dir in [out.join("images"), out.join("masks")] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cfg = ModelConfig::default();
    let mut manifest = DatasetManifest::new(cfg.prompt_cardinalities(), size);
    let samples = (0..n_seg)
        .map(|i| synth_seg(i, size, seed))
        .chain((0..n_cls).map(|i| synth_cls(i, size, seed)));
    for s in samples {
        let s = s?;
        let image_path = format!("images/{}.pgm", s.id);
        write_pnm(&out.join(&image_path), &Pnm::gray(size, size, s.pixels))?;
        let mask_path = match s.mask {
            Some(m) => {
                let p = format!("masks/{}.pgm", s.id);
                write_pnm(&out.join(&p), &Pnm::gray(size, size, m))?;
                Some(p)
            }
            None => None,
        };
        manifest.samples.push(SampleRecord {
            id: s.id,
            image_path,
            task: if mask_path.is_some() { SampleTask::Seg } else { SampleTask::Cls },
            mask_path,
            label: s.label,
            way: s.way,
            prompts: s.prompts,
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
