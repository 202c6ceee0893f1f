//! Browser-independent logic behind the demo page. Everything here returns
//! plain Rust types so it can be tested natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use ultraupconvnet::data::{
    apply_augment, synth_cls, synth_seg, AugmentConfig, AugmentParams, Sample, SynthSample,
};
use ultraupconvnet::model::{argmax_classes, count_config, infer, ModelConfig, Task};
use ultraupconvnet::training::{evaluate, train_epoch, TrainConfig, TrainState};
use ultraupconvnet::Tensor;

pub type DemoResult<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// RGBA pixels plus a JSON description.
#[derive(Clone, Debug, PartialEq)]
pub struct Preview {
    pub size: usize,
    pub rgba: Vec<u8>,
    pub info: String,
}

/// Gray image with optional red (truth) and green (prediction) masks blended in.
fn overlay(gray: &[f64], truth: Option<&[usize]>, pred: Option<&[usize]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(gray.len() * 4);
    for (i, &g) in gray.iter().enumerate() {
        let v = (g.clamp(0.0, 1.0) * 255.0).round();
        let mut px = [v, v, v];
        if truth.is_some_and(|t| t[i] > 0) {
            px = [0.5 * v + 127.0, 0.5 * v, 0.5 * v];
        }
        if pred.is_some_and(|p| p[i] > 0) {
            px[1] = 0.5 * px[1] + 100.0;
        }
        out.extend(px.iter().map(|&c| c.min(255.0) as u8));
        out.push(255);
    }
    out
}

fn synth(task: &str, index: usize, size: usize, seed: u64) -> DemoResult<SynthSample> {
    match task {
        "seg" => synth_seg(index, size, seed).map_err(err),
        "cls" => synth_cls(index, size, seed).map_err(err),
        other => Err(format!("unknown task {other:?}; expected seg or cls")),
    }
}

/// One synthetic sample, optionally augmented with parameters drawn from
/// `augment_seed`. The lesion (mask or ellipse) is tinted red.
pub fn synthetic_preview(
    task: &str,
    index: usize,
    size: usize,
    seed: u64,
    augment_seed: Option<u64>,
) -> DemoResult<Preview> {
    let s = synth(task, index, size, seed)?;
    let image = Tensor::new(vec![1, size, size], s.pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .map_err(err)?;
    // Classification samples have no mask; paint the lesion ellipse instead.
    let truth: Vec<usize> = match &s.mask {
        Some(m) => m.iter().map(|&v| v as usize).collect(),
        None => (0..size * size)
            .map(|i| s.lesion.is_some_and(|e| e.contains(i % size, i / size)) as usize)
            .collect(),
    };
    let params = match augment_seed {
        Some(a) => AugmentParams::sample(&AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(a)),
        None => AugmentParams::identity(),
    };
    let (image, truth) = apply_augment(&image, Some(&truth), &params).map_err(err)?;
    let info = json!({
        "id": s.id,
        "label": s.label,
        "way": s.way.map(|w| w.classes()),
        "prompts": s.prompts.indices(),
        "augment": {
            "flip": params.flip,
            "angle_deg": params.angle_deg,
            "crop_scale": params.crop_scale,
        },
    });
    Ok(Preview {
        size,
        rgba: overlay(image.data(), truth.as_deref(), None),
        info: info.to_string(),
    })
}

/// Named model presets offered by the page.
pub fn preset(name: &str) -> DemoResult<ModelConfig> {
    match name {
        "full" => Ok(ModelConfig::full()),
        "toy" => Ok(ModelConfig::toy()),
        "demo" => Ok(demo_model()),
        other => Err(format!("unknown preset {other:?}")),
    }
}

/// Parameter total and groups for a model config given as JSON.
pub fn count_params_json(config: &str, prompts: bool) -> DemoResult<String> {
    let mut cfg = ModelConfig::from_json(config).map_err(err)?;
    cfg.prompts_enabled = prompts;
    let c = count_config(&cfg);
    let groups: Vec<_> = c.groups.iter().map(|(k, v)| json!({ "name": k, "count": v })).collect();
    Ok(json!({ "total": c.total, "groups": groups }).to_string())
}

/// Small enough to train interactively in a browser tab.
pub fn demo_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        stage_depths: [1, 1, 1, 1],
        stage_dims: [8, 12, 16, 24],
        decoder_channels: 16,
        ppm_channels: 8,
        ..ModelConfig::default()
    }
}

/// Trains the demo model on a handful of synthetic samples, one epoch per call.
pub struct Trainer {
    state: TrainState,
    cfg: TrainConfig,
    seg: Vec<Sample>,
    cls: Vec<Sample>,
}

impl Trainer {
    pub fn new(seed: u64, n_seg: usize, n_cls: usize) -> DemoResult<Self> {
        let model = demo_model();
        let size = model.input_size;
        let load = |s: DemoResult<SynthSample>| s.and_then(|s| s.to_sample(&model).map_err(err));
        let seg = (0..n_seg).map(|i| load(synth("seg", i, size, seed))).collect::<DemoResult<Vec<_>>>()?;
        let cls = (0..n_cls).map(|i| load(synth("cls", i, size, seed))).collect::<DemoResult<Vec<_>>>()?;
        if seg.is_empty() || cls.is_empty() {
            return Err("need at least one sample per task".into());
        }
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            batch_size_seg: 1,
            batch_size_cls: n_cls,
            augment: false,
            seed,
            ..TrainConfig::default()
        };
        Ok(Trainer { state: TrainState::new(&model, seed).map_err(err)?, cfg, seg, cls })
    }

    pub fn epochs(&self) -> u64 {
        self.state.epoch
    }

    pub fn seg_count(&self) -> usize {
        self.seg.len()
    }

    /// Runs one epoch; returns `{"epoch", "seg_loss", "cls_loss"}`.
    pub fn step(&mut self) -> DemoResult<String> {
        let r = train_epoch(&mut self.state, &self.seg, &self.cls, &self.cfg).map_err(err)?;
        Ok(json!({ "epoch": r.epoch, "seg_loss": r.seg_loss, "cls_loss": r.cls_loss }).to_string())
    }

    /// Training-set metrics as `{"dice", "acc_2way", "acc_4way"}`.
    pub fn metrics(&self) -> DemoResult<String> {
        let (p, m) = (&self.state.params, &self.state.model);
        let mut out = serde_json::Map::new();
        for (pool, task) in [(&self.seg, Task::Seg), (&self.cls, Task::Cls)] {
            for row in evaluate(p, m, pool, task, 8, "train").map_err(err)? {
                out.insert(row.metric, json!(row.value));
            }
        }
        Ok(serde_json::Value::Object(out).to_string())
    }

    /// Segmentation sample `index` with truth in red and prediction in green.
    pub fn predict(&self, index: usize) -> DemoResult<Preview> {
        let s = self.seg.get(index).ok_or_else(|| format!("no sample {index}"))?;
        let m = &self.state.model;
        let size = m.input_size;
        let batch = s.image.clone().reshape(&[1, m.in_channels, size, size]).map_err(err)?;
        let out = infer(&self.state.params, m, &batch, &[s.prompts], Task::Seg).map_err(err)?;
        let pred = argmax_classes(&out[0]);
        let plane = &s.image.data()[..size * size];
        Ok(Preview {
            size,
            rgba: overlay(plane, s.mask.as_deref(), Some(&pred)),
            info: json!({ "id": s.id, "foreground": pred.iter().filter(|&&c| c > 0).count() }).to_string(),
        })
    }
}
