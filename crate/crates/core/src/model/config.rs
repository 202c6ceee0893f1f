use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
///
/// Serialized as a flat JSON object; omitted keys take the full-scale
/// defaults and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    /// Patchify stem kernel and stride.
    pub stem_patch: usize,
    /// Kernel and stride of the between-stage downsamplers.
    pub downsample_patch: usize,
    /// Depthwise kernel size inside each encoder block.
    pub block_kernel: usize,
    /// Hidden expansion of the pointwise MLP inside each encoder block.
    pub mlp_ratio: usize,
    pub layer_scale_init: f64,
    pub drop_path: f64,
    pub norm_eps: f64,
    pub decoder_channels: usize,
    pub ppm_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub seg_classes: usize,
    pub cls_two_way: usize,
    pub cls_four_way: usize,
    pub prompt_nature: usize,
    pub prompt_position: usize,
    pub prompt_task: usize,
    pub prompt_type: usize,
    pub prompts_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            input_size: 224,
            stage_depths: [3, 3, 9, 3],
            stage_dims: [96, 192, 384, 768],
            stem_patch: 4,
            downsample_patch: 2,
            block_kernel: 7,
            mlp_ratio: 4,
            layer_scale_init: 1e-6,
            drop_path: 0.0,
            norm_eps: 1e-6,
            decoder_channels: 512,
            ppm_channels: 512,
            ppm_bins: vec![1, 2, 3, 6],
            seg_classes: 2,
            cls_two_way: 2,
            cls_four_way: 4,
            prompt_nature: 2,
            prompt_position: 7,
            prompt_task: 2,
            prompt_type: 2,
            prompts_enabled: true,
        }
    }
}

impl ModelConfig {
    /// ConvNeXt-Tiny encoder with a 512-wide UPerNet decoder.
    pub fn full() -> Self {
        Self::default()
    }

    /// Desk-scale variant used by the tests and the overfit runs.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [8, 16, 32, 64],
            decoder_channels: 32,
            ppm_channels: 32,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Total downsampling factor from input to the deepest feature map.
    pub fn total_stride(&self) -> usize {
        self.stem_patch * self.downsample_patch.pow(3)
    }

    /// Length of the concatenated one-hot prompt vector.
    pub fn prompt_len(&self) -> usize {
        self.prompt_nature + self.prompt_position + self.prompt_task + self.prompt_type
    }

    pub fn prompt_cardinalities(&self) -> [usize; 4] {
        [
            self.prompt_nature,
            self.prompt_position,
            self.prompt_task,
            self.prompt_type,
        ]
    }

    /// Spatial side of encoder feature `i`.
    pub fn feature_size(&self, i: usize) -> usize {
        self.input_size / (self.stem_patch * self.downsample_patch.pow(i as u32))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("in_channels must be >= 1".to_string());
        }
        if self.stem_patch == 0 || self.downsample_patch == 0 {
            problems.push("stem_patch and downsample_patch must be >= 1".to_string());
        } else if self.input_size == 0 || self.input_size % self.total_stride() != 0 {
            problems.push(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.total_stride()
            ));
        }
        if self.stage_dims.windows(2).any(|w| w[0] >= w[1]) || self.stage_dims[0] == 0 {
            problems.push(format!(
                "stage_dims {:?} must be positive and strictly increasing",
                self.stage_dims
            ));
        }
        if self.stage_depths.contains(&0) {
            problems.push(format!("stage_depths {:?} must all be >= 1", self.stage_depths));
        }
        if self.block_kernel % 2 == 0 {
            problems.push(format!("block_kernel {} must be odd", self.block_kernel));
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be >= 1".to_string());
        }
        if self.drop_path != 0.0 {
            problems.push("drop_path is not supported; set it to 0".to_string());
        }
        if !(self.norm_eps > 0.0) {
            problems.push("norm_eps must be > 0".to_string());
        }
        if !self.layer_scale_init.is_finite() {
            problems.push("layer_scale_init must be finite".to_string());
        }
        if self.decoder_channels == 0 || self.ppm_channels == 0 {
            problems.push("decoder_channels and ppm_channels must be >= 1".to_string());
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            problems.push(format!("ppm_bins {:?} must be non-empty and >= 1", self.ppm_bins));
        }
        if self.seg_classes < 2 {
            problems.push("seg_classes must be >= 2".to_string());
        }
        if self.cls_two_way < 2 || self.cls_four_way < 2 {
            problems.push("classification heads need >= 2 logits".to_string());
        }
        if self.prompt_cardinalities().contains(&0) {
            problems.push(format!(
                "prompt cardinalities {:?} must all be >= 1",
                self.prompt_cardinalities()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// The four categorical prompts attached to every sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub nature: usize,
    pub position: usize,
    pub task: usize,
    #[serde(rename = "type")]
    pub kind: usize,
}

impl PromptSet {
    pub fn new(nature: usize, position: usize, task: usize, kind: usize) -> Self {
        PromptSet {
            nature,
            position,
            task,
            kind,
        }
    }

    pub fn indices(&self) -> [usize; 4] {
        [self.nature, self.position, self.task, self.kind]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        const NAMES: [&str; 4] = ["nature", "position", "task", "type"];
        for ((idx, card), name) in self
            .indices()
            .into_iter()
            .zip(cfg.prompt_cardinalities())
            .zip(NAMES)
        {
            if idx >= card {
                return Err(Error::Invalid(format!(
                    "{name} prompt index {idx} out of range (cardinality {card})"
                )));
            }
        }
        Ok(())
    }

    /// Concatenated one-hot encoding, `[nature | position | task | type]`.
    pub fn one_hot(&self, cfg: &ModelConfig) -> Result<Vec<f64>> {
        self.validate(cfg)?;
        let mut v = vec![0.0; cfg.prompt_len()];
        let mut offset = 0;
        for (idx, card) in self.indices().into_iter().zip(cfg.prompt_cardinalities()) {
            v[offset + idx] = 1.0;
            offset += card;
        }
        Ok(v)
    }
}

impl FromStr for PromptSet {
    type Err = Error;

    /// Parses `nature,position,task,type`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("prompts {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c, d] => Ok(PromptSet::new(a, b, c, d)),
            _ => Err(Error::Invalid(format!(
                "prompts {s:?}: expected four comma-separated indices"
            ))),
        }
    }
}

/// Which decoder a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Task::Seg),
            "cls" => Ok(Task::Cls),
            other => Err(Error::Invalid(format!(
                "unknown task {other:?} (expected seg or cls)"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Seg => "seg",
            Task::Cls => "cls",
        })
    }
}
