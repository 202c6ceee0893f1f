use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
    Const(f64),
}

/// Declared shape and initializer of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, dout: usize, din: usize) {
        self.push(format!("{prefix}.weight"), vec![dout, din], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.weight"), vec![c], Init::Ones);
        self.push(format!("{prefix}.bias"), vec![c], Init::Zeros);
    }
}

/// Every parameter the configuration declares, in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = SpecList(Vec::new());
    let dims = cfg.stage_dims;

    s.conv("encoder.stem.conv", dims[0], cfg.in_channels, cfg.stem_patch);
    s.norm("encoder.stem.norm", dims[0]);
    for (i, (&c, &depth)) in dims.iter().zip(&cfg.stage_depths).enumerate() {
        if i > 0 {
            s.norm(&format!("encoder.down{i}.norm"), dims[i - 1]);
            s.conv(&format!("encoder.down{i}.conv"), c, dims[i - 1], cfg.downsample_patch);
        }
        for j in 0..depth {
            let p = format!("encoder.stage{i}.block{j}");
            s.conv(&format!("{p}.dwconv"), c, 1, cfg.block_kernel);
            s.norm(&format!("{p}.norm"), c);
            s.linear(&format!("{p}.pwconv1"), cfg.mlp_ratio * c, c);
            s.linear(&format!("{p}.pwconv2"), c, cfg.mlp_ratio * c);
            s.push(format!("{p}.gamma"), vec![c], Init::Const(cfg.layer_scale_init));
        }
    }

    if cfg.prompts_enabled {
        for (i, &c) in dims.iter().enumerate() {
            s.linear(&format!("prompt.scale{i}"), c, cfg.prompt_len());
        }
    }

    let d = cfg.decoder_channels;
    for b in 0..cfg.ppm_bins.len() {
        s.conv(&format!("decoder.ppm{b}.conv"), cfg.ppm_channels, dims[3], 1);
        s.norm(&format!("decoder.ppm{b}.norm"), cfg.ppm_channels);
    }
    s.conv(
        "decoder.ppm_fuse.conv",
        d,
        dims[3] + cfg.ppm_bins.len() * cfg.ppm_channels,
        3,
    );
    s.norm("decoder.ppm_fuse.norm", d);
    for (i, &c) in dims.iter().take(3).enumerate() {
        s.conv(&format!("decoder.lateral{i}.conv"), d, c, 1);
        s.norm(&format!("decoder.lateral{i}.norm"), d);
    }
    for i in 0..3 {
        s.conv(&format!("decoder.smooth{i}.conv"), d, d, 3);
        s.norm(&format!("decoder.smooth{i}.norm"), d);
    }
    s.conv("decoder.fuse.conv", d, 4 * d, 3);
    s.norm("decoder.fuse.norm", d);
    s.conv("decoder.classifier", cfg.seg_classes, d, 1);

    s.norm("heads.norm", dims[3]);
    s.linear("heads.cls2", cfg.cls_two_way, dims[3]);
    s.linear("heads.cls4", cfg.cls_four_way, dims[3]);
    s.0
}

/// Named model parameters in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Checks names and shapes against what `cfg` declares.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.len() {
            return Err(Error::Config(format!(
                "config declares {} parameters, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} disagrees with config ({} {:?})",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient of every bound parameter after `tape.backward`; `None` for
    /// parameters the loss does not depend on.
    pub fn grads(&self, tape: &mut Tape) -> IndexMap<String, Option<Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), tape.take_grad(*v)))
            .collect()
    }
}

/// Binds leaves that were registered elsewhere, e.g. by a gradient checker.
impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        BoundParams {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Allocates and initializes every parameter of `cfg`, deterministically in `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for spec in param_specs(cfg) {
        let t = match spec.init {
            Init::TruncNormal => Tensor::trunc_normal(&spec.shape, WEIGHT_STD, &mut rng),
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Const(v) => Tensor::full(&spec.shape, v),
        };
        params.insert(spec.name, t);
    }
    Ok(params)
}

/// Parameter totals, overall and per top-level group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub groups: IndexMap<String, usize>,
}

fn tally<'a>(items: impl Iterator<Item = (&'a str, usize)>) -> ParamCount {
    let mut count = ParamCount::default();
    for group in ["encoder", "prompt", "decoder", "heads"] {
        count.groups.insert(group.to_string(), 0);
    }
    for (name, n) in items {
        let group = name.split('.').next().unwrap_or(name);
        *count.groups.entry(group.to_string()).or_insert(0) += n;
        count.total += n;
    }
    count
}

pub fn count_params(params: &ModelParams) -> ParamCount {
    tally(params.iter().map(|(k, t)| (k, t.numel())))
}

/// Same as [`count_params`] but from the declared shapes, without allocating.
pub fn count_config(cfg: &ModelConfig) -> ParamCount {
    let specs = param_specs(cfg);
    tally(specs.iter().map(|s| (s.name.as_str(), s.numel())))
}
