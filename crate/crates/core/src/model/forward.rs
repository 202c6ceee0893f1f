//! Forward graph construction. Every function records onto the caller's tape
//! and reads parameters through a [`BoundParams`].

use super::config::{ModelConfig, PromptSet, Task};
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Encoder outputs at strides 4, 8, 16 and 32.
pub type Features = [Var; 4];

/// Result of [`forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    /// `[N, seg_classes, S, S]`
    Seg(Var),
    /// `[N, 2]` and `[N, 4]`
    Cls { two_way: Var, four_way: Var },
}

fn conv(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, padding, groups)
}

fn linear(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.linear(x, w, Some(b))
}

/// Layer norm over the trailing axis.
fn norm(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Layer norm over the channel axis of an NCHW map.
fn norm_nchw(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let y = tape.to_channels_last(x)?;
    let y = norm(tape, p, prefix, y, eps)?;
    tape.to_channels_first(y)
}

/// 3×3 conv, channel norm, GELU.
fn conv_norm_act(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    conv_norm_act_k(tape, p, prefix, x, 1, eps)
}

/// Conv with the given padding (kernel from the weight), channel norm, GELU.
fn conv_norm_act_k(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    padding: usize,
    eps: f64,
) -> Result<Var> {
    let y = conv(tape, p, &format!("{prefix}.conv"), x, 1, padding, 1)?;
    let y = norm_nchw(tape, p, &format!("{prefix}.norm"), y, eps)?;
    Ok(tape.gelu(y))
}

/// `x + gamma ⊙ pw2(gelu(pw1(norm(dwconv(x)))))`
fn encoder_block(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let channels = tape.shape(x)[1];
    let y = conv(
        tape,
        p,
        &format!("{prefix}.dwconv"),
        x,
        1,
        cfg.block_kernel / 2,
        channels,
    )?;
    let y = tape.to_channels_last(y)?;
    let y = norm(tape, p, &format!("{prefix}.norm"), y, cfg.norm_eps)?;
    let y = linear(tape, p, &format!("{prefix}.pwconv1"), y)?;
    let y = tape.gelu(y);
    let y = linear(tape, p, &format!("{prefix}.pwconv2"), y)?;
    let gamma = p.var(&format!("{prefix}.gamma"))?;
    let y = tape.mul_last_dim(y, gamma)?;
    let y = tape.to_channels_first(y)?;
    tape.add(x, y)
}

pub fn forward_encoder(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Features> {
    let s = tape.shape(image).to_vec();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_size || s[3] != cfg.input_size {
        return Err(Error::shape(
            "forward_encoder",
            format!(
                "image {s:?} must be [N, {}, {}, {}]",
                cfg.in_channels, cfg.input_size, cfg.input_size
            ),
        ));
    }
    let mut x = conv(tape, p, "encoder.stem.conv", image, cfg.stem_patch, 0, 1)?;
    x = norm_nchw(tape, p, "encoder.stem.norm", x, cfg.norm_eps)?;
    let mut feats = Vec::with_capacity(4);
    for (i, &depth) in cfg.stage_depths.iter().enumerate() {
        if i > 0 {
            x = norm_nchw(tape, p, &format!("encoder.down{i}.norm"), x, cfg.norm_eps)?;
            x = conv(
                tape,
                p,
                &format!("encoder.down{i}.conv"),
                x,
                cfg.downsample_patch,
                0,
                1,
            )?;
        }
        for j in 0..depth {
            x = encoder_block(tape, p, cfg, &format!("encoder.stage{i}.block{j}"), x)?;
        }
        feats.push(x);
    }
    Ok([feats[0], feats[1], feats[2], feats[3]])
}

/// Adds each sample's projected prompt vector to every encoder scale.
/// A no-op when prompts are disabled.
pub fn embed_prompts(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    prompts: &[PromptSet],
    feats: Features,
) -> Result<Features> {
    if !cfg.prompts_enabled {
        return Ok(feats);
    }
    let n = tape.shape(feats[0])[0];
    if prompts.len() != n {
        return Err(Error::shape(
            "embed_prompts",
            format!("{} prompt sets for a batch of {n}", prompts.len()),
        ));
    }
    let mut onehots = Vec::with_capacity(n * cfg.prompt_len());
    for ps in prompts {
        onehots.extend(ps.one_hot(cfg)?);
    }
    let onehot = tape.constant(Tensor::new(vec![n, cfg.prompt_len()], onehots)?);
    let mut out = feats;
    for (i, f) in out.iter_mut().enumerate() {
        let offset = linear(tape, p, &format!("prompt.scale{i}"), onehot)?;
        *f = tape.add_channels(*f, offset)?;
    }
    Ok(out)
}

/// UPerNet: pyramid pooling on the deepest map, FPN top-down merge, fusion
/// of all levels at stride 4, pixel classifier, upsampling to input size.
pub fn forward_seg_decoder(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    feats: Features,
) -> Result<Var> {
    let eps = cfg.norm_eps;
    let deepest = feats[3];
    let (h, w) = {
        let s = tape.shape(deepest);
        (s[2], s[3])
    };

    let mut ppm = vec![deepest];
    for (b, &bin) in cfg.ppm_bins.iter().enumerate() {
        // Bins larger than the map collapse to the map size.
        let pooled = tape.adaptive_avg_pool2d(deepest, bin.min(h), bin.min(w))?;
        let y = conv_norm_act_k(tape, p, &format!("decoder.ppm{b}"), pooled, 0, eps)?;
        ppm.push(tape.upsample_bilinear(y, h, w)?);
    }
    let ppm_cat = tape.concat(&ppm, 1)?;
    let top = conv_norm_act(tape, p, "decoder.ppm_fuse", ppm_cat, eps)?;

    let mut levels = [top; 4];
    for i in 0..3 {
        levels[i] = conv_norm_act_k(tape, p, &format!("decoder.lateral{i}"), feats[i], 0, eps)?;
    }
    for i in (0..3).rev() {
        let s = tape.shape(levels[i]).to_vec();
        let up = tape.upsample_bilinear(levels[i + 1], s[2], s[3])?;
        levels[i] = tape.add(levels[i], up)?;
    }
    for (i, level) in levels.iter_mut().enumerate().take(3) {
        *level = conv_norm_act(tape, p, &format!("decoder.smooth{i}"), *level, eps)?;
    }

    let base = tape.shape(levels[0]).to_vec();
    let mut merged = vec![levels[0]];
    for &level in &levels[1..] {
        merged.push(tape.upsample_bilinear(level, base[2], base[3])?);
    }
    let cat = tape.concat(&merged, 1)?;
    let fused = conv_norm_act(tape, p, "decoder.fuse", cat, eps)?;
    let logits = conv(tape, p, "decoder.classifier", fused, 1, 0, 1)?;
    tape.upsample_bilinear(logits, cfg.input_size, cfg.input_size)
}

/// Pooled deepest features through a shared norm into the 2-way and 4-way heads.
pub fn forward_cls_heads(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    feats: Features,
) -> Result<(Var, Var)> {
    let pooled = tape.global_avg_pool(feats[3])?;
    let normed = norm(tape, p, "heads.norm", pooled, cfg.norm_eps)?;
    let two = linear(tape, p, "heads.cls2", normed)?;
    let four = linear(tape, p, "heads.cls4", normed)?;
    Ok((two, four))
}

/// Shared encoder pass followed by the task-selected decoder.
pub fn forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
    prompts: &[PromptSet],
    task: Task,
) -> Result<Output> {
    let feats = forward_encoder(tape, p, cfg, image)?;
    let feats = embed_prompts(tape, p, cfg, prompts, feats)?;
    Ok(match task {
        Task::Seg => Output::Seg(forward_seg_decoder(tape, p, cfg, feats)?),
        Task::Cls => {
            let (two_way, four_way) = forward_cls_heads(tape, p, cfg, feats)?;
            Output::Cls { two_way, four_way }
        }
    })
}
