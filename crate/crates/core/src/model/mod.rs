//! Encoder, prompt projection, UPerNet decoder and classification heads.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, PromptSet, Task};
pub use forward::{
    embed_prompts, forward, forward_cls_heads, forward_encoder, forward_seg_decoder, Features,
    Output,
};
pub use params::{
    build_model, count_config, count_params, param_specs, BoundParams, Init, ModelParams,
    ParamCount, ParamSpec,
};

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Runs a gradient-free forward pass and returns the output values: the
/// segmentation logits for `Task::Seg`, or the 2-way and 4-way logits for
/// `Task::Cls`.
pub fn infer(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &Tensor,
    prompts: &[PromptSet],
    task: Task,
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let image = tape.constant(images.clone());
    Ok(match forward(&mut tape, &bound, cfg, image, prompts, task)? {
        Output::Seg(v) => vec![tape.value(v).clone()],
        Output::Cls { two_way, four_way } => {
            vec![tape.value(two_way).clone(), tape.value(four_way).clone()]
        }
    })
}

/// Index of the largest entry along axis 1 of `[N, K, ...]`, one per
/// remaining position.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(n * inner);
    for b in 0..n {
        for i in 0..inner {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * inner + i] > d[(b * k + best) * inner + i] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}
