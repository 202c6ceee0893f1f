//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cls_loss, final_loss, seg_loss, LossWeights, Way};
use crate::model::{build_model, forward, param_specs, BoundParams, Init, ModelConfig, Output, PromptSet, Task};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Tensors with more coordinates than this are checked on a seeded
    /// random subset of this size.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(p+h) - f(p-h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh tape with `params` registered as trainable leaves, in
/// order, and must return a scalar node.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| tape.take_grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport::default();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.numel() <= opts.max_coords {
            (0..p.numel()).collect()
        } else {
            let mut c = sample(&mut rng, p.numel(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            index: pi,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &c in &coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[c];
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Outcome of one operation in [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for smooth elementwise ops; everything else gets [`OP_TOL`].
pub const SMOOTH_TOL: f64 = 1e-7;
pub const OP_TOL: f64 = 1e-4;

/// Weighted sum so every output coordinate carries a distinct gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(tape.shape(y), 1.0, &mut r));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Finite-difference check of every differentiable tape operation on small
/// random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut rn = |shape: &[usize], std: f64| Tensor::randn(shape, std, &mut r);
    let positive = Tensor::from_fn(&[8], |i| 1.0 + 0.1 * i as f64);
    let labels = vec![0, 2, 1, 1, 0, 2, 2, 1];
    let cases: Vec<(&'static str, f64, Vec<Tensor>, OpFn)> = vec![
        (
            "conv2d",
            OP_TOL,
            vec![rn(&[2, 4, 6, 5], 1.0), rn(&[6, 2, 3, 3], 0.5), rn(&[6], 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)?;
                probe(t, y, 1)
            }),
        ),
        (
            "conv2d_depthwise",
            OP_TOL,
            vec![rn(&[1, 3, 8, 8], 1.0), rn(&[3, 1, 7, 7], 0.5)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 3, 3)?;
                probe(t, y, 2)
            }),
        ),
        (
            "linear",
            OP_TOL,
            vec![rn(&[2, 3, 5], 1.0), rn(&[4, 5], 1.0), rn(&[4], 1.0)],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                probe(t, y, 3)
            }),
        ),
        (
            "layer_norm",
            OP_TOL,
            vec![rn(&[3, 6], 1.0), rn(&[6], 1.0), rn(&[6], 1.0)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                probe(t, y, 4)
            }),
        ),
        (
            "gelu",
            SMOOTH_TOL,
            vec![rn(&[20], 1.5)],
            Box::new(|t, v| {
                let y = t.gelu(v[0]);
                probe(t, y, 5)
            }),
        ),
        (
            "softmax",
            SMOOTH_TOL,
            vec![rn(&[3, 4], 1.0)],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 1)?;
                probe(t, y, 6)
            }),
        ),
        (
            "add_sub_mul_div",
            SMOOTH_TOL,
            vec![rn(&[8], 1.0), positive],
            Box::new(|t, v| {
                let y = t.div(v[0], v[1])?;
                let y = t.mul(y, v[0])?;
                let y = t.sub(y, v[1])?;
                let y = t.add(y, v[0])?;
                probe(t, y, 7)
            }),
        ),
        (
            "scale_add_scalar_mean",
            SMOOTH_TOL,
            vec![rn(&[2, 5], 1.0)],
            Box::new(|t, v| {
                let y = t.mul(v[0], v[0])?;
                let y = t.scale(y, -1.5);
                let y = t.add_scalar(y, 0.25);
                Ok(t.mean(y))
            }),
        ),
        (
            "adaptive_avg_pool2d",
            OP_TOL,
            vec![rn(&[1, 2, 7, 6], 1.0)],
            Box::new(|t, v| {
                let y = t.adaptive_avg_pool2d(v[0], 3, 4)?;
                probe(t, y, 8)
            }),
        ),
        (
            "upsample_bilinear",
            OP_TOL,
            vec![rn(&[1, 2, 3, 4], 1.0)],
            Box::new(|t, v| {
                let y = t.upsample_bilinear(v[0], 7, 9)?;
                probe(t, y, 9)
            }),
        ),
        (
            "add_channels",
            OP_TOL,
            vec![rn(&[2, 3, 2, 2], 1.0), rn(&[2, 3], 1.0)],
            Box::new(|t, v| {
                let y = t.add_channels(v[0], v[1])?;
                probe(t, y, 10)
            }),
        ),
        (
            "concat_narrow_permute",
            OP_TOL,
            vec![rn(&[2, 3, 2, 2], 1.0), rn(&[2, 1, 2, 2], 1.0)],
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let n = t.narrow(c, 1, 1, 3)?;
                let p = t.permute(n, &[3, 1, 0, 2])?;
                probe(t, p, 11)
            }),
        ),
        (
            "mul_last_dim_pooling_sums",
            OP_TOL,
            vec![rn(&[2, 2, 2, 3], 1.0), rn(&[3], 1.0)],
            Box::new(|t, v| {
                let s = t.mul_last_dim(v[0], v[1])?;
                let g = t.to_channels_first(s)?;
                let gap = t.global_avg_pool(g)?;
                let k = t.sum_keep_axis(gap, 1)?;
                probe(t, k, 12)
            }),
        ),
        (
            "softmax_cross_entropy",
            SMOOTH_TOL,
            vec![rn(&[2, 3, 2, 2], 1.0)],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        ),
    ];
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    cases
        .into_iter()
        .map(|(name, tolerance, params, f)| {
            let report = finite_diff_check(|t, v| f(t, v), &params, &opts)?;
            Ok(OpCheck {
                name,
                max_rel_error: report.max_rel_error(),
                tolerance,
            })
        })
        .collect()
}

/// Checks the gradient of the complete weighted training loss of `cfg` on
/// a random batch of two images.
///
/// The training init (weights of std 0.02, layer scale 1e-6) leaves many
/// gradients near the finite-difference noise floor, which makes relative
/// errors meaningless. Random weights are therefore multiplied by
/// `weight_gain`; callers usually raise `layer_scale_init` as well.
pub fn model_loss_check(
    cfg: &ModelConfig,
    task: Task,
    seed: u64,
    weight_gain: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut params = build_model(cfg, seed)?;
    let random: Vec<String> = param_specs(cfg)
        .into_iter()
        .filter(|s| s.init == Init::TruncNormal)
        .map(|s| s.name)
        .collect();
    for name in &random {
        if let Some(t) = params.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v *= weight_gain);
        }
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (n, s) = (2, cfg.input_size);
    let image = Tensor::randn(&[n, cfg.in_channels, s, s], 1.0, &mut r);
    let prompts = [PromptSet::new(0, 3, task as usize, 0), PromptSet::new(1, 5, task as usize, 1)];
    let masks: Vec<usize> = (0..n * s * s).map(|_| r.random_range(0..cfg.seg_classes)).collect();
    let weights = LossWeights::default();
    finite_diff_check(
        |tape, vars| {
            let bound: BoundParams = names.iter().cloned().zip(vars.iter().copied()).collect();
            let x = tape.constant(image.clone());
            let task_loss = match forward(tape, &bound, cfg, x, &prompts, task)? {
                Output::Seg(logits) => seg_loss(tape, logits, &masks, &weights)?.total,
                Output::Cls { two_way, four_way } => {
                    cls_loss(tape, two_way, four_way, &[1, 3], &[Way::Two, Way::Four])?
                }
            };
            Ok(final_loss(tape, task, task_loss, &weights))
        },
        &tensors,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3 - 1.0);
        let r = finite_diff_check(|t, v| Ok(t.sum(v[0])), &[x], &Default::default()).unwrap();
        assert!(r.max_rel_error() < 1e-10, "{}", r.max_rel_error());
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[50], 1.0, &mut rng);
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &Default::default(),
        )
        .unwrap();
        assert_eq!(r.params[0].coords_checked, 32);
        assert!(r.max_rel_error() < 1e-7, "{}", r.max_rel_error());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn every_op_passes_its_tolerance() {
        let checks = op_suite(3).unwrap();
        assert!(checks.len() >= 14);
        for c in &checks {
            assert!(c.passed(), "{} {} >= {}", c.name, c.max_rel_error, c.tolerance);
        }
    }

    const GAIN: f64 = 10.0;

    #[test]
    fn micro_model_loss_gradients() {
        let cfg = ModelConfig {
            input_size: 32,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [4, 6, 8, 10],
            decoder_channels: 6,
            ppm_channels: 4,
            layer_scale_init: 1.0,
            ..ModelConfig::default()
        };
        let opts = GradCheckOptions { max_coords: 3, ..Default::default() };
        for task in [Task::Seg, Task::Cls] {
            let r = model_loss_check(&cfg, task, 1, GAIN, &opts).unwrap();
            assert!(r.max_rel_error() < 1e-4, "{task}: {:?}", r.params);
        }
    }
}
