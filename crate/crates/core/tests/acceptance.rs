//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ultraupconvnet::data::{
    apply_augment, collate, decode_pnm, decode_raw, encode_pnm, encode_raw, gen_synthetic,
    split_dataset, synth_cls, synth_seg, AugmentConfig, AugmentParams, DatasetManifest, Pnm,
    RawDtype, SampleRecord, SampleTask, Sample,
};
use ultraupconvnet::gradcheck::{model_loss_check, op_suite, GradCheckOptions};
use ultraupconvnet::losses::{cls_loss, cross_entropy, final_loss, seg_loss, LossWeights, Way};
use ultraupconvnet::model::{count_config, forward, ModelConfig, Output, PromptSet, Task};
use ultraupconvnet::training::{
    batch_gradients, checkpoint_load, checkpoint_save, encode_checkpoint, evaluate, train_epoch,
    TrainConfig, TrainState,
};
use ultraupconvnet::{Tape, Tensor};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 1

fn parameter_budget() -> Result<String, String> {
    let full = ModelConfig::full();
    let on = count_config(&full);
    let off = count_config(&ModelConfig { prompts_enabled: false, ..full.clone() });
    let target = 60.48e6;
    let dev = (on.total as f64 - target) / target;
    ensure(dev.abs() <= 0.15, || format!("total {} is {:+.2}% from 60.48M", on.total, dev * 100.0))?;
    // One FC per scale from the 13-long one-hot (plus bias) to that scale's width.
    let prompt_fc: usize = [96, 192, 384, 768].iter().map(|c| 13 * c + c).sum();
    ensure(prompt_fc == 20_160, || format!("closed form gives {prompt_fc}"))?;
    ensure(on.total - off.total == prompt_fc, || {
        format!("prompts add {}, expected {prompt_fc}", on.total - off.total)
    })?;
    Ok(format!(
        "total {} ({:+.2}% of 60.48M), prompts-off {} (delta {})",
        on.total,
        dev * 100.0,
        off.total,
        on.total - off.total
    ))
}

// ---------------------------------------------------------------- 2

fn gradient_oracles() -> Result<String, String> {
    let mut worst_smooth: f64 = 0.0;
    let mut worst_other: f64 = 0.0;
    let ops = ok(op_suite(7))?;
    for c in &ops {
        ensure(c.passed(), || format!("{}: rel error {:.3e} >= {:.0e}", c.name, c.max_rel_error, c.tolerance))?;
        if c.tolerance < 1e-4 {
            worst_smooth = worst_smooth.max(c.max_rel_error);
        } else {
            worst_other = worst_other.max(c.max_rel_error);
        }
    }
    let cfg = ModelConfig { layer_scale_init: 1.0, ..ModelConfig::toy() };
    let opts = GradCheckOptions { max_coords: 4, ..Default::default() };
    let mut model_worst: f64 = 0.0;
    for task in [Task::Seg, Task::Cls] {
        let r = ok(model_loss_check(&cfg, task, 0, 10.0, &opts))?;
        let e = r.max_rel_error();
        ensure(e < 1e-4, || format!("toy model {task} loss: rel error {e:.3e}"))?;
        model_worst = model_worst.max(e);
    }
    Ok(format!(
        "{} ops (smooth max {worst_smooth:.1e} < 1e-7, others max {worst_other:.1e} < 1e-4), \
         toy model losses max {model_worst:.1e} < 1e-4",
        ops.len()
    ))
}

// ---------------------------------------------------------------- 3

/// Mean cross-entropy and uniform-class soft Dice loss straight from the
/// definitions, for logits laid out `[N, K, P]`.
fn oracle_seg(logits: &[f64], labels: &[usize], n: usize, k: usize, p: usize) -> (f64, f64) {
    let mut ce = 0.0;
    let (mut inter, mut psum, mut tsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for b in 0..n {
        for i in 0..p {
            let z: Vec<f64> = (0..k).map(|c| logits[(b * k + c) * p + i]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let l = labels[b * p + i];
            ce -= (z[l] - m) - denom.ln();
            for c in 0..k {
                let prob = (z[c] - m).exp() / denom;
                psum[c] += prob;
                if c == l {
                    inter[c] += prob;
                    tsum[c] += 1.0;
                }
            }
        }
    }
    let smooth = 1e-5;
    let dice: f64 = (0..k).map(|c| (2.0 * inter[c] + smooth) / (psum[c] + tsum[c] + smooth)).sum::<f64>() / k as f64;
    (ce / (n * p) as f64, 1.0 - dice)
}

fn loss_formulas() -> Result<String, String> {
    let w = LossWeights::default();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (n, k, h) = (2, 3, 4);
    let logits = Tensor::randn(&[n, k, h, h], 2.0, &mut r);
    let labels: Vec<usize> = (0..n * h * h).map(|_| r.random_range(0..k)).collect();
    let mut tape = Tape::new();
    let lv = tape.constant(logits.clone());
    let sl = ok(seg_loss(&mut tape, lv, &labels, &w))?;
    let got = tape.value(sl.total).item();
    let (ce, dice) = oracle_seg(logits.data(), &labels, n, k, h * h);
    let want = 0.4 * ce + 0.6 * dice;
    ensure((got - want).abs() < 1e-12, || format!("seg_loss {got} vs recomposed {want}"))?;

    let mut worst_ln: f64 = 0.0;
    for classes in [2usize, 4] {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, classes]));
        let ce = ok(cross_entropy(&mut tape, z, &[0, 1, classes - 1]))?;
        let d = (tape.value(ce).item() - (classes as f64).ln()).abs();
        ensure(d < 1e-12, || format!("uniform CE over {classes} classes is off by {d:e}"))?;
        worst_ln = worst_ln.max(d);
    }

    let mut tape = Tape::new();
    let z2 = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut r));
    let z4 = tape.constant(Tensor::randn(&[3, 4], 1.0, &mut r));
    let cl = ok(cls_loss(&mut tape, z2, z4, &[1, 3, 0], &[Way::Two, Way::Four, Way::Two]))?;
    let fl = final_loss(&mut tape, Task::Cls, cl, &w);
    let ratio = tape.value(fl).item() / tape.value(cl).item();
    ensure(ratio == 10.0, || format!("final/cls ratio {ratio}"))?;
    Ok(format!(
        "seg_loss diff {:.1e}, |CE - ln K| max {worst_ln:.1e}, final/cls = {ratio}",
        (got - want).abs()
    ))
}

// ---------------------------------------------------------------- 4

fn toy_sets(seed: u64) -> Result<(Vec<Sample>, Vec<Sample>), String> {
    let cfg = ModelConfig::toy();
    let seg = (0..8).map(|i| synth_seg(i, 64, seed).and_then(|s| s.to_sample(&cfg)));
    let cls = (0..8).map(|i| synth_cls(i, 64, seed).and_then(|s| s.to_sample(&cfg)));
    Ok((ok(seg.collect())?, ok(cls.collect())?))
}

/// Settings used for the overfit run; see the README for why the
/// segmentation batch is a single image.
fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        learning_rate: 7e-4,
        weight_decay: 0.0,
        batch_size_seg: 1,
        batch_size_cls: 8,
        augment: false,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn overfit() -> Result<String, String> {
    let model = ModelConfig::toy();
    let cfg = overfit_config();
    let (seg, cls) = toy_sets(1)?;
    let mut state = ok(TrainState::new(&model, 0))?;
    let mut first = None;
    let mut last = None;
    for _ in 0..cfg.epochs {
        let r = ok(train_epoch(&mut state, &seg, &cls, &cfg))?;
        let losses = (r.seg_loss.unwrap(), r.cls_loss.unwrap());
        first.get_or_insert(losses);
        last = Some(losses);
    }
    let ((s0, c0), (s1, c1)) = (first.unwrap(), last.unwrap());
    let (rs, rc) = (s1 / s0, c1 / c0);
    let dice = ok(evaluate(&state.params, &model, &seg, Task::Seg, 8, "train"))?[0].value;
    let acc = ok(evaluate(&state.params, &model, &cls, Task::Cls, 8, "train"))?;
    let acc: Vec<f64> = acc.iter().map(|r| r.value).collect();
    let summary = format!(
        "seg loss {s0:.3} -> {s1:.4} ({:.1}%), cls loss {c0:.3} -> {c1:.4} ({:.1}%), \
         dice {dice:.4}, acc {acc:?}",
        rs * 100.0,
        rc * 100.0
    );
    ensure(rs < 0.1 && rc < 0.1, || format!("losses not below 10%: {summary}"))?;
    ensure(dice > 0.9, || format!("dice too low: {summary}"))?;
    ensure(acc == [1.0, 1.0], || format!("accuracy below 1: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 5

fn multitask_isolation() -> Result<String, String> {
    let model = ModelConfig::toy();
    let cfg = TrainConfig { weight_decay: 0.0, augment: true, batch_size_seg: 4, ..overfit_config() };
    let (seg, cls) = toy_sets(2)?;
    let mut state = ok(TrainState::new(&model, 3))?;
    let before = state.params.clone();
    ok(train_epoch(&mut state, &seg, &[], &cfg))?;
    let mut heads = 0;
    for (name, t) in before.iter() {
        if name.starts_with("heads.cls") {
            heads += 1;
            let after = state.params.get(name).unwrap();
            let same = after.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{name} changed during a segmentation epoch"))?;
        }
    }
    ensure(heads == 4, || format!("found {heads} head tensors"))?;
    ensure(state.params != before, || "segmentation epoch changed nothing".into())?;

    let four: Vec<&Sample> = cls.iter().filter(|s| s.way == Some(Way::Four)).collect();
    let batch = ok(collate(&four, Task::Cls))?;
    let (_, grads) = ok(batch_gradients(&before, &model, &batch, Task::Cls, &LossWeights::default()))?;
    for name in ["heads.cls2.weight", "heads.cls2.bias"] {
        let zero = grads[name].as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0));
        ensure(zero, || format!("{name} has a gradient from a 4-way-only loss"))?;
    }
    let g4 = grads["heads.cls4.weight"].as_ref().map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum());
    ensure(g4 > 0.0, || "4-way head got no gradient".into())?;

    // And directly through the tape, without the training helpers.
    let mut tape = Tape::new();
    let bound = before.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let Output::Cls { two_way, four_way } = ok(forward(&mut tape, &bound, &model, x, &batch.prompts, Task::Cls))? else {
        return Err("classification forward returned segmentation output".into());
    };
    let _ = two_way;
    let loss = ok(tape.softmax_cross_entropy(four_way, &batch.labels))?;
    ok(tape.backward(loss))?;
    let g = tape.grad(ok(bound.var("heads.cls2.weight"))?);
    ensure(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), || "tape gave 2-way head a gradient".into())?;
    Ok(format!("{heads} head tensors bitwise unchanged; 2-way head gradient zero under 4-way loss"))
}

// ---------------------------------------------------------------- 6

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Result<String, String> {
    let tmp = ok(tempfile::tempdir())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(gen_synthetic(&a, 6, 6, 64, 42))?;
    ok(gen_synthetic(&b, 6, 6, 64, 42))?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    ensure(fa.len() == 19 && fa == fb, || format!("gen-data differs ({} vs {} files)", fa.len(), fb.len()))?;

    let model = ModelConfig::toy();
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, batch_size_seg: 3, batch_size_cls: 3, ..TrainConfig::default() };
    let (seg, cls) = toy_sets(3)?;
    let run = |epochs: u64| -> Result<TrainState, String> {
        let mut s = ok(TrainState::new(&model, 11))?;
        for _ in 0..epochs {
            ok(train_epoch(&mut s, &seg[..5], &cls[..5], &cfg))?;
        }
        Ok(s)
    };
    let (x, y) = (run(3)?, run(3)?);
    let (bx, by) = (encode_checkpoint(&x), encode_checkpoint(&y));
    ensure(bx == by, || "two identical runs produced different checkpoints".into())?;

    let path = tmp.path().join("mid.ckpt");
    ok(checkpoint_save(&run(2)?, &path))?;
    let mut resumed = ok(checkpoint_load(&path))?;
    ok(train_epoch(&mut resumed, &seg[..5], &cls[..5], &cfg))?;
    ensure(encode_checkpoint(&resumed) == bx, || "resumed run diverged from uninterrupted run".into())?;
    Ok(format!(
        "gen-data {} files identical; 3-epoch checkpoints identical ({} bytes); resume after 2 epochs bit-identical",
        fa.len(),
        bx.len()
    ))
}

// ---------------------------------------------------------------- 7

fn data_pipeline() -> Result<String, String> {
    for n in [10usize, 100, 537] {
        let mut m = DatasetManifest::new(ModelConfig::default().prompt_cardinalities(), 64);
        m.samples = (0..n)
            .map(|i| SampleRecord {
                id: format!("s{i}"),
                image_path: format!("images/s{i}.pgm"),
                mask_path: None,
                label: Some(i % 2),
                way: Some(Way::Two),
                prompts: PromptSet::default(),
                task: SampleTask::Cls,
            })
            .collect();
        let (tr, va, te) = ok(split_dataset(&m, 9))?;
        let (a, b) = ((7 * n) / 10, (8 * n) / 10);
        let want = (a, b - a, n - b);
        let got = (tr.len(), va.len(), te.len());
        ensure(got == want, || format!("n={n}: split {got:?}, expected {want:?}"))?;
        let mut ids: Vec<&str> = tr.samples.iter().chain(&va.samples).chain(&te.samples).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure(ids.len() == n, || format!("n={n}: splits overlap or drop samples"))?;
    }

    let mut r = ChaCha8Rng::seed_from_u64(17);
    for (channels, maxval) in [(1usize, 255u16), (3, 255), (1, 65535), (3, 4095)] {
        let (w, h) = (r.random_range(1..40), r.random_range(1..40));
        let img = Pnm {
            width: w,
            height: h,
            channels,
            maxval,
            samples: (0..w * h * channels).map(|_| r.random_range(0..=maxval)).collect(),
        };
        let back = ok(decode_pnm(&encode_pnm(&img)))?;
        ensure(back == img, || format!("PNM round trip failed for {channels}ch maxval {maxval}"))?;
    }
    let t64 = Tensor::randn(&[2, 3, 5], 1.0, &mut r);
    ensure(ok(decode_raw(&encode_raw(&t64, RawDtype::F64)))? == t64, || "raw f64 round trip".into())?;
    let t32 = Tensor::from_fn(&[4, 7], |i| (i as f32 * 0.37 - 3.1) as f64);
    ensure(ok(decode_raw(&encode_raw(&t32, RawDtype::F32)))? == t32, || "raw f32 round trip".into())?;

    let cfg = AugmentConfig::default();
    let sample = ok(synth_seg(0, 64, 5).and_then(|s| s.to_sample(&ModelConfig::toy())))?;
    let mask = sample.mask.clone().unwrap();
    for draw in 0..1000 {
        let p = AugmentParams::sample(&cfg, &mut r);
        let (img, m) = ok(apply_augment(&sample.image, Some(&mask), &p))?;
        let m = m.unwrap();
        ensure(img.shape() == sample.image.shape(), || format!("draw {draw}: image shape {:?}", img.shape()))?;
        ensure(m.len() == mask.len() && m.iter().all(|&v| v <= 1), || format!("draw {draw}: invalid mask"))?;
        ensure(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)), || {
            format!("draw {draw}: image values left [0, 1]")
        })?;
    }
    Ok("splits for n=10/100/537 match the floor rule; PGM/PPM/raw exact; 1000 augment draws valid".into())
}

fn main() {
    let criteria: [(&str, Check); 7] = [
        ("parameter budget", parameter_budget),
        ("gradient oracles", gradient_oracles),
        ("loss formulas", loss_formulas),
        ("overfit sanity", overfit),
        ("multi-task isolation", multitask_isolation),
        ("determinism and resume", determinism),
        ("data pipeline", data_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
