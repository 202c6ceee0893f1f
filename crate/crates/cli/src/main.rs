//! Command-line front end. Machine-readable tab-separated rows go to stdout,
//! diagnostics to stderr. Exit codes: 0 success, 1 usage or validation
//! error, 2 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ultraupconvnet::data::{
    gen_synthetic, load_all, prepare_image, read_image, resize_nearest, split_dataset,
    write_pnm, DatasetManifest, Pnm,
};
use ultraupconvnet::gradcheck::{model_loss_check, op_suite, GradCheckOptions};
use ultraupconvnet::model::{argmax_classes, count_config, infer, ModelConfig, PromptSet, Task};
use ultraupconvnet::training::{
    checkpoint_load, evaluate, fit, task_pools, RunConfig, TrainState,
};
use ultraupconvnet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ultraupconvnet", version, about = "Multi-task ultrasound segmentation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (PGM images, masks and manifest.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_seg: usize,
        #[arg(long)]
        n_cls: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the training split of a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Receives last.ckpt and config.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_prompts: bool,
        /// Continue from OUT/last.ckpt instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Segment and classify a single image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// nature,position,task,type category indices.
        #[arg(long)]
        prompts: Option<String>,
        /// Output mask (PGM of class indices, at the input resolution).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter total and per-group counts.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        no_prompts: bool,
    },
    /// Finite-difference check of every tape op and of the full model loss.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Toy)]
        scale: Scale,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Scale {
    /// The toy model (64×64 input).
    Toy,
    /// A much smaller model, for quick smoke runs.
    Micro,
}

/// Prints one stdout row. A closed pipe (e.g. `| head`) ends the process
/// quietly instead of panicking.
macro_rules! row {
    ($($arg:tt)*) => {{
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn gen_data(out: &Path, n_seg: usize, n_cls: usize, size: usize, seed: u64) -> Result<()> {
    let m = gen_synthetic(out, n_seg, n_cls, size, seed)?;
    eprintln!("wrote {} samples to {}", m.len(), out.display());
    row!("samples\tseg\t{n_seg}");
    row!("samples\tcls\t{n_cls}");
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, no_prompts: bool, resume: bool) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if no_prompts {
        run.model.prompts_enabled = false;
    }
    run.train.checkpoint_dir = Some(out.to_string_lossy().into_owned());
    let mpath = manifest_path(data);
    let manifest = DatasetManifest::load(&mpath)?;
    let (tr, va, _) = split_dataset(&manifest, run.train.seed)?;
    let train = load_all(&mpath, &tr, &run.model)?;
    let val = load_all(&mpath, &va, &run.model)?;
    eprintln!("train {} / val {} samples", train.len(), val.len());

    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, run.to_json()).map_err(|e| Error::Io { path: cfg_path, source: e })?;

    let mut state = if resume {
        let s = checkpoint_load(&out.join("last.ckpt"))?;
        if s.model != run.model {
            return Err(Error::Config("checkpoint model differs from --config".into()));
        }
        eprintln!("resuming after epoch {}", s.epoch);
        s
    } else {
        TrainState::new(&run.model, run.train.seed)?
    };
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    fit(&mut state, &train, &val, &run.train, &mut log)?;
    log.flush().ok();
    eprintln!("saved {}", out.join("last.ckpt").display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Split) -> Result<()> {
    let state = checkpoint_load(checkpoint)?;
    let mpath = manifest_path(data);
    let manifest = DatasetManifest::load(&mpath)?;
    let part = match split {
        Split::All => manifest,
        _ => {
            let (tr, va, te) = split_dataset(&manifest, state.seed)?;
            match split {
                Split::Train => tr,
                Split::Val => va,
                _ => te,
            }
        }
    };
    let samples = load_all(&mpath, &part, &state.model)?;
    let (seg, cls) = task_pools(&samples);
    let name = format!("{split:?}").to_lowercase();
    let mut any = false;
    for (pool, task) in [(seg, Task::Seg), (cls, Task::Cls)] {
        if pool.is_empty() {
            continue;
        }
        any = true;
        for row in evaluate(&state.params, &state.model, &pool, task, 8, &name)? {
            row!("{row}");
        }
    }
    if !any {
        return Err(Error::Invalid(format!("the {name} split is empty")));
    }
    Ok(())
}

fn parse_prompts(text: Option<&str>) -> Result<PromptSet> {
    let Some(text) = text else {
        eprintln!("warning: no --prompts given; using 0,0,0,0");
        return Ok(PromptSet::default());
    };
    let v: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Invalid(format!("--prompts {text:?}: expected four integers")))?;
    match v[..] {
        [a, b, c, d] => Ok(PromptSet::new(a, b, c, d)),
        _ => Err(Error::Invalid(format!("--prompts {text:?}: expected four values, got {}", v.len()))),
    }
}

fn predict(checkpoint: &Path, image: &Path, prompts: Option<&str>, out: &Path) -> Result<()> {
    let state = checkpoint_load(checkpoint)?;
    let prompts = parse_prompts(prompts)?;
    prompts.validate(&state.model)?;
    let raw = read_image(image)?;
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let x = prepare_image(raw, &state.model, image)?;
    let s = state.model.input_size;
    let batch = x.reshape(&[1, state.model.in_channels, s, s])?;

    let seg = infer(&state.params, &state.model, &batch, &[prompts], Task::Seg)?;
    let labels = resize_nearest(&argmax_classes(&seg[0]), s, s, h, w);
    let fg = labels.iter().filter(|&&l| l > 0).count() as f64 / labels.len() as f64;
    let pixels = labels.iter().map(|&l| l as u8).collect();
    write_pnm(out, &Pnm::gray(w, h, pixels))?;

    let cls = infer(&state.params, &state.model, &batch, &[prompts], Task::Cls)?;
    let name = image.display();
    row!("{name}\tseg\tforeground_fraction\t{fg:.6}");
    row!("{name}\tcls\tpred_2way\t{}", argmax_classes(&cls[0])[0]);
    row!("{name}\tcls\tpred_4way\t{}", argmax_classes(&cls[1])[0]);
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn count_params(config: &Path, no_prompts: bool) -> Result<()> {
    let mut model = RunConfig::load(config)?.model;
    if no_prompts {
        model.prompts_enabled = false;
    }
    let c = count_config(&model);
    row!("total\t{}", c.total);
    for (group, n) in &c.groups {
        row!("{group}\t{n}");
    }
    Ok(())
}

fn gradcheck(scale: Scale) -> Result<bool> {
    let mut ok = true;
    for c in op_suite(0)? {
        ok &= c.passed();
        row!("op\t{}\tmax_rel_error\t{:.3e}\t{}", c.name, c.max_rel_error, verdict(c.passed()));
    }
    let base = match scale {
        Scale::Toy => ModelConfig::toy(),
        Scale::Micro => ModelConfig {
            input_size: 32,
            stage_dims: [4, 6, 8, 10],
            stage_depths: [1, 1, 1, 1],
            decoder_channels: 6,
            ppm_channels: 4,
            ..ModelConfig::default()
        },
    };
    // Training-time layer scale (1e-6) hides the encoder from the loss.
    let cfg = ModelConfig { layer_scale_init: 1.0, ..base };
    let opts = GradCheckOptions { max_coords: 4, ..Default::default() };
    for task in [Task::Seg, Task::Cls] {
        let e = model_loss_check(&cfg, task, 0, 10.0, &opts)?.max_rel_error();
        ok &= e < 1e-4;
        row!("model\t{task}_loss\tmax_rel_error\t{e:.3e}\t{}", verdict(e < 1e-4));
    }
    Ok(ok)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, n_seg, n_cls, size, seed } => gen_data(&out, n_seg, n_cls, size, seed)?,
        Command::Train { config, data, out, no_prompts, resume } => {
            train(&config, &data, &out, no_prompts, resume)?
        }
        Command::Eval { checkpoint, data, split } => eval(&checkpoint, &data, split)?,
        Command::Predict { checkpoint, image, prompts, out } => {
            predict(&checkpoint, &image, prompts.as_deref(), &out)?
        }
        Command::CountParams { config, no_prompts } => count_params(&config, no_prompts)?,
        Command::Gradcheck { scale } => return gradcheck(scale),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
