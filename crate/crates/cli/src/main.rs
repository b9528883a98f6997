//! `camodiff`: train, sample, evaluate and ablate from a run configuration.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use camodiff_core::ablation::{run_ablation, table, AblationKind};
use camodiff_core::checkpoint::{resolve, Checkpoint};
use camodiff_core::config::RunConfig;
use camodiff_core::data::{image_files, make_synthetic, read_rgb, resize_image, write_dataset};
use camodiff_core::inference::{write_png, Predictor};
use camodiff_core::metrics::{evaluate_dir, resize_map};
use camodiff_core::sampler::SampleMode;
use camodiff_core::trainer::{device_from_env, train_loop};
use camodiff_core::Error;

#[derive(Parser, Debug)]
#[command(name = "camodiff", version, about = "Conditional diffusion masks for camouflaged object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `trainer.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint file or run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict masks for every image of a directory.
    Sample {
        /// Checkpoint file or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of images, or a dataset root with an `Imgs/` folder.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampler defaults; the checkpoint's own settings are used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<SampleMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write every intermediate prediction.
        #[arg(long)]
        dump_steps: bool,
        /// Resize inputs to the model resolution and outputs back.
        #[arg(long)]
        resize: bool,
    },
    /// Score predictions against ground truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path (default: `<pred>/report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an ablation (snr, sc, cte, steps, shift) on the training set.
    Ablate {
        which: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Trained model reused by the `cte` and `steps` ablations.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as `Imgs/` and `GT/` folders.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    let error = error.into();
    let code = match error.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::InvalidArgument(_)) => 2,
        _ => 1,
    };
    Failure { code, error }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(usage(anyhow::anyhow!("config file {} not found", path.display())));
    }
    RunConfig::from_file(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, seed, resume } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            let resume = resume.map(|p| resolve(&p)).transpose().map_err(runtime)?;
            let path = train_loop(&cfg, resume.as_deref()).map_err(runtime)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Sample { ckpt, input, out, config, mode, seed, steps, dump_steps, resize } => {
            let sampler = match &config {
                Some(p) => Some(load_config(p)?.sampler),
                None => None,
            };
            let device = device_from_env().map_err(runtime)?;
            let ckpt = Checkpoint::load(&resolve(&ckpt).map_err(runtime)?, &device).map_err(runtime)?;
            let defaults = sampler.unwrap_or_else(|| ckpt.config.sampler.clone());
            let steps = steps.or(defaults.steps);
            if steps == Some(0) {
                return Err(usage(anyhow::anyhow!("--steps must be at least 1")));
            }
            let opts = SampleOptions {
                mode: mode.unwrap_or(defaults.mode),
                seed: seed.unwrap_or(defaults.seed),
                batch_size: defaults.batch_size,
                dump_steps: dump_steps || defaults.dump_steps,
                resize,
            };
            let predictor = Predictor::from_checkpoint(&ckpt, steps, device).map_err(runtime)?;
            let n = sample_dir(&predictor, &input, &out, &opts).map_err(runtime)?;
            println!("wrote {n} predictions to {}", out.display());
            Ok(())
        }
        Command::Eval { pred, gt, report } => {
            for dir in [&pred, &gt] {
                if !dir.is_dir() {
                    return Err(usage(anyhow::anyhow!("{} is not a directory", dir.display())));
                }
            }
            let eval = evaluate_dir(&pred, &gt).map_err(runtime)?;
            let report = report.unwrap_or_else(|| pred.join("report.json"));
            eval.write_json(&report).map_err(runtime)?;
            print!("{}", eval.aggregate.table());
            println!("report: {}", report.display());
            Ok(())
        }
        Command::Ablate { which, config, seed, ckpt } => {
            let kind: AblationKind = which.parse().map_err(usage)?;
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.trainer.seed = s;
                cfg.sampler.seed = s;
            }
            let ckpt = ckpt.map(|p| resolve(&p)).transpose().map_err(runtime)?;
            let rows = run_ablation(&cfg, kind, ckpt.as_deref()).map_err(runtime)?;
            let text = table(&rows);
            let dir = cfg.output.dir.join(format!("ablate_{}", kind.name()));
            std::fs::create_dir_all(&dir).map_err(runtime)?;
            std::fs::write(dir.join("table.txt"), &text).map_err(runtime)?;
            print!("{text}");
            Ok(())
        }
        Command::Synth { config, out, seed } => {
            let mut cfg = match &config {
                Some(p) => load_config(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.data.synthetic.seed = s;
            }
            let samples = make_synthetic(&cfg.data.synthetic).map_err(runtime)?;
            write_dataset(&samples, &out).map_err(runtime)?;
            println!("wrote {} pairs to {}", samples.len(), out.display());
            Ok(())
        }
    }
}

struct SampleOptions {
    mode: SampleMode,
    seed: u64,
    batch_size: usize,
    dump_steps: bool,
    resize: bool,
}

fn sample_dir(predictor: &Predictor, input: &Path, out: &Path, opts: &SampleOptions) -> anyhow::Result<usize> {
    let dir = if input.join("Imgs").is_dir() { input.join("Imgs") } else { input.to_path_buf() };
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", dir.display())).into());
    }
    let files = image_files(&dir)?;
    if files.is_empty() {
        log::warn!("no images found in {}", dir.display());
    }
    let r = predictor.resolution();
    let mut items = Vec::with_capacity(files.len());
    let mut sizes = Vec::with_capacity(files.len());
    for (stem, path) in &files {
        let image = read_rgb(path)?;
        let (_, h, w) = image.dim();
        if (h, w) != (r, r) && !opts.resize {
            return Err(Error::Shape(format!(
                "{} is {w}×{h} but the checkpoint was trained at {r}×{r}; pass --resize to resample inputs",
                path.display()
            ))
            .into());
        }
        sizes.push((h, w));
        items.push((stem.clone(), resize_image(&image, r, r)));
    }
    std::fs::create_dir_all(out)?;
    let preds = predictor.predict_images(&items, opts.mode, opts.seed, opts.batch_size)?;
    for (p, &(h, w)) in preds.iter().zip(&sizes) {
        let restore = |m: &ndarray::Array2<f64>| if (h, w) == m.dim() { m.clone() } else { resize_map(m.view(), h, w) };
        write_png(&out.join(format!("{}.png", p.id)), &restore(&p.mask))?;
        if opts.dump_steps {
            let steps_dir = out.join("steps").join(&p.id);
            std::fs::create_dir_all(&steps_dir)?;
            for (c, history) in p.histories.iter().enumerate() {
                let total = history.len();
                for (k, map) in history.preds.iter().enumerate() {
                    let t = total - k;
                    write_png(&steps_dir.join(format!("chain{c}_t{t:02}.png")), &restore(map))?;
                }
            }
        }
    }
    Ok(preds.len())
}
