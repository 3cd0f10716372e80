use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stt_core::config::ExperimentConfig;
use stt_core::data::synth::{generate_synthetic, SynthSpec};
use stt_core::data::volume::{load_volume, save_volume, stem_of, Volume};
use stt_core::infer::{run_inference, scores_path};
use stt_core::metrics::evaluate;
use stt_core::train::{log_path, Trainer, CHECKPOINT_DIR};
use stt_core::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "sttunet", version, about = "Volumetric mitochondria instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config, writing a checkpoint and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory up to the config's iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment a volume with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted label volume against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic image volume and its labels (`<out>_labels`).
    Synth {
        /// JSON generator spec; omitted fields take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut trainer = match resume {
        Some(dir) => {
            let mut t = Trainer::resume(dir, Some(cfg.iterations))?;
            t.cfg.output_dir = cfg.output_dir.clone();
            t
        }
        None => Trainer::new(cfg)?,
    };
    let total = trainer.cfg.iterations;
    let every = (total / 20).max(1);
    trainer.run(|l| {
        if l.iter % every == 0 || l.iter == total {
            eprintln!(
                "iter {:>6}/{total}  bce {:.5}  gen {:.5}  disc {:.5}",
                l.iter, l.bce, l.gen_loss, l.disc_loss
            );
        }
    })?;
    println!("checkpoint {}", trainer.cfg.output_dir.join(CHECKPOINT_DIR).display());
    println!("log {}", log_path(&trainer.cfg).display());
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let seg = run_inference(ckpt, input, out)?;
    println!("{} instances -> {}", seg.labels.instance_count(), stem_of(out).display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, json: bool) -> Result<()> {
    let p = load_volume(pred)?.to_labels()?;
    let g = load_volume(gt)?.to_labels()?;
    let sidecar = scores_path(pred);
    let scores: Option<Vec<f64>> = if sidecar.exists() { Some(read_json(&sidecar)?) } else { None };
    let report = evaluate(&p, scores.as_deref(), &g)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn labels_stem(out: &Path) -> PathBuf {
    let mut s = stem_of(out).into_os_string();
    s.push("_labels");
    s.into()
}

fn synth(spec: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec: SynthSpec = read_json(spec)?;
    let (image, labels) = generate_synthetic(&spec, seed)?;
    save_volume(out, &Volume::from_image(&image))?;
    let lpath = labels_stem(out);
    save_volume(&lpath, &Volume::from_labels(&labels))?;
    println!(
        "{} instances -> {} and {}",
        labels.instance_count(),
        stem_of(out).display(),
        lpath.display()
    );
    Ok(())
}

fn run_selftest() -> bool {
    let checks = selftest::run();
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn main() -> ExitCode {
    stt_tensor::alloc::retain_large_allocations();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train { config, resume } => train(config, resume.as_deref()),
        Command::Infer { ckpt, input, out } => infer(ckpt, input, out),
        Command::Eval { pred, gt, json } => eval(pred, gt, *json),
        Command::Synth { spec, seed, out } => synth(spec, *seed, out),
        Command::Selftest => {
            return if run_selftest() { ExitCode::SUCCESS } else { ExitCode::from(2) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
