use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use diffdose::data::{generate_phantom, read_volume, write_volume, PhantomParams};
use diffdose::harness::checkpoint::load_model;
use diffdose::harness::{
    check_compatible, cohort_split, dump_attention, evaluate_dirs, load_cohort, predict_volume, prepare_windows, resolve_output,
    write_dvh_set, ExperimentConfig, Trainer,
};

const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser)]
#[command(name = "diffdose", version, about = "Diffusion-based radiotherapy dose prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Profile {
    Desk,
    Full,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Write synthetic patients as volume bundles `patient_000`, `patient_001`, ...
    GeneratePhantoms {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
    },
    /// Train a model from a JSON experiment configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the configuration's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict the dose of one volume bundle.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Reverse steps; defaults to the configured inference steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted bundles with ground-truth bundles.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DVH curves of a bundle's dose over the ROIs of another bundle.
    Dvh {
        #[arg(long)]
        dose: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the inter-slice attention matrices of every window as CSV.
    AttentionDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunRecord<'a> {
    #[serde(flatten)]
    command: &'a Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    experiment: Option<&'a ExperimentConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phantom: Option<&'a PhantomParams>,
}

fn write_record(dir: &Path, record: &RunRecord) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RUN_CONFIG);
    std::fs::write(&path, serde_json::to_string_pretty(record)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    let record = |experiment, phantom| RunRecord {
        command: cmd,
        experiment,
        phantom,
    };
    match cmd {
        Command::GeneratePhantoms {
            count,
            seed,
            out,
            profile,
        } => {
            let out = resolve_output(out);
            let params = match profile {
                Profile::Desk => PhantomParams::desk(),
                Profile::Full => PhantomParams::full(),
            };
            write_record(&out, &record(None, Some(&params)))?;
            for i in 0..*count {
                let vol = generate_phantom(seed + i as u64, &params)?;
                let dir = out.join(format!("patient_{i:03}"));
                write_volume(&vol, &dir)?;
                log::info!("wrote {}", dir.display());
            }
        }
        Command::Train { config, out, resume } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(o) = out {
                cfg.output = o.clone();
            }
            let out = resolve_output(&cfg.output);
            write_record(&out, &record(Some(&cfg), None))?;
            let cohort = load_cohort(&cfg)?;
            let split = cohort_split(&cfg, cohort.len())?;
            let train: Vec<_> = split.train.iter().map(|&i| cohort[i].clone()).collect();
            log::info!(
                "{} training patients, {} validation, {} test",
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            let windows = prepare_windows(&train, cfg.optim.batch, &cfg.loss)?;
            let mut trainer = match resume {
                Some(dir) => Trainer::resume(dir, windows)?,
                None => Trainer::new(&cfg, windows)?,
            };
            let remaining = cfg.optim.steps.saturating_sub(trainer.step_count());
            trainer.run(remaining, Some(&out.join("loss.csv")), Some(&out.join("checkpoints")))?;
            trainer.save_checkpoint(&out.join("final"))?;
            log::info!("final checkpoint in {}", out.join("final").display());
        }
        Command::Sample {
            checkpoint,
            volume,
            steps,
            seed,
            out,
        } => {
            let (cfg, model) = load_model(checkpoint)?;
            let mut vol = read_volume(volume)?;
            let steps = steps.unwrap_or(cfg.diffusion.inference_steps);
            vol.dose = predict_volume(&model, &cfg, &vol, steps, *seed)?;
            let out = resolve_output(out);
            write_volume(&vol, &out)?;
            write_record(&out, &record(Some(&cfg), None))?;
        }
        Command::Evaluate { pred, gt, out } => {
            let out = resolve_output(out);
            write_record(&out, &record(None, None))?;
            let report = evaluate_dirs(pred, gt, &out)?;
            if let Some(s) = report.dose_score("Body") {
                log::info!("body dose score {s:.3} Gy");
            }
        }
        Command::Dvh { dose, masks, out } => {
            let out = resolve_output(out);
            let dose_vol = read_volume(dose)?;
            let mask_vol = read_volume(masks)?;
            if dose_vol.dims() != mask_vol.dims() {
                bail!("dose is {:?} but masks are {:?}", dose_vol.dims(), mask_vol.dims());
            }
            write_record(&out, &record(None, None))?;
            write_dvh_set(&mask_vol, &dose_vol.dose, None, &out)?;
        }
        Command::AttentionDump {
            checkpoint,
            volume,
            out,
        } => {
            let (cfg, model) = load_model(checkpoint)?;
            let vol = read_volume(volume)?;
            check_compatible(&cfg, &vol)?;
            let out = resolve_output(out);
            write_record(&out, &record(Some(&cfg), None))?;
            let n = dump_attention(&model, cfg.optim.batch, &vol, &out)?;
            log::info!("wrote {n} attention matrices");
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    run(&cli.command)
}
