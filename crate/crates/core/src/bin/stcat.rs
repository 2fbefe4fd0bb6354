use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stcat::grounding::write_tube_line;
use stcat::model::{gradient_check, perturb_zero_params};
use stcat::workbench::checkpoint::Checkpoint;
use stcat::workbench::dataset::{generate_dataset, Dataset};
use stcat::workbench::evaluate::{evaluate, predict_tube, write_attention_csv, write_report, write_tubes};
use stcat::workbench::generator::GenConfig;
use stcat::workbench::train::{synthetic_example, train};
use stcat::{ModelConfig, Stcat};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "stcat", version, about = "Spatio-temporal video grounding workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per generated clip.
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Frame size as HxW.
        #[arg(long, default_value = "32x32")]
        size: String,
        /// Frames the model sees after uniform downsampling.
        #[arg(long, default_value_t = 16)]
        sampled_frames: usize,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat JSON object with model config fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        no_local_template: bool,
        #[arg(long)]
        no_global_template: bool,
        #[arg(long)]
        no_temporal_layer: bool,
        #[arg(long)]
        aux_loss: bool,
        /// Print the loss every N steps (0 = quiet).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tubes: PathBuf,
        /// Score the ground truth itself instead of model predictions.
        #[arg(long)]
        oracle_gt: bool,
    },
    /// Ground a single sample and print its tube as JSON.
    Ground {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient in 64-bit.
    GradCheck {
        #[arg(long)]
        micro_config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("size must look like HxW, got {s}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            frames,
            size,
            sampled_frames,
        } => {
            let (height, width) = parse_size(&size)?;
            let cfg = GenConfig::scaled(frames, height, width);
            let items = generate_dataset(seed, count, &cfg, sampled_frames)?;
            Dataset::write(&out, &items)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            data,
            config,
            out,
            steps,
            no_local_template,
            no_global_template,
            no_temporal_layer,
            aux_loss,
            log_every,
        } => {
            let mut cfg = match config {
                Some(p) => read_config(&p)?,
                None => ModelConfig::default(),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.no_local_template |= no_local_template;
            cfg.no_global_template |= no_global_template;
            cfg.no_temporal_layer |= no_temporal_layer;
            cfg.aux_loss |= aux_loss;
            let data = Dataset::read(&data)?;
            let start = Instant::now();
            let ckpt = train(&cfg, &data, &out, |e| {
                if log_every > 0 && (e.step % log_every == 0 || e.step + 1 == cfg.steps) {
                    eprintln!("step {:>5} lr {:.1e} {}", e.step, e.lr, e.loss);
                }
            })?;
            println!(
                "trained {} steps in {:.1}s, checkpoint at {}",
                ckpt.step,
                start.elapsed().as_secs_f64(),
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            out,
            tubes,
            oracle_gt,
        } => {
            let (model, ckpt) = Checkpoint::load(&ckpt)?;
            let data = Dataset::read(&data)?;
            let (report, predicted) = evaluate(&model, &ckpt.params, &data, oracle_gt)?;
            write_report(&out, &report)?;
            write_tubes(&tubes, &predicted)?;
            let m = &report.metrics;
            println!(
                "m_vIoU {:.4} m_tIoU {:.4} vIoU@0.3 {:.4} vIoU@0.5 {:.4} ({} samples)",
                m.m_viou,
                m.m_tiou,
                m.at(0.3).unwrap_or(0.0),
                m.at(0.5).unwrap_or(0.0),
                m.samples
            );
        }
        Command::Ground {
            ckpt,
            sample,
            data,
            dump_attention,
        } => {
            let (model, ckpt) = Checkpoint::load(&ckpt)?;
            let data = Dataset::read(&data)?;
            let s = data.get(&sample)?;
            let (tube, pred) = predict_tube(&model, &ckpt.params, &data, s)?;
            if let Some(path) = dump_attention {
                write_attention_csv(&path, &pred)?;
            }
            let mut out = std::io::stdout().lock();
            write_tube_line(&mut out, &s.id, &tube)?;
        }
        Command::GradCheck {
            micro_config,
            eps,
            seed,
        } => {
            let cfg = match micro_config {
                Some(p) => read_config(&p)?,
                None => ModelConfig::micro(),
            };
            let start = Instant::now();
            let (model, mut store) = Stcat::new::<f64>(&cfg)?;
            perturb_zero_params(&mut store, 0.1, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let ex = synthetic_example(&cfg, seed)?;
            let report = gradient_check(&model, &store, &ex.clip, &ex.tokens, &ex.target, eps)?;
            println!(
                "{}",
                serde_json::json!({
                    "parameters": store.num_scalars(),
                    "max_rel_error": report.max_rel_error,
                    "worst_index": report.worst_index,
                    "analytic": report.analytic,
                    "numeric": report.numeric,
                    "seconds": start.elapsed().as_secs_f64(),
                })
            );
            if !(report.max_rel_error <= GRAD_TOLERANCE) {
                bail!(
                    "gradient check failed: max relative error {:.3e} exceeds {GRAD_TOLERANCE:.0e}",
                    report.max_rel_error
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
