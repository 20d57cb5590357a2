//! `neural-descent`: dataset generation, refiner training, single-sample
//! fitting, benchmarking, and meta-loss ablation.
//!
//! Configuration precedence: built-in defaults, then `--config` file
//! (`key = value` lines), then explicit flags. `--threads` falls back to
//! the NEURAL_DESCENT_THREADS environment variable, then 1.

use anyhow::Result;
use clap::{Parser, Subcommand};
use neural_descent::cli;
use neural_descent::config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "neural-descent", version, about = "Learned recurrent refinement for articulated 3D body fitting, with classical optimizer baselines")]
struct Cli {
    /// Config file with `key = value` lines; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads [default: NEURAL_DESCENT_THREADS or 1].
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (dataset.jsonl + manifest.json).
    Generate {
        /// Number of samples [default: 100].
        #[arg(long)]
        n: Option<usize>,
        /// RNG seed [default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Pose prior scale [default: 0.3].
        #[arg(long)]
        pose_scale: Option<f64>,
        /// Shape prior scale [default: 0.2].
        #[arg(long)]
        shape_scale: Option<f64>,
        /// Gaussian keypoint noise in crop pixels [default: 0].
        #[arg(long)]
        kp_noise: Option<f64>,
        /// Dropout rate for confidences and part channels [default: 0].
        #[arg(long)]
        part_dropout: Option<f64>,
        /// Crop/part-map extent in pixels [default: 64].
        #[arg(long)]
        extent: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refiner (model.ckpt + train_log.csv).
    Train {
        /// Dataset directory (from `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Supervision regime: ss, fs, or fs+ss [default: ss].
        #[arg(long)]
        regime: Option<String>,
        /// Meta-loss kind: sum, last, min, max, oi [default: last].
        #[arg(long)]
        meta: Option<String>,
        /// Refinement stages M [default: 5].
        #[arg(long = "m", alias = "stages")]
        m: Option<usize>,
        /// Batch size [default: 32].
        #[arg(long)]
        batch: Option<usize>,
        /// Learning rate [default: 1e-4].
        #[arg(long)]
        lr: Option<f64>,
        /// Training epochs [default: 50].
        #[arg(long)]
        epochs: Option<usize>,
        /// Training seed [default: 0].
        #[arg(long)]
        seed: Option<u64>,
        /// Keypoint loss weight [default: 1].
        #[arg(long)]
        lambda_k: Option<f64>,
        /// Part-alignment loss weight [default: 0; enabling it soft-rasterizes
        /// in every loss evaluation, which is much slower].
        #[arg(long)]
        lambda_b: Option<f64>,
        /// Mesh vertex loss weight for FS training [default: 1].
        #[arg(long)]
        lambda_m: Option<f64>,
        /// 3D joint loss weight for FS training [default: 1].
        #[arg(long)]
        lambda_3d: Option<f64>,
    },
    /// Fit one sample and dump the per-stage states.
    Fit {
        /// Trained checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Sample index [default: 0].
        #[arg(long)]
        sample: Option<usize>,
        /// Method: hund, gd, bfgs, hybridN [default: hund].
        #[arg(long)]
        method: Option<String>,
        /// Optional output CSV path (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark methods over a dataset (report.csv + summary.json).
    Bench {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Trained checkpoint (required for hund/hybrid methods).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated methods [default: hund,bfgs,hybrid5].
        #[arg(long)]
        methods: Option<String>,
        /// Gradient-descent steps [default: 100].
        #[arg(long)]
        gd_steps: Option<usize>,
        /// Gradient-descent step size [default: 1e-3].
        #[arg(long)]
        gd_step_size: Option<f64>,
        /// BFGS iteration cap [default: 200].
        #[arg(long)]
        bfgs_max_iters: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per meta-loss kind × seed and compare test MPJPE
    /// (ablation.csv + summary.json).
    Ablate {
        /// Training dataset directory.
        #[arg(long)]
        train_data: PathBuf,
        /// Held-out dataset directory.
        #[arg(long)]
        test_data: PathBuf,
        /// Comma-separated kinds [default: last,sum,min,max,oi].
        #[arg(long)]
        kinds: Option<String>,
        /// Seeds per kind [default: 3].
        #[arg(long)]
        seeds: Option<u64>,
        /// Epochs per training run [default: 50].
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate [default: 1e-4].
        #[arg(long)]
        lr: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_threads(flag: Option<usize>, file_value: usize) -> usize {
    if let Some(t) = flag {
        return t.max(1);
    }
    if let Ok(v) = std::env::var("NEURAL_DESCENT_THREADS") {
        if let Ok(t) = v.parse::<usize>() {
            return t.max(1);
        }
    }
    file_value.max(1)
}

fn main() -> Result<()> {
    let args = Cli::parse();
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.apply_file(path)?;
    }
    rc.threads = resolve_threads(args.threads, rc.threads);

    macro_rules! overlay {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { rc.$field = v; })*
        };
    }

    match args.command {
        Command::Generate {
            n,
            seed,
            pose_scale,
            shape_scale,
            kp_noise,
            part_dropout,
            extent,
            out,
        } => {
            overlay!(
                n <- n,
                seed <- seed,
                pose_scale <- pose_scale,
                shape_scale <- shape_scale,
                kp_noise_px <- kp_noise,
                part_dropout <- part_dropout,
                extent <- extent,
            );
            cli::cmd_generate(&rc, &out)
        }
        Command::Train {
            data,
            out,
            regime,
            meta,
            m,
            batch,
            lr,
            epochs,
            seed,
            lambda_k,
            lambda_b,
            lambda_m,
            lambda_3d,
        } => {
            if let Some(r) = regime {
                rc.regime = r.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            }
            if let Some(k) = meta {
                rc.meta = k.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            }
            overlay!(
                stages <- m,
                batch <- batch,
                lr <- lr,
                epochs <- epochs,
                seed <- seed,
                lambda_k <- lambda_k,
                lambda_b <- lambda_b,
                lambda_m <- lambda_m,
                lambda_3d <- lambda_3d,
            );
            cli::cmd_train(&rc, &data, &out)
        }
        Command::Fit { checkpoint, data, sample, method, out } => {
            let text = cli::cmd_fit(
                &rc,
                &checkpoint,
                &data,
                sample.unwrap_or(0),
                method.as_deref().unwrap_or("hund"),
                out.as_deref(),
            )?;
            print!("{text}");
            Ok(())
        }
        Command::Bench {
            data,
            checkpoint,
            methods,
            gd_steps,
            gd_step_size,
            bfgs_max_iters,
            out,
        } => {
            overlay!(
                methods <- methods,
                gd_steps <- gd_steps,
                gd_step_size <- gd_step_size,
                bfgs_max_iters <- bfgs_max_iters,
            );
            cli::cmd_bench(&rc, &data, checkpoint.as_deref(), &out)
        }
        Command::Ablate { train_data, test_data, kinds, seeds, epochs, lr, out } => {
            overlay!(
                kinds <- kinds,
                ablate_seeds <- seeds,
                epochs <- epochs,
                lr <- lr,
            );
            cli::cmd_ablate(&rc, &train_data, &test_data, &out)
        }
    }
}
