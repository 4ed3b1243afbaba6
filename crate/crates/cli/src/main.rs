use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gscnn::data::SyntheticSpec;
use gscnn::evaluation::Protocol;
use gscnn_cli::{cmd_dump_gates, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, GradcheckOptions, RunConfig, Settings};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "gscnn",
    version,
    about = "Siamese CNN with matching gates for pairwise image matching"
)]
struct Cli {
    /// Flat TOML file of settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on the manifest's train split.
    Train {
        #[command(flatten)]
        settings: Settings,
    },
    /// Rank query images against the gallery and write results.json.
    Eval {
        /// Checkpoint to evaluate; repeat to average distances over epochs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "sq")]
        protocol: Protocol,
        /// Also write distances.csv and distances.gscn.
        #[arg(long)]
        export_distances: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Scale the backward rule of this op (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
        /// Also check coordinates whose difference window crosses a PReLU
        /// or max-pool kink.
        #[arg(long)]
        keep_kinks: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write a synthetic dataset with manifest.csv under --out-dir.
    Synth {
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 4)]
        per_id: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        /// Cue patch height and width in pixels.
        #[arg(long, default_value_t = 12)]
        cue_size: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Fraction of identities belonging to look-alike twin pairs.
        #[arg(long, default_value_t = 0.0)]
        local_cue_fraction: f64,
        /// Fraction of identities held out as query and gallery.
        #[arg(long, default_value_t = 0.0)]
        holdout_fraction: f64,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write the gate values of a trained gated model for one image pair.
    DumpGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        img1: PathBuf,
        #[arg(long)]
        img2: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
}

fn resolve(file: Option<&PathBuf>, settings: Settings) -> Result<RunConfig> {
    let cfg = Settings::merge(file.map(PathBuf::as_path), settings)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build_global()
        .context("starting worker threads")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let file = cli.config.as_ref();
    match cli.command {
        Command::Train { settings } => {
            let cfg = resolve(file, settings)?;
            let s = cmd_train(&cfg)?;
            println!(
                "trained {} iterations, final loss {:.6}, {} checkpoints in {}",
                s.losses.len(),
                s.losses.last().copied().unwrap_or(f64::NAN),
                s.checkpoints.len(),
                cfg.out_dir.display()
            );
        }
        Command::Eval {
            checkpoints,
            protocol,
            export_distances,
            settings,
        } => {
            let cfg = resolve(file, settings)?;
            let summary = cmd_eval(&cfg, &checkpoints, protocol, export_distances)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Gradcheck {
            coords,
            step,
            tolerance,
            corrupt_backward,
            keep_kinks,
            settings,
        } => {
            let cfg = resolve(file, settings)?;
            let opts = GradcheckOptions {
                coords,
                step,
                tolerance,
                corrupt: corrupt_backward,
                skip_kinks: !keep_kinks,
            };
            let summary = cmd_gradcheck(&cfg, &opts)?;
            for l in &summary.lines {
                let verdict = if l.max_rel_error < tolerance { "ok" } else { "FAIL" };
                println!(
                    "{:<22} {:>3} coords ({:>3} near kinks, min step {:.0e}, {} skipped)  max rel error {:.3e}  {verdict}",
                    l.name, l.checked, l.reduced_step, l.min_step, l.skipped, l.max_rel_error
                );
            }
            println!(
                "max rel error {:.3e} (tolerance {tolerance:e})",
                summary.max_rel_error()
            );
            return Ok(summary.passed());
        }
        Command::Synth {
            identities,
            per_id,
            cameras,
            cue_size,
            noise,
            local_cue_fraction,
            holdout_fraction,
            settings,
        } => {
            let cfg = resolve(file, settings)?;
            let spec = SyntheticSpec {
                n_identities: identities,
                images_per_identity: per_id,
                cameras,
                cue_size: (cue_size, cue_size),
                noise_sigma: noise,
                local_cue_fraction,
                holdout_fraction,
            };
            let m = cmd_synth(&cfg, &spec)?;
            println!(
                "wrote {} images and manifest.csv to {}",
                m.entries.len(),
                cfg.out_dir.display()
            );
        }
        Command::DumpGates {
            checkpoint,
            img1,
            img2,
            settings,
        } => {
            let cfg = resolve(file, settings)?;
            for p in cmd_dump_gates(&cfg, &checkpoint, &img1, &img2)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
