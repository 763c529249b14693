mod commands;
mod config;
mod data;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AblateArgs, EvaluateArgs, FuseMethod, PredictArgs, TrainArgs};
use error::CliError;

#[derive(Parser)]
#[command(name = "canopy", version, about = "Canopy height mapping pipeline")]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true, env = "CANOPY_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic region: date_NN.rcube, reference.rcube, latent.rcube.
    Synthesize {
        /// Scene spec (TOML); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-band normalization statistics over clear pixels.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ALL")]
        bands: String,
        /// Restrict to rows START:END.
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training rows, keep the checkpoint with the best validation loss.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint (weights, optimizer state, iteration).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Tiled prediction of each acquisition, optionally fused.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data directory; every date_*.rcube in it is predicted.
        #[arg(long, conflicts_with = "cube")]
        data: Option<PathBuf>,
        /// Individual acquisition files.
        #[arg(long)]
        cube: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        fuse: Option<FuseMethod>,
        #[arg(long, default_value_t = canopy_core::infer::DEFAULT_TILE_SIZE)]
        tile: usize,
        #[arg(long, default_value_t = canopy_core::infer::DEFAULT_OVERLAP)]
        overlap: usize,
        /// Expected band subset; fails if the checkpoint was trained on others.
        #[arg(long)]
        bands: Option<String>,
        #[arg(long)]
        mask_snow: bool,
        /// Also write 8-bit PGM previews.
        #[arg(long)]
        pgm: bool,
    },
    /// Fuse per-date predictions; cubes supply cloud probability and dates.
    Fuse {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        cube: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "median")]
        method: FuseMethod,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a height map against a reference.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Min-cloud fused map; adds fusion.csv comparing it with --pred as the median map.
        #[arg(long)]
        min_cloud: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Drop reference pixels at or above this height.
        #[arg(long)]
        max_ref: Option<f32>,
        /// Evaluate rows START:END only.
        #[arg(long)]
        rows: Option<String>,
        /// Row label in the table files.
        #[arg(long, default_value = "region")]
        name: String,
    },
    /// Train and evaluate each band-subset variant with the same data and seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated variants, overriding the config.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
}

/// Large training tensors are allocated and freed every step; keeping them
/// in the heap instead of fresh mmaps avoids repeated page faults.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        canopy_core::par::init_threads(n).map_err(CliError::Config)?;
    }
    match cli.command {
        Command::Synthesize { spec, out, seed } => commands::synthesize(spec.as_deref(), &out, seed),
        Command::Stats {
            data,
            bands,
            rows,
            out,
        } => commands::stats(&data, &bands, rows.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            quiet,
        } => commands::train(TrainArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            seed,
            resume: resume.as_deref(),
            quiet,
        }),
        Command::Predict {
            checkpoint,
            data,
            cube,
            out,
            fuse,
            tile,
            overlap,
            bands,
            mask_snow,
            pgm,
        } => {
            let cubes = match data {
                Some(d) => data::cube_paths(&d)?,
                None => cube,
            };
            commands::predict(PredictArgs {
                checkpoint: &checkpoint,
                cubes,
                out: &out,
                fuse,
                tile,
                overlap,
                bands: bands.as_deref(),
                mask_snow,
                pgm,
            })
        }
        Command::Fuse {
            pred,
            cube,
            method,
            out,
        } => commands::fuse(&pred, &cube, method, &out),
        Command::Evaluate {
            pred,
            reference,
            min_cloud,
            out,
            max_ref,
            rows,
            name,
        } => commands::evaluate(EvaluateArgs {
            pred: &pred,
            reference: &reference,
            min_cloud: min_cloud.as_deref(),
            out: &out,
            max_ref,
            rows: rows.as_deref(),
            name: &name,
        }),
        Command::Ablate {
            config,
            data,
            out,
            seed,
            variants,
            quiet,
        } => commands::ablate(AblateArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            seed,
            variants: variants.as_deref(),
            quiet,
        }),
    }
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Numeric { dump: Some(p), .. } = &e {
                eprintln!("state dump: {}", Path::new(p).display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
