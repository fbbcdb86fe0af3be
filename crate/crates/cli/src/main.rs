use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use usvid_cli::{
    run_eval, run_gen, run_inspect, run_sweep_heads, run_sweep_samples, run_train, GenOptions,
    InspectOptions,
};
use usvid_core::dataio::{Split, TaskKind};
use usvid_core::synthdata::GenConfig;

#[derive(Parser)]
#[command(
    name = "usvid",
    about = "Video recognition workbench: synthetic tasks, attention-pooled and baseline models, training, sweeps, and attention inspection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a group-level 70/15/15 split
    Gen(GenArgs),
    /// Train a model from a JSON run config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path (default: eval_<split>.json beside the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per attention-head count; emits n_heads,val_metric
    /// (mean over seeds)
    SweepHeads {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated head counts, each dividing the embedding width
        #[arg(long, value_delimiter = ',')]
        heads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Sample-efficiency sweep over training group counts and model kinds;
    /// emits model,n_groups,test_metric,seed
    SweepSamples {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated group counts ("full" for all)
        #[arg(long, value_delimiter = ',')]
        group_counts: Vec<String>,
        /// Comma-separated model kinds: usvn,avg,max,temporal
        #[arg(long, value_delimiter = ',', default_value = "usvn")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Rank attention heads by temporal entropy and export prototype frames
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Number of clips in the inspection batch
        #[arg(long, default_value_t = 80)]
        batch: usize,
        /// Number of lowest-entropy heads to report
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Top frames per head
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: prototypes/ beside the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    /// keyframe | area_ratio | motion
    #[arg(long)]
    task: String,
    #[arg(long)]
    clips: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing non-empty output directory
    #[arg(long, default_value_t = false)]
    force: bool,
    #[arg(long)]
    t_min: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    noise_std: Option<f32>,
    /// Number of groups ("patients"); default clips/5
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    blob_radius: Option<f32>,
    #[arg(long)]
    disk_base_radius: Option<f32>,
    #[arg(long)]
    orbit_radius: Option<f32>,
    /// Radians the motion-task blob advances per frame
    #[arg(long)]
    angular_step: Option<f32>,
}

impl GenArgs {
    fn to_options(&self) -> Result<GenOptions> {
        let task: TaskKind = self.task.parse()?;
        let mut gen = GenConfig::default();
        if let Some(v) = self.t_min {
            gen.t_min = v;
        }
        if let Some(v) = self.t_max {
            gen.t_max = v;
        }
        if let Some(v) = self.noise_std {
            gen.noise_std = v;
        }
        if let Some(v) = self.groups {
            gen.group_count = v;
        }
        if let Some(v) = self.blob_radius {
            gen.blob_radius = v;
        }
        if let Some(v) = self.disk_base_radius {
            gen.disk_base_radius = v;
        }
        if let Some(v) = self.orbit_radius {
            gen.orbit_radius = v;
        }
        if let Some(v) = self.angular_step {
            gen.angular_step = v;
        }
        Ok(GenOptions {
            task,
            clips: self.clips,
            out: self.out.clone(),
            seed: self.seed,
            force: self.force,
            gen,
        })
    }
}

fn main() -> Result<()> {
    let threads = usvid_core::train::init_thread_pool_from_env();
    let cli = Cli::parse();
    match cli.command {
        Command::Gen(args) => {
            let manifest = run_gen(&args.to_options()?)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { config } => {
            let ckpt = run_train(&config)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Eval { checkpoint, manifest, split, out } => {
            let split: Split = split.parse()?;
            let report = run_eval(&checkpoint, &manifest, split, out.as_deref())?;
            println!("wrote {}", report.display());
        }
        Command::SweepHeads { config, heads, seeds } => {
            let csv = run_sweep_heads(&config, &heads, &seeds)?;
            println!("wrote {}", csv.display());
        }
        Command::SweepSamples { config, group_counts, models, seeds } => {
            let csv = run_sweep_samples(&config, &group_counts, &models, &seeds)?;
            println!("wrote {}", csv.display());
        }
        Command::Inspect { checkpoint, manifest, split, batch, heads, topk, seed, out } => {
            let csv = run_inspect(&InspectOptions {
                checkpoint,
                manifest,
                split: split.parse()?,
                batch,
                heads,
                top_k: topk,
                seed,
                out,
            })?;
            println!("wrote {}", csv.display());
        }
    }
    let _ = threads;
    Ok(())
}
