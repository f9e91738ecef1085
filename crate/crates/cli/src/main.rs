use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use avod_cli::commands;
use avod_cli::config::{ObjectClass, RunConfig};
use avod_cli::frames::FrameSelection;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avod", version, about = "LIDAR/camera 3D detection preprocessing and evaluation")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set bev_resolution=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// `all`, or a comma list of frame ids and `a-b` ranges.
    #[arg(long, global = true, default_value = "all")]
    frames: FrameSelection,
    /// Comma list of car, pedestrian, cyclist.
    #[arg(long, global = true, value_delimiter = ',')]
    classes: Option<Vec<ObjectClass>>,
    /// Worker threads (0 picks the number of cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write BEV channel dumps and per-frame point counts.
    Bev,
    /// Write non-empty anchors and per-frame counts.
    Anchors,
    /// Proposal recall against the number of proposals.
    Recall {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// AP and AHS per class and difficulty.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Box encoding round trips on ground-truth labels.
    Encode,
    /// Per-layer shapes, parameters, FLOPs and crop memory.
    Netinfo,
    /// Anchor sizes by k-means over label dimensions.
    Cluster,
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(classes) = cli.classes {
        cfg.classes = classes;
    }
    if let Some(out) = cli.output {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build().context("building worker pool")?;
    pool.install(|| match &cli.command {
        Command::Bev => commands::cmd_bev(&cfg, &cli.frames),
        Command::Anchors => commands::cmd_anchors(&cfg, &cli.frames),
        Command::Recall { proposals, gt } => commands::cmd_recall(&cfg, &cli.frames, proposals, gt.as_deref()),
        Command::Eval { detections, gt } => commands::cmd_eval(&cfg, &cli.frames, detections, gt.as_deref()),
        Command::Encode => commands::cmd_encode(&cfg, &cli.frames),
        Command::Netinfo => commands::cmd_netinfo(&cfg),
        Command::Cluster => commands::cmd_cluster(&cfg, &cli.frames),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
