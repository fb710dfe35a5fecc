use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mpm_bench::config::{FusionArg, RebuildArg, Scene, SortArg, TransferArg};
use mpm_bench::run::{efficiency_sweep, run};
use mpm_bench::RunConfig;

#[derive(Parser)]
#[command(name = "mpm-bench", version, about = "Sparse-grid MPM benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration, writing timing rows, snapshots and a summary.
    Simulate(RunArgs),
    /// Run the configuration with 1..=N workers and report efficiencies.
    Efficiency {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, alias = "max_workers")]
        max_workers: usize,
    },
}

/// Every flag overrides the field of the same name in the config file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<Scene>,
    #[arg(long)]
    l: Option<u32>,
    #[arg(long)]
    boxes: Option<u32>,
    #[arg(long)]
    ppc: Option<u32>,
    #[arg(long)]
    dx: Option<f64>,
    #[arg(long)]
    frames: Option<u32>,
    #[arg(long, alias = "steps_per_frame")]
    steps_per_frame: Option<u32>,
    #[arg(long, alias = "cfl_auto", num_args = 0..=1, default_missing_value = "true")]
    cfl_auto: Option<bool>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, alias = "threads_per_worker")]
    threads_per_worker: Option<usize>,
    #[arg(long, alias = "lane_width")]
    lane_width: Option<usize>,
    #[arg(long)]
    rebuild: Option<RebuildArg>,
    #[arg(long)]
    sort: Option<SortArg>,
    #[arg(long)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    transfer: Option<TransferArg>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    #[arg(long, alias = "fused_threshold")]
    fused_threshold: Option<usize>,
    #[arg(long, alias = "remap_each_frame", num_args = 0..=1, default_missing_value = "true")]
    remap_each_frame: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gap: Option<u32>,
    #[arg(long, alias = "drop_height")]
    drop_height: Option<u32>,
    #[arg(long, alias = "drop_speed")]
    drop_speed: Option<f64>,
    #[arg(long, alias = "domain_cells")]
    domain_cells: Option<u32>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, alias = "youngs_modulus")]
    youngs_modulus: Option<f64>,
    #[arg(long, alias = "poisson_ratio")]
    poisson_ratio: Option<f64>,
    #[arg(long, alias = "bulk_modulus")]
    bulk_modulus: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, alias = "source_radius")]
    source_radius: Option<f64>,
    #[arg(long, alias = "emit_velocity", num_args = 3, value_names = ["VX", "VY", "VZ"])]
    emit_velocity: Option<Vec<f64>>,
    #[arg(long, alias = "out_csv")]
    out_csv: Option<PathBuf>,
    #[arg(long, alias = "out_snap")]
    out_snap: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        apply!(
            scene, l, boxes, ppc, dx, frames, steps_per_frame, workers, threads_per_worker, lane_width, rebuild,
            sort, fusion, transfer, deterministic, fused_threshold, remap_each_frame, seed, drop_height, drop_speed,
            density, youngs_modulus, poisson_ratio, bulk_modulus, gamma, source_radius
        );
        if self.cfl_auto.is_some() {
            c.cfl_auto = self.cfl_auto;
        }
        if self.gap.is_some() {
            c.gap = self.gap;
        }
        if self.domain_cells.is_some() {
            c.domain_cells = self.domain_cells;
        }
        if let Some(v) = self.emit_velocity {
            c.emit_velocity = [v[0], v[1], v[2]];
        }
        if self.out_csv.is_some() {
            c.out_csv = self.out_csv;
        }
        if self.out_snap.is_some() {
            c.out_snap = self.out_snap;
        }
        c.validate()?;
        Ok(c)
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate(args) => {
            let config = args.resolve()?;
            let outcome = run(&config).context("simulation failed")?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
        }
        Command::Efficiency { run, max_workers } => {
            let config = run.resolve()?;
            let rows = efficiency_sweep(&config, max_workers).context("efficiency sweep failed")?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}
