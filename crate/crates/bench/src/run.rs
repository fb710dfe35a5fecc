use std::path::Path;
use std::time::Instant;

use mpm_core::multi::efficiency;
use mpm_core::pipeline::{FrameReport, World};
use mpm_core::Vec3;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::scene::build_scene;
use crate::snapshot::write_snapshot;
use crate::BenchError;

/// One CSV row per frame; column order is the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub frame: u32,
    pub steps: u32,
    pub ms_total: f64,
    pub ms_rebuild: f64,
    pub ms_sort: f64,
    pub ms_p2g: f64,
    pub ms_grid: f64,
    pub ms_g2p: f64,
    pub rebuild_count: u32,
    pub realloc_count: u64,
    pub workers: usize,
    pub particle_count: usize,
}

pub const CSV_HEADER: [&str; 12] = [
    "frame",
    "steps",
    "ms_total",
    "ms_rebuild",
    "ms_sort",
    "ms_p2g",
    "ms_grid",
    "ms_g2p",
    "rebuild_count",
    "realloc_count",
    "workers",
    "particle_count",
];

impl TimingRow {
    fn from_report(frame: u32, r: &FrameReport, ms_total: f64, workers: usize) -> Self {
        let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
        TimingRow {
            frame,
            steps: r.steps,
            ms_total,
            ms_rebuild: ms(r.timings.rebuild),
            ms_sort: ms(r.timings.sort),
            ms_p2g: ms(r.timings.p2g),
            ms_grid: ms(r.timings.grid),
            ms_g2p: ms(r.timings.g2p),
            rebuild_count: r.rebuilds,
            realloc_count: r.realloc_count,
            workers,
            particle_count: r.particle_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: u32,
    pub workers: usize,
    pub particle_count: usize,
    pub mean_ms_per_frame: f64,
    pub total_steps: u64,
    pub total_rebuilds: u64,
    /// Steps divided by rebuild-mappings; `None` without rebuilds.
    pub mean_steps_per_rebuild: Option<f64>,
    pub reallocs_after_frame_2: u64,
    pub quarantined: u64,
    pub clamped: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<TimingRow>,
    pub summary: RunSummary,
    pub world: World,
}

pub fn build_world(config: &RunConfig) -> Result<(World, Option<crate::scene::FountainSource>), BenchError> {
    let setup = build_scene(config)?;
    let world = World::new(setup.params, setup.materials, setup.boundary, config.pipeline(), &setup.particles)?;
    Ok((world, setup.source))
}

fn snapshot_positions(world: &World) -> Vec<Vec3> {
    world.positions_by_id().into_iter().map(|(_, p)| p).collect()
}

/// Runs all frames, writing CSV rows and snapshots as configured.
pub fn run(config: &RunConfig) -> Result<RunOutcome, BenchError> {
    let (mut world, mut source) = build_world(config)?;
    let mut writer = match &config.out_csv {
        Some(path) => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)
                .map_err(|e| BenchError::Csv { path: path.clone(), source: e })?;
            w.write_record(CSV_HEADER).map_err(|e| BenchError::Csv { path: path.clone(), source: e })?;
            Some((w, path.clone()))
        }
        None => None,
    };
    if let Some(dir) = &config.out_snap {
        std::fs::create_dir_all(dir).map_err(|e| BenchError::Io { path: dir.clone(), source: e })?;
    }

    let mut rows = Vec::with_capacity(config.frames as usize);
    let mut summary = RunSummary {
        frames: config.frames,
        workers: config.workers,
        particle_count: world.particle_count(),
        mean_ms_per_frame: 0.0,
        total_steps: 0,
        total_rebuilds: 0,
        mean_steps_per_rebuild: None,
        reallocs_after_frame_2: 0,
        quarantined: 0,
        clamped: 0,
    };
    for frame in 0..config.frames {
        if frame > 0 {
            if let Some(src) = source.as_mut() {
                world.append(&src.emit()).map_err(|e| BenchError::Simulation { frame, source: e })?;
            }
        }
        let start = Instant::now();
        let report = world.run_frame().map_err(|e| BenchError::Simulation { frame, source: e })?;
        let ms_total = start.elapsed().as_secs_f64() * 1e3;
        let row = TimingRow::from_report(frame, &report, ms_total, config.workers);
        log::info!(
            "frame {frame}: {} steps, {} rebuilds, {:.1} ms, {} particles",
            row.steps,
            row.rebuild_count,
            row.ms_total,
            row.particle_count
        );
        if let Some((w, path)) = writer.as_mut() {
            w.serialize(&row).map_err(|e| BenchError::Csv { path: path.clone(), source: e })?;
        }
        if let Some(dir) = &config.out_snap {
            write_snapshot(&dir.join(format!("frame_{frame:04}.mpmf")), &snapshot_positions(&world))?;
        }
        summary.total_steps += report.steps as u64;
        summary.total_rebuilds += report.rebuilds as u64;
        if frame >= 2 {
            summary.reallocs_after_frame_2 += report.realloc_count;
        }
        summary.quarantined += report.diagnostics.quarantined;
        summary.clamped += report.diagnostics.clamped;
        rows.push(row);
    }
    if let Some((mut w, path)) = writer {
        w.flush().map_err(|e| BenchError::Io { path, source: e })?;
    }
    summary.particle_count = world.particle_count();
    if !rows.is_empty() {
        summary.mean_ms_per_frame = rows.iter().map(|r| r.ms_total).sum::<f64>() / rows.len() as f64;
    }
    if summary.total_rebuilds > 0 {
        summary.mean_steps_per_rebuild = Some(summary.total_steps as f64 / summary.total_rebuilds as f64);
    }
    Ok(RunOutcome { rows, summary, world })
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingRow>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| BenchError::Csv { path: path.to_owned(), source: e })?;
    r.deserialize().collect::<Result<Vec<TimingRow>, _>>().map_err(|e| BenchError::Csv { path: path.to_owned(), source: e })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub workers: usize,
    pub particle_count: usize,
    pub t1_ms: f64,
    pub tn_ms: f64,
    pub efficiency: f64,
    pub anomalous: bool,
}

/// Runs the identical configuration with 1..=max_workers workers and
/// reports e = t1 / (n tn) from mean frame times.
pub fn efficiency_sweep(config: &RunConfig, max_workers: usize) -> Result<Vec<EfficiencyRow>, BenchError> {
    if max_workers == 0 {
        return Err(BenchError::Config("max_workers must be >= 1".into()));
    }
    let mut base = config.clone();
    base.out_csv = None;
    base.out_snap = None;
    let mut t1 = 0.0;
    let mut rows = Vec::with_capacity(max_workers);
    for n in 1..=max_workers {
        let outcome = run(&RunConfig { workers: n, ..base.clone() })?;
        let tn = outcome.summary.mean_ms_per_frame;
        if n == 1 {
            t1 = tn;
        }
        let e = efficiency(t1, tn, n)?;
        rows.push(EfficiencyRow {
            workers: n,
            particle_count: outcome.summary.particle_count,
            t1_ms: e.t1_ms,
            tn_ms: e.tn_ms,
            efficiency: e.e,
            anomalous: e.anomalous,
        });
    }
    Ok(rows)
}
