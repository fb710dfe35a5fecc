//! Step orchestration for one or more workers.
//!
//! A step is: rebuild-mapping (only when flagged) → P2G into the worker's
//! step-parity buffer → barrier → grid update fused with the shared-block
//! reduction → G2P. With fused transfers the G2P of a step is deferred and
//! executed together with the next step's P2G.

use std::sync::RwLockReadGuard;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::arena::{GrowBuffer, ScratchPool};
use crate::domain::{cfl_dt, Material, SimParams};
use crate::error::{MpmError, Result};
use crate::grid::{decode, BlockTable, CellCode, NodeBuffer, BLOCK_CELLS, BLOCK_STRIDE, CH_MASS, CH_MOM};
use crate::multi::{partition_particles, tag_shared_blocks, SharedBlocks, SpinBarrier, WorkerShared};
use crate::particles::{
    histogram_sort_into, lane_key, particle_code, zone_local, ParticleInit, ParticleStore, SortKey, CH_POS, CH_VEL,
    LANE_KEY_LIMIT,
};
use crate::transfer::{
    boundary_block, g2p_group, p2g_group, stress_group, update_block, G2pStats, KernelParams, LaneOrder, P2gStats,
    FLIP_CHANNELS, STRESS_CHANNELS,
};
use crate::Vec3;

pub const DEFAULT_FUSED_THRESHOLD: usize = 100_000;
const FULL_SORT_STRIDE: u64 = LANE_KEY_LIMIT as u64 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RebuildPolicy {
    #[default]
    Amortized,
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SortPolicy {
    /// Sort to cell granularity at rebuilds, lane radix sort every step.
    #[default]
    Amortized,
    /// Full histogram sort of all particles every step.
    FullEveryStep,
    /// No sorting between rebuilds; only adjacent equal keys are fused.
    NoneBetween,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionPolicy {
    #[default]
    Merged,
    /// Stress computed in its own pass over all particles.
    SplitStress,
    /// Boundary conditions applied in their own pass over the grid.
    SplitBc,
    /// Whole P2G buffer cleared every step instead of touched blocks only.
    SplitClear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransferMode {
    #[default]
    Split,
    G2p2g,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryMode {
    #[default]
    Slip,
    Sticky,
}

/// Static box; nodes outside `[min, max]` lose their outward velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryBox {
    pub min: Vec3,
    pub max: Vec3,
    pub mode: BoundaryMode,
}

impl BoundaryBox {
    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|a| self.min[a] < self.max[a] && self.min[a].is_finite() && self.max[a].is_finite()) {
            Ok(())
        } else {
            Err(MpmError::RejectedInput(format!("boundary min {:?} must be below max {:?}", self.min, self.max)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rebuild: RebuildPolicy,
    pub sort: SortPolicy,
    pub fusion: FusionPolicy,
    pub transfer: TransferMode,
    /// Exact fixed-point accumulation; results are independent of
    /// accumulation order, worker count and rebuild schedule.
    pub deterministic: bool,
    /// Fused transfers are used only while every worker holds fewer particles.
    pub fused_threshold: usize,
    pub workers: usize,
    pub threads_per_worker: usize,
    /// Pick dt from the CFL condition instead of `SimParams::dt`.
    pub cfl_auto: bool,
    pub barrier_timeout: Duration,
    /// Record nodal vs particle mass and momentum every step.
    pub probe_conservation: bool,
    /// Checksum each P2G buffer before and after peers read it.
    pub verify_peer_reads: bool,
    /// Start every frame with a rebuild-mapping, bounding the steps between
    /// rebuilds by the frame length even for resting material.
    pub remap_each_frame: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rebuild: RebuildPolicy::default(),
            sort: SortPolicy::default(),
            fusion: FusionPolicy::default(),
            transfer: TransferMode::default(),
            deterministic: false,
            fused_threshold: DEFAULT_FUSED_THRESHOLD,
            workers: 1,
            threads_per_worker: 1,
            cfl_auto: false,
            barrier_timeout: crate::multi::DEFAULT_BARRIER_TIMEOUT,
            probe_conservation: false,
            verify_peer_reads: false,
            remap_each_frame: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.threads_per_worker == 0 {
            return Err(MpmError::RejectedInput("workers and threads_per_worker must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFlags {
    pub rebuild_needed: bool,
    pub steps_since_rebuild: u64,
    pub fused_mode: bool,
    pub deterministic_mode: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub rebuild: Duration,
    pub sort: Duration,
    pub p2g: Duration,
    pub grid: Duration,
    pub g2p: Duration,
}

impl PhaseTimings {
    pub fn total(&self) -> Duration {
        self.rebuild + self.sort + self.p2g + self.grid + self.g2p
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Particles excluded for non-finite state.
    pub quarantined: u64,
    /// Quarantined particles removed at a rebuild.
    pub dropped: u64,
    /// Stress evaluations with floored singular values.
    pub clamped: u64,
    /// Fluid particles with J <= 0 (stress zeroed).
    pub degenerate: u64,
    /// (subgroup, node) scatters.
    pub accumulations: u64,
    /// Steps whose G2P raised the free-zone flag.
    pub violations: u64,
    /// P2G buffers whose checksum changed while peers read them.
    pub peer_checksum_mismatches: u64,
    pub peer_checksums_verified: u64,
}

impl Diagnostics {
    fn merge(&mut self, o: &Diagnostics) {
        self.quarantined += o.quarantined;
        self.dropped += o.dropped;
        self.clamped += o.clamped;
        self.degenerate += o.degenerate;
        self.accumulations += o.accumulations;
        self.violations += o.violations;
        self.peer_checksum_mismatches += o.peer_checksum_mismatches;
        self.peer_checksums_verified += o.peer_checksums_verified;
    }
}

/// Nodal vs particle totals right after P2G (before gravity and boundary).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConservationSample {
    pub step: u64,
    pub node_mass: f64,
    pub node_momentum: Vec3,
    pub particle_mass: f64,
    pub particle_momentum: Vec3,
    pub momentum_scale: f64,
}

impl ConservationSample {
    fn merge(&mut self, o: &ConservationSample) {
        self.node_mass += o.node_mass;
        self.node_momentum += o.node_momentum;
        self.particle_mass += o.particle_mass;
        self.particle_momentum += o.particle_momentum;
        self.momentum_scale += o.momentum_scale;
    }

    pub fn mass_error(&self) -> f64 {
        (self.node_mass - self.particle_mass).abs() / self.particle_mass.abs().max(f64::MIN_POSITIVE)
    }

    /// Relative to |Σ m v|, or to Σ m|v| when the total momentum vanishes.
    pub fn momentum_error(&self) -> f64 {
        let scale = match self.particle_momentum.norm() {
            n if n > 0.0 => n,
            _ => self.momentum_scale.max(f64::MIN_POSITIVE),
        };
        (self.node_momentum - self.particle_momentum).norm() / scale
    }
}

/// Result of advancing the world by a frame or a fixed number of steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameReport {
    pub steps: u32,
    pub simulated_time: f64,
    pub rebuilds: u32,
    /// Phase times of the busiest worker.
    pub timings: PhaseTimings,
    pub wall: Duration,
    pub barrier_generations: u64,
    pub realloc_count: u64,
    pub particle_count: usize,
    pub probes: Vec<ConservationSample>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepBudget {
    Steps(u32),
    /// Simulated seconds, covered with CFL-limited steps.
    Time(f64),
}

#[derive(Debug, Default)]
struct WorkerReport {
    steps: u32,
    simulated_time: f64,
    rebuilds: u32,
    timings: PhaseTimings,
    diagnostics: Diagnostics,
    probes: Vec<ConservationSample>,
}

struct StepContext<'a> {
    params: &'a SimParams,
    materials: &'a [Material],
    boundary: Option<&'a BoundaryBox>,
    config: &'a PipelineConfig,
    shared: &'a [WorkerShared],
    barrier: &'a SpinBarrier,
    fused: bool,
    /// Single split-mode worker: a violation rebuilds before the next P2G.
    /// Otherwise the trigger is lagged by one step behind a one-cell guard.
    immediate: bool,
    max_sound_speed: f64,
}

impl<'a> StepContext<'a> {
    fn n(&self) -> usize {
        self.shared.len()
    }

    fn kernel(&self, dt: f64) -> KernelParams<'a> {
        KernelParams {
            dx: self.params.dx,
            dt,
            gravity: self.params.gravity,
            materials: self.materials,
            deterministic: self.config.deterministic,
            flip_blend: self.params.flip_blend,
        }
    }

    fn guard(&self) -> i64 {
        if self.immediate {
            0
        } else {
            1
        }
    }
}

fn lock_err<T>(_: T) -> MpmError {
    MpmError::ContractViolation("a worker panicked while holding a grid lock".into())
}

struct Worker {
    id: usize,
    store: ParticleStore,
    table: BlockTable,
    shared_blocks: SharedBlocks,
    /// Reduced nodal mass and velocity (buffer A).
    grid: GrowBuffer<f64>,
    /// Pre-force nodal velocity, kept only for FLIP blending.
    old_velocity: GrowBuffer<f64>,
    slots: GrowBuffer<u32>,
    codes: GrowBuffer<u64>,
    block_index: GrowBuffer<u32>,
    sort_keys: GrowBuffer<u64>,
    counts: GrowBuffer<u32>,
    order: GrowBuffer<u32>,
    sorted_slots: GrowBuffer<u32>,
    sorted_blocks: GrowBuffer<u32>,
    sorted_keys: GrowBuffer<u16>,
    scratch: ScratchPool<f64>,
    pool: rayon::ThreadPool,
    step_index: u64,
    rebuild_next: bool,
    violation_pending: bool,
    pending_g2p: Option<f64>,
    steps_since_rebuild: u64,
    speed_bound: f64,
    last_checksum: Option<u64>,
}

impl Worker {
    fn new(id: usize, lane_width: usize, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(move |i| format!("mpm-w{id}-{i}"))
            .build()
            .map_err(|e| MpmError::RejectedInput(format!("cannot start worker thread pool: {e}")))?;
        Ok(Worker {
            id,
            store: ParticleStore::new(lane_width)?,
            table: BlockTable::new(),
            shared_blocks: SharedBlocks::default(),
            grid: GrowBuffer::new("grid buffer A"),
            old_velocity: GrowBuffer::new("grid old velocity"),
            slots: GrowBuffer::new("rebuild slots"),
            codes: GrowBuffer::new("particle codes"),
            block_index: GrowBuffer::new("particle block index"),
            sort_keys: GrowBuffer::new("sort keys"),
            counts: GrowBuffer::new("histogram"),
            order: GrowBuffer::new("sort order"),
            sorted_slots: GrowBuffer::new("sorted slots"),
            sorted_blocks: GrowBuffer::new("sorted blocks"),
            sorted_keys: GrowBuffer::new("sorted lane keys"),
            scratch: ScratchPool::default(),
            pool,
            step_index: 0,
            rebuild_next: true,
            violation_pending: false,
            pending_g2p: None,
            steps_since_rebuild: 0,
            speed_bound: 0.0,
            last_checksum: None,
        })
    }

    fn realloc_count(&self) -> u64 {
        self.store.realloc_count()
            + self.table.realloc_count()
            + self.shared_blocks.realloc_count()
            + self.grid.realloc_count()
            + self.old_velocity.realloc_count()
            + self.slots.realloc_count()
            + self.codes.realloc_count()
            + self.block_index.realloc_count()
            + self.sort_keys.realloc_count()
            + self.counts.realloc_count()
            + self.order.realloc_count()
            + self.sorted_slots.realloc_count()
            + self.sorted_blocks.realloc_count()
            + self.sorted_keys.realloc_count()
            + self.scratch.realloc_count()
    }

    fn append(&mut self, particles: &[ParticleInit], fused: bool) -> Result<()> {
        self.store.append_particles(particles, fused)?;
        self.rebuild_next = true;
        for p in particles {
            self.speed_bound = self.speed_bound.max(p.vel.norm());
        }
        Ok(())
    }

    fn advance(&mut self, ctx: &StepContext, budget: StepBudget) -> Result<WorkerReport> {
        let mut report = WorkerReport::default();
        let mut t = 0.0;
        loop {
            let dt = match budget {
                StepBudget::Steps(n) => {
                    if report.steps >= n {
                        break;
                    }
                    ctx.params.dt
                }
                StepBudget::Time(total) => {
                    let remaining = total - t;
                    if remaining <= total * 1e-9 {
                        break;
                    }
                    let speed = self.global_speed(ctx)?;
                    cfl_dt(speed + ctx.max_sound_speed, ctx.params, remaining)
                }
            };
            let step = self.step_index;
            self.step(ctx, dt, &mut report)
                .map_err(|e| MpmError::AtStep { step, source: Box::new(e) })?;
            t += dt;
            report.steps += 1;
        }
        if let Some(dt) = self.pending_g2p.take() {
            let s = self.g2p(ctx, dt, &mut report)?;
            self.note_violation(ctx, s.violation, &mut report);
        }
        report.simulated_time = t;
        Ok(report)
    }

    fn global_speed(&mut self, ctx: &StepContext) -> Result<f64> {
        if ctx.n() == 1 {
            return Ok(self.speed_bound);
        }
        ctx.shared[self.id].speed.store(self.speed_bound.to_bits(), std::sync::atomic::Ordering::Release);
        ctx.barrier.wait(self.id, false)?;
        let max = ctx
            .shared
            .iter()
            .map(|s| f64::from_bits(s.speed.load(std::sync::atomic::Ordering::Acquire)))
            .fold(0.0, f64::max);
        // every worker must read before anyone republishes
        ctx.barrier.wait(self.id, false)?;
        Ok(max)
    }

    fn note_violation(&mut self, ctx: &StepContext, violation: bool, report: &mut WorkerReport) {
        report.diagnostics.violations += violation as u64;
        if ctx.immediate {
            self.rebuild_next |= violation;
        } else {
            self.violation_pending |= violation;
        }
    }

    fn step(&mut self, ctx: &StepContext, dt: f64, report: &mut WorkerReport) -> Result<()> {
        let parity = (self.step_index % 2) as usize;
        let rebuild = self.rebuild_next || ctx.config.rebuild == RebuildPolicy::EveryStep;
        self.rebuild_next = false;
        if rebuild {
            if let Some(pdt) = self.pending_g2p.take() {
                self.g2p(ctx, pdt, report)?;
            }
            self.rebuild_mapping(ctx, report)?;
            if ctx.n() > 1 {
                self.publish_codes(ctx)?;
                ctx.barrier.wait(self.id, false)?;
                self.tag(ctx, report)?;
            }
            self.steps_since_rebuild = 0;
            report.rebuilds += 1;
        } else if ctx.config.sort == SortPolicy::FullEveryStep {
            if let Some(pdt) = self.pending_g2p.take() {
                let s = self.g2p(ctx, pdt, report)?;
                self.note_violation(ctx, s.violation, report);
            }
            self.full_sort(report)?;
        }

        self.scatter(ctx, dt, parity, report)?;

        let flag = std::mem::take(&mut self.violation_pending);
        let any = if ctx.n() > 1 { ctx.barrier.wait(self.id, flag)?.any_flag } else { flag };
        if !ctx.immediate {
            // a flag raised before this step's rebuild refers to the old mapping
            self.rebuild_next = any && !rebuild;
        }
        if ctx.config.verify_peer_reads && ctx.n() > 1 {
            self.verify_previous_buffer(ctx, parity, report)?;
        }

        self.grid_update(ctx, dt, parity, report)?;

        if ctx.fused {
            self.pending_g2p = Some(dt);
        } else {
            let s = self.g2p(ctx, dt, report)?;
            self.note_violation(ctx, s.violation, report);
        }
        self.step_index += 1;
        self.steps_since_rebuild += 1;
        Ok(())
    }

    fn rebuild_mapping(&mut self, ctx: &StepContext, report: &mut WorkerReport) -> Result<()> {
        let t0 = Instant::now();
        let dx = ctx.params.dx;
        self.slots.clear();
        self.codes.clear();
        let mut max_speed: f64 = 0.0;
        for s in self.store.active_slots() {
            if self.store.is_quarantined(s) {
                report.diagnostics.dropped += 1;
                continue;
            }
            self.slots.push(s as u32)?;
            self.codes.push(particle_code(&self.store.vec3(s, CH_POS), dx)?.0)?;
            max_speed = max_speed.max(self.store.vec3(s, CH_VEL).norm());
        }
        self.speed_bound = self.speed_bound.max(max_speed);
        self.table.begin(self.table.gblock_count().max(1))?;
        self.block_index.clear();
        for &c in self.codes.iter() {
            let idx = self.table.insert_gblock(CellCode(c).block())?;
            self.block_index.push(idx)?;
        }
        self.table.dilate()?;
        let blocks = self.table.count();
        self.grid.clear();
        self.grid.resize(blocks * BLOCK_STRIDE, 0.0)?;
        if ctx.params.flip_blend > 0.0 {
            self.old_velocity.clear();
            self.old_velocity.resize(blocks * FLIP_CHANNELS * BLOCK_CELLS, 0.0)?;
        }
        let t1 = Instant::now();
        report.timings.rebuild += t1 - t0;

        self.sort_keys.clear();
        for (&c, &b) in self.codes.iter().zip(self.block_index.iter()) {
            self.sort_keys.push(SortKey::new(b, CellCode(c)).0)?;
        }
        let bound = self.table.gblock_count() * 64;
        histogram_sort_into(&self.sort_keys, bound, &mut self.counts, &mut self.order)?;
        self.sorted_slots.clear();
        self.sorted_blocks.clear();
        self.sorted_keys.clear();
        for &o in self.order.iter() {
            let o = o as usize;
            let b = self.block_index[o];
            let base = decode(CellCode(self.codes[o])).map(|c| c as i64);
            let key = lane_key(zone_local(base, self.table.code(b).coords()));
            self.sorted_slots.push(self.slots[o])?;
            self.sorted_blocks.push(b)?;
            self.sorted_keys.push(key)?;
        }
        self.store.relayout(&self.sorted_slots, &self.sorted_blocks, &self.sorted_keys)?;
        report.timings.sort += t1.elapsed();
        log::debug!(
            "worker {} rebuild at step {}: {} particles, {} gblocks, {} pblocks",
            self.id,
            self.step_index,
            self.store.len(),
            self.table.gblock_count(),
            blocks
        );
        Ok(())
    }

    fn full_sort(&mut self, report: &mut WorkerReport) -> Result<()> {
        let t0 = Instant::now();
        self.slots.clear();
        self.sort_keys.clear();
        let keys = self.store.lane_keys();
        for g in self.store.groups() {
            for s in g.first as usize..(g.first + g.len) as usize {
                if self.store.is_quarantined(s) {
                    report.diagnostics.dropped += 1;
                    continue;
                }
                self.slots.push(s as u32)?;
                self.sort_keys.push(g.block_index as u64 * FULL_SORT_STRIDE + keys[s] as u64)?;
            }
        }
        let bound = self.table.gblock_count() * FULL_SORT_STRIDE as usize;
        histogram_sort_into(&self.sort_keys, bound, &mut self.counts, &mut self.order)?;
        self.sorted_slots.clear();
        self.sorted_blocks.clear();
        self.sorted_keys.clear();
        for &o in self.order.iter() {
            let k = self.sort_keys[o as usize];
            self.sorted_slots.push(self.slots[o as usize])?;
            self.sorted_blocks.push((k / FULL_SORT_STRIDE) as u32)?;
            self.sorted_keys.push((k % FULL_SORT_STRIDE) as u16)?;
        }
        self.store.relayout(&self.sorted_slots, &self.sorted_blocks, &self.sorted_keys)?;
        report.timings.sort += t0.elapsed();
        Ok(())
    }

    fn publish_codes(&mut self, ctx: &StepContext) -> Result<()> {
        let mut codes = ctx.shared[self.id].codes.write().map_err(lock_err)?;
        codes.clear();
        codes.ensure_capacity(self.table.count())?;
        for c in self.table.codes() {
            codes.push(c.0)?;
        }
        Ok(())
    }

    fn tag(&mut self, ctx: &StepContext, report: &mut WorkerReport) -> Result<()> {
        let t0 = Instant::now();
        let guards = ctx.shared.iter().map(|s| s.codes.read().map_err(lock_err)).collect::<Result<Vec<_>>>()?;
        let views: Vec<&[u64]> = guards.iter().map(|g| g.as_slice()).collect();
        tag_shared_blocks(self.id, &self.table, &views, &mut self.shared_blocks)?;
        report.timings.rebuild += t0.elapsed();
        Ok(())
    }

    /// P2G for this step, fused with the deferred G2P when one is pending.
    fn scatter(&mut self, ctx: &StepContext, dt: f64, parity: usize, report: &mut WorkerReport) -> Result<()> {
        let t0 = Instant::now();
        let shared = &ctx.shared[self.id];
        shared.grid[parity].write().map_err(lock_err)?.prepare(
            self.table.count(),
            self.table.epoch(),
            ctx.config.fusion == FusionPolicy::SplitClear,
        )?;
        let pending = self.pending_g2p.take();
        let kp = ctx.kernel(dt);
        let kp_gather = pending.map(|pdt| ctx.kernel(pdt));
        let guard = ctx.guard();
        let lane_order = match ctx.config.sort {
            SortPolicy::Amortized => LaneOrder::Radix,
            _ => LaneOrder::Storage,
        };
        let probe = ctx.config.probe_conservation;
        let width = self.store.lane_width();
        let split_stress = ctx.config.fusion == FusionPolicy::SplitStress && pending.is_none();
        let mut stress = if split_stress {
            Some(self.scratch.acquire("stress", self.store.slots() * STRESS_CHANNELS)?)
        } else {
            None
        };

        let (p, g) = {
            let buffer = shared.grid[parity].read().map_err(lock_err)?;
            let table = &self.table;
            let grid = self.grid.as_slice();
            let old = (ctx.params.flip_blend > 0.0).then(|| self.old_velocity.as_slice());
            let mut chunks = self.store.chunks_mut();
            self.pool.install(|| -> Result<(P2gStats, G2pStats)> {
                let mut pre = P2gStats::default();
                if let Some(lease) = stress.as_mut() {
                    pre = chunks
                        .par_iter()
                        .zip(lease.par_chunks_mut(width * STRESS_CHANNELS))
                        .map(|(c, out)| stress_group(&kp, c, out))
                        .reduce(P2gStats::default, P2gStats::merge);
                }
                let stress_view = stress.as_deref();
                let (p, g) = chunks
                    .par_iter_mut()
                    .enumerate()
                    .map(|(gi, c)| -> Result<(P2gStats, G2pStats)> {
                        let blk = c.group.block_index;
                        let nb = table.neighbors(blk);
                        let pblock = table.code(blk).coords().map(|v| v as i64);
                        let g = match &kp_gather {
                            Some(kg) => g2p_group(kg, c, nb, pblock, grid, old, guard),
                            None => G2pStats::default(),
                        };
                        let s = stress_view
                            .map(|s| &s[gi * width * STRESS_CHANNELS..(gi + 1) * width * STRESS_CHANNELS]);
                        let p = p2g_group(&kp, c, s, lane_order, nb, pblock, &buffer, probe)?;
                        Ok((p, g))
                    })
                    .try_reduce(
                        || (P2gStats::default(), G2pStats::default()),
                        |a, b| Ok((a.0.merge(b.0), a.1.merge(b.1))),
                    )?;
                Ok((p.merge(pre), g))
            })?
        };
        if let Some(lease) = stress {
            self.scratch.release(lease);
        }
        let mut buffer = shared.grid[parity].write().map_err(lock_err)?;
        buffer.finish_accumulation()?;
        let d = &mut report.diagnostics;
        d.accumulations += p.accumulations;
        d.quarantined += p.quarantined + g.quarantined;
        d.clamped += p.clamped;
        d.degenerate += p.degenerate;
        if pending.is_some() {
            self.note_violation(ctx, g.violation, report);
        }
        if probe {
            let mut node_mass = 0.0;
            let mut node_momentum = Vec3::zeros();
            for &b in buffer.touched_blocks() {
                for off in 0..BLOCK_CELLS {
                    node_mass += buffer.load(b, CH_MASS, off);
                    for a in 0..3 {
                        node_momentum[a] += buffer.load(b, CH_MOM + a, off);
                    }
                }
            }
            report.probes.push(ConservationSample {
                step: self.step_index,
                node_mass,
                node_momentum,
                particle_mass: p.particle_mass,
                particle_momentum: p.particle_momentum,
                momentum_scale: p.momentum_scale,
            });
        }
        report.timings.p2g += t0.elapsed();
        Ok(())
    }

    /// Called after the barrier of step k: every peer has finished its grid
    /// update of step k-1, so the buffer it read must be unchanged.
    fn verify_previous_buffer(&mut self, ctx: &StepContext, parity: usize, report: &mut WorkerReport) -> Result<()> {
        let current = ctx.shared[self.id].grid[parity].read().map_err(lock_err)?.checksum();
        if let Some(prev) = self.last_checksum.replace(current) {
            let buffer = ctx.shared[self.id].grid[1 - parity].read().map_err(lock_err)?;
            report.diagnostics.peer_checksums_verified += 1;
            if buffer.checksum() != prev {
                report.diagnostics.peer_checksum_mismatches += 1;
            }
        }
        Ok(())
    }

    fn grid_update(&mut self, ctx: &StepContext, dt: f64, parity: usize, report: &mut WorkerReport) -> Result<()> {
        let t0 = Instant::now();
        let needs_peers = self.shared_blocks.shared_count() > 0;
        let guards: Vec<Option<RwLockReadGuard<NodeBuffer>>> = ctx
            .shared
            .iter()
            .enumerate()
            .map(|(w, s)| {
                if w == self.id || needs_peers {
                    s.grid[parity].read().map(Some).map_err(lock_err)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        let own = guards[self.id].as_deref().expect("own buffer");
        let peers: Vec<Option<&NodeBuffer>> = guards.iter().map(|g| g.as_deref()).collect();
        let table = &self.table;
        let records = &self.shared_blocks;
        let gravity = ctx.params.gravity;
        let dx = ctx.params.dx;
        let inline_bc = if ctx.config.fusion == FusionPolicy::SplitBc { None } else { ctx.boundary };
        let flip = ctx.params.flip_blend > 0.0;
        let grid = &mut self.grid;
        let old = &mut self.old_velocity;
        let max_speed = self.pool.install(|| {
            let update = |b: usize, out: &mut [f64], old: Option<&mut [f64]>| -> f64 {
                let b32 = b as u32;
                let recs = records.records(b32);
                let sum = |ch: usize, off: usize| {
                    let mut s = own.load(b32, ch, off);
                    for r in recs {
                        let peer = peers[r.worker as usize].expect("peer buffer");
                        if peer.is_touched(r.block) {
                            s += peer.load(r.block, ch, off);
                        }
                    }
                    s
                };
                update_block(table.code(b32).coords(), sum, out, old, dt, &gravity, dx, inline_bc).max_speed
            };
            let speed = if flip {
                grid.par_chunks_mut(BLOCK_STRIDE)
                    .zip(old.par_chunks_mut(FLIP_CHANNELS * BLOCK_CELLS))
                    .enumerate()
                    .filter(|(b, _)| own.is_touched(*b as u32))
                    .map(|(b, (out, o))| update(b, out, Some(o)))
                    .reduce(|| 0.0, f64::max)
            } else {
                grid.par_chunks_mut(BLOCK_STRIDE)
                    .enumerate()
                    .filter(|(b, _)| own.is_touched(*b as u32))
                    .map(|(b, out)| update(b, out, None))
                    .reduce(|| 0.0, f64::max)
            };
            if let (Some(b), None) = (ctx.boundary, inline_bc) {
                grid.par_chunks_mut(BLOCK_STRIDE)
                    .enumerate()
                    .filter(|(i, _)| own.is_touched(*i as u32))
                    .for_each(|(i, out)| boundary_block(table.code(i as u32).coords(), out, dx, b));
            }
            speed
        });
        self.speed_bound = max_speed;
        report.timings.grid += t0.elapsed();
        Ok(())
    }

    fn g2p(&mut self, ctx: &StepContext, dt: f64, report: &mut WorkerReport) -> Result<G2pStats> {
        let t0 = Instant::now();
        let kp = ctx.kernel(dt);
        let guard = ctx.guard();
        let table = &self.table;
        let grid = self.grid.as_slice();
        let old = (ctx.params.flip_blend > 0.0).then(|| self.old_velocity.as_slice());
        let mut chunks = self.store.chunks_mut();
        let stats = self.pool.install(|| {
            chunks
                .par_iter_mut()
                .map(|c| {
                    let blk = c.group.block_index;
                    let pblock = table.code(blk).coords().map(|v| v as i64);
                    g2p_group(&kp, c, table.neighbors(blk), pblock, grid, old, guard)
                })
                .reduce(G2pStats::default, G2pStats::merge)
        });
        report.diagnostics.quarantined += stats.quarantined;
        report.timings.g2p += t0.elapsed();
        Ok(stats)
    }
}

/// The simulated scene: particles partitioned over workers plus the shared
/// runtime state they synchronize through.
pub struct World {
    params: SimParams,
    materials: Vec<Material>,
    boundary: Option<BoundaryBox>,
    config: PipelineConfig,
    workers: Vec<Worker>,
    shared: Vec<WorkerShared>,
    barrier: SpinBarrier,
    fused_active: bool,
    fallback_logged: bool,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("workers", &self.workers.len())
            .field("particles", &self.particle_count())
            .field("fused_active", &self.fused_active)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl World {
    pub fn new(
        params: SimParams,
        materials: Vec<Material>,
        boundary: Option<BoundaryBox>,
        config: PipelineConfig,
        particles: &[ParticleInit],
    ) -> Result<World> {
        params.validate()?;
        config.validate()?;
        if materials.is_empty() {
            return Err(MpmError::RejectedInput("at least one material is required".into()));
        }
        for m in &materials {
            m.validate()?;
        }
        if let Some(b) = &boundary {
            b.validate()?;
        }
        let n = config.workers;
        let workers = (0..n)
            .map(|id| Worker::new(id, params.lane_width, config.threads_per_worker))
            .collect::<Result<Vec<_>>>()?;
        let mut world = World {
            shared: (0..n).map(|_| WorkerShared::default()).collect(),
            barrier: SpinBarrier::new(n, config.barrier_timeout),
            params,
            materials,
            boundary,
            config,
            workers,
            fused_active: false,
            fallback_logged: false,
        };
        world.distribute(particles)?;
        Ok(world)
    }

    fn distribute(&mut self, particles: &[ParticleInit]) -> Result<()> {
        if particles.is_empty() {
            return Ok(());
        }
        for p in particles {
            if (p.material as usize) >= self.materials.len() {
                return Err(MpmError::RejectedInput(format!(
                    "particle {} uses material {} of {}",
                    p.id,
                    p.material,
                    self.materials.len()
                )));
            }
        }
        let positions: Vec<Vec3> = particles.iter().map(|p| p.pos).collect();
        let (order, ranges) = partition_particles(&positions, self.workers.len())?;
        let fused = self.fused_active;
        for (w, range) in self.workers.iter_mut().zip(ranges) {
            let batch: Vec<ParticleInit> = order[range].iter().map(|&i| particles[i].clone()).collect();
            w.append(&batch, fused)?;
        }
        // the rebuild decision is global
        for w in &mut self.workers {
            w.rebuild_next = true;
        }
        Ok(())
    }

    /// Adds particles between frames; they join at the next step's rebuild.
    pub fn append(&mut self, particles: &[ParticleInit]) -> Result<()> {
        if particles.is_empty() {
            return Ok(());
        }
        if self.fused_active {
            return Err(MpmError::ModeConflict(
                "particles cannot be appended while fused G2P2G transfers are active".into(),
            ));
        }
        self.distribute(particles)
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn worker_count(&self) -> usize {
        self.workers.len()
    }

    pub fn particle_count(&self) -> usize {
        self.workers.iter().map(|w| w.store.len()).sum()
    }

    pub fn worker_particle_counts(&self) -> Vec<usize> {
        self.workers.iter().map(|w| w.store.len()).collect()
    }

    pub fn fused_active(&self) -> bool {
        self.fused_active
    }

    pub fn barrier_generations(&self) -> u64 {
        self.barrier.generation()
    }

    pub fn flags(&self) -> StepFlags {
        let w = &self.workers[0];
        StepFlags {
            rebuild_needed: w.rebuild_next,
            steps_since_rebuild: w.steps_since_rebuild,
            fused_mode: self.fused_active,
            deterministic_mode: self.config.deterministic,
        }
    }

    pub fn realloc_count(&self) -> u64 {
        self.workers.iter().map(Worker::realloc_count).sum::<u64>()
            + self.shared.iter().map(WorkerShared::realloc_count).sum::<u64>()
    }

    /// Shared blocks per worker as of the last rebuild.
    pub fn shared_block_counts(&self) -> Vec<usize> {
        self.workers.iter().map(|w| w.shared_blocks.shared_count()).collect()
    }

    /// `(id, position)` of every particle, sorted by id.
    pub fn positions_by_id(&self) -> Vec<(u64, Vec3)> {
        let mut all: Vec<(u64, Vec3)> = self.workers.iter().flat_map(|w| w.store.positions_by_id()).collect();
        all.sort_unstable_by_key(|p| p.0);
        all
    }

    /// `(id, velocity)` of every particle, sorted by id.
    pub fn velocities_by_id(&self) -> Vec<(u64, Vec3)> {
        let mut all: Vec<(u64, Vec3)> = self
            .workers
            .iter()
            .flat_map(|w| w.store.active_slots().map(|s| (w.store.id(s), w.store.vec3(s, CH_VEL))))
            .collect();
        all.sort_unstable_by_key(|p| p.0);
        all
    }

    /// `(gblocks, pblocks)` per worker as of the last rebuild.
    pub fn block_counts(&self) -> Vec<(usize, usize)> {
        self.workers.iter().map(|w| (w.table.gblock_count(), w.table.count())).collect()
    }

    /// Runs a rebuild-mapping on every worker outside of a step.
    pub fn remap(&mut self) -> Result<()> {
        let World { params, materials, boundary, config, workers, shared, barrier, .. } = self;
        let ctx = StepContext {
            params,
            materials,
            boundary: boundary.as_ref(),
            config,
            shared,
            barrier,
            fused: false,
            immediate: workers.len() == 1,
            max_sound_speed: 0.0,
        };
        let mut scratch = WorkerReport::default();
        for w in workers.iter_mut() {
            w.rebuild_mapping(&ctx, &mut scratch)?;
            w.publish_codes(&ctx)?;
            w.rebuild_next = false;
            w.violation_pending = false;
            w.steps_since_rebuild = 0;
        }
        if workers.len() > 1 {
            for w in workers.iter_mut() {
                w.tag(&ctx, &mut scratch)?;
            }
        }
        Ok(())
    }

    /// Whether every active lane's current particle block is its group's
    /// block. Holds right after a rebuild-mapping.
    pub fn lane_groups_homogeneous(&self) -> Result<bool> {
        for w in &self.workers {
            for g in w.store.groups() {
                let code = w.table.code(g.block_index);
                for s in g.first as usize..(g.first + g.len) as usize {
                    if particle_code(&w.store.vec3(s, CH_POS), self.params.dx)?.block() != code {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    pub fn run_frame(&mut self) -> Result<FrameReport> {
        if self.config.remap_each_frame {
            for w in &mut self.workers {
                w.rebuild_next = true;
            }
        }
        let budget = if self.config.cfl_auto {
            StepBudget::Time(self.params.frame_dt)
        } else {
            StepBudget::Steps(self.params.steps_per_frame)
        };
        self.advance(budget)
    }

    pub fn run_steps(&mut self, steps: u32) -> Result<FrameReport> {
        self.advance(StepBudget::Steps(steps))
    }

    pub fn advance(&mut self, budget: StepBudget) -> Result<FrameReport> {
        let n = self.workers.len();
        let per_worker = self.workers.iter().map(|w| w.store.len()).max().unwrap_or(0);
        let fused = self.config.transfer == TransferMode::G2p2g && per_worker < self.config.fused_threshold;
        if self.config.transfer == TransferMode::G2p2g && !fused && !self.fallback_logged {
            log::info!(
                "{per_worker} particles per worker exceeds the fused threshold {}; using split transfers",
                self.config.fused_threshold
            );
            self.fallback_logged = true;
        }
        self.fused_active = fused;
        let realloc_before = self.realloc_count();
        let generation_before = self.barrier.generation();
        let start = Instant::now();

        let World { params, materials, boundary, config, workers, shared, barrier, .. } = self;
        let ctx = StepContext {
            params,
            materials,
            boundary: boundary.as_ref(),
            config,
            shared,
            barrier,
            fused,
            immediate: n == 1 && !fused,
            max_sound_speed: materials.iter().map(Material::sound_speed).fold(0.0, f64::max),
        };
        let results: Vec<Result<WorkerReport>> = if n == 1 {
            vec![workers[0].advance(&ctx, budget)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = workers
                    .iter_mut()
                    .map(|w| {
                        let ctx = &ctx;
                        s.spawn(move || {
                            let r = w.advance(ctx, budget);
                            if r.is_err() {
                                ctx.barrier.abort();
                            }
                            r
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            })
        };
        let wall = start.elapsed();

        let mut reports = Vec::with_capacity(n);
        let mut first_err = None;
        for r in results {
            match r {
                Ok(rep) => reports.push(rep),
                Err(e) => {
                    let secondary = matches!(e, MpmError::BarrierAborted);
                    match &first_err {
                        None => first_err = Some(e),
                        Some(MpmError::BarrierAborted) if !secondary => first_err = Some(e),
                        _ => {}
                    }
                }
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }

        let mut out = FrameReport {
            steps: reports[0].steps,
            simulated_time: reports[0].simulated_time,
            rebuilds: reports[0].rebuilds,
            wall,
            particle_count: self.particle_count(),
            ..FrameReport::default()
        };
        out.timings = reports
            .iter()
            .map(|r| r.timings)
            .max_by_key(|t| t.total())
            .unwrap_or_default();
        let mut probes = reports[0].probes.clone();
        for r in &reports {
            out.diagnostics.merge(&r.diagnostics);
        }
        for r in &reports[1..] {
            for (a, b) in probes.iter_mut().zip(&r.probes) {
                a.merge(b);
            }
        }
        out.probes = probes;
        out.barrier_generations = self.barrier.generation() - generation_before;
        out.realloc_count = self.realloc_count() - realloc_before;
        Ok(out)
    }
}
