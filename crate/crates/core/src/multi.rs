//! Multi-worker runtime pieces: static particle partition, spin barrier,
//! shared-block tagging and the scaling-efficiency metric.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::{Duration, Instant};

use crate::arena::GrowBuffer;
use crate::error::{MpmError, Result};
use crate::grid::{BlockCode, BlockTable, NodeBuffer};
use crate::Vec3;

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(10);
const SPINS_BEFORE_YIELD: u32 = 64;

/// Sorts particles along the longest axis of their bounding box and splits
/// them into `n` contiguous ranges; the first `len % n` ranges get one extra.
/// Returns the sorted index order and the ranges into it.
pub fn partition_particles(positions: &[Vec3], n: usize) -> Result<(Vec<usize>, Vec<std::ops::Range<usize>>)> {
    if n == 0 {
        return Err(MpmError::RejectedInput("worker count must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..positions.len()).collect();
    if let Some(first) = positions.first() {
        let (lo, hi) = positions.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let axis = (hi - lo).imax();
        order.sort_by(|&a, &b| positions[a][axis].total_cmp(&positions[b][axis]).then(a.cmp(&b)));
    }
    let (base, rem) = (positions.len() / n, positions.len() % n);
    let mut ranges = Vec::with_capacity(n);
    let mut start = 0;
    for w in 0..n {
        let len = base + usize::from(w < rem);
        ranges.push(start..start + len);
        start += len;
    }
    Ok((order, ranges))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BarrierPass {
    /// Generation this wait completed.
    pub generation: u64,
    /// OR of the flags every worker brought to this generation.
    pub any_flag: bool,
}

/// Generation-counting spin barrier with an OR-reduced flag and a watchdog.
#[derive(Debug)]
pub struct SpinBarrier {
    n: usize,
    arrived: AtomicUsize,
    generation: AtomicU64,
    flags: [AtomicBool; 3],
    aborted: AtomicBool,
    timeout: Duration,
}

impl SpinBarrier {
    pub fn new(n: usize, timeout: Duration) -> Self {
        SpinBarrier {
            n: n.max(1),
            arrived: AtomicUsize::new(0),
            generation: AtomicU64::new(0),
            flags: Default::default(),
            aborted: AtomicBool::new(false),
            timeout,
        }
    }

    pub fn workers(&self) -> usize {
        self.n
    }

    /// Completed generations so far.
    pub fn generation(&self) -> u64 {
        self.generation.load(Ordering::Acquire)
    }

    /// Makes every current and future waiter fail.
    pub fn abort(&self) {
        self.aborted.store(true, Ordering::Release);
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::Acquire)
    }

    pub fn wait(&self, worker: usize, flag: bool) -> Result<BarrierPass> {
        if self.is_aborted() {
            return Err(MpmError::BarrierAborted);
        }
        let generation = self.generation.load(Ordering::Acquire);
        let slot = (generation % 3) as usize;
        if flag {
            self.flags[slot].store(true, Ordering::Release);
        }
        if self.arrived.fetch_add(1, Ordering::AcqRel) + 1 == self.n {
            self.arrived.store(0, Ordering::Relaxed);
            self.flags[((generation + 1) % 3) as usize].store(false, Ordering::Relaxed);
            self.generation.store(generation + 1, Ordering::Release);
        } else {
            let start = Instant::now();
            let mut spins = 0u32;
            while self.generation.load(Ordering::Acquire) == generation {
                if spins < SPINS_BEFORE_YIELD {
                    spins += 1;
                    std::hint::spin_loop();
                    continue;
                }
                std::thread::yield_now();
                if self.is_aborted() {
                    return Err(MpmError::BarrierAborted);
                }
                let waited = start.elapsed();
                if waited > self.timeout {
                    self.abort();
                    log::error!("barrier watchdog: worker {worker} stuck at generation {generation}");
                    return Err(MpmError::BarrierTimeout { worker, generation, waited_ms: waited.as_millis() });
                }
            }
        }
        Ok(BarrierPass { generation, any_flag: self.flags[slot].load(Ordering::Acquire) })
    }
}

/// A peer's copy of a shared block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeerBlock {
    pub worker: u32,
    pub block: u32,
}

/// Per local block, the peers holding the same block code (CSR layout).
#[derive(Debug)]
pub struct SharedBlocks {
    start: GrowBuffer<u32>,
    peers: GrowBuffer<PeerBlock>,
    hits: GrowBuffer<(u32, PeerBlock)>,
    cursor: GrowBuffer<u32>,
    shared: usize,
}

impl Default for SharedBlocks {
    fn default() -> Self {
        SharedBlocks {
            start: GrowBuffer::new("shared block offsets"),
            peers: GrowBuffer::new("shared block peers"),
            hits: GrowBuffer::new("shared block hits"),
            cursor: GrowBuffer::new("shared block cursor"),
            shared: 0,
        }
    }
}

impl SharedBlocks {
    #[inline]
    pub fn records(&self, local: u32) -> &[PeerBlock] {
        if self.start.is_empty() {
            return &[];
        }
        let (a, b) = (self.start[local as usize] as usize, self.start[local as usize + 1] as usize);
        &self.peers[a..b]
    }

    /// Local blocks with at least one peer copy.
    pub fn shared_count(&self) -> usize {
        self.shared
    }

    pub fn realloc_count(&self) -> u64 {
        self.start.realloc_count()
            + self.peers.realloc_count()
            + self.hits.realloc_count()
            + self.cursor.realloc_count()
    }

    pub fn clear(&mut self) {
        self.start.clear();
        self.peers.clear();
        self.shared = 0;
    }
}

/// Looks every peer's published block codes up in the local table and
/// records the hits. `peer_codes[me]` is ignored.
pub fn tag_shared_blocks(me: usize, table: &BlockTable, peer_codes: &[&[u64]], out: &mut SharedBlocks) -> Result<()> {
    out.hits.clear();
    // a local block matches at most one block per peer
    out.hits.ensure_capacity(table.count() * peer_codes.len().saturating_sub(1))?;
    for (p, codes) in peer_codes.iter().enumerate() {
        if p == me {
            continue;
        }
        for (j, &code) in codes.iter().enumerate() {
            if let Some(local) = table.lookup(BlockCode(code)) {
                out.hits.push((local, PeerBlock { worker: p as u32, block: j as u32 }))?;
            }
        }
    }
    let blocks = table.count();
    out.start.clear();
    out.start.resize(blocks + 1, 0)?;
    for &(local, _) in out.hits.iter() {
        out.start[local as usize + 1] += 1;
    }
    out.shared = out.start.iter().skip(1).filter(|&&c| c > 0).count();
    for i in 0..blocks {
        out.start[i + 1] += out.start[i];
    }
    out.peers.clear();
    out.peers.resize(out.hits.len(), PeerBlock { worker: 0, block: 0 })?;
    // hits arrive in (peer, peer block) order, so each record stays sorted by peer
    out.cursor.clear();
    out.cursor.extend_from_slice(&out.start[..blocks])?;
    for &(local, peer) in out.hits.iter() {
        let c = &mut out.cursor[local as usize];
        out.peers[*c as usize] = peer;
        *c += 1;
    }
    Ok(())
}

/// State a worker exposes to its peers.
#[derive(Debug)]
pub struct WorkerShared {
    /// P2G outputs, double-buffered by step parity.
    pub grid: [RwLock<NodeBuffer>; 2],
    /// Block codes by local block index, republished at every rebuild.
    pub codes: RwLock<GrowBuffer<u64>>,
    /// Speed bound published for globally reduced CFL steps (f64 bits).
    pub speed: AtomicU64,
}

impl Default for WorkerShared {
    fn default() -> Self {
        WorkerShared {
            grid: Default::default(),
            codes: RwLock::new(GrowBuffer::new("published codes")),
            speed: AtomicU64::new(0),
        }
    }
}

impl WorkerShared {
    pub fn realloc_count(&self) -> u64 {
        let g: u64 = self.grid.iter().map(|b| b.read().expect("grid lock").realloc_count()).sum();
        g + self.codes.read().expect("codes lock").realloc_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyReport {
    pub t1_ms: f64,
    pub tn_ms: f64,
    pub n: usize,
    pub e: f64,
    /// Superlinear beyond measurement noise (e > 1.05).
    pub anomalous: bool,
}

pub fn efficiency(t1_ms: f64, tn_ms: f64, n: usize) -> Result<EfficiencyReport> {
    if !(t1_ms > 0.0 && tn_ms > 0.0) || n == 0 {
        return Err(MpmError::RejectedInput(format!(
            "efficiency needs positive timings and n >= 1 (t1={t1_ms}, tn={tn_ms}, n={n})"
        )));
    }
    let e = t1_ms / (n as f64 * tn_ms);
    Ok(EfficiencyReport { t1_ms, tn_ms, n, e, anomalous: e > 1.05 })
}
