//! Sparse paged background grid.
//!
//! Cells are addressed by 64-bit Morton codes (x in the lowest interleave
//! slot). The low 6 bits select one of the 4×4×4 cells of a block; the
//! remaining bits are the block code. A hash table maps block codes to
//! consecutive block indices, and nodal data is stored per block as
//! `NODE_CHANNELS` packets of 64 slots in Morton order:
//! `address = (block * channels + channel) * 64 + (code & 63)`.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};

use crate::arena::GrowBuffer;
use crate::error::{MpmError, Result};

pub const COORD_BITS: u32 = 21;
pub const COORD_LIMIT: i64 = 1 << COORD_BITS;
pub const BLOCK_BITS: u32 = 6;
pub const BLOCK_WIDTH: i64 = 4;
pub const BLOCK_CELLS: usize = 64;
/// Block coordinates are cell coordinates >> 2.
pub const BLOCK_COORD_LIMIT: i64 = COORD_LIMIT / BLOCK_WIDTH;
/// mass, momentum x/y/z
pub const NODE_CHANNELS: usize = 4;
pub const CH_MASS: usize = 0;
pub const CH_MOM: usize = 1;
pub const BLOCK_STRIDE: usize = NODE_CHANNELS * BLOCK_CELLS;
pub const NEIGHBORS: usize = 27;

pub const EMPTY_KEY: u64 = u64::MAX;
pub const NOT_FOUND: u32 = u32::MAX;
const PENDING: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellCode(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockCode(pub u64);

#[inline]
fn spread(v: u64) -> u64 {
    let mut w = v & 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x100f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

#[inline]
fn compact(v: u64) -> u32 {
    let mut w = v & 0x1249_2492_4924_9249;
    w = (w ^ (w >> 2)) & 0x10c3_0c30_c30c_30c3;
    w = (w ^ (w >> 4)) & 0x100f_00f0_0f00_f00f;
    w = (w ^ (w >> 8)) & 0x001f_0000_ff00_00ff;
    w = (w ^ (w >> 16)) & 0x001f_0000_0000_ffff;
    w = (w ^ (w >> 32)) & 0x1f_ffff;
    w as u32
}

#[inline]
pub fn encode_unchecked(x: u32, y: u32, z: u32) -> CellCode {
    CellCode(spread(x as u64) | spread(y as u64) << 1 | spread(z as u64) << 2)
}

pub fn encode(x: i64, y: i64, z: i64) -> Result<CellCode> {
    for (axis, c) in [("x", x), ("y", y), ("z", z)] {
        if !(0..COORD_LIMIT).contains(&c) {
            return Err(MpmError::SpatialDomain(format!(
                "cell coordinate {axis}={c} outside [0, 2^{COORD_BITS})"
            )));
        }
    }
    Ok(encode_unchecked(x as u32, y as u32, z as u32))
}

#[inline]
pub fn decode(code: CellCode) -> [u32; 3] {
    [compact(code.0), compact(code.0 >> 1), compact(code.0 >> 2)]
}

#[inline]
pub fn block_of(code: CellCode) -> BlockCode {
    BlockCode(code.0 >> BLOCK_BITS)
}

impl CellCode {
    #[inline]
    pub fn block(self) -> BlockCode {
        block_of(self)
    }

    /// Morton offset of the cell inside its block (6 bits).
    #[inline]
    pub fn cell_offset(self) -> u32 {
        (self.0 & 63) as u32
    }
}

impl BlockCode {
    #[inline]
    pub fn coords(self) -> [u32; 3] {
        decode(CellCode(self.0))
    }

    pub fn from_coords(bx: i64, by: i64, bz: i64) -> Result<BlockCode> {
        for c in [bx, by, bz] {
            if !(0..BLOCK_COORD_LIMIT).contains(&c) {
                return Err(MpmError::SpatialDomain(format!(
                    "block coordinate {c} outside [0, {BLOCK_COORD_LIMIT}); scenes need a one-block margin"
                )));
            }
        }
        Ok(BlockCode(encode_unchecked(bx as u32, by as u32, bz as u32).0))
    }
}

/// Morton offset of local cell `(lx, ly, lz)` in a 4×4×4 block.
pub const LOCAL_OFFSET: [[[u8; 4]; 4]; 4] = {
    let mut t = [[[0u8; 4]; 4]; 4];
    let mut z = 0;
    while z < 4 {
        let mut y = 0;
        while y < 4 {
            let mut x = 0;
            while x < 4 {
                let v = (x & 1) | (y & 1) << 1 | (z & 1) << 2 | (x & 2) << 2 | (y & 2) << 3 | (z & 2) << 4;
                t[z][y][x] = v as u8;
                x += 1;
            }
            y += 1;
        }
        z += 1;
    }
    t
};

#[inline]
pub fn local_offset(cx: i64, cy: i64, cz: i64) -> usize {
    LOCAL_OFFSET[(cz & 3) as usize][(cy & 3) as usize][(cx & 3) as usize] as usize
}

/// Index into a block's 27-neighbor list for relative block offsets in {-1,0,1}.
#[inline]
pub fn neighbor_slot(rx: i64, ry: i64, rz: i64) -> usize {
    ((rx + 1) + 3 * (ry + 1) + 9 * (rz + 1)) as usize
}

#[inline]
fn hash_slot(key: u64, shift: u32) -> usize {
    (key.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> shift) as usize
}

/// Open-addressed block-code → block-index table (linear probing,
/// power-of-two slots, load factor kept below 0.5). Inserts and lookups take
/// `&self` and are safe from concurrent callers.
#[derive(Debug)]
pub struct BlockHash {
    keys: Vec<AtomicU64>,
    values: Vec<AtomicU32>,
    codes: Vec<AtomicU64>,
    count: AtomicU32,
    shift: u32,
    realloc_count: u64,
}

impl Default for BlockHash {
    fn default() -> Self {
        BlockHash {
            keys: Vec::new(),
            values: Vec::new(),
            codes: Vec::new(),
            count: AtomicU32::new(0),
            shift: 64,
            realloc_count: 0,
        }
    }
}

impl BlockHash {
    pub fn with_capacity(entries: usize) -> Result<Self> {
        let mut h = BlockHash::default();
        h.reserve(entries)?;
        Ok(h)
    }

    pub fn slots(&self) -> usize {
        self.keys.len()
    }

    /// Maximum number of entries before the load factor reaches 0.5.
    pub fn entry_capacity(&self) -> usize {
        self.keys.len() / 2
    }

    pub fn len(&self) -> usize {
        (self.count.load(Ordering::Acquire) as usize).min(self.codes.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn realloc_count(&self) -> u64 {
        self.realloc_count
    }

    /// Makes room for `entries` keys at load factor <= 0.5, regrowing to
    /// `4 * entries` (rounded to a power of two) and rehashing when needed.
    pub fn reserve(&mut self, entries: usize) -> Result<()> {
        if entries <= self.entry_capacity() {
            return Ok(());
        }
        let slots = entries
            .checked_mul(4)
            .and_then(usize::checked_next_power_of_two)
            .ok_or(MpmError::Resource { what: "block hash", requested: entries })?;
        if slots > (NOT_FOUND as usize) / 2 {
            return Err(MpmError::Resource { what: "block hash", requested: slots });
        }
        let old: Vec<u64> = (0..self.len()).map(|i| self.codes[i].load(Ordering::Relaxed)).collect();
        let mut keys = Vec::new();
        keys.try_reserve_exact(slots)
            .map_err(|_| MpmError::Resource { what: "block hash", requested: slots })?;
        keys.resize_with(slots, || AtomicU64::new(EMPTY_KEY));
        self.keys = keys;
        self.values = (0..slots).map(|_| AtomicU32::new(PENDING)).collect();
        self.codes = (0..slots / 2).map(|_| AtomicU64::new(EMPTY_KEY)).collect();
        self.shift = 64 - slots.trailing_zeros();
        self.count.store(0, Ordering::Release);
        self.realloc_count += 1;
        for code in old {
            self.insert(code)?;
        }
        Ok(())
    }

    /// Removes every entry; capacity is kept.
    pub fn clear(&mut self) {
        if self.count.load(Ordering::Acquire) as usize > self.codes.len() {
            // an insert overflowed; slots may hold keys without a dense entry
            for (k, v) in self.keys.iter().zip(&self.values) {
                k.store(EMPTY_KEY, Ordering::Relaxed);
                v.store(PENDING, Ordering::Relaxed);
            }
            for c in &self.codes {
                c.store(EMPTY_KEY, Ordering::Relaxed);
            }
            self.count.store(0, Ordering::Release);
            return;
        }
        let n = self.len();
        for i in 0..n {
            let key = self.codes[i].swap(EMPTY_KEY, Ordering::Relaxed);
            let mut slot = hash_slot(key, self.shift);
            let mask = self.keys.len() - 1;
            loop {
                if self.keys[slot].load(Ordering::Relaxed) == key {
                    self.keys[slot].store(EMPTY_KEY, Ordering::Relaxed);
                    self.values[slot].store(PENDING, Ordering::Relaxed);
                    break;
                }
                slot = (slot + 1) & mask;
            }
        }
        self.count.store(0, Ordering::Release);
    }

    #[inline]
    fn wait_value(&self, slot: usize) -> u32 {
        loop {
            let v = self.values[slot].load(Ordering::Acquire);
            if v != PENDING {
                return v;
            }
            std::hint::spin_loop();
        }
    }

    /// Idempotent insert. The first insertion of a key takes the next
    /// consecutive index; later inserts return it with `inserted = false`.
    pub fn insert(&self, key: u64) -> Result<(u32, bool)> {
        if key == EMPTY_KEY {
            return Err(MpmError::RejectedInput("the all-ones key is reserved".into()));
        }
        if self.keys.is_empty() {
            return Err(MpmError::Resource { what: "block hash", requested: 1 });
        }
        let mask = self.keys.len() - 1;
        let mut slot = hash_slot(key, self.shift);
        for _ in 0..self.keys.len() {
            let current = self.keys[slot].load(Ordering::Acquire);
            if current == key {
                let v = self.wait_value(slot);
                return if v == NOT_FOUND {
                    Err(MpmError::Resource { what: "block hash", requested: self.codes.len() + 1 })
                } else {
                    Ok((v, false))
                };
            }
            if current == EMPTY_KEY {
                match self.keys[slot].compare_exchange(EMPTY_KEY, key, Ordering::AcqRel, Ordering::Acquire) {
                    Ok(_) => {
                        let idx = self.count.fetch_add(1, Ordering::AcqRel);
                        if idx as usize >= self.codes.len() {
                            self.values[slot].store(NOT_FOUND, Ordering::Release);
                            return Err(MpmError::Resource {
                                what: "block hash",
                                requested: idx as usize + 1,
                            });
                        }
                        self.codes[idx as usize].store(key, Ordering::Release);
                        self.values[slot].store(idx, Ordering::Release);
                        return Ok((idx, true));
                    }
                    Err(actual) if actual == key => {
                        let v = self.wait_value(slot);
                        return if v == NOT_FOUND {
                            Err(MpmError::Resource { what: "block hash", requested: self.codes.len() + 1 })
                        } else {
                            Ok((v, false))
                        };
                    }
                    Err(_) => {}
                }
            }
            slot = (slot + 1) & mask;
        }
        Err(MpmError::Resource { what: "block hash", requested: self.keys.len() + 1 })
    }

    pub fn lookup(&self, key: u64) -> Option<u32> {
        if self.keys.is_empty() || key == EMPTY_KEY {
            return None;
        }
        let mask = self.keys.len() - 1;
        let mut slot = hash_slot(key, self.shift);
        for _ in 0..self.keys.len() {
            match self.keys[slot].load(Ordering::Acquire) {
                k if k == key => {
                    let v = self.wait_value(slot);
                    return (v != NOT_FOUND).then_some(v);
                }
                EMPTY_KEY => return None,
                _ => slot = (slot + 1) & mask,
            }
        }
        None
    }

    /// Key stored at dense index `idx`.
    #[inline]
    pub fn code(&self, idx: u32) -> u64 {
        self.codes[idx as usize].load(Ordering::Acquire)
    }
}

/// Geometric blocks (holding particles) and their 3×3×3 dilation of physical
/// blocks. Geometric blocks take indices `[0, gblock_count)`.
#[derive(Debug, Default)]
pub struct BlockTable {
    hash: BlockHash,
    gblock_count: usize,
    neighbors: GrowBuffer<u32>,
    epoch: u64,
}

impl BlockTable {
    pub fn new() -> Self {
        BlockTable {
            neighbors: GrowBuffer::new("neighbor table"),
            ..Default::default()
        }
    }

    /// Builds a table from (possibly repeated) geometric block codes.
    pub fn build(gblocks: &[BlockCode]) -> Result<Self> {
        let mut t = BlockTable::new();
        t.begin(gblocks.len())?;
        for &g in gblocks {
            t.insert_gblock(g)?;
        }
        t.dilate()?;
        Ok(t)
    }

    /// Starts a rebuild; `expected_gblocks` is a sizing hint.
    pub fn begin(&mut self, expected_gblocks: usize) -> Result<()> {
        self.hash.clear();
        self.hash.reserve(expected_gblocks.max(1))?;
        self.gblock_count = 0;
        self.neighbors.clear();
        self.epoch += 1;
        Ok(())
    }

    pub fn insert_gblock(&mut self, code: BlockCode) -> Result<u32> {
        if self.hash.len() + 1 > self.hash.entry_capacity() {
            self.hash.reserve(self.hash.len() + 1)?;
        }
        let (idx, inserted) = self.hash.insert(code.0)?;
        if inserted {
            self.gblock_count += 1;
        }
        Ok(idx)
    }

    /// Inserts the 26 neighbors of every geometric block and fills the
    /// neighbor table.
    pub fn dilate(&mut self) -> Result<()> {
        let g = self.gblock_count;
        self.hash.reserve(g * NEIGHBORS)?;
        self.neighbors.resize(g * NEIGHBORS, NOT_FOUND)?;
        for gi in 0..g {
            let [bx, by, bz] = BlockCode(self.hash.code(gi as u32)).coords();
            for rz in -1..=1i64 {
                for ry in -1..=1i64 {
                    for rx in -1..=1i64 {
                        let nb = BlockCode::from_coords(bx as i64 + rx, by as i64 + ry, bz as i64 + rz)?;
                        let (idx, _) = self.hash.insert(nb.0)?;
                        self.neighbors[gi * NEIGHBORS + neighbor_slot(rx, ry, rz)] = idx;
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of physical blocks.
    pub fn count(&self) -> usize {
        self.hash.len()
    }

    pub fn gblock_count(&self) -> usize {
        self.gblock_count
    }

    pub fn is_gblock(&self, idx: u32) -> bool {
        (idx as usize) < self.gblock_count
    }

    pub fn code(&self, idx: u32) -> BlockCode {
        BlockCode(self.hash.code(idx))
    }

    pub fn codes(&self) -> impl Iterator<Item = BlockCode> + '_ {
        (0..self.count() as u32).map(|i| self.code(i))
    }

    pub fn lookup(&self, code: BlockCode) -> Option<u32> {
        self.hash.lookup(code.0)
    }

    #[inline]
    pub fn neighbors(&self, gblock: u32) -> &[u32] {
        let s = gblock as usize * NEIGHBORS;
        &self.neighbors[s..s + NEIGHBORS]
    }

    /// Incremented on every rebuild; buffers sized for an older epoch must be
    /// reset before use.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn realloc_count(&self) -> u64 {
        self.hash.realloc_count() + self.neighbors.realloc_count()
    }
}

/// Per-block "touched this step" markers.
#[derive(Debug)]
pub struct TouchedSet {
    flags: GrowBuffer<AtomicBool>,
    list: GrowBuffer<u32>,
}

impl Default for TouchedSet {
    fn default() -> Self {
        TouchedSet {
            flags: GrowBuffer::new("touched flags"),
            list: GrowBuffer::new("touched list"),
        }
    }
}

impl TouchedSet {
    pub fn resize(&mut self, blocks: usize) -> Result<()> {
        self.flags.truncate(0);
        self.flags.resize_with(blocks, || AtomicBool::new(false))?;
        self.list.clear();
        Ok(())
    }

    #[inline]
    pub fn mark_touched(&self, block: u32) {
        let f = &self.flags[block as usize];
        if !f.load(Ordering::Relaxed) {
            f.store(true, Ordering::Relaxed);
        }
    }

    #[inline]
    pub fn is_touched(&self, block: u32) -> bool {
        self.flags[block as usize].load(Ordering::Relaxed)
    }

    /// Rebuilds the ordered list of touched blocks from the flags.
    pub fn collect(&mut self) -> Result<()> {
        self.list.clear();
        self.list.ensure_capacity(self.flags.len())?;
        for (i, f) in self.flags.iter().enumerate() {
            if f.load(Ordering::Relaxed) {
                self.list.push(i as u32)?;
            }
        }
        Ok(())
    }

    pub fn list(&self) -> &[u32] {
        &self.list
    }

    pub fn clear_touched(&mut self) {
        for &b in self.list.iter() {
            self.flags[b as usize].store(false, Ordering::Relaxed);
        }
        self.list.clear();
    }

    pub fn realloc_count(&self) -> u64 {
        self.flags.realloc_count() + self.list.realloc_count()
    }
}

#[inline]
pub fn atomic_add_f64(cell: &AtomicU64, value: f64) {
    let mut cur = cell.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(cur) + value).to_bits();
        match cell.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(actual) => cur = actual,
        }
    }
}

#[inline]
pub fn node_address(block: u32, channel: usize, offset: usize) -> usize {
    (block as usize * NODE_CHANNELS + channel) * BLOCK_CELLS + offset
}

/// P2G accumulation target (mass and momentum per node) with touched flags.
/// This is the buffer peers read during the cross-worker reduction.
#[derive(Debug)]
pub struct NodeBuffer {
    data: GrowBuffer<AtomicU64>,
    touched: TouchedSet,
    blocks: usize,
    epoch: u64,
}

impl Default for NodeBuffer {
    fn default() -> Self {
        NodeBuffer {
            data: GrowBuffer::new("node buffer"),
            touched: TouchedSet::default(),
            blocks: 0,
            epoch: u64::MAX,
        }
    }
}

impl NodeBuffer {
    pub fn with_blocks(blocks: usize) -> Result<Self> {
        let mut b = NodeBuffer::default();
        b.prepare(blocks, 0, false)?;
        Ok(b)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Readies the buffer for a new accumulation. A buffer last used with a
    /// different table epoch is resized and zeroed; otherwise only the blocks
    /// touched last time are cleared (or everything, with `global_clear`).
    pub fn prepare(&mut self, blocks: usize, epoch: u64, global_clear: bool) -> Result<()> {
        if epoch != self.epoch || blocks != self.blocks {
            self.data.truncate(0);
            self.data.resize_with(blocks * BLOCK_STRIDE, || AtomicU64::new(0))?;
            self.touched.resize(blocks)?;
            self.blocks = blocks;
            self.epoch = epoch;
            return Ok(());
        }
        if global_clear {
            for v in self.data.iter() {
                v.store(0, Ordering::Relaxed);
            }
        } else {
            for &b in self.touched.list() {
                let s = b as usize * BLOCK_STRIDE;
                for v in &self.data[s..s + BLOCK_STRIDE] {
                    v.store(0, Ordering::Relaxed);
                }
            }
        }
        self.touched.clear_touched();
        if global_clear {
            // flags of blocks never collected are reset as well
            self.touched.resize(blocks)?;
        }
        Ok(())
    }

    #[inline]
    pub fn add(&self, block: u32, channel: usize, offset: usize, value: f64) {
        atomic_add_f64(&self.data[node_address(block, channel, offset)], value);
    }

    #[inline]
    pub fn load(&self, block: u32, channel: usize, offset: usize) -> f64 {
        f64::from_bits(self.data[node_address(block, channel, offset)].load(Ordering::Relaxed))
    }

    #[inline]
    pub fn mark_touched(&self, block: u32) {
        self.touched.mark_touched(block)
    }

    #[inline]
    pub fn is_touched(&self, block: u32) -> bool {
        self.touched.is_touched(block)
    }

    /// Must run after accumulation and before `touched_blocks`.
    pub fn finish_accumulation(&mut self) -> Result<()> {
        self.touched.collect()
    }

    pub fn touched_blocks(&self) -> &[u32] {
        self.touched.list()
    }

    /// Sum of one channel over all nodes.
    pub fn channel_sum(&self, channel: usize) -> f64 {
        (0..self.blocks as u32)
            .flat_map(|b| (0..BLOCK_CELLS).map(move |o| (b, o)))
            .map(|(b, o)| self.load(b, channel, o))
            .sum()
    }

    /// Order-sensitive hash of the raw bits, for read-only checks.
    pub fn checksum(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.load(Ordering::Relaxed)).wrapping_mul(0x100_0000_01b3)
        })
    }

    pub fn realloc_count(&self) -> u64 {
        self.data.realloc_count() + self.touched.realloc_count()
    }
}
