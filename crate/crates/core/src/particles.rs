//! AoSoA particle storage organized into lane groups, plus the sorts that
//! build and maintain that organization.
//!
//! Group `g` owns slots `[g * W, (g + 1) * W)` where `W` is the lane width.
//! Its data is a run of `PARTICLE_CHANNELS` packets of `W` values each, so
//! channel `c` of lane `l` lives at `(g * PARTICLE_CHANNELS + c) * W + l`.
//! Every active lane of a group belongs to the group's particle block; the
//! tail of a group past `len` is padding.

use crate::arena::GrowBuffer;
use crate::domain::base_cell;
use crate::error::{MpmError, Result};
use crate::grid::{encode, BlockCode, CellCode, BLOCK_WIDTH};
use crate::{Mat3, Vec3};

pub const CH_POS: usize = 0;
pub const CH_VEL: usize = 3;
/// Affine velocity matrix C, row-major.
pub const CH_AFFINE: usize = 6;
/// Deformation gradient F, row-major.
pub const CH_DEFORM: usize = 15;
/// Volume ratio J.
pub const CH_JACOBIAN: usize = 24;
pub const CH_MASS: usize = 25;
/// Rest volume.
pub const CH_VOLUME: usize = 26;
pub const PARTICLE_CHANNELS: usize = 27;

pub const UNASSIGNED_BLOCK: u32 = u32::MAX;
pub const INACTIVE_ID: u64 = u64::MAX;

/// Cells spanned by the free zone per axis.
pub const FREE_ZONE_CELLS: i64 = 10;
/// Cells of free zone below a particle block (base-cell units).
pub const FREE_ZONE_BELOW: i64 = 4;
pub const LANE_KEY_LIMIT: u16 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneGroup {
    /// Index of the owning particle block in the block table.
    pub block_index: u32,
    /// First slot of the group.
    pub first: u32,
    /// Active lanes.
    pub len: u32,
}

/// Sort key used at rebuild time: `(block index << 6) | cell offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SortKey(pub u64);

impl SortKey {
    pub fn new(block_index: u32, code: CellCode) -> Self {
        SortKey((block_index as u64) << 6 | code.cell_offset() as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleInit {
    /// Persistent identity, unique across all workers.
    pub id: u64,
    pub pos: Vec3,
    pub vel: Vec3,
    pub material: u16,
    pub mass: f64,
    pub volume: f64,
}

/// Base-cell code of a particle; its particle block is `code.block()`.
pub fn particle_code(pos: &Vec3, dx: f64) -> Result<CellCode> {
    if !pos.iter().all(|c| c.is_finite()) {
        return Err(MpmError::SpatialDomain(format!("non-finite position {pos:?}")));
    }
    let [x, y, z] = base_cell(pos, dx);
    encode(x, y, z)
}

/// Base cell relative to the lower corner of the free zone of `block`.
#[inline]
pub fn zone_local(base: [i64; 3], block: [u32; 3]) -> [i64; 3] {
    [
        base[0] - (block[0] as i64 * BLOCK_WIDTH - FREE_ZONE_BELOW),
        base[1] - (block[1] as i64 * BLOCK_WIDTH - FREE_ZONE_BELOW),
        base[2] - (block[2] as i64 * BLOCK_WIDTH - FREE_ZONE_BELOW),
    ]
}

/// Whether a zone-local base cell lies at least `guard` cells inside the
/// free zone on every axis.
#[inline]
pub fn in_zone(local: [i64; 3], guard: i64) -> bool {
    local.iter().all(|&c| c >= guard && c < FREE_ZONE_CELLS - guard)
}

/// 10-bit lane key of a zone-local base cell.
#[inline]
pub fn lane_key(local: [i64; 3]) -> u16 {
    (local[0] + FREE_ZONE_CELLS * (local[1] + FREE_ZONE_CELLS * local[2])) as u16
}

/// Position-space free-zone test: true when `pos` leaves
/// `[origin - 3dx, origin + 7dx)` on any axis. `origin` is the particle
/// block's corner shifted by -dx/2, i.e. `(4 * block - 0.5) * dx`.
pub fn free_zone_check(pos: &Vec3, origin: &Vec3, dx: f64) -> bool {
    (0..3).any(|a| pos[a] < origin[a] - 3.0 * dx || pos[a] >= origin[a] + 7.0 * dx)
}

pub fn block_origin(block: BlockCode, dx: f64) -> Vec3 {
    let c = block.coords();
    Vec3::new(
        (c[0] as f64 * BLOCK_WIDTH as f64 - 0.5) * dx,
        (c[1] as f64 * BLOCK_WIDTH as f64 - 0.5) * dx,
        (c[2] as f64 * BLOCK_WIDTH as f64 - 0.5) * dx,
    )
}

/// Stable counting sort. `order[i]` is the input index of the i-th smallest
/// key. Keys must be `< bound`.
pub fn histogram_sort_into(
    keys: &[u64],
    bound: usize,
    counts: &mut GrowBuffer<u32>,
    order: &mut GrowBuffer<u32>,
) -> Result<()> {
    counts.clear();
    counts.resize(bound + 1, 0)?;
    for &k in keys {
        debug_assert!((k as usize) < bound);
        counts[k as usize + 1] += 1;
    }
    for i in 0..bound {
        counts[i + 1] += counts[i];
    }
    order.clear();
    order.resize(keys.len(), 0)?;
    for (i, &k) in keys.iter().enumerate() {
        let dst = &mut counts[k as usize];
        order[*dst as usize] = i as u32;
        *dst += 1;
    }
    Ok(())
}

pub fn histogram_sort(keys: &[u64]) -> Vec<u32> {
    let bound = keys.iter().max().map_or(0, |&m| m as usize + 1);
    let mut counts = GrowBuffer::new("counts");
    let mut order = GrowBuffer::new("order");
    histogram_sort_into(keys, bound, &mut counts, &mut order).expect("in-memory sort");
    order.to_vec()
}

/// Within-group LSD radix sort on 10-bit keys (two 5-bit digits). Writes the
/// lane order into `order[..keys.len()]`.
pub fn lane_radix_sort10(keys: &[u16], order: &mut [u8]) -> Result<()> {
    let n = keys.len();
    if n > 64 || order.len() < n {
        return Err(MpmError::ContractViolation(format!("lane group of {n} exceeds 64 lanes")));
    }
    if let Some(&bad) = keys.iter().find(|&&k| k >= LANE_KEY_LIMIT) {
        return Err(MpmError::ContractViolation(format!(
            "lane key {bad} does not fit 10 bits; free-zone invariant broken"
        )));
    }
    let mut tmp = [0u8; 64];
    for (i, o) in tmp.iter_mut().take(n).enumerate() {
        *o = i as u8;
    }
    let mut out = [0u8; 64];
    for shift in [0u32, 5] {
        let mut counts = [0u8; 33];
        for &i in &tmp[..n] {
            counts[((keys[i as usize] >> shift) & 31) as usize + 1] += 1;
        }
        for d in 0..32 {
            counts[d + 1] += counts[d];
        }
        for &i in &tmp[..n] {
            let d = ((keys[i as usize] >> shift) & 31) as usize;
            out[counts[d] as usize] = i;
            counts[d] += 1;
        }
        tmp[..n].copy_from_slice(&out[..n]);
    }
    order[..n].copy_from_slice(&tmp[..n]);
    Ok(())
}

/// Runs of equal keys in `order` (as lane-index ranges into `order`).
pub fn subgroups<'a>(keys: &'a [u16], order: &'a [u8]) -> impl Iterator<Item = std::ops::Range<usize>> + 'a {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= order.len() {
            return None;
        }
        let k = keys[order[start] as usize];
        let mut end = start + 1;
        while end < order.len() && keys[order[end] as usize] == k {
            end += 1;
        }
        let r = start..end;
        start = end;
        Some(r)
    })
}

/// Read access to the packets of one lane group.
#[derive(Clone, Copy)]
pub struct GroupView<'a> {
    pub data: &'a [f64],
    pub width: usize,
}

impl<'a> GroupView<'a> {
    #[inline]
    pub fn get(&self, lane: usize, ch: usize) -> f64 {
        self.data[ch * self.width + lane]
    }

    #[inline]
    pub fn vec3(&self, lane: usize, ch: usize) -> Vec3 {
        Vec3::new(self.get(lane, ch), self.get(lane, ch + 1), self.get(lane, ch + 2))
    }

    #[inline]
    pub fn mat3(&self, lane: usize, ch: usize) -> Mat3 {
        Mat3::from_fn(|r, c| self.get(lane, ch + 3 * r + c))
    }
}

pub struct GroupViewMut<'a> {
    pub data: &'a mut [f64],
    pub width: usize,
}

impl<'a> GroupViewMut<'a> {
    #[inline]
    pub fn view(&self) -> GroupView<'_> {
        GroupView { data: self.data, width: self.width }
    }

    #[inline]
    pub fn set(&mut self, lane: usize, ch: usize, v: f64) {
        self.data[ch * self.width + lane] = v;
    }

    #[inline]
    pub fn set_vec3(&mut self, lane: usize, ch: usize, v: &Vec3) {
        for a in 0..3 {
            self.set(lane, ch + a, v[a]);
        }
    }

    #[inline]
    pub fn set_mat3(&mut self, lane: usize, ch: usize, m: &Mat3) {
        for r in 0..3 {
            for c in 0..3 {
                self.set(lane, ch + 3 * r + c, m[(r, c)]);
            }
        }
    }
}

/// One lane group's mutable slices, handed to data-parallel phases.
pub struct GroupChunk<'a> {
    pub group: LaneGroup,
    pub data: GroupViewMut<'a>,
    pub ids: &'a [u64],
    pub material: &'a [u16],
    pub keys: &'a mut [u16],
    pub flags: &'a mut [u8],
}

pub const FLAG_QUARANTINED: u8 = 1;

#[derive(Debug)]
struct Columns {
    data: GrowBuffer<f64>,
    ids: GrowBuffer<u64>,
    material: GrowBuffer<u16>,
    keys: GrowBuffer<u16>,
    flags: GrowBuffer<u8>,
}

impl Columns {
    fn new() -> Self {
        Columns {
            data: GrowBuffer::new("particle data"),
            ids: GrowBuffer::new("particle ids"),
            material: GrowBuffer::new("particle material"),
            keys: GrowBuffer::new("lane keys"),
            flags: GrowBuffer::new("particle flags"),
        }
    }

    fn resize_groups(&mut self, groups: usize, width: usize) -> Result<()> {
        let slots = groups * width;
        self.data.resize(slots * PARTICLE_CHANNELS, 0.0)?;
        self.ids.resize(slots, INACTIVE_ID)?;
        self.material.resize(slots, 0)?;
        self.keys.resize(slots, 0)?;
        self.flags.resize(slots, 0)?;
        Ok(())
    }

    fn realloc_count(&self) -> u64 {
        self.data.realloc_count()
            + self.ids.realloc_count()
            + self.material.realloc_count()
            + self.keys.realloc_count()
            + self.flags.realloc_count()
    }
}

#[derive(Debug)]
pub struct ParticleStore {
    width: usize,
    cols: Columns,
    spare: Columns,
    groups: GrowBuffer<LaneGroup>,
    spare_groups: GrowBuffer<LaneGroup>,
    count: usize,
}

impl ParticleStore {
    pub fn new(lane_width: usize) -> Result<Self> {
        if !lane_width.is_power_of_two() || lane_width > 64 {
            return Err(MpmError::RejectedInput(format!(
                "lane width must be a power of two <= 64, got {lane_width}"
            )));
        }
        Ok(ParticleStore {
            width: lane_width,
            cols: Columns::new(),
            spare: Columns::new(),
            groups: GrowBuffer::new("lane groups"),
            spare_groups: GrowBuffer::new("lane groups"),
            count: 0,
        })
    }

    pub fn lane_width(&self) -> usize {
        self.width
    }

    /// Live (non-padding) particles, including quarantined ones not yet compacted.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn groups(&self) -> &[LaneGroup] {
        &self.groups
    }

    pub fn slots(&self) -> usize {
        self.groups.len() * self.width
    }

    #[inline]
    fn index(&self, slot: usize, ch: usize) -> usize {
        let (g, l) = (slot / self.width, slot % self.width);
        (g * PARTICLE_CHANNELS + ch) * self.width + l
    }

    #[inline]
    pub fn get(&self, slot: usize, ch: usize) -> f64 {
        self.cols.data[self.index(slot, ch)]
    }

    #[inline]
    pub fn set(&mut self, slot: usize, ch: usize, v: f64) {
        let i = self.index(slot, ch);
        self.cols.data[i] = v;
    }

    pub fn vec3(&self, slot: usize, ch: usize) -> Vec3 {
        Vec3::new(self.get(slot, ch), self.get(slot, ch + 1), self.get(slot, ch + 2))
    }

    pub fn mat3(&self, slot: usize, ch: usize) -> Mat3 {
        Mat3::from_fn(|r, c| self.get(slot, ch + 3 * r + c))
    }

    pub fn id(&self, slot: usize) -> u64 {
        self.cols.ids[slot]
    }

    pub fn material(&self, slot: usize) -> u16 {
        self.cols.material[slot]
    }

    pub fn lane_keys(&self) -> &[u16] {
        &self.cols.keys
    }

    pub fn is_quarantined(&self, slot: usize) -> bool {
        self.cols.flags[slot] & FLAG_QUARANTINED != 0
    }

    pub fn quarantine(&mut self, slot: usize) {
        self.cols.flags[slot] |= FLAG_QUARANTINED;
    }

    /// Slots holding live particles, in storage order.
    pub fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .flat_map(|g| g.first as usize..(g.first + g.len) as usize)
    }

    /// Slots of particles that take part in transfers (live, not quarantined).
    pub fn simulated_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.active_slots().filter(|&s| !self.is_quarantined(s))
    }

    pub fn group_view(&self, g: usize) -> GroupView<'_> {
        let stride = PARTICLE_CHANNELS * self.width;
        GroupView { data: &self.cols.data[g * stride..(g + 1) * stride], width: self.width }
    }

    /// Splits the store into per-group mutable chunks for data-parallel phases.
    pub fn chunks_mut(&mut self) -> Vec<GroupChunk<'_>> {
        let w = self.width;
        let stride = PARTICLE_CHANNELS * w;
        self.groups
            .iter()
            .zip(self.cols.data.chunks_mut(stride))
            .zip(self.cols.ids.chunks(w))
            .zip(self.cols.material.chunks(w))
            .zip(self.cols.keys.chunks_mut(w))
            .zip(self.cols.flags.chunks_mut(w))
            .map(|(((((g, d), ids), mat), keys), flags)| GroupChunk {
                group: *g,
                data: GroupViewMut { data: d, width: w },
                ids,
                material: mat,
                keys,
                flags,
            })
            .collect()
    }

    /// Appends particles in new, unassigned groups. Returns whether a
    /// rebuild-mapping is now required. Refused while fused transfers run.
    pub fn append_particles(&mut self, particles: &[ParticleInit], fused_mode: bool) -> Result<bool> {
        if particles.is_empty() {
            return Ok(false);
        }
        if fused_mode {
            return Err(MpmError::ModeConflict(
                "particles cannot be appended while fused G2P2G transfers are active".into(),
            ));
        }
        let w = self.width;
        let first_group = self.groups.len();
        let new_groups = particles.len().div_ceil(w);
        self.cols.resize_groups(first_group + new_groups, w)?;
        for (i, p) in particles.iter().enumerate() {
            let g = first_group + i / w;
            if i % w == 0 {
                self.groups.push(LaneGroup {
                    block_index: UNASSIGNED_BLOCK,
                    first: (g * w) as u32,
                    len: 0,
                })?;
            }
            let slot = g * w + i % w;
            self.write_init(slot, p);
            self.groups[g].len += 1;
        }
        self.count += particles.len();
        Ok(true)
    }

    fn write_init(&mut self, slot: usize, p: &ParticleInit) {
        self.set(slot, CH_POS, p.pos.x);
        self.set(slot, CH_POS + 1, p.pos.y);
        self.set(slot, CH_POS + 2, p.pos.z);
        self.set(slot, CH_VEL, p.vel.x);
        self.set(slot, CH_VEL + 1, p.vel.y);
        self.set(slot, CH_VEL + 2, p.vel.z);
        for k in 0..9 {
            self.set(slot, CH_AFFINE + k, 0.0);
            self.set(slot, CH_DEFORM + k, if k % 4 == 0 { 1.0 } else { 0.0 });
        }
        self.set(slot, CH_JACOBIAN, 1.0);
        self.set(slot, CH_MASS, p.mass);
        self.set(slot, CH_VOLUME, p.volume);
        self.cols.ids[slot] = p.id;
        self.cols.material[slot] = p.material;
        self.cols.keys[slot] = 0;
        self.cols.flags[slot] = 0;
    }

    /// Rewrites the layout: `order` lists source slots in their new order and
    /// `block_of[i]` the particle block of `order[i]` (nondecreasing runs).
    /// A new group starts at every block change or when a group is full, so
    /// every group is block-homogeneous. Slots left out of `order` are
    /// dropped.
    pub fn relayout(&mut self, order: &[u32], block_of: &[u32], keys: &[u16]) -> Result<()> {
        debug_assert_eq!(order.len(), block_of.len());
        let w = self.width;
        self.spare_groups.clear();
        let mut prev = UNASSIGNED_BLOCK;
        for (i, &b) in block_of.iter().enumerate() {
            let start_new = match self.spare_groups.last() {
                None => true,
                Some(g) => b != prev || g.len as usize == w,
            };
            if start_new {
                let gi = self.spare_groups.len();
                self.spare_groups.push(LaneGroup { block_index: b, first: (gi * w) as u32, len: 0 })?;
            }
            let _ = i;
            prev = b;
            let last = self.spare_groups.len() - 1;
            self.spare_groups[last].len += 1;
        }
        self.spare.resize_groups(self.spare_groups.len(), w)?;
        // padding lanes
        for v in self.spare.ids.iter_mut() {
            *v = INACTIVE_ID;
        }
        let mut cursor = 0usize;
        for gi in 0..self.spare_groups.len() {
            let g = self.spare_groups[gi];
            for lane in 0..g.len as usize {
                let src = order[cursor] as usize;
                let dst = g.first as usize + lane;
                let (sg, sl) = (src / w, src % w);
                for ch in 0..PARTICLE_CHANNELS {
                    self.spare.data[(gi * PARTICLE_CHANNELS + ch) * w + lane] =
                        self.cols.data[(sg * PARTICLE_CHANNELS + ch) * w + sl];
                }
                self.spare.ids[dst] = self.cols.ids[src];
                self.spare.material[dst] = self.cols.material[src];
                self.spare.flags[dst] = self.cols.flags[src];
                self.spare.keys[dst] = keys[cursor];
                cursor += 1;
            }
        }
        std::mem::swap(&mut self.cols, &mut self.spare);
        std::mem::swap(&mut self.groups, &mut self.spare_groups);
        self.count = order.len();
        Ok(())
    }

    /// `(id, position)` of every live particle, sorted by id.
    pub fn positions_by_id(&self) -> Vec<(u64, Vec3)> {
        let mut v: Vec<(u64, Vec3)> = self.active_slots().map(|s| (self.id(s), self.vec3(s, CH_POS))).collect();
        v.sort_unstable_by_key(|p| p.0);
        v
    }

    pub fn realloc_count(&self) -> u64 {
        self.cols.realloc_count()
            + self.spare.realloc_count()
            + self.groups.realloc_count()
            + self.spare_groups.realloc_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn init(id: u64, pos: Vec3) -> ParticleInit {
        ParticleInit { id, pos, vel: Vec3::zeros(), material: 0, mass: 1.0, volume: 1.0 }
    }

    #[test]
    fn particle_code_at_node() {
        let dx = 0.5;
        let c = particle_code(&Vec3::new(8.0 * dx, 9.0 * dx, 10.0 * dx), dx).unwrap();
        assert_eq!(crate::grid::decode(c), [7, 8, 9]);
        let a = particle_code(&Vec3::new(5.6, 5.7, 5.8), 1.0).unwrap();
        let b = particle_code(&Vec3::new(5.9, 5.55, 6.4), 1.0).unwrap();
        assert_eq!(a, b);
        let p = Vec3::new(20.3, 21.1, 22.9);
        let q = p + Vec3::new(4.0, 4.0, 4.0);
        let bp = particle_code(&p, 1.0).unwrap().block().coords();
        let bq = particle_code(&q, 1.0).unwrap().block().coords();
        assert_eq!(bq, [bp[0] + 1, bp[1] + 1, bp[2] + 1]);
        assert!(matches!(particle_code(&Vec3::new(-3.0, 1.0, 1.0), 1.0), Err(MpmError::SpatialDomain(_))));
    }

    #[test]
    fn histogram_sort_examples() {
        assert_eq!(histogram_sort(&[5, 3, 5, 1]), vec![3, 1, 0, 2]);
        assert_eq!(histogram_sort(&[0, 1, 1, 2, 9]), vec![0, 1, 2, 3, 4]);
        assert!(histogram_sort(&[]).is_empty());
    }

    #[test]
    fn histogram_sort_matches_stable_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let keys: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0..500)).collect();
        let order = histogram_sort(&keys);
        let mut oracle: Vec<u32> = (0..keys.len() as u32).collect();
        oracle.sort_by_key(|&i| keys[i as usize]);
        assert_eq!(order, oracle);
    }

    #[test]
    fn lane_sort_examples() {
        let mut order = [0u8; 64];
        let keys = [7u16; 32];
        lane_radix_sort10(&keys, &mut order).unwrap();
        assert!(order[..32].iter().copied().eq(0..32u8));
        let groups: Vec<_> = subgroups(&keys, &order[..32]).collect();
        assert_eq!(groups, vec![0..32]);

        let rev: Vec<u16> = (0..32).rev().map(|k| k * 31).collect();
        lane_radix_sort10(&rev, &mut order).unwrap();
        assert!(order[..32].iter().copied().eq((0..32u8).rev()));

        assert!(matches!(lane_radix_sort10(&[3, 1024], &mut order), Err(MpmError::ContractViolation(_))));
    }

    proptest! {
        #[test]
        fn lane_sort_matches_full_sort(keys in proptest::collection::vec(0u16..1000, 0..=64)) {
            let mut order = [0u8; 64];
            lane_radix_sort10(&keys, &mut order).unwrap();
            let mut oracle: Vec<u8> = (0..keys.len() as u8).collect();
            oracle.sort_by_key(|&i| keys[i as usize]);
            prop_assert_eq!(&order[..keys.len()], &oracle[..]);
            let total: usize = subgroups(&keys, &order[..keys.len()]).map(|r| r.len()).sum();
            prop_assert_eq!(total, keys.len());
        }
    }

    #[test]
    fn free_zone_examples() {
        let dx = 0.5;
        let block = crate::grid::BlockCode::from_coords(5, 5, 5).unwrap();
        let o = block_origin(block, dx);
        assert!(!free_zone_check(&(o + Vec3::repeat(2.0 * dx)), &o, dx));
        let eps = 1e-9;
        assert!(free_zone_check(&(o - Vec3::new(3.0 * dx + eps, 0.0, 0.0)), &o, dx));
        assert!(!free_zone_check(&(o - Vec3::new(3.0 * dx - eps, 0.0, 0.0)), &o, dx));
        assert!(free_zone_check(&(o + Vec3::new(0.0, 7.0 * dx, 0.0)), &o, dx));
    }

    #[test]
    fn free_zone_position_and_cell_forms_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dx = 0.25;
        let block = crate::grid::BlockCode::from_coords(10, 10, 10).unwrap();
        let o = block_origin(block, dx);
        for _ in 0..100_000 {
            let p = o + Vec3::new(rng.gen_range(-5.0..9.0), rng.gen_range(-5.0..9.0), rng.gen_range(-5.0..9.0)) * dx;
            let local = zone_local(base_cell(&p, dx), block.coords());
            assert_eq!(free_zone_check(&p, &o, dx), !in_zone(local, 0), "{p:?}");
        }
    }

    #[test]
    fn free_zone_survives_four_cfl_steps() {
        // A particle starting inside its (shifted) block and moving less than
        // one cell per step cannot leave the free zone in fewer than 4 steps.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dx = 1.0;
        let block = crate::grid::BlockCode::from_coords(10, 10, 10).unwrap();
        let o = block_origin(block, dx);
        for _ in 0..20_000 {
            let mut p = o + Vec3::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let step = dir.normalize() * (0.999 * dx);
            let mut first_violation = None;
            for s in 1..=20 {
                p += step;
                if free_zone_check(&p, &o, dx) {
                    first_violation = Some(s);
                    break;
                }
            }
            if let Some(s) = first_violation {
                assert!(s >= 4, "violated after {s} steps");
            }
        }
    }

    #[test]
    fn append_and_relayout() {
        let mut store = ParticleStore::new(4).unwrap();
        assert!(!store.append_particles(&[], false).unwrap());
        let ps: Vec<_> = (0..6).map(|i| init(i, Vec3::new(i as f64, 0.0, 0.0))).collect();
        assert!(store.append_particles(&ps, false).unwrap());
        assert_eq!(store.len(), 6);
        assert_eq!(store.groups().len(), 2);
        assert!(matches!(store.append_particles(&ps, true), Err(MpmError::ModeConflict(_))));

        // blocks: slots 0..6 -> [1,0,1,0,0,1]; group by block keeping stability
        let slots: Vec<u32> = store.active_slots().map(|s| s as u32).collect();
        let blocks = [1u32, 0, 1, 0, 0, 1];
        let keys: Vec<u64> = slots.iter().map(|&s| blocks[s as usize] as u64).collect();
        let perm = histogram_sort(&keys);
        let order: Vec<u32> = perm.iter().map(|&i| slots[i as usize]).collect();
        let sorted_blocks: Vec<u32> = perm.iter().map(|&i| blocks[i as usize]).collect();
        store.relayout(&order, &sorted_blocks, &vec![0; order.len()]).unwrap();
        assert_eq!(store.len(), 6);
        let g = store.groups();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].block_index, g[0].len), (0, 3));
        assert_eq!((g[1].block_index, g[1].len), (1, 3));
        let ids: Vec<u64> = store.active_slots().map(|s| store.id(s)).collect();
        assert_eq!(ids, vec![1, 3, 4, 0, 2, 5]);
        for s in store.active_slots() {
            assert_eq!(store.get(s, CH_POS), store.id(s) as f64);
        }
        assert_eq!(store.id(3), INACTIVE_ID);
    }
}
