//! Per-group transfer kernels: P2G scatter with lane-level reduction, the
//! per-block grid update, and G2P gather with advection.

use crate::domain::{
    base_cell, fluid_pressure, quadratic_weights_unchecked, stress_fixed_corotated, Material, MaterialKind,
    WeightStencil,
};
use crate::error::{MpmError, Result};
use crate::grid::{decode, local_offset, neighbor_slot, CellCode, NodeBuffer, BLOCK_CELLS, CH_MASS, CH_MOM, NODE_CHANNELS};
use crate::particles::{
    in_zone, lane_key, lane_radix_sort10, subgroups, zone_local, GroupChunk, CH_AFFINE, CH_DEFORM, CH_JACOBIAN,
    CH_MASS as P_MASS, CH_POS, CH_VEL, CH_VOLUME, FLAG_QUARANTINED, FREE_ZONE_CELLS, LANE_KEY_LIMIT,
};
use crate::pipeline::{BoundaryBox, BoundaryMode};
use crate::{Mat3, Vec3};

/// Contributions are rounded to multiples of 2^-32 in deterministic mode, so
/// every partial sum below 2^21 is exact and accumulation order is irrelevant.
pub const FIXED_POINT_SCALE: f64 = 4_294_967_296.0;
pub const GRID_VELOCITY: usize = 1;
/// Stored old-velocity channels per node when FLIP blending is active.
pub const FLIP_CHANNELS: usize = 3;
pub const STRESS_CHANNELS: usize = 9;

#[inline]
pub fn quantize(x: f64) -> f64 {
    (x * FIXED_POINT_SCALE).round() / FIXED_POINT_SCALE
}

#[derive(Debug, Clone, Copy)]
pub struct KernelParams<'a> {
    pub dx: f64,
    pub dt: f64,
    pub gravity: Vec3,
    pub materials: &'a [Material],
    pub deterministic: bool,
    pub flip_blend: f64,
}

/// How lanes are ordered before subgroup detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneOrder {
    /// Per-group 10-bit radix sort.
    Radix,
    /// Storage order; only adjacent equal keys fuse.
    Storage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct P2gStats {
    /// One per (subgroup, node) scatter.
    pub accumulations: u64,
    pub quarantined: u64,
    pub clamped: u64,
    pub degenerate: u64,
    pub particle_mass: f64,
    pub particle_momentum: Vec3,
    /// Σ m|v|, the scale used for relative momentum errors.
    pub momentum_scale: f64,
}

impl P2gStats {
    pub fn merge(mut self, o: P2gStats) -> P2gStats {
        self.accumulations += o.accumulations;
        self.quarantined += o.quarantined;
        self.clamped += o.clamped;
        self.degenerate += o.degenerate;
        self.particle_mass += o.particle_mass;
        self.particle_momentum += o.particle_momentum;
        self.momentum_scale += o.momentum_scale;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct G2pStats {
    pub violation: bool,
    pub max_speed: f64,
    pub quarantined: u64,
}

impl G2pStats {
    pub fn merge(self, o: G2pStats) -> G2pStats {
        G2pStats {
            violation: self.violation || o.violation,
            max_speed: self.max_speed.max(o.max_speed),
            quarantined: self.quarantined + o.quarantined,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StressOutcome {
    pub tau: Mat3,
    pub clamped: bool,
    pub degenerate: bool,
}

/// Kirchhoff stress of one particle.
pub fn particle_stress(material: &Material, f: &Mat3, j: f64) -> StressOutcome {
    match material.kind {
        MaterialKind::WeaklyCompressibleFluid => {
            if j > 0.0 {
                let p = fluid_pressure(j, material);
                StressOutcome { tau: Mat3::identity() * (-p * j), clamped: false, degenerate: false }
            } else {
                StressOutcome { tau: Mat3::zeros(), clamped: false, degenerate: true }
            }
        }
        MaterialKind::FixedCorotated => {
            let e = stress_fixed_corotated(f, material);
            StressOutcome { tau: e.tau, clamped: e.clamped, degenerate: false }
        }
    }
}

/// MLS-MPM affine momentum matrix `m C - dt V0 (4/dx²) τ`.
#[inline]
pub fn affine_momentum(mass: f64, volume: f64, c: &Mat3, tau: &Mat3, dt: f64, dx: f64) -> Mat3 {
    c * mass - tau * (dt * volume * 4.0 / (dx * dx))
}

/// Block index and Morton offset of stencil node `base + (i, j, k)`.
#[inline]
pub fn stencil_node(base: [i64; 3], ijk: [i64; 3], pblock: [i64; 3], neighbors: &[u32]) -> (u32, usize) {
    let n = [base[0] + ijk[0], base[1] + ijk[1], base[2] + ijk[2]];
    let r = [(n[0] >> 2) - pblock[0], (n[1] >> 2) - pblock[1], (n[2] >> 2) - pblock[2]];
    debug_assert!(r.iter().all(|c| (-1..=1).contains(c)), "stencil node outside the 27 neighbor blocks");
    (neighbors[neighbor_slot(r[0], r[1], r[2])], local_offset(n[0], n[1], n[2]))
}

#[inline]
fn finite_vec(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

#[inline]
fn finite_mat(m: &Mat3) -> bool {
    m.iter().all(|c| c.is_finite())
}

/// Reduced velocity and affine matrix gathered from nodal velocities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gathered {
    pub v: Vec3,
    pub c: Mat3,
    /// Σ w (v_new - v_old), only meaningful with FLIP blending.
    pub dv: Vec3,
}

/// Gathers `(v_new, v_old)` node pairs over the 27-node stencil.
#[inline]
pub fn gather(st: &WeightStencil, pos: &Vec3, dx: f64, mut node: impl FnMut([i64; 3]) -> (Vec3, Vec3)) -> Gathered {
    let mut v = Vec3::zeros();
    let mut b = Mat3::zeros();
    let mut dv = Vec3::zeros();
    for k in 0..3 {
        for j in 0..3 {
            for i in 0..3 {
                let w = st.weight(i, j, k);
                let (vi, vold) = node([i as i64, j as i64, k as i64]);
                let d = st.node_offset(i, j, k, pos, dx);
                v += vi * w;
                b += (vi * w) * d.transpose();
                dv += (vi - vold) * w;
            }
        }
    }
    Gathered { v, c: b * (4.0 / (dx * dx)), dv }
}

struct Lane {
    pos: Vec3,
    mv: Vec3,
    q: Mat3,
    mass: f64,
    st: WeightStencil,
}

/// Scatters one lane group into `out`. `stress` optionally holds
/// precomputed Kirchhoff stresses (9 per lane, row-major).
pub fn p2g_group(
    kp: &KernelParams,
    chunk: &mut GroupChunk,
    stress: Option<&[f64]>,
    lane_order: LaneOrder,
    neighbors: &[u32],
    pblock: [i64; 3],
    out: &NodeBuffer,
    probe: bool,
) -> Result<P2gStats> {
    let mut stats = P2gStats::default();
    let len = chunk.group.len as usize;
    let mut lanes: [Option<Lane>; 64] = [const { None }; 64];
    let mut active = [0u8; 64];
    let mut keys = [0u16; 64];
    let mut n_active = 0;
    for l in 0..len {
        if chunk.flags[l] & FLAG_QUARANTINED != 0 {
            continue;
        }
        let view = chunk.data.view();
        let pos = view.vec3(l, CH_POS);
        let vel = view.vec3(l, CH_VEL);
        let c = view.mat3(l, CH_AFFINE);
        let f = view.mat3(l, CH_DEFORM);
        let j = view.get(l, CH_JACOBIAN);
        let mass = view.get(l, P_MASS);
        let volume = view.get(l, CH_VOLUME);
        if !(finite_vec(&pos) && finite_vec(&vel) && finite_mat(&c) && finite_mat(&f) && j.is_finite()) {
            chunk.flags[l] |= FLAG_QUARANTINED;
            stats.quarantined += 1;
            continue;
        }
        let key = chunk.keys[l];
        if key as i64 >= FREE_ZONE_CELLS * FREE_ZONE_CELLS * FREE_ZONE_CELLS {
            return Err(MpmError::ContractViolation(format!(
                "particle {} left its free zone before the rebuild took effect (lane key {key})",
                chunk.ids[l]
            )));
        }
        let tau = match stress {
            Some(s) => Mat3::from_row_slice(&s[l * STRESS_CHANNELS..(l + 1) * STRESS_CHANNELS]),
            None => {
                let mat = &kp.materials[chunk.material[l] as usize];
                let o = particle_stress(mat, &f, j);
                stats.clamped += o.clamped as u64;
                stats.degenerate += o.degenerate as u64;
                o.tau
            }
        };
        if probe {
            stats.particle_mass += mass;
            stats.particle_momentum += vel * mass;
            stats.momentum_scale += vel.norm() * mass;
        }
        lanes[l] = Some(Lane {
            pos,
            mv: vel * mass,
            q: affine_momentum(mass, volume, &c, &tau, kp.dt, kp.dx),
            mass,
            st: quadratic_weights_unchecked(&pos, kp.dx),
        });
        active[n_active] = l as u8;
        keys[n_active] = key;
        n_active += 1;
    }
    if n_active == 0 {
        return Ok(stats);
    }
    let mut order = [0u8; 64];
    match lane_order {
        LaneOrder::Radix => lane_radix_sort10(&keys[..n_active], &mut order)?,
        LaneOrder::Storage => {
            for (i, o) in order.iter_mut().take(n_active).enumerate() {
                *o = i as u8;
            }
        }
    }
    for range in subgroups(&keys[..n_active], &order[..n_active]) {
        let members = &order[range];
        let first = lanes[active[members[0] as usize] as usize].as_ref().expect("active lane");
        let base = first.st.base_cell;
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    let (blk, off) = stencil_node(base, [i as i64, j as i64, k as i64], pblock, neighbors);
                    let mut m = 0.0;
                    let mut p = Vec3::zeros();
                    for &s in members {
                        let lane = lanes[active[s as usize] as usize].as_ref().expect("active lane");
                        let w = lane.st.weight(i, j, k);
                        let d = lane.st.node_offset(i, j, k, &lane.pos, kp.dx);
                        let dm = w * lane.mass;
                        let dp = (lane.mv + lane.q * d) * w;
                        if kp.deterministic {
                            m += quantize(dm);
                            p += dp.map(quantize);
                        } else {
                            m += dm;
                            p += dp;
                        }
                    }
                    out.add(blk, CH_MASS, off, m);
                    for a in 0..3 {
                        out.add(blk, CH_MOM + a, off, p[a]);
                    }
                    out.mark_touched(blk);
                    stats.accumulations += 1;
                }
            }
        }
    }
    Ok(stats)
}

/// Computes the Kirchhoff stress of every lane of a group into `out`
/// (the split-stress ablation arm).
pub fn stress_group(kp: &KernelParams, chunk: &GroupChunk, out: &mut [f64]) -> P2gStats {
    let mut stats = P2gStats::default();
    let view = chunk.data.view();
    for l in 0..chunk.group.len as usize {
        let f = view.mat3(l, CH_DEFORM);
        let j = view.get(l, CH_JACOBIAN);
        let o = particle_stress(&kp.materials[chunk.material[l] as usize], &f, j);
        stats.clamped += o.clamped as u64;
        stats.degenerate += o.degenerate as u64;
        for r in 0..3 {
            for c in 0..3 {
                out[l * STRESS_CHANNELS + 3 * r + c] = o.tau[(r, c)];
            }
        }
    }
    stats
}

/// Gathers, updates and advects one lane group. Recomputes the lane keys for
/// the next step; a particle outside the zone shrunk by `guard` cells raises
/// the violation flag, and one outside the full zone gets an invalid key.
pub fn g2p_group(
    kp: &KernelParams,
    chunk: &mut GroupChunk,
    neighbors: &[u32],
    pblock: [i64; 3],
    grid: &[f64],
    old_velocity: Option<&[f64]>,
    guard: i64,
) -> G2pStats {
    let mut stats = G2pStats::default();
    let block = [pblock[0] as u32, pblock[1] as u32, pblock[2] as u32];
    let beta = kp.flip_blend;
    for l in 0..chunk.group.len as usize {
        if chunk.flags[l] & FLAG_QUARANTINED != 0 {
            continue;
        }
        let view = chunk.data.view();
        let pos = view.vec3(l, CH_POS);
        let vel = view.vec3(l, CH_VEL);
        let f = view.mat3(l, CH_DEFORM);
        let j = view.get(l, CH_JACOBIAN);
        if !finite_vec(&pos) {
            chunk.flags[l] |= FLAG_QUARANTINED;
            stats.quarantined += 1;
            continue;
        }
        let st = quadratic_weights_unchecked(&pos, kp.dx);
        let g = gather(&st, &pos, kp.dx, |ijk| {
            let (blk, off) = stencil_node(st.base_cell, ijk, pblock, neighbors);
            let at = |ch: usize| grid[(blk as usize * NODE_CHANNELS + ch) * BLOCK_CELLS + off];
            let vi = Vec3::new(at(GRID_VELOCITY), at(GRID_VELOCITY + 1), at(GRID_VELOCITY + 2));
            let vold = match old_velocity {
                Some(o) => {
                    let at = |a: usize| o[(blk as usize * FLIP_CHANNELS + a) * BLOCK_CELLS + off];
                    Vec3::new(at(0), at(1), at(2))
                }
                None => vi,
            };
            (vi, vold)
        });
        let v = if beta > 0.0 { g.v * (1.0 - beta) + (vel + g.dv) * beta } else { g.v };
        let f_new = (Mat3::identity() + g.c * kp.dt) * f;
        let j_new = j * (1.0 + kp.dt * g.c.trace());
        let pos_new = pos + v * kp.dt;
        if !(finite_vec(&v) && finite_vec(&pos_new) && finite_mat(&g.c) && finite_mat(&f_new) && j_new.is_finite()) {
            chunk.flags[l] |= FLAG_QUARANTINED;
            stats.quarantined += 1;
            continue;
        }
        chunk.data.set_vec3(l, CH_POS, &pos_new);
        chunk.data.set_vec3(l, CH_VEL, &v);
        chunk.data.set_mat3(l, CH_AFFINE, &g.c);
        chunk.data.set_mat3(l, CH_DEFORM, &f_new);
        chunk.data.set(l, CH_JACOBIAN, j_new);
        stats.max_speed = stats.max_speed.max(v.norm());
        let local = zone_local(base_cell(&pos_new, kp.dx), block);
        if !in_zone(local, guard) {
            stats.violation = true;
        }
        chunk.keys[l] = if in_zone(local, 0) { lane_key(local) } else { LANE_KEY_LIMIT };
    }
    stats
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GridBlockStats {
    pub max_speed: f64,
}

/// Cell coordinates of node `offset` in block `coords`.
#[inline]
pub fn node_cell(coords: [u32; 3], offset: usize) -> [i64; 3] {
    let l = decode(CellCode(offset as u64));
    [
        coords[0] as i64 * 4 + l[0] as i64,
        coords[1] as i64 * 4 + l[1] as i64,
        coords[2] as i64 * 4 + l[2] as i64,
    ]
}

/// Velocity after the boundary condition at node position `x`.
#[inline]
pub fn apply_boundary(x: &Vec3, mut v: Vec3, b: &BoundaryBox) -> Vec3 {
    for a in 0..3 {
        let outward = (x[a] < b.min[a] && v[a] < 0.0) || (x[a] > b.max[a] && v[a] > 0.0);
        if outward {
            match b.mode {
                BoundaryMode::Slip => v[a] = 0.0,
                BoundaryMode::Sticky => return Vec3::zeros(),
            }
        }
    }
    v
}

/// Turns summed mass/momentum into updated nodal velocities for one block.
/// `sum(channel, offset)` yields the reduced value of a node channel.
#[allow(clippy::too_many_arguments)]
pub fn update_block(
    coords: [u32; 3],
    sum: impl Fn(usize, usize) -> f64,
    out: &mut [f64],
    old_velocity: Option<&mut [f64]>,
    dt: f64,
    gravity: &Vec3,
    dx: f64,
    boundary: Option<&BoundaryBox>,
) -> GridBlockStats {
    let mut stats = GridBlockStats::default();
    let mut old = old_velocity;
    for off in 0..BLOCK_CELLS {
        let m = sum(CH_MASS, off);
        let (v0, v) = if m > 0.0 {
            let v0 = Vec3::new(sum(CH_MOM, off), sum(CH_MOM + 1, off), sum(CH_MOM + 2, off)) / m;
            let mut v = v0 + gravity * dt;
            if let Some(b) = boundary {
                let c = node_cell(coords, off);
                let x = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * dx;
                v = apply_boundary(&x, v, b);
            }
            (v0, v)
        } else {
            (Vec3::zeros(), Vec3::zeros())
        };
        out[CH_MASS * BLOCK_CELLS + off] = m;
        for a in 0..3 {
            out[(GRID_VELOCITY + a) * BLOCK_CELLS + off] = v[a];
        }
        if let Some(o) = old.as_deref_mut() {
            for a in 0..3 {
                o[a * BLOCK_CELLS + off] = v0[a];
            }
        }
        stats.max_speed = stats.max_speed.max(v.norm());
    }
    stats
}

/// Separate boundary pass over an updated block (the split-BC ablation arm).
pub fn boundary_block(coords: [u32; 3], out: &mut [f64], dx: f64, b: &BoundaryBox) {
    for off in 0..BLOCK_CELLS {
        if out[CH_MASS * BLOCK_CELLS + off] <= 0.0 {
            continue;
        }
        let c = node_cell(coords, off);
        let x = Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * dx;
        let at = |a: usize| (GRID_VELOCITY + a) * BLOCK_CELLS + off;
        let v = Vec3::new(out[at(0)], out[at(1)], out[at(2)]);
        let v = apply_boundary(&x, v, b);
        for a in 0..3 {
            out[at(a)] = v[a];
        }
    }
}
