use mpm_core::domain::{Material, SimParams};
use mpm_core::particles::ParticleInit;
use mpm_core::pipeline::{BoundaryBox, BoundaryMode};
use mpm_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Scene};
use crate::BenchError;

/// Cells between the grid origin and the domain walls: one block for the
/// stencil halo plus one for the dilation.
pub const WALL_CELLS: u32 = 8;
const FOUNTAIN_DOMAIN_CELLS: u32 = 64;
const FREE_FALL_DOMAIN_CELLS: u32 = 128;

/// Everything needed to construct a world for a scene.
#[derive(Debug, Clone)]
pub struct SceneSetup {
    pub params: SimParams,
    pub materials: Vec<Material>,
    pub boundary: Option<BoundaryBox>,
    pub particles: Vec<ParticleInit>,
    pub source: Option<FountainSource>,
}

/// Box corners (cells) and the edge of the enclosing cube.
#[derive(Debug, Clone, PartialEq)]
pub struct SandLayout {
    pub corners: Vec<[u32; 3]>,
    pub domain_cells: u32,
}

pub fn stratified_side(ppc: u32) -> Result<u32, BenchError> {
    let k = (ppc as f64).cbrt().round() as u32;
    if k == 0 || k * k * k != ppc {
        return Err(BenchError::Config(format!("ppc must be a perfect cube for stratified sampling, got {ppc}")));
    }
    Ok(k)
}

/// Boxes on a square horizontal grid, one gap between boxes and walls,
/// `drop_height` cells above the floor, centered in a cubic domain.
pub fn sand_layout(config: &RunConfig) -> Result<SandLayout, BenchError> {
    let rows = match config.boxes {
        1 => 1,
        4 => 2,
        16 => 4,
        b => return Err(BenchError::Config(format!("boxes must be 1, 4 or 16, got {b}"))),
    };
    let (l, gap) = (config.l, config.gap());
    let footprint = gap + rows * (l + gap);
    let height = config.drop_height + 2 * l;
    let needed = footprint.max(height);
    let domain_cells = match config.domain_cells {
        Some(d) if d < needed => {
            return Err(BenchError::Config(format!(
                "{} boxes of edge {l} with gap {gap} need a {needed}-cell domain, got {d}",
                config.boxes
            )))
        }
        Some(d) => d,
        None => needed,
    };
    let shift = (domain_cells - footprint) / 2;
    let mut corners = Vec::with_capacity(config.boxes as usize);
    for bx in 0..rows {
        for bz in 0..rows {
            corners.push([
                WALL_CELLS + shift + gap + bx * (l + gap),
                WALL_CELLS + config.drop_height,
                WALL_CELLS + shift + gap + bz * (l + gap),
            ]);
        }
    }
    Ok(SandLayout { corners, domain_cells })
}

fn wall_box(dx: f64, domain_cells: u32) -> BoundaryBox {
    BoundaryBox {
        min: Vec3::repeat(WALL_CELLS as f64 * dx),
        max: Vec3::repeat((WALL_CELLS + domain_cells) as f64 * dx),
        mode: BoundaryMode::Slip,
    }
}

/// `ppc` stratified samples in every cell of every box: the cell is split
/// into `ppc` congruent subcells with one uniform sample each.
pub fn gen_sand_blocks(config: &RunConfig) -> Result<Vec<ParticleInit>, BenchError> {
    config.validate()?;
    let layout = sand_layout(config)?;
    let k = stratified_side(config.ppc)?;
    let dx = config.dx;
    let volume = dx * dx * dx / config.ppc as f64;
    let mass = config.density * volume;
    let vel = Vec3::new(0.0, -config.drop_speed, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let l = config.l;
    let total = config.boxes as usize * (l as usize).pow(3) * config.ppc as usize;
    let mut out = Vec::with_capacity(total);
    for corner in &layout.corners {
        for i in 0..l {
            for j in 0..l {
                for kk in 0..l {
                    let cell = [corner[0] + i, corner[1] + j, corner[2] + kk];
                    for sub in 0..config.ppc {
                        let s = [sub % k, (sub / k) % k, sub / (k * k)];
                        let mut pos = Vec3::zeros();
                        for a in 0..3 {
                            let u: f64 = rng.gen();
                            pos[a] = (cell[a] as f64 + (s[a] as f64 + u) / k as f64) * dx;
                        }
                        out.push(ParticleInit { id: out.len() as u64, pos, vel, material: 0, mass, volume });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ball source emitting 27 particles (3x3x3 subcell centers) per cell whose
/// center lies in the ball; a ball smaller than a cell emits from the cell
/// holding its center.
#[derive(Debug, Clone, PartialEq)]
pub struct FountainSource {
    pub center: Vec3,
    pub radius: f64,
    pub velocity: Vec3,
    pub dx: f64,
    pub density: f64,
    pub material: u16,
    next_id: u64,
}

pub const FOUNTAIN_PPC: usize = 27;

impl FountainSource {
    pub fn new(center: Vec3, radius: f64, velocity: Vec3, dx: f64, density: f64) -> Self {
        FountainSource { center, radius, velocity, dx, density, material: 0, next_id: 0 }
    }

    pub fn cells(&self) -> Vec<[i64; 3]> {
        let c = self.center / self.dx;
        let r = self.radius / self.dx;
        let lo = (c - Vec3::repeat(r + 1.0)).map(|v| v.floor() as i64);
        let hi = (c + Vec3::repeat(r + 1.0)).map(|v| v.ceil() as i64);
        let mut cells = Vec::new();
        for i in lo.x..=hi.x {
            for j in lo.y..=hi.y {
                for k in lo.z..=hi.z {
                    let mid = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                    if (mid - c).norm() <= r {
                        cells.push([i, j, k]);
                    }
                }
            }
        }
        if cells.is_empty() {
            cells.push([c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64]);
        }
        cells
    }

    /// One frame's emission, with ids continuing from the previous one.
    pub fn emit(&mut self) -> Vec<ParticleInit> {
        let dx = self.dx;
        let volume = dx * dx * dx / FOUNTAIN_PPC as f64;
        let cells = self.cells();
        let mut out = Vec::with_capacity(cells.len() * FOUNTAIN_PPC);
        for cell in cells {
            for s in 0..FOUNTAIN_PPC {
                let sub = [s % 3, (s / 3) % 3, s / 9];
                let pos = Vec3::from_fn(|a, _| (cell[a] as f64 + (sub[a] as f64 + 0.5) / 3.0) * dx);
                out.push(ParticleInit {
                    id: self.next_id,
                    pos,
                    vel: self.velocity,
                    material: self.material,
                    mass: self.density * volume,
                    volume,
                });
                self.next_id += 1;
            }
        }
        out
    }
}

pub fn gen_fountain_lite(config: &RunConfig) -> FountainSource {
    let size = config.domain_cells.unwrap_or(FOUNTAIN_DOMAIN_CELLS) as f64;
    let wall = WALL_CELLS as f64;
    let center = Vec3::new(wall + size * 0.25, wall + size * 0.75, wall + size * 0.5) * config.dx;
    let v = config.emit_velocity;
    FountainSource::new(center, config.source_radius * config.dx, Vec3::new(v[0], v[1], v[2]), config.dx, 1.0)
}

pub fn build_scene(config: &RunConfig) -> Result<SceneSetup, BenchError> {
    config.validate()?;
    let params = config.sim_params();
    let setup = match config.scene {
        Scene::SandBlocks => {
            let layout = sand_layout(config)?;
            SceneSetup {
                params,
                materials: vec![Material::fixed_corotated(
                    config.density,
                    config.youngs_modulus,
                    config.poisson_ratio,
                )],
                boundary: Some(wall_box(config.dx, layout.domain_cells)),
                particles: gen_sand_blocks(config)?,
                source: None,
            }
        }
        Scene::FountainLite => {
            let size = config.domain_cells.unwrap_or(FOUNTAIN_DOMAIN_CELLS);
            let mut source = gen_fountain_lite(config);
            let boundary = wall_box(config.dx, size);
            let r = source.radius + config.dx;
            if (0..3).any(|a| source.center[a] - r < boundary.min[a] || source.center[a] + r > boundary.max[a]) {
                return Err(BenchError::Config("fountain source ball leaves the domain".into()));
            }
            let particles = source.emit();
            SceneSetup {
                params,
                materials: vec![Material::fluid(1.0, config.bulk_modulus, config.gamma)],
                boundary: Some(boundary),
                particles,
                source: Some(source),
            }
        }
        Scene::FreeFall => {
            let mid = (WALL_CELLS + FREE_FALL_DOMAIN_CELLS / 2) as f64 * config.dx;
            let material = Material::fixed_corotated(config.density, config.youngs_modulus, config.poisson_ratio);
            let volume = config.dx.powi(3) / config.ppc as f64;
            let v = config.emit_velocity;
            SceneSetup {
                params,
                materials: vec![material],
                boundary: None,
                particles: vec![ParticleInit {
                    id: 0,
                    pos: Vec3::new(mid, mid * 1.5, mid),
                    vel: Vec3::new(v[0], v[1], v[2]),
                    material: 0,
                    mass: config.density * volume,
                    volume,
                }],
                source: None,
            }
        }
    };
    Ok(setup)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sand(l: u32, boxes: u32) -> RunConfig {
        RunConfig { l, boxes, ..RunConfig::default() }
    }

    #[test]
    fn sand_block_counts_match_closed_form() {
        for (l, boxes, expected) in [(12, 4, 55_296), (5, 1, 1000), (3, 16, 3456)] {
            let p = gen_sand_blocks(&sand(l, boxes)).unwrap();
            assert_eq!(p.len(), expected);
            assert_eq!(p.len(), (boxes * l * l * l * 8) as usize);
        }
    }

    #[test]
    fn full_scale_counts() {
        for (l, boxes, expected) in [(23u64, 4u64, 389_344u64), (46, 16, 12_459_008)] {
            assert_eq!(boxes * l.pow(3) * 8, expected);
        }
    }

    #[test]
    fn sand_blocks_are_stratified_and_seeded() {
        let cfg = sand(2, 1);
        let a = gen_sand_blocks(&cfg).unwrap();
        let b = gen_sand_blocks(&cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_sand_blocks(&RunConfig { seed: 99, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        let corner = sand_layout(&cfg).unwrap().corners[0];
        // every half-cell subcell holds exactly one sample
        let mut seen = std::collections::HashSet::new();
        for p in &a {
            let sub = (p.pos / (cfg.dx / 2.0)).map(|v| v.floor() as i64);
            assert!(seen.insert([sub.x, sub.y, sub.z]));
            for k in 0..3 {
                let cell = (p.pos[k] / cfg.dx).floor() as u32;
                assert!(cell >= corner[k] && cell < corner[k] + 2);
            }
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn layout_gaps_and_domain_errors() {
        let cfg = sand(12, 4);
        let layout = sand_layout(&cfg).unwrap();
        assert_eq!(layout.corners.len(), 4);
        assert_eq!(layout.corners[2][0] - layout.corners[0][0], 24);
        assert_eq!(layout.domain_cells, 64);
        assert!(matches!(
            sand_layout(&RunConfig { domain_cells: Some(40), ..cfg.clone() }),
            Err(BenchError::Config(_))
        ));
        assert!(matches!(sand_layout(&sand(12, 3)), Err(BenchError::Config(_))));
        assert!(matches!(gen_sand_blocks(&RunConfig { ppc: 6, ..cfg }), Err(BenchError::Config(_))));
    }

    #[test]
    fn fountain_source_cell_counts() {
        let dx = 1.0;
        let tiny = FountainSource::new(Vec3::new(10.2, 10.2, 10.2), 0.1, Vec3::zeros(), dx, 1.0);
        assert_eq!(tiny.cells(), vec![[10, 10, 10]]);
        let mut corner = FountainSource::new(Vec3::new(10.0, 10.0, 10.0), 0.9, Vec3::zeros(), dx, 1.0);
        assert_eq!(corner.cells().len(), 8);
        let first = corner.emit();
        assert_eq!(first.len(), 216);
        let second = corner.emit();
        assert_eq!(second[0].id, 216);
    }

    #[test]
    fn fountain_emits_at_rest_when_velocity_is_zero() {
        let cfg = RunConfig { scene: Scene::FountainLite, emit_velocity: [0.0; 3], ..RunConfig::default() };
        let setup = build_scene(&cfg).unwrap();
        assert!(setup.particles.iter().all(|p| p.vel == Vec3::zeros()));
        assert_eq!(setup.particles.len() % FOUNTAIN_PPC, 0);
    }
}
