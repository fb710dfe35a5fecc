//! Simulation parameters, materials and the per-particle math shared by all phases.

use crate::error::{MpmError, Result};
use crate::{Mat3, Vec3};

/// Singular-value floor applied when a deformation gradient is near singular.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-4;
/// det(F) at or below this is treated as degenerate.
pub const DEGENERATE_DET: f64 = 1e-10;
/// Division guard for the CFL step.
pub const SPEED_EPSILON: f64 = 1e-12;
const POLAR_MAX_ITERATIONS: usize = 30;
const POLAR_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    /// Cell width (cm).
    pub dx: f64,
    /// Step size (s). Used as-is in fixed-step runs.
    pub dt: f64,
    /// cm/s².
    pub gravity: Vec3,
    /// Seconds per frame.
    pub frame_dt: f64,
    pub steps_per_frame: u32,
    pub cfl: f64,
    /// Particles per lane group.
    pub lane_width: usize,
    /// 0 is pure APIC/MLS, 1 is pure FLIP velocity update.
    pub flip_blend: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dx: 25.0 / 64.0,
            dt: 1.0 / 48.0 / 36.0,
            gravity: Vec3::new(0.0, -981.0, 0.0),
            frame_dt: 1.0 / 48.0,
            steps_per_frame: 36,
            cfl: 0.5,
            lane_width: 32,
            flip_blend: 0.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(MpmError::RejectedInput(format!("dx must be > 0, got {}", self.dx)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(MpmError::RejectedInput(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps_per_frame < 1 {
            return Err(MpmError::RejectedInput("steps_per_frame must be >= 1".into()));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(MpmError::RejectedInput(format!("cfl must be in (0,1], got {}", self.cfl)));
        }
        if !self.lane_width.is_power_of_two() || self.lane_width > 64 {
            return Err(MpmError::RejectedInput(format!(
                "lane_width must be a power of two <= 64, got {}",
                self.lane_width
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_blend) {
            return Err(MpmError::RejectedInput(format!(
                "flip_blend must be in [0,1], got {}",
                self.flip_blend
            )));
        }
        if !(self.frame_dt > 0.0) || !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(MpmError::RejectedInput("frame_dt and gravity must be finite, frame_dt > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialKind {
    WeaklyCompressibleFluid,
    FixedCorotated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub kind: MaterialKind,
    /// g/cm³.
    pub density: f64,
    /// dyne/cm², fluid only.
    pub bulk_modulus: f64,
    /// Pressure exponent, fluid only.
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
}

impl Material {
    pub fn fluid(density: f64, bulk_modulus: f64, gamma: f64) -> Self {
        Material {
            kind: MaterialKind::WeaklyCompressibleFluid,
            density,
            bulk_modulus,
            gamma,
            mu: 0.0,
            lambda: 0.0,
        }
    }

    /// Fixed-corotated solid from Young's modulus and Poisson ratio.
    pub fn fixed_corotated(density: f64, youngs: f64, poisson: f64) -> Self {
        let mu = youngs / (2.0 * (1.0 + poisson));
        let lambda = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
        Material {
            kind: MaterialKind::FixedCorotated,
            density,
            bulk_modulus: 0.0,
            gamma: 0.0,
            mu,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) {
            return Err(MpmError::RejectedInput(format!("density must be > 0, got {}", self.density)));
        }
        match self.kind {
            MaterialKind::WeaklyCompressibleFluid => {
                if !(self.bulk_modulus > 0.0) {
                    return Err(MpmError::RejectedInput("fluid bulk modulus must be > 0".into()));
                }
            }
            MaterialKind::FixedCorotated => {
                if !(self.mu >= 0.0 && self.lambda >= 0.0) {
                    return Err(MpmError::RejectedInput("Lamé parameters must be >= 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Small-strain wave speed (cm/s).
    pub fn sound_speed(&self) -> f64 {
        match self.kind {
            MaterialKind::WeaklyCompressibleFluid => {
                (self.bulk_modulus * self.gamma / self.density).sqrt()
            }
            MaterialKind::FixedCorotated => ((self.lambda + 2.0 * self.mu) / self.density).sqrt(),
        }
    }
}

/// Quadratic B-spline weights of one particle: three weights per axis
/// anchored at `base_cell`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightStencil {
    pub base_cell: [i64; 3],
    /// `w[axis][k]` is the weight of node `base_cell[axis] + k`.
    pub w: [[f64; 3]; 3],
}

impl WeightStencil {
    #[inline]
    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.w[0][i] * self.w[1][j] * self.w[2][k]
    }

    /// Vector from the particle to node `base + (i, j, k)`.
    #[inline]
    pub fn node_offset(&self, i: usize, j: usize, k: usize, pos: &Vec3, dx: f64) -> Vec3 {
        Vec3::new(
            (self.base_cell[0] + i as i64) as f64 * dx - pos.x,
            (self.base_cell[1] + j as i64) as f64 * dx - pos.y,
            (self.base_cell[2] + k as i64) as f64 * dx - pos.z,
        )
    }
}

/// Stencil anchor cell: floor(x/dx - 0.5) per axis.
#[inline]
pub fn base_cell(pos: &Vec3, dx: f64) -> [i64; 3] {
    let inv = 1.0 / dx;
    [
        (pos.x * inv - 0.5).floor() as i64,
        (pos.y * inv - 0.5).floor() as i64,
        (pos.z * inv - 0.5).floor() as i64,
    ]
}

pub fn quadratic_weights(pos: &Vec3, dx: f64) -> Result<WeightStencil> {
    if !pos.iter().all(|c| c.is_finite()) {
        return Err(MpmError::RejectedInput(format!("non-finite position {:?}", pos)));
    }
    Ok(quadratic_weights_unchecked(pos, dx))
}

#[inline]
pub(crate) fn quadratic_weights_unchecked(pos: &Vec3, dx: f64) -> WeightStencil {
    let inv = 1.0 / dx;
    let mut base = [0i64; 3];
    let mut w = [[0.0; 3]; 3];
    for a in 0..3 {
        let x = pos[a] * inv;
        let b = (x - 0.5).floor();
        // fx in [0.5, 1.5)
        let fx = x - b;
        w[a] = [
            0.5 * (1.5 - fx) * (1.5 - fx),
            0.75 - (fx - 1.0) * (fx - 1.0),
            0.5 * (fx - 0.5) * (fx - 0.5),
        ];
        base[a] = b as i64;
    }
    WeightStencil { base_cell: base, w }
}

/// Cauchy stress of the weakly compressible fluid, `-p I` with
/// `p = κ (J^-γ - 1)`.
pub fn stress_fluid(j: f64, material: &Material) -> Result<Mat3> {
    if !(j > 0.0) {
        return Err(MpmError::Degenerate(format!("fluid volume ratio J = {j}")));
    }
    let p = fluid_pressure(j, material);
    Ok(Mat3::identity() * -p)
}

#[inline]
pub fn fluid_pressure(j: f64, material: &Material) -> f64 {
    material.bulk_modulus * (j.powf(-material.gamma) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressEval {
    /// Kirchhoff stress.
    pub tau: Mat3,
    /// Singular values were floored.
    pub clamped: bool,
}

/// Rotation of the polar decomposition `F = R S`, plus singular values after
/// sign correction (so that det R = +1). Returns `(U, sigma, V)`.
pub fn polar_svd(f: &Mat3) -> (Mat3, Vec3, Mat3) {
    let svd = f.svd(true, true);
    let mut u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut v = v_t.transpose();
    let mut sigma = svd.singular_values;
    if u.determinant() < 0.0 {
        let k = sigma.imin();
        u.column_mut(k).neg_mut();
        sigma[k] = -sigma[k];
    }
    if v.determinant() < 0.0 {
        let k = sigma.iamin();
        v.column_mut(k).neg_mut();
        sigma[k] = -sigma[k];
    }
    (u, sigma, v)
}

/// Rotation factor of `F = R S` by Frobenius-scaled Newton iteration, for
/// `det F > 0`. `None` if the iteration does not settle.
pub fn polar_rotation(f: &Mat3) -> Option<Mat3> {
    let mut x = *f;
    for _ in 0..POLAR_MAX_ITERATIONS {
        let inv_t = x.try_inverse()?.transpose();
        let gamma = (inv_t.norm() / x.norm()).sqrt();
        let next = (x * gamma + inv_t / gamma) * 0.5;
        let delta = (next - x).norm();
        x = next;
        if delta <= POLAR_TOLERANCE {
            return Some(x);
        }
    }
    None
}

/// Fixed-corotated Kirchhoff stress `2μ(F − R)Fᵀ + λ(J − 1)J I`.
pub fn stress_fixed_corotated(f: &Mat3, material: &Material) -> StressEval {
    let det = f.determinant();
    if det > DEGENERATE_DET {
        if let Some(r) = polar_rotation(f) {
            let tau = (f - r) * f.transpose() * (2.0 * material.mu)
                + Mat3::identity() * (material.lambda * (det - 1.0) * det);
            return StressEval { tau, clamped: false };
        }
    }
    let (u, mut sigma, v) = polar_svd(f);
    let r = u * v.transpose();
    let mut clamped = false;
    let mut fe = *f;
    if det <= DEGENERATE_DET {
        for s in sigma.iter_mut() {
            *s = s.max(SINGULAR_VALUE_FLOOR);
        }
        fe = u * Mat3::from_diagonal(&sigma) * v.transpose();
        clamped = true;
    }
    let j = sigma.x * sigma.y * sigma.z;
    let tau = (fe - r) * fe.transpose() * (2.0 * material.mu)
        + Mat3::identity() * (material.lambda * (j - 1.0) * j);
    StressEval { tau, clamped }
}

/// Largest step that keeps per-step travel below `cfl·dx`, clamped to the
/// time left in the frame.
pub fn cfl_dt(max_speed: f64, params: &SimParams, frame_remaining: f64) -> f64 {
    let speed = max_speed.max(SPEED_EPSILON);
    frame_remaining.min(params.cfl * params.dx / speed)
}
