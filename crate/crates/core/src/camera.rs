//! Orthographic camera and closed-form ridge camera correction.
//!
//! Projection is `u = s * v(x, y) + t` per axis. Correction fits `(s, t)` for
//! each image axis independently, minimising
//! `sum_n (u_n - s v_n - t)^2 + xi (s^2 + t^2)` with the design matrix
//! `[v_n, 1]`. The 2x2 normal equations are solved with an explicit inverse;
//! sums are centred so that exact line fits come out exact.

use serde::{Deserialize, Serialize};

use crate::error::{DneError, Result};
use crate::{Vec2, Vec3};

const DET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Camera {
    pub const IDENTITY: Camera = Camera {
        sx: 1.0,
        sy: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Camera { sx, sy, tx, ty }
    }

    pub fn is_finite(&self) -> bool {
        [self.sx, self.sy, self.tx, self.ty].iter().all(|x| x.is_finite())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.sx, self.sy, self.tx, self.ty]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Camera::new(a[0], a[1], a[2], a[3])
    }

    pub fn project_all(&self, vertices: &[Vec3]) -> Vec<Vec2> {
        vertices.iter().map(|v| project(v, self)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub xi: f64,
}

impl RidgeConfig {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(DneError::Config(format!(
                "ridge weight must be finite and non-negative, got {xi}"
            )));
        }
        Ok(RidgeConfig { xi })
    }
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig { xi: 1e-4 }
    }
}

/// Orthographic projection; depth is ignored.
pub fn project(v: &Vec3, c: &Camera) -> Vec2 {
    [c.sx * v[0] + c.tx, c.sy * v[1] + c.ty]
}

/// Sum of squared reprojection residuals.
pub fn projection_residual(vertices: &[Vec3], coords_2d: &[Vec2], c: &Camera) -> Result<f64> {
    check_pair(vertices, coords_2d)?;
    Ok(vertices
        .iter()
        .zip(coords_2d)
        .map(|(v, u)| {
            let p = project(v, c);
            (u[0] - p[0]).powi(2) + (u[1] - p[1]).powi(2)
        })
        .sum())
}

/// Ridge objective: data term plus `xi * (|s|^2 + |t|^2)`.
pub fn ridge_objective(vertices: &[Vec3], coords_2d: &[Vec2], c: &Camera, xi: f64) -> Result<f64> {
    let data = projection_residual(vertices, coords_2d, c)?;
    Ok(data + xi * c.to_array().iter().map(|x| x * x).sum::<f64>())
}

fn check_pair(vertices: &[Vec3], coords_2d: &[Vec2]) -> Result<()> {
    if vertices.len() != coords_2d.len() {
        return Err(DneError::shape(
            "camera correspondences",
            vertices.len(),
            coords_2d.len(),
        ));
    }
    Ok(())
}

/// Normal equations of one image axis.
#[derive(Debug, Clone, Copy)]
struct AxisSystem {
    n: f64,
    xi: f64,
    sum_x: f64,
    sum_xx: f64,
    det: f64,
    scale: f64,
    shift: f64,
}

impl AxisSystem {
    fn solve(xs: impl Iterator<Item = (f64, f64)> + Clone, xi: f64) -> Result<Self> {
        let (mut n, mut sum_x, mut sum_u) = (0.0, 0.0, 0.0);
        for (x, u) in xs.clone() {
            n += 1.0;
            sum_x += x;
            sum_u += u;
        }
        let (mx, mu) = (sum_x / n, sum_u / n);
        let (mut vxx, mut vxu, mut sum_xx, mut sum_xu) = (0.0, 0.0, 0.0, 0.0);
        for (x, u) in xs {
            let (dx, du) = (x - mx, u - mu);
            vxx += dx * dx;
            vxu += dx * du;
            sum_xx += x * x;
            sum_xu += x * u;
        }
        // det(A^T A + xi I) = n Vxx + xi (Sxx + n) + xi^2
        let det = n * vxx + xi * (sum_xx + n) + xi * xi;
        if !(det.abs() > DET_EPS) {
            return Err(DneError::SingularSystem(det.abs()));
        }
        let scale = (n * vxu + xi * sum_xu) / det;
        let shift = (n * (mu * vxx - mx * vxu) + xi * sum_u) / det;
        Ok(AxisSystem {
            n,
            xi,
            sum_x,
            sum_xx,
            det,
            scale,
            shift,
        })
    }

    /// `M^{-1} g` for the symmetric system matrix `M`.
    fn inverse_apply(&self, g: [f64; 2]) -> [f64; 2] {
        let (a, b, d) = (self.sum_xx + self.xi, self.sum_x, self.n + self.xi);
        [(d * g[0] - b * g[1]) / self.det, (a * g[1] - b * g[0]) / self.det]
    }
}

fn axis_systems(vertices: &[Vec3], coords_2d: &[Vec2], cfg: &RidgeConfig) -> Result<[AxisSystem; 2]> {
    check_pair(vertices, coords_2d)?;
    if vertices.len() < 2 {
        return Err(DneError::Underdetermined(vertices.len()));
    }
    let pairs = |k: usize| vertices.iter().zip(coords_2d).map(move |(v, u)| (v[k], u[k]));
    Ok([
        AxisSystem::solve(pairs(0), cfg.xi)?,
        AxisSystem::solve(pairs(1), cfg.xi)?,
    ])
}

/// Fits the camera to vertex/coordinate correspondences by ridge regression.
pub fn correct_camera(vertices: &[Vec3], coords_2d: &[Vec2], cfg: &RidgeConfig) -> Result<Camera> {
    let [x, y] = axis_systems(vertices, coords_2d, cfg)?;
    Ok(Camera::new(x.scale, y.scale, x.shift, y.shift))
}

/// Reverse mode through [`correct_camera`]: given `d_cam`, accumulates the
/// gradients w.r.t. the vertices' x/y and the 2D coordinates.
pub fn correct_camera_backward(
    vertices: &[Vec3],
    coords_2d: &[Vec2],
    cfg: &RidgeConfig,
    d_cam: &Camera,
    d_vertices: &mut [Vec3],
    d_coords: &mut [Vec2],
) -> Result<()> {
    let systems = axis_systems(vertices, coords_2d, cfg)?;
    let upstream = [[d_cam.sx, d_cam.tx], [d_cam.sy, d_cam.ty]];
    for (k, sys) in systems.iter().enumerate() {
        // M theta = b  =>  db = M^{-1} g,  dM = -db theta^T
        let lam = sys.inverse_apply(upstream[k]);
        let theta = [sys.scale, sys.shift];
        let d_m00 = -lam[0] * theta[0];
        let d_m01 = -lam[0] * theta[1] - lam[1] * theta[0];
        for ((v, u), (dv, du)) in vertices
            .iter()
            .zip(coords_2d)
            .zip(d_vertices.iter_mut().zip(d_coords.iter_mut()))
        {
            dv[k] += 2.0 * d_m00 * v[k] + d_m01 + lam[0] * u[k];
            du[k] += lam[0] * v[k] + lam[1];
        }
    }
    Ok(())
}
