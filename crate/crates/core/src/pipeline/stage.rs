use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{DnePipelineParams, DneStageParams, StageSettings};
use crate::camera::{correct_camera, correct_camera_backward, Camera};
use crate::error::{DneError, Result};
use crate::features::{pool_and_gather, voxel_bins, FeatureGrid, PooledViews, RegressorCache};
use crate::mesh::HandMesh;
use crate::neural::MlpTape;
use crate::noise::{self, standard_normals, STREAM_2D, STREAM_3D};
use crate::{Vec2, Vec3};

/// Mean noise and corrected camera of one stage, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub mu_2d: Vec<Vec2>,
    pub mu_3d: Vec<Vec3>,
    pub camera: Camera,
}

/// Mesh, image-plane coordinates and camera between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementState {
    pub mesh: HandMesh,
    /// `u`: refined 2D coordinates; not necessarily `P(v, c)`.
    pub coords_2d: Vec<Vec2>,
    pub camera: Camera,
    pub trace: Vec<StageTrace>,
}

impl RefinementState {
    pub fn new(mesh: HandMesh, coords_2d: Vec<Vec2>, camera: Camera) -> Result<Self> {
        if coords_2d.len() != mesh.num_vertices() {
            return Err(DneError::shape("RefinementState coords", mesh.num_vertices(), coords_2d.len()));
        }
        if coords_2d.iter().flatten().any(|x| !x.is_finite()) || !camera.is_finite() {
            return Err(DneError::Config("refinement state must be finite".into()));
        }
        Ok(RefinementState {
            mesh,
            coords_2d,
            camera,
            trace: Vec::new(),
        })
    }

    /// Starts from a coarse fit: `u = P(v, c)`.
    pub fn from_coarse(mesh: HandMesh, camera: Camera) -> Result<Self> {
        let coords = camera.project_all(mesh.vertices());
        Self::new(mesh, coords, camera)
    }

    /// `P(v, c)` under the state's own camera.
    pub fn projected(&self) -> Vec<Vec2> {
        self.camera.project_all(self.mesh.vertices())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `eps = mu`.
    Infer,
    /// Mean path plus `samples` reparameterized draws from `seed`.
    Train { seed: u64, samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// The mean path; this is what the next stage consumes.
    pub state: RefinementState,
    /// Vertices of each sampled path (empty in inference).
    pub sample_vertices: Vec<Vec<Vec3>>,
    pub sample_coords: Vec<Vec<Vec2>>,
}

/// One noise path (mean or sampled) through steps 2-3.
#[derive(Debug, Clone)]
pub(crate) struct PathTape {
    z_2d: Option<Vec<Vec2>>,
    pub(crate) u: Vec<Vec2>,
    pooled: Option<PooledViews>,
    psi: Option<MlpTape>,
    mu_3d: Vec<Vec3>,
    z_3d: Option<Vec<Vec3>>,
    pub(crate) v: Vec<Vec3>,
}

/// Everything the reverse pass of a stage needs.
#[derive(Debug, Clone)]
pub(crate) struct StageTape {
    v: Vec<Vec3>,
    camera_in: Camera,
    p: Vec<Vec2>,
    r: Vec<Vec2>,
    regressor: Option<RegressorCache>,
    phi: Option<MlpTape>,
    mu_2d: Vec<Vec2>,
    bins: Vec<[usize; 3]>,
    pub(crate) mean: PathTape,
    pub(crate) samples: Vec<PathTape>,
    pub(crate) camera: Camera,
}

/// Gradients arriving at a stage's outputs.
#[derive(Debug, Clone)]
pub(crate) struct StageUpstream {
    pub d_v: Vec<Vec3>,
    pub d_u: Vec<Vec2>,
    pub d_camera: Camera,
    pub d_samples: Vec<Vec<Vec3>>,
}

/// Gradients w.r.t. a stage's inputs.
#[derive(Debug, Clone)]
pub(crate) struct StageInputGrads {
    pub d_v: Vec<Vec3>,
    pub d_u: Vec<Vec2>,
    pub d_camera: Camera,
}

pub(crate) const ZERO_CAMERA: Camera = Camera {
    sx: 0.0,
    sy: 0.0,
    tx: 0.0,
    ty: 0.0,
};

fn ensure_finite<'a>(stage: usize, step: &'static str, xs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if xs.into_iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DneError::NonFinite { stage, step })
    }
}

fn interpolate_rows(grid: &FeatureGrid, coords: &[Vec2], out: &mut Array2<f64>, offset: usize) {
    let c = grid.channels();
    for (i, uv) in coords.iter().enumerate() {
        let mut row = out.row_mut(i);
        let dst = row.as_slice_mut().expect("standard layout");
        grid.interpolate_into(*uv, &mut dst[offset..offset + c]);
    }
}

fn rows<const D: usize>(a: &Array2<f64>) -> Vec<[f64; D]> {
    a.rows()
        .into_iter()
        .map(|r| std::array::from_fn(|k| r[k]))
        .collect()
}

fn matrix<const D: usize>(xs: &[[f64; D]]) -> Array2<f64> {
    Array2::from_shape_fn((xs.len(), D), |(i, k)| xs[i][k])
}

fn check_shapes(n: usize, grid: &FeatureGrid, params: &DneStageParams) -> Result<()> {
    let c = grid.channels();
    if params.phi.in_dim() != 2 * c || params.phi.out_dim() != 2 {
        return Err(DneError::shape("phi", format!("{} -> 2", 2 * c), format!("{} -> {}", params.phi.in_dim(), params.phi.out_dim())));
    }
    if params.psi.in_dim() != 3 * c || params.psi.out_dim() != 3 {
        return Err(DneError::shape("psi", format!("{} -> 3", 3 * c), format!("{} -> {}", params.psi.in_dim(), params.psi.out_dim())));
    }
    if params.regressor.num_vertices() != n {
        return Err(DneError::shape("regressor vertices", n, params.regressor.num_vertices()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn forward_path(
    v: &[Vec3],
    u: &[Vec2],
    mu_2d: &[Vec2],
    bins: &[[usize; 3]],
    grid: &FeatureGrid,
    params: &DneStageParams,
    settings: &StageSettings,
    stage: usize,
    draw: Option<(u64, usize)>,
) -> Result<PathTape> {
    let n = v.len();
    let np = settings.noise;
    let z_2d = match draw {
        Some((seed, r)) if settings.use_2d => Some(standard_normals::<2>(seed, stage as u64, r as u64, STREAM_2D, n)),
        _ => None,
    };
    let eps_2d = match &z_2d {
        Some(z) => noise::apply(mu_2d, z, np.gamma, np.delta_2d),
        None => mu_2d.to_vec(),
    };
    let u_new: Vec<Vec2> = u.iter().zip(&eps_2d).map(|(a, e)| [a[0] + e[0], a[1] + e[1]]).collect();
    ensure_finite(stage, "update coordinates", u_new.iter().flatten())?;

    let (pooled, psi, mu_3d) = if settings.use_3d {
        let mut f_u = Array2::zeros((n, grid.channels()));
        interpolate_rows(grid, &u_new, &mut f_u, 0);
        let pooled = pool_and_gather(bins, settings.voxel_resolution, f_u.view())?;
        let (out, tape) = params.psi.forward_batch(pooled.views.view())?;
        ensure_finite(stage, "psi", out.iter())?;
        let mu = rows::<3>(&out).into_iter().map(|m| m.map(|x| settings.psi_scale * x)).collect();
        (Some(pooled), Some(tape), mu)
    } else {
        (None, None, vec![[0.0; 3]; n])
    };
    let z_3d = match draw {
        Some((seed, r)) if settings.use_3d => Some(standard_normals::<3>(seed, stage as u64, r as u64, STREAM_3D, n)),
        _ => None,
    };
    let eps_3d = match &z_3d {
        Some(z) => noise::apply(&mu_3d, z, np.gamma, np.delta_3d),
        None => mu_3d.clone(),
    };
    let v_new: Vec<Vec3> = v
        .iter()
        .zip(&eps_3d)
        .map(|(a, e)| [a[0] + e[0], a[1] + e[1], a[2] + e[2]])
        .collect();
    ensure_finite(stage, "update vertices", v_new.iter().flatten())?;
    Ok(PathTape {
        z_2d,
        u: u_new,
        pooled,
        psi,
        mu_3d,
        z_3d,
        v: v_new,
    })
}

/// Forward pass of one stage; `draw = Some((seed, R))` adds `R` sampled paths.
#[allow(clippy::too_many_arguments)]
pub(crate) fn stage_forward(
    v: &[Vec3],
    u: &[Vec2],
    camera: &Camera,
    grid: &FeatureGrid,
    params: &DneStageParams,
    settings: &StageSettings,
    stage: usize,
    draw: Option<(u64, usize)>,
) -> Result<StageTape> {
    let n = v.len();
    if u.len() != n {
        return Err(DneError::shape("stage coordinates", n, u.len()));
    }
    check_shapes(n, grid, params)?;
    let c = grid.channels();

    let (p, r, regressor, phi, mu_2d) = if settings.use_2d {
        let p = camera.project_all(v);
        ensure_finite(stage, "project", p.iter().flatten())?;
        let (r, cache) = params.regressor.forward(grid)?;
        ensure_finite(stage, "regress coordinates", r.iter().flatten())?;
        let mut x = Array2::zeros((n, 2 * c));
        interpolate_rows(grid, &p, &mut x, 0);
        interpolate_rows(grid, &r, &mut x, c);
        let (out, tape) = params.phi.forward_batch(x.view())?;
        ensure_finite(stage, "phi", out.iter())?;
        (p, r, Some(cache), Some(tape), rows::<2>(&out))
    } else {
        (Vec::new(), Vec::new(), None, None, vec![[0.0; 2]; n])
    };

    let bins = if settings.use_3d {
        voxel_bins(v, settings.voxel_resolution)
    } else {
        Vec::new()
    };
    let path = |d| forward_path(v, u, &mu_2d, &bins, grid, params, settings, stage, d);
    let mean = path(None)?;
    let samples = match draw {
        Some((seed, count)) => (0..count).map(|r| path(Some((seed, r)))).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let corrected = correct_camera(&mean.v, &mean.u, &settings.ridge)?;
    ensure_finite(stage, "camera correction", corrected.to_array().iter())?;
    Ok(StageTape {
        v: v.to_vec(),
        camera_in: *camera,
        p,
        r,
        regressor,
        phi,
        mu_2d,
        bins,
        mean,
        samples,
        camera: corrected,
    })
}

impl StageTape {
    /// Changes whenever a perturbation crosses a non-differentiable point
    /// (ReLU switch, bilinear cell or clamp boundary, voxel bin, pooling argmax).
    pub(crate) fn kink_key(&self, grid: &FeatureGrid) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |x: u64| h = (h ^ x).wrapping_mul(0x0100_0000_01b3);
        let stencils = |coords: &[Vec2], eat: &mut dyn FnMut(u64)| {
            for uv in coords {
                let (row, col, ix, iy) = grid.stencil_key(*uv);
                eat(((row as u64) << 32) ^ ((col as u64) << 2) ^ ((ix as u64) << 1) ^ iy as u64);
            }
        };
        stencils(&self.p, &mut eat);
        stencils(&self.r, &mut eat);
        if let Some(t) = &self.phi {
            eat(t.pattern_key());
        }
        for b in &self.bins {
            eat(((b[0] as u64) << 40) ^ ((b[1] as u64) << 20) ^ b[2] as u64);
        }
        for path in std::iter::once(&self.mean).chain(&self.samples) {
            stencils(&path.u, &mut eat);
            if let Some(t) = &path.psi {
                eat(t.pattern_key());
            }
            if let Some(p) = &path.pooled {
                p.source.iter().for_each(|&s| eat(s as u64));
            }
        }
        h
    }
}

/// Reverse pass of [`stage_forward`]; parameter gradients are added to `grads`.
pub(crate) fn stage_backward(
    tape: &StageTape,
    grid: &FeatureGrid,
    params: &DneStageParams,
    settings: &StageSettings,
    upstream: StageUpstream,
    grads: &mut DneStageParams,
) -> Result<StageInputGrads> {
    let n = tape.v.len();
    let c = grid.channels();
    if upstream.d_samples.len() != tape.samples.len() {
        return Err(DneError::shape("stage sample gradients", tape.samples.len(), upstream.d_samples.len()));
    }
    let gamma = settings.noise.gamma;
    let mut d_v = vec![[0.0; 3]; n];
    let mut d_u = vec![[0.0; 2]; n];
    let mut d_mu_2d = vec![[0.0; 2]; n];

    let StageUpstream {
        d_v: mut d_mean_v,
        d_u: mut d_mean_u,
        d_camera,
        d_samples,
    } = upstream;
    correct_camera_backward(
        &tape.mean.v,
        &tape.mean.u,
        &settings.ridge,
        &d_camera,
        &mut d_mean_v,
        &mut d_mean_u,
    )?;

    let mut path_backward = |path: &PathTape, d_path_v: &[Vec3], mut d_path_u: Vec<Vec2>| -> Result<()> {
        for (acc, g) in d_v.iter_mut().zip(d_path_v) {
            (0..3).for_each(|k| acc[k] += g[k]);
        }
        if let (Some(pooled), Some(psi_tape)) = (&path.pooled, &path.psi) {
            let d_mu_3d = match &path.z_3d {
                Some(z) => noise::chain(&path.mu_3d, z, d_path_v, gamma),
                None => d_path_v.to_vec(),
            };
            let d_out = matrix(&d_mu_3d) * settings.psi_scale;
            let d_views = params.psi.backward_into(psi_tape, d_out.view(), &mut grads.psi)?;
            let mut d_feat = Array2::zeros((n, c));
            pooled.backward(d_views.view(), &mut d_feat);
            for (i, g) in d_path_u.iter_mut().enumerate() {
                let row = d_feat.row(i);
                let d = grid.interpolate_backward(path.u[i], row.as_slice().expect("standard layout"));
                g[0] += d[0];
                g[1] += d[1];
            }
        }
        for (acc, g) in d_u.iter_mut().zip(&d_path_u) {
            acc[0] += g[0];
            acc[1] += g[1];
        }
        if settings.use_2d {
            let d_mu = match &path.z_2d {
                Some(z) => noise::chain(&tape.mu_2d, z, &d_path_u, gamma),
                None => d_path_u,
            };
            for (acc, g) in d_mu_2d.iter_mut().zip(&d_mu) {
                acc[0] += g[0];
                acc[1] += g[1];
            }
        }
        Ok(())
    };
    path_backward(&tape.mean, &d_mean_v, d_mean_u)?;
    for (path, d) in tape.samples.iter().zip(&d_samples) {
        if d.len() != n {
            return Err(DneError::shape("sample gradient", n, d.len()));
        }
        path_backward(path, d, vec![[0.0; 2]; n])?;
    }

    let mut d_camera_in = ZERO_CAMERA;
    if let (Some(phi_tape), Some(cache)) = (&tape.phi, &tape.regressor) {
        let d_x = params.phi.backward_into(phi_tape, matrix(&d_mu_2d).view(), &mut grads.phi)?;
        let mut d_r = vec![[0.0; 2]; n];
        let cam = &tape.camera_in;
        for i in 0..n {
            let row = d_x.row(i);
            let row = row.as_slice().expect("standard layout");
            let d_p = grid.interpolate_backward(tape.p[i], &row[..c]);
            d_r[i] = grid.interpolate_backward(tape.r[i], &row[c..]);
            let v = tape.v[i];
            d_v[i][0] += d_p[0] * cam.sx;
            d_v[i][1] += d_p[1] * cam.sy;
            d_camera_in.sx += d_p[0] * v[0];
            d_camera_in.sy += d_p[1] * v[1];
            d_camera_in.tx += d_p[0];
            d_camera_in.ty += d_p[1];
        }
        params.regressor.backward(grid, cache, &d_r, &mut grads.regressor)?;
    }
    Ok(StageInputGrads {
        d_v,
        d_u,
        d_camera: d_camera_in,
    })
}

/// One DNE stage. Train mode additionally returns the sampled vertex sets.
pub fn dne_stage(
    state: &RefinementState,
    grid: &FeatureGrid,
    params: &DneStageParams,
    settings: &StageSettings,
    stage: usize,
    mode: Mode,
) -> Result<StageOutput> {
    let draw = match mode {
        Mode::Infer => None,
        Mode::Train { seed, samples } => Some((seed, samples)),
    };
    let tape = stage_forward(
        state.mesh.vertices(),
        &state.coords_2d,
        &state.camera,
        grid,
        params,
        settings,
        stage,
        draw,
    )?;
    let mut trace = state.trace.clone();
    trace.push(StageTrace {
        mu_2d: tape.mu_2d.clone(),
        mu_3d: tape.mean.mu_3d.clone(),
        camera: tape.camera,
    });
    let mesh = state.mesh.with_vertices(tape.mean.v.clone())?;
    Ok(StageOutput {
        state: RefinementState {
            mesh,
            coords_2d: tape.mean.u.clone(),
            camera: tape.camera,
            trace,
        },
        sample_vertices: tape.samples.iter().map(|p| p.v.clone()).collect(),
        sample_coords: tape.samples.iter().map(|p| p.u.clone()).collect(),
    })
}

/// Applies every stage in inference mode. With no stages the input is returned.
pub fn refine(coarse: &RefinementState, grid: &FeatureGrid, pipeline: &DnePipelineParams) -> Result<RefinementState> {
    let mut state = coarse.clone();
    for (m, params) in pipeline.stages.iter().enumerate() {
        state = dne_stage(&state, grid, params, &pipeline.settings, m, Mode::Infer)?.state;
    }
    Ok(state)
}
