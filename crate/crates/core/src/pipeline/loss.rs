//! Vertex loss over all stages and samples:
//!
//! `L = l3 sum_m sum_r |v_mr - v_gt|_1 + l2 sum_m sum_r |P(v_mr, c_m) - P(v_m, c_gt)|_1`
//!
//! where `c_m` is the corrected camera of stage `m` and `v_m` its mean-path
//! vertices.

use crate::camera::Camera;
use crate::error::{DneError, Result};
use crate::Vec3;

/// What the loss sees of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSamples {
    pub samples: Vec<Vec<Vec3>>,
    pub mean: Vec<Vec3>,
    pub camera: Camera,
}

/// Gradients w.r.t. the fields of [`StageSamples`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageLossGrad {
    pub samples: Vec<Vec<Vec3>>,
    pub mean: Vec<Vec3>,
    pub camera: Camera,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check(stages: &[StageSamples], n: usize) -> Result<()> {
    let Some(first) = stages.first() else {
        return Err(DneError::Config("loss needs at least one stage".into()));
    };
    let r = first.samples.len();
    if r == 0 {
        return Err(DneError::Config("loss needs at least one sample per stage".into()));
    }
    for (m, s) in stages.iter().enumerate() {
        if s.samples.len() != r {
            return Err(DneError::shape("samples per stage", r, format!("{} at stage {m}", s.samples.len())));
        }
        if s.mean.len() != n || s.samples.iter().any(|v| v.len() != n) {
            return Err(DneError::shape("loss vertices", n, format!("mismatch at stage {m}")));
        }
    }
    Ok(())
}

pub fn loss_v(stages: &[StageSamples], gt: &[Vec3], gt_camera: &Camera, lambda_2d: f64, lambda_3d: f64) -> Result<f64> {
    loss_v_grad(stages, gt, gt_camera, lambda_2d, lambda_3d).map(|(l, _)| l)
}

/// The loss and its (sub)gradient; `sign(0) = 0`.
pub fn loss_v_grad(
    stages: &[StageSamples],
    gt: &[Vec3],
    gt_camera: &Camera,
    lambda_2d: f64,
    lambda_3d: f64,
) -> Result<(f64, Vec<StageLossGrad>)> {
    check(stages, gt.len())?;
    let g_scale = [gt_camera.sx, gt_camera.sy];
    let g_shift = [gt_camera.tx, gt_camera.ty];
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(stages.len());
    for s in stages {
        let scale = [s.camera.sx, s.camera.sy];
        let shift = [s.camera.tx, s.camera.ty];
        let mut d_cam = [0.0; 4];
        let mut d_mean = vec![[0.0; 3]; gt.len()];
        let mut d_samples = Vec::with_capacity(s.samples.len());
        for sample in &s.samples {
            let mut d = vec![[0.0; 3]; gt.len()];
            for (n, v) in sample.iter().enumerate() {
                for k in 0..3 {
                    let e = v[k] - gt[n][k];
                    loss += lambda_3d * e.abs();
                    d[n][k] += lambda_3d * sign(e);
                }
                for k in 0..2 {
                    let target = g_scale[k] * s.mean[n][k] + g_shift[k];
                    let e = scale[k] * v[k] + shift[k] - target;
                    loss += lambda_2d * e.abs();
                    let g = lambda_2d * sign(e);
                    d[n][k] += g * scale[k];
                    d_cam[k] += g * v[k];
                    d_cam[2 + k] += g;
                    d_mean[n][k] -= g * g_scale[k];
                }
            }
            d_samples.push(d);
        }
        grads.push(StageLossGrad {
            samples: d_samples,
            mean: d_mean,
            camera: Camera::from_array(d_cam),
        });
    }
    Ok((loss, grads))
}

/// Hash of the residual signs; changes when a probe crosses an `|.|` kink.
pub(crate) fn sign_key(stages: &[StageSamples], gt: &[Vec3], gt_camera: &Camera) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |x: f64| h = (h ^ (sign(x) + 1.0) as u64).wrapping_mul(0x0100_0000_01b3);
    let g = [gt_camera.sx, gt_camera.sy, gt_camera.tx, gt_camera.ty];
    for s in stages {
        let c = s.camera.to_array();
        for sample in &s.samples {
            for (n, v) in sample.iter().enumerate() {
                (0..3).for_each(|k| eat(v[k] - gt[n][k]));
                (0..2).for_each(|k| eat(c[k] * v[k] + c[2 + k] - g[k] * s.mean[n][k] - g[2 + k]));
            }
        }
    }
    h
}
