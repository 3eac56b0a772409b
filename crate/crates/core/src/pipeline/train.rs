use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::{Instance, VAL_EVERY};
use super::loss::{loss_v_grad, sign_key, StageSamples};
use super::params::{DnePipelineParams, PipelineConfig};
use super::stage::{refine, stage_backward, stage_forward, StageTape, StageUpstream, ZERO_CAMERA};
use crate::camera::Camera;
use crate::error::{DneError, Result};
use crate::features::FeatureGrid;
use crate::mesh::{mpjpe, mpvpe, mpvpe_2d, HandMesh};
use crate::neural::sgd_step;
use crate::rng::derive;
use crate::{Vec2, Vec3};

pub const LOG_HEADER: &str = "epoch,split,loss,mpvpe3d,mpjpe3d,mpvpe2d";

/// Dataset means of the per-instance errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mpvpe3d: f64,
    pub mpjpe3d: f64,
    /// Between `P(v, c)` of the prediction and `P(v_gt, c_gt)`, pixels.
    pub mpvpe2d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training objective of the epoch; `None` for the initial evaluation.
    pub train_loss: Option<f64>,
    pub val: Metrics,
}

/// Index split: every `VAL_EVERY`-th instance goes to validation.
pub fn split_dataset(count: usize) -> (Vec<usize>, Vec<usize>) {
    (0..count).partition(|i| i % VAL_EVERY != VAL_EVERY - 1)
}

fn instance_metrics(mesh: &HandMesh, camera: &Camera, inst: &Instance) -> Result<[f64; 3]> {
    let pred = camera.project_all(mesh.vertices());
    let gt = inst.gt_camera.project_all(inst.gt_mesh.vertices());
    Ok([
        mpvpe(mesh, &inst.gt_mesh)?,
        mpjpe(mesh, &inst.gt_mesh)?,
        mpvpe_2d(&pred, &gt)?,
    ])
}

fn mean_metrics(rows: Vec<[f64; 3]>) -> Metrics {
    let n = rows.len().max(1) as f64;
    let mut s = [0.0; 3];
    for r in rows {
        (0..3).for_each(|k| s[k] += r[k]);
    }
    Metrics {
        mpvpe3d: s[0] / n,
        mpjpe3d: s[1] / n,
        mpvpe2d: s[2] / n,
    }
}

/// Refines every instance and averages the metrics.
pub fn evaluate(params: &DnePipelineParams, instances: &[&Instance]) -> Result<Metrics> {
    let rows = instances
        .par_iter()
        .map(|inst| {
            let out = refine(&inst.coarse_state()?, &inst.grid, params)?;
            instance_metrics(&out.mesh, &out.camera, inst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_metrics(rows))
}

/// Metrics of the unrefined coarse fits.
pub fn evaluate_coarse(instances: &[&Instance]) -> Result<Metrics> {
    let rows = instances
        .iter()
        .map(|inst| instance_metrics(&inst.coarse_mesh, &inst.coarse_camera, inst))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_metrics(rows))
}

/// Training objective of one instance with its gradients.
#[derive(Debug, Clone)]
pub struct InstanceObjective {
    /// `loss_v / (N R)`.
    pub loss: f64,
    pub grads: DnePipelineParams,
    /// Gradients w.r.t. the starting state.
    pub d_vertices: Vec<Vec3>,
    pub d_coords: Vec<Vec2>,
    pub d_camera: Camera,
    /// Identifies the differentiable piece the evaluation point lies in.
    pub kink_key: u64,
    /// Target vertices `v_m` of each stage.
    pub targets: Vec<Vec<Vec3>>,
}

/// Forward in train mode through all stages, the vertex loss, and the full
/// reverse pass. The 2D targets `P(v_m, c_gt)` are constants of the
/// objective: no gradient flows into `v_m` through them.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    params: &DnePipelineParams,
    vertices: &[Vec3],
    coords: &[Vec2],
    camera: &Camera,
    grid: &FeatureGrid,
    gt_mesh: &HandMesh,
    gt_camera: &Camera,
    seed: u64,
) -> Result<InstanceObjective> {
    objective_with_targets(params, vertices, coords, camera, grid, gt_mesh, gt_camera, seed, None)
}

/// [`objective`] with the per-stage target vertices pinned to `targets`
/// instead of the mean paths of this evaluation. Evaluating at the point the
/// targets came from reproduces [`objective`] exactly, which makes the
/// frozen-target function available to finite differences.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_targets(
    params: &DnePipelineParams,
    vertices: &[Vec3],
    coords: &[Vec2],
    camera: &Camera,
    grid: &FeatureGrid,
    gt_mesh: &HandMesh,
    gt_camera: &Camera,
    seed: u64,
    targets: Option<&[Vec<Vec3>]>,
) -> Result<InstanceObjective> {
    let n = vertices.len();
    let r = params.samples;
    if r == 0 || params.stages.is_empty() {
        return Err(DneError::Config("training needs at least one stage and one sample".into()));
    }
    let mut tapes: Vec<StageTape> = Vec::with_capacity(params.stages.len());
    for (m, stage) in params.stages.iter().enumerate() {
        let (v, u, c) = match tapes.last() {
            Some(t) => (&t.mean.v[..], &t.mean.u[..], t.camera),
            None => (vertices, coords, *camera),
        };
        tapes.push(stage_forward(v, u, &c, grid, stage, &params.settings, m, Some((seed, r)))?);
    }
    if let Some(t) = targets {
        if t.len() != tapes.len() || t.iter().any(|v| v.len() != n) {
            return Err(DneError::shape("target vertices", tapes.len(), t.len()));
        }
    }
    let samples: Vec<StageSamples> = tapes
        .iter()
        .enumerate()
        .map(|(m, t)| StageSamples {
            samples: t.samples.iter().map(|p| p.v.clone()).collect(),
            mean: targets.map_or_else(|| t.mean.v.clone(), |t| t[m].clone()),
            camera: t.camera,
        })
        .collect();
    let (raw, loss_grads) = loss_v_grad(&samples, gt_mesh.vertices(), gt_camera, params.lambda_2d, params.lambda_3d)?;
    let scale = 1.0 / (n * r) as f64;
    let loss = raw * scale;
    if !loss.is_finite() {
        return Err(DneError::NonFinite {
            stage: params.stages.len() - 1,
            step: "loss",
        });
    }

    let mut kink_key = sign_key(&samples, gt_mesh.vertices(), gt_camera);
    for t in &tapes {
        kink_key = kink_key.rotate_left(7) ^ t.kink_key(grid);
    }

    let mut grads = params.zeros_like();
    let mut carry_v = vec![[0.0; 3]; n];
    let mut carry_u = vec![[0.0; 2]; n];
    let mut carry_c = ZERO_CAMERA;
    for m in (0..params.stages.len()).rev() {
        let lg = &loss_grads[m];
        let d_v = carry_v;
        let cam = Camera::from_array(std::array::from_fn(|k| carry_c.to_array()[k] + scale * lg.camera.to_array()[k]));
        let d_samples = lg
            .samples
            .iter()
            .map(|s| s.iter().map(|g| g.map(|x| scale * x)).collect())
            .collect();
        let upstream = StageUpstream {
            d_v,
            d_u: carry_u,
            d_camera: cam,
            d_samples,
        };
        let back = stage_backward(&tapes[m], grid, &params.stages[m], &params.settings, upstream, &mut grads.stages[m])?;
        carry_v = back.d_v;
        carry_u = back.d_u;
        carry_c = back.d_camera;
    }
    Ok(InstanceObjective {
        loss,
        targets: samples.into_iter().map(|s| s.mean).collect(),
        grads,
        d_vertices: carry_v,
        d_coords: carry_u,
        d_camera: carry_c,
        kink_key,
    })
}

fn instance_objective(params: &DnePipelineParams, inst: &Instance, seed: u64) -> Result<InstanceObjective> {
    let state = inst.coarse_state()?;
    objective(
        params,
        state.mesh.vertices(),
        &state.coords_2d,
        &state.camera,
        &inst.grid,
        &inst.gt_mesh,
        &inst.gt_camera,
        seed,
    )
}

/// Minibatch gradient descent from `params`. Deterministic given `seed`:
/// per-instance gradients are reduced in batch order regardless of threading.
pub fn train(
    mut params: DnePipelineParams,
    config: &PipelineConfig,
    train_set: &[&Instance],
    val_set: &[&Instance],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(DnePipelineParams, Vec<EpochLog>)> {
    config.validate()?;
    let tc = &config.train;
    let mut logs = Vec::with_capacity(tc.epochs + 1);
    let initial = EpochLog {
        epoch: 0,
        train_loss: None,
        val: evaluate(&params, val_set)?,
    };
    on_epoch(&initial);
    logs.push(initial);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        let lr = tc.learning_rate * tc.lr_decay.powi(((epoch - 1) / tc.decay_every.max(1)) as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x5407, epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| instance_objective(&params, train_set[i], derive(seed, &[epoch as u64, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = params.zeros_like();
            let w = 1.0 / batch.len() as f64;
            for res in &results {
                total += res.loss;
                grads.add_scaled(&res.grads, w)?;
            }
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(DneError::NonFinite {
                    stage: params.stages.len() - 1,
                    step: "gradient",
                });
            }
            let step = if tc.grad_clip > 0.0 && norm > tc.grad_clip {
                lr * tc.grad_clip / norm
            } else {
                lr
            };
            let theirs: Vec<&[f64]> = grads.tensors().into_iter().map(|t| t.1).collect();
            sgd_step(params.tensors_mut(), theirs, step)?;
        }
        let log = EpochLog {
            epoch,
            train_loss: Some(total / train_set.len().max(1) as f64),
            val: evaluate(&params, val_set)?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((params, logs))
}

/// `epoch,split,loss,mpvpe3d,mpjpe3d,mpvpe2d`; one `train` row (loss only)
/// and one `val` row (metrics only) per epoch.
pub fn write_log_csv(logs: &[EpochLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for l in logs {
        if let Some(loss) = l.train_loss {
            writeln!(out, "{},train,{loss:.9e},,,", l.epoch)?;
        }
        writeln!(
            out,
            "{},val,,{:.9e},{:.9e},{:.9e}",
            l.epoch, l.val.mpvpe3d, l.val.mpjpe3d, l.val.mpvpe2d
        )?;
    }
    Ok(())
}
