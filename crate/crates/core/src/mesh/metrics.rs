use crate::error::{DneError, Result};
use crate::mesh::{regress_joints, HandMesh};
use crate::{Vec2, Vec3};

fn dist3(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dist2(a: &Vec2, b: &Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn mean_dist<T>(pred: &[T], gt: &[T], d: impl Fn(&T, &T) -> f64, what: &'static str) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(DneError::shape(what, gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| d(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Mean per-vertex position error, in the vertices' units.
pub fn mpvpe(pred: &HandMesh, gt: &HandMesh) -> Result<f64> {
    mean_dist(pred.vertices(), gt.vertices(), dist3, "mpvpe")
}

/// Mean per-joint position error over the regressed joints.
pub fn mpjpe(pred: &HandMesh, gt: &HandMesh) -> Result<f64> {
    if pred.num_joints() != gt.num_joints() {
        return Err(DneError::shape("mpjpe joints", gt.num_joints(), pred.num_joints()));
    }
    if pred.num_vertices() != gt.num_vertices() {
        return Err(DneError::shape("mpjpe", gt.num_vertices(), pred.num_vertices()));
    }
    mean_dist(&regress_joints(pred).joints, &regress_joints(gt).joints, dist3, "mpjpe")
}

/// Mean per-vertex error of image-plane coordinates, in pixels.
pub fn mpvpe_2d(pred_uv: &[Vec2], gt_uv: &[Vec2]) -> Result<f64> {
    mean_dist(pred_uv, gt_uv, dist2, "mpvpe_2d")
}

/// MPVPE over a multi-hand scene: all hands' vertices are pooled before averaging.
pub fn mpvpe_multi(pairs: &[(&HandMesh, &HandMesh)]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (p, g) in pairs {
        if p.num_vertices() != g.num_vertices() {
            return Err(DneError::shape("mpvpe_multi", g.num_vertices(), p.num_vertices()));
        }
        pred.extend_from_slice(p.vertices());
        gt.extend_from_slice(g.vertices());
    }
    mean_dist(&pred, &gt, dist3, "mpvpe_multi")
}

/// MPJPE over a multi-hand scene, joints pooled across hands.
pub fn mpjpe_multi(pairs: &[(&HandMesh, &HandMesh)]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (p, g) in pairs {
        if p.num_joints() != g.num_joints() || p.num_vertices() != g.num_vertices() {
            return Err(DneError::shape("mpjpe_multi", g.num_joints(), p.num_joints()));
        }
        pred.extend(regress_joints(p).joints);
        gt.extend(regress_joints(g).joints);
    }
    mean_dist(&pred, &gt, dist3, "mpjpe_multi")
}
