//! Synthetic feature grids that stand in for a learned image backbone.
//!
//! Every ground-truth vertex is splatted at its ground-truth projection with
//! an isotropic Gaussian kernel `k(r) = exp(-r^2 / (2 sigma^2))`. Per pixel,
//! with `w = sum_k k` over the splatted vertices:
//!
//! | channel | content (kernel-weighted, divided by `max(w, 1)`)                  |
//! |---------|---------------------------------------------------------------------|
//! | 0, 1    | image displacement `P(v_gt, c_gt) - P(v_coarse, c_coarse)`, pixels  |
//! | 2       | ground-truth depth                                                  |
//! | 3       | occupancy `min(w, 1)`                                               |
//! | 4..=6   | 3D displacement `v_gt - v_coarse`, times the mean GT camera scale   |
//! | 7..     | noise only                                                          |
//!
//! All channels then receive i.i.d. Gaussian noise of the requested level and
//! values are rounded to `f32`, so grids survive the on-disk format unchanged.

use serde::{Deserialize, Serialize};

use super::FeatureGrid;
use crate::camera::{project, Camera};
use crate::error::{DneError, Result};
use crate::mesh::HandMesh;
use crate::rng::IndexedNormal;

pub const CH_DISP_2D: usize = 0;
pub const CH_DEPTH: usize = 2;
pub const CH_OCCUPANCY: usize = 3;
pub const CH_DISP_3D: usize = 4;
pub const MIN_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Splat kernel standard deviation, pixels.
    pub kernel_sigma: f64,
    pub noise_level: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            height: 32,
            width: 32,
            channels: 16,
            kernel_sigma: 1.0,
            noise_level: 0.05,
        }
    }
}

pub fn synthesize_features(
    gt: &HandMesh,
    coarse: &HandMesh,
    gt_camera: &Camera,
    coarse_camera: &Camera,
    opts: &SynthOptions,
    seed: u64,
) -> Result<FeatureGrid> {
    let (h, w, c) = (opts.height, opts.width, opts.channels);
    if c < MIN_CHANNELS {
        return Err(DneError::Config(format!(
            "feature synthesis needs at least {MIN_CHANNELS} channels, got {c}"
        )));
    }
    if gt.num_vertices() != coarse.num_vertices() {
        return Err(DneError::shape("synthesize_features", gt.num_vertices(), coarse.num_vertices()));
    }
    if !(opts.kernel_sigma > 0.0) || !(opts.noise_level >= 0.0) {
        return Err(DneError::Config("kernel sigma must be positive and noise non-negative".into()));
    }

    let scale = 0.5 * (gt_camera.sx.abs() + gt_camera.sy.abs());
    let radius = (3.0 * opts.kernel_sigma).ceil() as i64;
    let inv_two_var = 1.0 / (2.0 * opts.kernel_sigma * opts.kernel_sigma);

    let mut acc = vec![0.0; h * w * c];
    let mut weight = vec![0.0; h * w];
    for (vg, vc) in gt.vertices().iter().zip(coarse.vertices()) {
        let centre = project(vg, gt_camera);
        let seen = project(vc, coarse_camera);
        let mut signal = [0.0; MIN_CHANNELS];
        signal[CH_DISP_2D] = centre[0] - seen[0];
        signal[CH_DISP_2D + 1] = centre[1] - seen[1];
        signal[CH_DEPTH] = vg[2];
        for k in 0..3 {
            signal[CH_DISP_3D + k] = scale * (vg[k] - vc[k]);
        }
        let (cx, cy) = (centre[0].round() as i64, centre[1].round() as i64);
        for y in (cy - radius).max(0)..=(cy + radius).min(h as i64 - 1) {
            for x in (cx - radius).max(0)..=(cx + radius).min(w as i64 - 1) {
                let r2 = (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2);
                let k = (-r2 * inv_two_var).exp();
                let pix = y as usize * w + x as usize;
                weight[pix] += k;
                let cell = &mut acc[pix * c..pix * c + MIN_CHANNELS];
                for (a, s) in cell.iter_mut().zip(signal) {
                    *a += k * s;
                }
            }
        }
    }

    let noise = IndexedNormal::new(seed).fill(&[0x5EED_F1E1D], h * w * c);
    let mut values = vec![0.0; h * w * c];
    for pix in 0..h * w {
        let norm = weight[pix].max(1.0);
        for ch in 0..c {
            let clean = match ch {
                CH_OCCUPANCY => weight[pix].min(1.0),
                _ if ch < MIN_CHANNELS => acc[pix * c + ch] / norm,
                _ => 0.0,
            };
            let i = pix * c + ch;
            values[i] = (clean + opts.noise_level * noise[i]) as f32 as f64;
        }
    }
    FeatureGrid::new(h, w, c, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_template, NUM_JOINTS};

    fn cam() -> Camera {
        Camera::new(20.0, 20.0, 15.5, 15.5)
    }

    #[test]
    fn clean_identical_meshes_have_zero_displacement() {
        let m = make_template(0, &[0.1; NUM_JOINTS]);
        let g = synthesize_features(&m, &m, &cam(), &cam(), &SynthOptions { noise_level: 0.0, ..Default::default() }, 1).unwrap();
        for pix in g.values().chunks(g.channels()) {
            assert_eq!(pix[0], 0.0);
            assert_eq!(pix[1], 0.0);
            assert!(pix[4..7].iter().all(|&x| x == 0.0));
            assert!(pix[7..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn deterministic() {
        let m = make_template(2, &[0.3; NUM_JOINTS]);
        let opts = SynthOptions::default();
        let a = synthesize_features(&m, &m, &cam(), &cam(), &opts, 9).unwrap();
        let b = synthesize_features(&m, &m, &cam(), &cam(), &opts, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_features(&m, &m, &cam(), &cam(), &opts, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_vertex_bump_follows_kernel() {
        let gt = HandMesh::new(vec![[0.013, -0.021, 0.4]], vec![], vec![vec![0]]).unwrap();
        let coarse = gt.with_vertices(vec![[0.0, 0.0, 0.4]]).unwrap();
        let opts = SynthOptions {
            noise_level: 0.0,
            kernel_sigma: 1.3,
            ..Default::default()
        };
        let g = synthesize_features(&gt, &coarse, &cam(), &cam(), &opts, 0).unwrap();
        let centre = project(&gt.vertices()[0], &cam());
        let d = [20.0 * 0.013, 20.0 * -0.021];
        let (px, py) = (centre[0].round() as usize, centre[1].round() as usize);
        for (x, y) in [(px, py), (px + 1, py), (px, py - 2), (px + 3, py + 3)] {
            let r2 = (x as f64 - centre[0]).powi(2) + (y as f64 - centre[1]).powi(2);
            let k = (-r2 / (2.0 * 1.3 * 1.3)).exp();
            let cell = g.cell(y, x);
            assert!((cell[0] - (k * d[0]) as f32 as f64).abs() < 1e-12);
            assert!((cell[1] - (k * d[1]) as f32 as f64).abs() < 1e-12);
            assert!((cell[3] - k as f32 as f64).abs() < 1e-12);
        }
        // the peak sits on the pixel nearest the projection
        let peak = (0..32 * 32).max_by(|&a, &b| g.cell(a / 32, a % 32)[3].total_cmp(&g.cell(b / 32, b % 32)[3])).unwrap();
        assert_eq!((peak % 32, peak / 32), (px, py));
    }

    #[test]
    fn too_few_channels() {
        let m = make_template(0, &[0.0; NUM_JOINTS]);
        let opts = SynthOptions { channels: 4, ..Default::default() };
        assert!(synthesize_features(&m, &m, &cam(), &cam(), &opts, 0).is_err());
    }
}
