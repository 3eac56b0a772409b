//! Feature grids and the image-aligned feature paths.
//!
//! Pixel convention: `uv = (x, y)` addresses column `x`, row `y`; grid cell
//! `(row, col)` sits exactly at integer coordinates.

mod regressor;
mod synth;
mod voxel;

use crate::error::{DneError, Result};
use crate::Vec2;

pub use regressor::{CoordRegressor, RegressorCache};
pub use synth::{synthesize_features, SynthOptions, CH_DEPTH, CH_DISP_2D, CH_DISP_3D, CH_OCCUPANCY, MIN_CHANNELS};
pub use voxel::{
    gather_view_features, pool_and_gather, three_view_pool, voxel_bins, voxelize, PooledViews,
    ViewFeatures, ViewPlanes, VoxelGrid, VIEWS,
};

/// `H x W x C` scalar field, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

/// Bilinear stencil of one query: four cell offsets and their weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    base: [usize; 2],
    frac: [f64; 2],
    inside: [bool; 2],
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height < 2 || width < 2 || channels == 0 {
            return Err(DneError::shape("FeatureGrid", "H,W >= 2 and C >= 1", format!("{height}x{width}x{channels}")));
        }
        if values.len() != height * width * channels {
            return Err(DneError::shape("FeatureGrid values", height * width * channels, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DneError::Format("feature grid holds non-finite values".into()));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    fn stencil(&self, uv: Vec2) -> Stencil {
        let axis = |q: f64, len: usize| {
            let max = (len - 1) as f64;
            let inside = (0.0..=max).contains(&q);
            let q = q.clamp(0.0, max);
            let base = (q.floor() as usize).min(len - 2);
            (base, q - base as f64, inside)
        };
        let (bx, fx, ix) = axis(uv[0], self.width);
        let (by, fy, iy) = axis(uv[1], self.height);
        Stencil {
            base: [bx, by],
            frac: [fx, fy],
            inside: [ix, iy],
        }
    }

    /// Bilinear lookup with border clamping; writes `C` values into `out`.
    pub fn interpolate_into(&self, uv: Vec2, out: &mut [f64]) {
        let s = self.stencil(uv);
        let [x0, y0] = s.base;
        let [ax, ay] = s.frac;
        let (c00, c01) = (self.cell(y0, x0), self.cell(y0, x0 + 1));
        let (c10, c11) = (self.cell(y0 + 1, x0), self.cell(y0 + 1, x0 + 1));
        let (w00, w01) = ((1.0 - ax) * (1.0 - ay), ax * (1.0 - ay));
        let (w10, w11) = ((1.0 - ax) * ay, ax * ay);
        for (c, o) in out.iter_mut().enumerate() {
            *o = w00 * c00[c] + w01 * c01[c] + w10 * c10[c] + w11 * c11[c];
        }
    }

    pub fn interpolate(&self, uv: Vec2) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.interpolate_into(uv, &mut out);
        out
    }

    /// Gradient of `upstream . interpolate(uv)` w.r.t. `uv`. Zero along an
    /// axis whose coordinate was clamped.
    pub fn interpolate_backward(&self, uv: Vec2, upstream: &[f64]) -> Vec2 {
        let s = self.stencil(uv);
        let [x0, y0] = s.base;
        let [ax, ay] = s.frac;
        let (c00, c01) = (self.cell(y0, x0), self.cell(y0, x0 + 1));
        let (c10, c11) = (self.cell(y0 + 1, x0), self.cell(y0 + 1, x0 + 1));
        let (mut gx, mut gy) = (0.0, 0.0);
        for (c, g) in upstream.iter().enumerate() {
            gx += g * ((1.0 - ay) * (c01[c] - c00[c]) + ay * (c11[c] - c10[c]));
            gy += g * ((1.0 - ax) * (c10[c] - c00[c]) + ax * (c11[c] - c01[c]));
        }
        [
            if s.inside[0] { gx } else { 0.0 },
            if s.inside[1] { gy } else { 0.0 },
        ]
    }

    /// Integer bilinear cells touched by `uv` (row, col), for kink detection.
    pub fn stencil_key(&self, uv: Vec2) -> (usize, usize, bool, bool) {
        let s = self.stencil(uv);
        (s.base[1], s.base[0], s.inside[0], s.inside[1])
    }

    /// Flattened `(H*W) x C` view.
    pub fn as_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        ndarray::ArrayView2::from_shape((self.height * self.width, self.channels), &self.values)
            .expect("grid storage is contiguous")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureGrid {
        let mut v = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    v.push(f(i, j, k));
                }
            }
        }
        FeatureGrid::new(h, w, c, v).unwrap()
    }

    #[test]
    fn integer_query_returns_cell() {
        let g = ramp(5, 7, 3, |i, j, k| (i * 100 + j * 10 + k) as f64);
        assert_eq!(g.interpolate([4.0, 2.0]), g.cell(2, 4).to_vec());
        assert_eq!(g.interpolate([6.0, 4.0]), g.cell(4, 6).to_vec());
        assert_eq!(g.interpolate([0.0, 0.0]), g.cell(0, 0).to_vec());
    }

    #[test]
    fn centre_of_two_by_two() {
        let g = FeatureGrid::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.interpolate([0.5, 0.5]), vec![1.5]);
    }

    #[test]
    fn clamps_outside() {
        let g = ramp(4, 4, 1, |i, j, _| (i * 4 + j) as f64);
        assert_eq!(g.interpolate([-3.0, -1.0]), g.cell(0, 0).to_vec());
        assert_eq!(g.interpolate([10.0, 1.5]), g.interpolate([3.0, 1.5]));
        let d = g.interpolate_backward([10.0, 1.5], &[1.0]);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(FeatureGrid::new(1, 4, 1, vec![0.0; 4]).is_err());
        assert!(FeatureGrid::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureGrid::new(2, 2, 1, vec![0.0, 0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn affine_fields_are_exact() {
        let g = ramp(6, 9, 2, |i, j, k| 0.5 * i as f64 - 1.25 * j as f64 + k as f64 + 3.0);
        for q in [[0.3, 4.7], [7.99, 0.01], [8.0, 5.0], [2.5, 2.5]] {
            let v = g.interpolate(q);
            let expect = 0.5 * q[1] - 1.25 * q[0] + 3.0;
            assert!((v[0] - expect).abs() < 1e-10);
            assert!((v[1] - expect - 1.0).abs() < 1e-10);
        }
    }
}
