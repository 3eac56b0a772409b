//! Direct 2D coordinate regression from the whole feature grid.
//!
//! The grid is flattened to `(H*W) x C`. A first linear map mixes the spatial
//! axis into `N x C` per-vertex features, a second maps each vertex's `C`
//! features to a pixel coordinate.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::FeatureGrid;
use crate::error::{DneError, Result};
use crate::Vec2;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordRegressor {
    /// `N x (H*W)`
    pub spatial: Array2<f64>,
    /// `N`
    pub spatial_bias: Array1<f64>,
    /// `2 x C`
    pub head: Array2<f64>,
    /// `2`
    pub head_bias: Array1<f64>,
}

/// Per-vertex features after the spatial map (`N x C`).
#[derive(Debug, Clone)]
pub struct RegressorCache {
    pub hidden: Array2<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

impl CoordRegressor {
    pub fn zeros(vertices: usize, cells: usize, channels: usize) -> Self {
        CoordRegressor {
            spatial: Array2::zeros((vertices, cells)),
            spatial_bias: Array1::zeros(vertices),
            head: Array2::zeros((2, channels)),
            head_bias: Array1::zeros(2),
        }
    }

    /// Glorot-uniform weights; the output bias starts at `centre` so initial
    /// predictions fall inside the grid.
    pub fn init(vertices: usize, cells: usize, channels: usize, centre: Vec2, rng: &mut impl Rng) -> Self {
        CoordRegressor {
            spatial: glorot(vertices, cells, rng),
            spatial_bias: Array1::zeros(vertices),
            head: glorot(2, channels, rng),
            head_bias: Array1::from_vec(centre.to_vec()),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.spatial.nrows()
    }

    fn check(&self, grid: &FeatureGrid) -> Result<()> {
        let cells = grid.height() * grid.width();
        if self.spatial.ncols() != cells || self.head.ncols() != grid.channels() {
            return Err(DneError::shape(
                "coordinate regressor",
                format!("{} cells x {} channels", self.spatial.ncols(), self.head.ncols()),
                format!("{} cells x {} channels", cells, grid.channels()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, grid: &FeatureGrid) -> Result<(Vec<Vec2>, RegressorCache)> {
        self.check(grid)?;
        let mut hidden = self.spatial.dot(&grid.as_matrix());
        hidden += &self.spatial_bias.view().insert_axis(Axis(1));
        let mut out = hidden.dot(&self.head.t());
        out += &self.head_bias;
        let coords = out.rows().into_iter().map(|r| [r[0], r[1]]).collect();
        Ok((coords, RegressorCache { hidden }))
    }

    /// Adds the parameter gradients for `d_coords` into `grads`.
    pub fn backward(
        &self,
        grid: &FeatureGrid,
        cache: &RegressorCache,
        d_coords: &[Vec2],
        grads: &mut CoordRegressor,
    ) -> Result<()> {
        self.check(grid)?;
        let n = self.num_vertices();
        if d_coords.len() != n {
            return Err(DneError::shape("regressor upstream", n, d_coords.len()));
        }
        let d_out = Array2::from_shape_fn((n, 2), |(i, k)| d_coords[i][k]);
        grads.head += &d_out.t().dot(&cache.hidden);
        grads.head_bias += &d_out.sum_axis(Axis(0));
        let d_hidden = d_out.dot(&self.head);
        grads.spatial_bias += &d_hidden.sum_axis(Axis(1));
        grads.spatial += &d_hidden.dot(&grid.as_matrix().t());
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &[f64], Vec<usize>); 4] {
        [
            ("spatial", self.spatial.as_slice().unwrap(), self.spatial.shape().to_vec()),
            ("spatial_bias", self.spatial_bias.as_slice().unwrap(), vec![self.spatial_bias.len()]),
            ("head", self.head.as_slice().unwrap(), self.head.shape().to_vec()),
            ("head_bias", self.head_bias.as_slice().unwrap(), vec![2]),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.spatial.as_slice_mut().unwrap(),
            self.spatial_bias.as_slice_mut().unwrap(),
            self.head.as_slice_mut().unwrap(),
            self.head_bias.as_slice_mut().unwrap(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_weights_give_bias() {
        let g = FeatureGrid::new(3, 3, 2, (0..18).map(|x| x as f64).collect()).unwrap();
        let r = CoordRegressor::zeros(5, 9, 2);
        let (uv, _) = r.forward(&g).unwrap();
        assert_eq!(uv, vec![[0.0, 0.0]; 5]);
    }

    #[test]
    fn matches_explicit_product() {
        // 2x2x1 grid, 2 vertices
        let g = FeatureGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = CoordRegressor {
            spatial: array![[0.1, 0.2, 0.3, 0.4], [-0.5, 0.0, 0.25, 1.0]],
            spatial_bias: array![0.5, -1.0],
            head: array![[2.0], [-3.0]],
            head_bias: array![0.125, 7.0],
        };
        let (uv, _) = r.forward(&g).unwrap();
        // vertex 0: 0.1+0.4+0.9+1.6+0.5 = 3.5 ; vertex 1: -0.5+0+0.75+4-1 = 3.25
        let h = [3.5, 3.25];
        for i in 0..2 {
            assert!((uv[i][0] - (2.0 * h[i] + 0.125)).abs() < 1e-12);
            assert!((uv[i][1] - (-3.0 * h[i] + 7.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch() {
        let g = FeatureGrid::zeros(3, 3, 2).unwrap();
        assert!(CoordRegressor::zeros(4, 8, 2).forward(&g).is_err());
        assert!(CoordRegressor::zeros(4, 9, 3).forward(&g).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = FeatureGrid::new(2, 3, 2, (0..12).map(|x| (x as f64 * 0.7).sin()).collect()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let r = CoordRegressor::init(4, 6, 2, [1.0, 0.5], &mut rng);
        let w: Vec<Vec2> = (0..4).map(|i| [i as f64 - 1.5, 0.5 * i as f64 + 0.25]).collect();
        let loss = |r: &CoordRegressor| {
            let (uv, _) = r.forward(&g).unwrap();
            uv.iter().zip(&w).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum::<f64>()
        };
        let (_, cache) = r.forward(&g).unwrap();
        let mut grads = CoordRegressor::zeros(4, 6, 2);
        r.backward(&g, &cache, &w, &mut grads).unwrap();
        let h = 1e-6;
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.1.to_vec()).collect();
        let mut idx = 0;
        for t in 0..4 {
            let len = r.tensors()[t].1.len();
            for i in 0..len {
                let mut p = r.clone();
                p.tensors_mut()[t][i] += h;
                let mut m = r.clone();
                m.tensors_mut()[t][i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - analytic[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
                idx += 1;
            }
        }
    }
}
