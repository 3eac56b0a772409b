//! Voxel aggregation of per-vertex features and three-view max pooling.
//!
//! Vertices are min-max normalised per axis and binned into a `G^3` grid; a
//! cell keeps the elementwise max of its vertices' features. Pooling reduces
//! the grid along one axis per view, over occupied cells only:
//!
//! | view    | reduced axis | plane index |
//! |---------|--------------|-------------|
//! | front   | z            | (x, y)      |
//! | lateral | x            | (y, z)      |
//! | top     | y            | (x, z)      |
//!
//! Empty cells and all-empty columns hold 0.

use ndarray::{Array2, ArrayView2};

use crate::error::{DneError, Result};
use crate::Vec3;

pub const VIEWS: [&str; 3] = ["front", "lateral", "top"];

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub channels: usize,
    /// `G x G x G x C`, indexed `[x][y][z][c]`.
    pub cells: Vec<f64>,
    pub occupancy: Vec<bool>,
}

/// Three pooled `G x G x C` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPlanes {
    pub resolution: usize,
    pub channels: usize,
    pub front: Vec<f64>,
    pub lateral: Vec<f64>,
    pub top: Vec<f64>,
}

/// Per-vertex features read back from the three planes (`N x C` each).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub front: Array2<f64>,
    pub lateral: Array2<f64>,
    pub top: Array2<f64>,
}

/// Fused voxelize/pool/gather result with the argmax bookkeeping needed for
/// reverse mode.
#[derive(Debug, Clone)]
pub struct PooledViews {
    /// `N x 3C`: front, lateral and top features side by side.
    pub views: Array2<f64>,
    /// For every entry of `views`, the vertex whose feature it copies.
    pub source: Vec<u32>,
}

impl VoxelGrid {
    fn cell_index(&self, b: [usize; 3]) -> usize {
        (b[0] * self.resolution + b[1]) * self.resolution + b[2]
    }

    pub fn cell(&self, b: [usize; 3]) -> &[f64] {
        let i = self.cell_index(b) * self.channels;
        &self.cells[i..i + self.channels]
    }

    pub fn occupied(&self, b: [usize; 3]) -> bool {
        self.occupancy[self.cell_index(b)]
    }
}

impl ViewPlanes {
    fn at<'a>(&self, plane: &'a [f64], a: usize, b: usize) -> &'a [f64] {
        let i = (a * self.resolution + b) * self.channels;
        &plane[i..i + self.channels]
    }

    pub fn front_at(&self, x: usize, y: usize) -> &[f64] {
        self.at(&self.front, x, y)
    }

    pub fn lateral_at(&self, y: usize, z: usize) -> &[f64] {
        self.at(&self.lateral, y, z)
    }

    pub fn top_at(&self, x: usize, z: usize) -> &[f64] {
        self.at(&self.top, x, z)
    }
}

impl ViewFeatures {
    /// `N x 3C` concatenation in front, lateral, top order.
    pub fn concat(&self) -> Array2<f64> {
        ndarray::concatenate(
            ndarray::Axis(1),
            &[self.front.view(), self.lateral.view(), self.top.view()],
        )
        .expect("view blocks share a row count")
    }
}

/// Per-mesh, per-axis min-max normalisation into `resolution` bins. An axis
/// with zero extent maps every vertex to bin 0.
pub fn voxel_bins(vertices: &[Vec3], resolution: usize) -> Vec<[usize; 3]> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let g = resolution as f64;
    vertices
        .iter()
        .map(|v| {
            std::array::from_fn(|k| {
                let extent = hi[k] - lo[k];
                if extent > 0.0 {
                    (((v[k] - lo[k]) / extent * g).floor() as usize).min(resolution - 1)
                } else {
                    0
                }
            })
        })
        .collect()
}

fn check(vertices: &[Vec3], features: &ArrayView2<'_, f64>, resolution: usize) -> Result<()> {
    if features.nrows() != vertices.len() {
        return Err(DneError::shape("voxelize features", vertices.len(), features.nrows()));
    }
    if resolution == 0 {
        return Err(DneError::Config("voxel resolution must be positive".into()));
    }
    Ok(())
}

pub fn voxelize(vertices: &[Vec3], features: ArrayView2<'_, f64>, resolution: usize) -> Result<VoxelGrid> {
    check(vertices, &features, resolution)?;
    let c = features.ncols();
    let g3 = resolution.pow(3);
    let mut vox = VoxelGrid {
        resolution,
        channels: c,
        cells: vec![0.0; g3 * c],
        occupancy: vec![false; g3],
    };
    for (b, row) in voxel_bins(vertices, resolution).into_iter().zip(features.rows()) {
        let cell = vox.cell_index(b);
        let slot = &mut vox.cells[cell * c..(cell + 1) * c];
        if std::mem::replace(&mut vox.occupancy[cell], true) {
            slot.iter_mut().zip(row).for_each(|(s, &f)| *s = s.max(f));
        } else {
            slot.iter_mut().zip(row).for_each(|(s, &f)| *s = f);
        }
    }
    Ok(vox)
}

pub fn three_view_pool(vox: &VoxelGrid) -> ViewPlanes {
    let (g, c) = (vox.resolution, vox.channels);
    let plane = || (vec![f64::NEG_INFINITY; g * g * c], vec![false; g * g]);
    let (mut front, mut front_hit) = plane();
    let (mut lateral, mut lateral_hit) = plane();
    let (mut top, mut top_hit) = plane();
    for x in 0..g {
        for y in 0..g {
            for z in 0..g {
                if !vox.occupied([x, y, z]) {
                    continue;
                }
                let f = vox.cell([x, y, z]);
                for (dst, hit, a, b) in [
                    (&mut front, &mut front_hit, x, y),
                    (&mut lateral, &mut lateral_hit, y, z),
                    (&mut top, &mut top_hit, x, z),
                ] {
                    hit[a * g + b] = true;
                    let s = &mut dst[(a * g + b) * c..(a * g + b + 1) * c];
                    s.iter_mut().zip(f).for_each(|(s, &f)| *s = s.max(f));
                }
            }
        }
    }
    for (dst, hit) in [(&mut front, &front_hit), (&mut lateral, &lateral_hit), (&mut top, &top_hit)] {
        for (i, &h) in hit.iter().enumerate() {
            if !h {
                dst[i * c..(i + 1) * c].iter_mut().for_each(|s| *s = 0.0);
            }
        }
    }
    ViewPlanes {
        resolution: g,
        channels: c,
        front,
        lateral,
        top,
    }
}

/// Reads each vertex's plane cells, using the same binning as [`voxelize`].
pub fn gather_view_features(planes: &ViewPlanes, vertices: &[Vec3]) -> ViewFeatures {
    let c = planes.channels;
    let n = vertices.len();
    let bins = voxel_bins(vertices, planes.resolution);
    let read = |view: usize| {
        let mut out = Array2::zeros((n, c));
        for (i, b) in bins.iter().enumerate() {
            let cell = match view {
                0 => planes.front_at(b[0], b[1]),
                1 => planes.lateral_at(b[1], b[2]),
                _ => planes.top_at(b[0], b[2]),
            };
            out.row_mut(i).iter_mut().zip(cell).for_each(|(o, &v)| *o = v);
        }
        out
    };
    ViewFeatures {
        front: read(0),
        lateral: read(1),
        top: read(2),
    }
}

/// Column keys of each vertex for the three views, given precomputed bins.
fn column_keys(bins: &[[usize; 3]], g: usize) -> [Vec<usize>; 3] {
    [
        bins.iter().map(|b| b[0] * g + b[1]).collect(),
        bins.iter().map(|b| b[1] * g + b[2]).collect(),
        bins.iter().map(|b| b[0] * g + b[2]).collect(),
    ]
}

/// Equivalent to `gather_view_features(three_view_pool(voxelize(..)))`, but
/// also records which vertex each value came from (lowest index on ties).
pub fn pool_and_gather(bins: &[[usize; 3]], resolution: usize, features: ArrayView2<'_, f64>) -> Result<PooledViews> {
    let n = bins.len();
    if features.nrows() != n {
        return Err(DneError::shape("pool_and_gather features", n, features.nrows()));
    }
    let c = features.ncols();
    let g2 = resolution * resolution;
    let mut views = Array2::zeros((n, 3 * c));
    let mut source = vec![0u32; n * 3 * c];
    let mut best: Vec<u32> = vec![u32::MAX; g2 * c];
    for (view, keys) in column_keys(bins, resolution).iter().enumerate() {
        best.iter_mut().for_each(|b| *b = u32::MAX);
        for (i, &key) in keys.iter().enumerate() {
            for ch in 0..c {
                let slot = &mut best[key * c + ch];
                if *slot == u32::MAX || features[[i, ch]] > features[[*slot as usize, ch]] {
                    *slot = i as u32;
                }
            }
        }
        for (i, &key) in keys.iter().enumerate() {
            for ch in 0..c {
                let src = best[key * c + ch];
                let col = view * c + ch;
                views[[i, col]] = features[[src as usize, ch]];
                source[i * 3 * c + col] = src;
            }
        }
    }
    Ok(PooledViews { views, source })
}

impl PooledViews {
    /// Routes `d_views` (`N x 3C`) back onto the per-vertex features (`N x C`).
    pub fn backward(&self, d_views: ArrayView2<'_, f64>, d_features: &mut Array2<f64>) {
        let c = d_features.ncols();
        for (i, row) in d_views.rows().into_iter().enumerate() {
            for (col, &g) in row.iter().enumerate() {
                if g != 0.0 {
                    let src = self.source[i * 3 * c + col] as usize;
                    d_features[[src, col % c]] += g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shared_cell_takes_elementwise_max() {
        let v = vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let f = array![[1.0, 5.0], [3.0, 2.0], [0.0, 0.0]];
        let vox = voxelize(&v, f.view(), 4).unwrap();
        assert_eq!(vox.cell([0, 0, 0]), &[3.0, 5.0]);
        assert!(vox.occupied([3, 3, 3]));
        assert!(!vox.occupied([1, 1, 1]));
        assert_eq!(vox.cell([1, 1, 1]), &[0.0, 0.0]);
    }

    #[test]
    fn single_vertex_per_cell() {
        let v = vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5], [1.0, 1.0, 1.0]];
        let f = array![[1.0], [-2.0], [4.0]];
        let vox = voxelize(&v, f.view(), 3).unwrap();
        assert_eq!(vox.cell([0, 0, 0]), &[1.0]);
        assert_eq!(vox.cell([1, 1, 1]), &[-2.0]);
        assert_eq!(vox.cell([2, 2, 2]), &[4.0]);
        assert_eq!(vox.occupancy.iter().filter(|&&o| o).count(), 3);
    }

    #[test]
    fn degenerate_axis_maps_to_zero() {
        let v = vec![[0.0, 1.0, 5.0], [1.0, 1.0, 5.0]];
        assert_eq!(voxel_bins(&v, 4), vec![[0, 0, 0], [3, 0, 0]]);
    }

    #[test]
    fn single_occupied_cell_shows_in_every_view() {
        let mut vox = VoxelGrid {
            resolution: 3,
            channels: 2,
            cells: vec![0.0; 27 * 2],
            occupancy: vec![false; 27],
        };
        let idx = vox.cell_index([2, 0, 1]);
        vox.occupancy[idx] = true;
        vox.cells[idx * 2] = -1.5;
        vox.cells[idx * 2 + 1] = 4.0;
        let p = three_view_pool(&vox);
        assert_eq!(p.front_at(2, 0), &[-1.5, 4.0]);
        assert_eq!(p.lateral_at(0, 1), &[-1.5, 4.0]);
        assert_eq!(p.top_at(2, 1), &[-1.5, 4.0]);
        assert_eq!(p.front_at(1, 1), &[0.0, 0.0]);
    }

    #[test]
    fn front_view_reduces_depth() {
        let v = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.5]];
        let f = array![[1.0, 7.0], [3.0, -2.0], [0.0, 0.0]];
        let p = three_view_pool(&voxelize(&v, f.view(), 2).unwrap());
        assert_eq!(p.front_at(0, 0), &[3.0, 7.0]);
    }

    #[test]
    fn gather_reads_peer_max() {
        let v = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let f = array![[1.0], [9.0], [2.0]];
        let vox = voxelize(&v, f.view(), 2).unwrap();
        let views = gather_view_features(&three_view_pool(&vox), &v);
        assert_eq!(views.front[[0, 0]], 9.0);
        assert_eq!(views.lateral[[0, 0]], 1.0);
        let single = vec![[0.3, 0.3, 0.3]];
        let f1 = array![[2.5, -1.0]];
        let one = gather_view_features(&three_view_pool(&voxelize(&single, f1.view(), 4).unwrap()), &single);
        for view in [&one.front, &one.lateral, &one.top] {
            assert_eq!(view.row(0).to_vec(), vec![2.5, -1.0]);
        }
    }

    #[test]
    fn fused_path_agrees_and_routes_gradients() {
        let v = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.1, 0.9, 0.2]];
        let f = array![[1.0, 0.0], [9.0, -1.0], [2.0, 3.0], [0.5, 0.5]];
        let staged = gather_view_features(&three_view_pool(&voxelize(&v, f.view(), 2).unwrap()), &v);
        let fused = pool_and_gather(&voxel_bins(&v, 2), 2, f.view()).unwrap();
        assert_eq!(fused.views, staged.concat());
        let mut d = Array2::zeros((4, 2));
        let mut up = Array2::zeros((4, 6));
        up[[0, 0]] = 1.0; // front channel 0 of vertex 0 comes from vertex 1
        fused.backward(up.view(), &mut d);
        assert_eq!(d[[1, 0]], 1.0);
        assert_eq!(d.sum(), 1.0);
    }
}
