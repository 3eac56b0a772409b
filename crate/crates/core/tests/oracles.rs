//! Independent re-implementations checked against the library.

use dne_core::camera::{project, Camera};
use dne_core::features::{three_view_pool, voxelize, FeatureGrid};
use dne_core::mesh::{make_template, mpjpe, mpvpe, mpvpe_2d, regress_joints, HandMesh, NUM_JOINTS};
use dne_core::neural::Mlp;
use dne_core::noise::{NoiseField, NoiseParams};
use dne_core::pipeline::{loss_v, StageSamples};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_pose(r: &mut ChaCha8Rng) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|_| r.gen_range(-0.5..1.0))
}

fn jitter(mesh: &HandMesh, r: &mut ChaCha8Rng, s: f64) -> HandMesh {
    let v = mesh
        .vertices()
        .iter()
        .map(|p| std::array::from_fn(|k| p[k] + r.gen_range(-s..s)))
        .collect();
    mesh.with_vertices(v).unwrap()
}

#[test]
fn joints_are_group_centroids() {
    let mut r = rng(1);
    let mesh = make_template(4, &random_pose(&mut r));
    let joints = regress_joints(&mesh);
    for (group, joint) in mesh.joint_groups().iter().zip(&joints.joints) {
        for k in 0..3 {
            let mut sum = 0.0;
            for &i in group {
                sum += mesh.vertices()[i][k];
            }
            assert!((joint[k] - sum / group.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut r = rng(2);
    for _ in 0..10 {
        let gt = make_template(r.gen(), &random_pose(&mut r));
        let pred = jitter(&gt, &mut r, 0.1);

        let mut total = 0.0;
        for i in 0..gt.num_vertices() {
            let (a, b) = (pred.vertices()[i], gt.vertices()[i]);
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        assert!((mpvpe(&pred, &gt).unwrap() - total / gt.num_vertices() as f64).abs() < 1e-12);

        let (jp, jg) = (regress_joints(&pred).joints, regress_joints(&gt).joints);
        let mut jt = 0.0;
        for (a, b) in jp.iter().zip(&jg) {
            jt += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        assert!((mpjpe(&pred, &gt).unwrap() - jt / jg.len() as f64).abs() < 1e-12);

        let cam = Camera::new(20.0, 21.0, 15.0, 16.0);
        let (up, ug) = (cam.project_all(pred.vertices()), cam.project_all(gt.vertices()));
        let mut t2 = 0.0;
        for (a, b) in up.iter().zip(&ug) {
            t2 += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
        assert!((mpvpe_2d(&up, &ug).unwrap() - t2 / up.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn bilinear_matches_four_term_formula() {
    let mut r = rng(3);
    let (h, w, c) = (5, 7, 3);
    let values: Vec<f64> = (0..h * w * c).map(|_| r.gen_range(-2.0..2.0)).collect();
    let grid = FeatureGrid::new(h, w, c, values.clone()).unwrap();
    let at = |y: usize, x: usize, ch: usize| values[(y * w + x) * c + ch];
    for _ in 0..100 {
        let (u, v) = (r.gen_range(0.0..(w - 1) as f64), r.gen_range(0.0..(h - 1) as f64));
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (a, b) = (u - x0 as f64, v - y0 as f64);
        let got = grid.interpolate([u, v]);
        for ch in 0..c {
            let expect = (1.0 - a) * (1.0 - b) * at(y0, x0, ch)
                + a * (1.0 - b) * at(y0, x1, ch)
                + (1.0 - a) * b * at(y1, x0, ch)
                + a * b * at(y1, x1, ch);
            assert!((got[ch] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn mlp_matches_plain_loops() {
    let mut r = rng(4);
    let mlp = Mlp::init(&[4, 6, 3], &mut r).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut act = x.clone();
        for (i, layer) in mlp.layers().iter().enumerate() {
            let mut next = Vec::new();
            for o in 0..layer.weight.nrows() {
                let mut s = layer.bias[o];
                for (j, a) in act.iter().enumerate() {
                    s += layer.weight[[o, j]] * a;
                }
                next.push(if i + 1 < mlp.layers().len() { s.max(0.0) } else { s });
            }
            act = next;
        }
        let got = mlp.forward(&x).unwrap();
        for (a, b) in got.iter().zip(&act) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn view_planes_are_axis_max_reductions() {
    let mut r = rng(5);
    let g = 4;
    let n = 60;
    let verts: Vec<[f64; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0)))
        .collect();
    let feats = Array2::from_shape_fn((n, 2), |_| r.gen_range(-3.0..3.0));
    let vox = voxelize(&verts, feats.view(), g).unwrap();
    let planes = three_view_pool(&vox);
    for a in 0..g {
        for b in 0..g {
            for ch in 0..2 {
                let mut expect = [f64::NEG_INFINITY; 3];
                for k in 0..g {
                    // front drops z, lateral drops x, top drops y
                    for (view, cell) in [[a, b, k], [k, a, b], [a, k, b]].into_iter().enumerate() {
                        if vox.occupied(cell) {
                            expect[view] = expect[view].max(vox.cell(cell)[ch]);
                        }
                    }
                }
                let got = [planes.front_at(a, b)[ch], planes.lateral_at(a, b)[ch], planes.top_at(a, b)[ch]];
                for view in 0..3 {
                    let e = if expect[view].is_finite() { expect[view] } else { 0.0 };
                    assert_eq!(got[view], e, "view {view} at ({a}, {b})");
                }
            }
        }
    }
}

#[test]
fn loss_matches_double_sum() {
    let mut r = rng(6);
    let n = 12;
    let gt: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0))).collect();
    let gt_cam = Camera::new(18.0, 22.0, 15.0, 14.0);
    let stages: Vec<StageSamples> = (0..3)
        .map(|_| StageSamples {
            samples: (0..4)
                .map(|_| gt.iter().map(|p| std::array::from_fn(|k| p[k] + r.gen_range(-0.2..0.2))).collect())
                .collect(),
            mean: gt.iter().map(|p| std::array::from_fn(|k| p[k] + r.gen_range(-0.1..0.1))).collect(),
            camera: Camera::new(r.gen_range(15.0..25.0), r.gen_range(15.0..25.0), 15.5, 15.5),
        })
        .collect();
    let (l2, l3) = (0.7, 1.9);
    let mut expect = 0.0;
    for s in &stages {
        for sample in &s.samples {
            for i in 0..n {
                for k in 0..3 {
                    expect += l3 * (sample[i][k] - gt[i][k]).abs();
                }
                let a = project(&sample[i], &s.camera);
                let b = project(&s.mean[i], &gt_cam);
                expect += l2 * ((a[0] - b[0]).abs() + (a[1] - b[1]).abs());
            }
        }
    }
    let got = loss_v(&stages, &gt, &gt_cam, l2, l3).unwrap();
    assert!((got - expect).abs() < 1e-10 * expect.max(1.0), "{got} vs {expect}");
}

#[test]
fn noise_moments_for_documented_example() {
    let params = NoiseParams {
        gamma: 0.5,
        delta_2d: 0.1,
        delta_3d: 0.1,
    };
    let field = NoiseField::new(vec![[1.0, 1.0]], vec![[1.0, 1.0, 1.0]], params).unwrap();
    let draws = 100_000;
    let (mut s, mut sq) = (0.0, 0.0);
    for i in 0..draws {
        let e = field.sample_indexed(42, 0, i).eps_3d[0][0];
        s += e;
        sq += e * e;
    }
    let mean = s / draws as f64;
    let std = (sq / draws as f64 - mean * mean).sqrt();
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!((std - 0.6).abs() < 0.006, "std {std}");
}
