//! Oracle suites shared by the test-suite and `dne verify`.
//!
//! Each suite compares the library against an independent reference
//! (normal equations through a general matrix inverse, brute-force pooling,
//! central finite differences, Monte-Carlo moments) and reports the worst
//! deviation found.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{correct_camera, project, projection_residual, ridge_objective, Camera, RidgeConfig};
use crate::features::{gather_view_features, pool_and_gather, three_view_pool, voxel_bins, voxelize, FeatureGrid};
use crate::mesh::HandMesh;
use crate::neural::gradcheck::{central_difference, rel_error, STEP};
use crate::neural::Mlp;
use crate::noise::{NoiseField, NoiseParams};
use crate::pipeline::{loss_v_grad, objective, objective_with_targets, DnePipelineParams, PipelineConfig, StageSamples};
use crate::rng::derive;
use crate::{Vec2, Vec3};

/// Relative-error bound for gradient probes.
pub const GRAD_TOL: f64 = 1e-4;
/// Absolute bound for ridge solutions against the oracle.
pub const RIDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Ridge,
    Pooling,
    Noise,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Ridge, Suite::Pooling, Suite::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Ridge => "ridge",
            Suite::Pooling => "pooling",
            Suite::Noise => "noise",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Negative control: perturbs every analytic gradient by 1% so the
    /// gradient suite must fail.
    pub corrupt_gradients: bool,
}

/// One named check inside a suite.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    /// Worst deviation, in the unit the check's bound uses.
    pub worst: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, cases: usize, worst: f64, bound: f64) -> Check {
    Check {
        name: name.to_string(),
        cases,
        worst,
        bound,
        passed: worst <= bound,
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let start = Instant::now();
    let checks = match suite {
        Suite::Gradcheck => gradcheck_checks(opts),
        Suite::Ridge => ridge_checks(opts.seed),
        Suite::Pooling => pooling_checks(opts.seed),
        Suite::Noise => noise_checks(opts.seed),
    };
    SuiteReport {
        suite,
        checks,
        elapsed: start.elapsed(),
    }
}

// ---------------------------------------------------------------- ridge

/// `(A^T A + xi I)^{-1} A^T u` with `A = [x, 1]`, via a general inverse.
pub fn ridge_oracle(xs: &[f64], us: &[f64], xi: f64) -> Option<(f64, f64)> {
    let n = xs.len();
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { xs[i] } else { 1.0 });
    let m = a.transpose() * &a + DMatrix::identity(2, 2) * xi;
    let rhs = a.transpose() * DVector::from_column_slice(us);
    let sol = m.try_inverse()? * rhs;
    Some((sol[0], sol[1]))
}

fn random_camera(rng: &mut impl Rng) -> Camera {
    let sign = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    Camera::new(
        sign(&mut r) * r.gen_range(0.5..40.0),
        sign(&mut r) * r.gen_range(0.5..40.0),
        r.gen_range(-30.0..30.0),
        r.gen_range(-30.0..30.0),
    )
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect()
}

fn ridge_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x41D6]));
    let xis = [0.0, 1e-4, 0.1, 1.0];
    let cases = 1000;

    let mut oracle_err: f64 = 0.0;
    let mut exact_err: f64 = 0.0;
    let mut consistency_err: f64 = 0.0;
    for case in 0..cases {
        let n = rng.gen_range(2..=500);
        let v = random_points(&mut rng, n);
        let cam = random_camera(&mut rng);
        let noise = rng.gen_range(0.0..2.0);
        let u: Vec<Vec2> = v
            .iter()
            .map(|p| {
                let q = project(p, &cam);
                [q[0] + noise * rng.gen_range(-1.0..1.0), q[1] + noise * rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let xi = xis[case % xis.len()];
        match correct_camera(&v, &u, &RidgeConfig { xi }) {
            Ok(fit) => {
                for (k, (s, t)) in [(fit.sx, fit.tx), (fit.sy, fit.ty)].into_iter().enumerate() {
                    let xs: Vec<f64> = v.iter().map(|p| p[k]).collect();
                    let us: Vec<f64> = u.iter().map(|p| p[k]).collect();
                    match ridge_oracle(&xs, &us, xi) {
                        Some((os, ot)) => oracle_err = oracle_err.max((s - os).abs()).max((t - ot).abs()),
                        None => oracle_err = f64::INFINITY,
                    }
                }
            }
            Err(_) => oracle_err = f64::INFINITY,
        }

        // exact fit and projection consistency
        let exact = cam.project_all(&v);
        match correct_camera(&v, &exact, &RidgeConfig { xi: 0.0 }) {
            Ok(fit) => {
                let d = fit
                    .to_array()
                    .iter()
                    .zip(cam.to_array())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if case % 2 == 0 {
                    exact_err = exact_err.max(d);
                } else {
                    consistency_err = consistency_err.max(d);
                }
            }
            Err(_) => exact_err = f64::INFINITY,
        }
    }

    // local optimality, monotone data term, shrinkage
    let mut worst_gain: f64 = 0.0;
    let mut worst_mono: f64 = 0.0;
    let mut worst_shrink: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(3..60);
        let v = random_points(&mut rng, n);
        let cam = random_camera(&mut rng);
        let u: Vec<Vec2> = v
            .iter()
            .map(|p| {
                let q = project(p, &cam);
                [q[0] + rng.gen_range(-1.0..1.0), q[1] + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let xi = rng.gen_range(0.0..1.0);
        let fit = correct_camera(&v, &u, &RidgeConfig { xi }).expect("random design is regular");
        let base = ridge_objective(&v, &u, &fit, xi).expect("shapes match");
        for _ in 0..50 {
            let eta: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = rng.gen_range(0.0..1e-3) / norm;
            let c = Camera::from_array(std::array::from_fn(|k| fit.to_array()[k] + r * eta[k]));
            let obj = ridge_objective(&v, &u, &c, xi).expect("shapes match");
            worst_gain = worst_gain.max(base - obj);
        }
        let mut prev = f64::NEG_INFINITY;
        for xi in [0.0, 0.01, 0.1, 1.0] {
            let c = correct_camera(&v, &u, &RidgeConfig { xi }).expect("regular");
            let res = projection_residual(&v, &u, &c).expect("shapes match");
            worst_mono = worst_mono.max(prev - res - 1e-9 * res.abs());
            prev = res;
        }
        let norm = |c: Camera| c.to_array().iter().map(|x| x * x).sum::<f64>().sqrt();
        let free = norm(correct_camera(&v, &u, &RidgeConfig { xi: 0.0 }).expect("regular"));
        let tight = norm(correct_camera(&v, &u, &RidgeConfig { xi: 1e6 }).expect("regular"));
        worst_shrink = worst_shrink.max(tight / (1e-3 * free));
    }

    // error paths
    let one = correct_camera(&[[0.0; 3]], &[[1.0, 1.0]], &RidgeConfig { xi: 0.1 });
    let flat = correct_camera(&[[0.5, 0.0, 0.0], [0.5, 1.0, 0.0]], &[[1.0, 0.0], [2.0, 1.0]], &RidgeConfig { xi: 0.0 });
    let errors_ok = matches!(&one, Err(e) if e.to_string().contains("underdetermined"))
        && matches!(&flat, Err(e) if e.to_string().contains("singular system"));

    vec![
        check("oracle", cases, oracle_err, RIDGE_TOL),
        check("exact_fit", cases / 2, exact_err, RIDGE_TOL),
        check("projection_consistency", cases / 2, consistency_err, RIDGE_TOL),
        check("local_optimality", 1000, worst_gain, 0.0),
        check("monotone_in_xi", 20, worst_mono, 0.0),
        check("shrinkage", 20, worst_shrink, 1.0),
        check("error_paths", 2, if errors_ok { 0.0 } else { 1.0 }, 0.0),
    ]
}

/// Projection consistency alone: `correct_camera(V, P(V, c), 0) == c`.
pub fn projection_consistency(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0xC0C0]));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.gen_range(2..=200);
        let v = random_points(&mut rng, n);
        let cam = random_camera(&mut rng);
        let worst_case = match correct_camera(&v, &cam.project_all(&v), &RidgeConfig { xi: 0.0 }) {
            Ok(fit) => fit
                .to_array()
                .iter()
                .zip(cam.to_array())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            Err(_) => f64::INFINITY,
        };
        worst = worst.max(worst_case);
    }
    worst
}

// ---------------------------------------------------------------- pooling

/// Per-vertex view features by enumeration: for each vertex and view, the
/// elementwise max over every vertex falling in the same plane column.
pub fn pooling_oracle(vertices: &[Vec3], features: &Array2<f64>, g: usize) -> Array2<f64> {
    let n = vertices.len();
    let c = features.ncols();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let bin = |v: &Vec3, k: usize| -> usize {
        if hi[k] > lo[k] {
            let t = (v[k] - lo[k]) / (hi[k] - lo[k]);
            ((t * g as f64) as usize).min(g - 1)
        } else {
            0
        }
    };
    // front drops z, lateral drops x, top drops y
    let kept = [[0, 1], [1, 2], [0, 2]];
    let mut out = Array2::zeros((n, 3 * c));
    for i in 0..n {
        for (view, axes) in kept.iter().enumerate() {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                for j in 0..n {
                    if axes.iter().all(|&k| bin(&vertices[j], k) == bin(&vertices[i], k)) {
                        best = best.max(features[[j, ch]]);
                    }
                }
                out[[i, view * c + ch]] = best;
            }
        }
    }
    out
}

fn pooling_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x9001]));
    let mut composed_bad = 0usize;
    let mut fused_bad = 0usize;
    let mut perm_bad = 0usize;
    let mut cases = 0;
    for g in [2usize, 4, 8] {
        for _ in 0..100 {
            cases += 1;
            let n = rng.gen_range(1..120);
            let c = rng.gen_range(1..5);
            let mut v = random_points(&mut rng, n);
            if rng.gen_bool(0.1) {
                v.iter_mut().for_each(|p| p[2] = 0.25);
            }
            // coarse values make ties common
            let f = Array2::from_shape_fn((n, c), |_| (rng.gen_range(-4..5) as f64) * 0.5);
            let expect = pooling_oracle(&v, &f, g);

            let vox = voxelize(&v, f.view(), g).expect("shapes match");
            let got = gather_view_features(&three_view_pool(&vox), &v).concat();
            composed_bad += (got != expect) as usize;

            let fused = pool_and_gather(&voxel_bins(&v, g), g, f.view()).expect("shapes match");
            let sources_ok = fused
                .views
                .indexed_iter()
                .all(|((i, col), &x)| f[[fused.source[i * 3 * c + col] as usize, col % c]] == x);
            fused_bad += (fused.views != expect || !sources_ok) as usize;

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let pv: Vec<Vec3> = perm.iter().map(|&i| v[i]).collect();
            let pf = Array2::from_shape_fn((n, c), |(i, k)| f[[perm[i], k]]);
            let pvox = voxelize(&pv, pf.view(), g).expect("shapes match");
            perm_bad += (three_view_pool(&pvox) != three_view_pool(&vox)) as usize;
        }
    }
    vec![
        check("composed_vs_enumeration", cases, composed_bad as f64, 0.0),
        check("fused_vs_enumeration", cases, fused_bad as f64, 0.0),
        check("permutation_invariance", cases, perm_bad as f64, 0.0),
    ]
}

// ---------------------------------------------------------------- noise

fn noise_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x2015]));
    let draws = 100_000u64;
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    let mut inference_bad = 0usize;
    for f in 0..10 {
        let n = 2;
        let mut mu = || {
            let m: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let mu_2d: Vec<Vec2> = (0..n).map(|_| [mu(), mu()]).collect();
        let mu_3d: Vec<Vec3> = (0..n).map(|_| [mu(), mu(), mu()]).collect();
        let params = NoiseParams {
            gamma: rng.gen_range(0.05..0.5),
            delta_2d: rng.gen_range(0.01..0.5),
            delta_3d: rng.gen_range(0.001..0.1),
        };
        let field = NoiseField::new(mu_2d.clone(), mu_3d.clone(), params).expect("valid field");
        let mut sum = [0.0; 10];
        let mut sq = [0.0; 10];
        let field_seed = derive(seed, &[f]);
        for s in 0..draws {
            let x = field.sample_indexed(field_seed, 0, s);
            let flat = x.eps_2d.iter().flatten().chain(x.eps_3d.iter().flatten());
            for (k, e) in flat.enumerate() {
                sum[k] += e;
                sq[k] += e * e;
            }
        }
        let mus = mu_2d.iter().flatten().chain(mu_3d.iter().flatten());
        for (k, &m) in mus.enumerate() {
            let delta = if k < 2 * n { params.delta_2d } else { params.delta_3d };
            let sigma = params.gamma * m.abs() + delta;
            let mean = sum[k] / draws as f64;
            let std = (sq[k] / draws as f64 - mean * mean).sqrt();
            worst_mean = worst_mean.max((mean - m).abs() / m.abs().max(sigma));
            worst_std = worst_std.max((std - sigma).abs() / sigma);
        }
        let inf = field.inference_noise();
        inference_bad += (inf.eps_2d != mu_2d || inf.eps_3d != mu_3d) as usize;
    }
    vec![
        check("sample_mean", 10, worst_mean, 0.01),
        check("sample_std", 10, worst_std, 0.01),
        check("inference_is_mean", 10, inference_bad as f64, 0.0),
    ]
}

// ---------------------------------------------------------------- gradients

/// Accumulates probe outcomes for one differentiable path.
struct ProbeLog {
    worst: f64,
    probes: usize,
}

impl ProbeLog {
    fn new() -> Self {
        ProbeLog { worst: 0.0, probes: 0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64, corrupt: bool) {
        let analytic = if corrupt { analytic * 1.01 } else { analytic };
        self.worst = self.worst.max(rel_error(analytic, numeric));
        self.probes += 1;
    }

    fn into_check(self, name: &str) -> Check {
        check(name, self.probes, self.worst, GRAD_TOL)
    }
}

fn random_grid(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
    let values = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureGrid::new(h, w, c, values).expect("valid grid")
}

fn mlp_probes(rng: &mut ChaCha8Rng, corrupt: bool) -> ProbeLog {
    let mut log = ProbeLog::new();
    let dims = [5, 7, 6, 3];
    let mut mlp = Mlp::init(&dims, rng).expect("valid dims");
    for layer in mlp.layers_mut() {
        layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
    let w = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let loss = |m: &Mlp, x: &Array2<f64>| -> (f64, u64) {
        let (y, tape) = m.forward_batch(x.view()).expect("dims");
        ((&y * &w).sum(), tape.pattern_key())
    };
    let (_, tape) = mlp.forward_batch(x.view()).expect("dims");
    let (grads, d_x) = mlp.backward(&tape, w.view()).expect("dims");
    let (_, key) = loss(&mlp, &x);
    let n_tensors = mlp.tensors().len();
    while log.probes < 40 {
        let t = rng.gen_range(0..n_tensors + 1);
        if t == n_tensors {
            let (i, j) = (rng.gen_range(0..4), rng.gen_range(0..5));
            let mut xp = x.clone();
            let base = x[[i, j]];
            xp[[i, j]] = base + STEP;
            let (up, k1) = loss(&mlp, &xp);
            xp[[i, j]] = base - STEP;
            let (down, k2) = loss(&mlp, &xp);
            if k1 == key && k2 == key {
                log.record(d_x[[i, j]], (up - down) / (2.0 * STEP), corrupt);
            }
        } else {
            let len = mlp.tensors()[t].1.len();
            let e = rng.gen_range(0..len);
            let analytic = grads.tensors()[t].1[e];
            let mut m = mlp.clone();
            let mut keys = Vec::new();
            let mut vals = Vec::new();
            for s in [STEP, -STEP] {
                m.tensors_mut()[t][e] = mlp.tensors()[t].1[e] + s;
                let (l, k) = loss(&m, &x);
                vals.push(l);
                keys.push(k);
            }
            if keys.iter().all(|&k| k == key) {
                log.record(analytic, (vals[0] - vals[1]) / (2.0 * STEP), corrupt);
            }
        }
    }
    log
}

fn interpolation_probes(rng: &mut ChaCha8Rng, corrupt: bool) -> ProbeLog {
    let mut log = ProbeLog::new();
    let grid = random_grid(rng, 6, 7, 3);
    let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |uv: &[f64]| -> f64 { grid.interpolate([uv[0], uv[1]]).iter().zip(&w).map(|(a, b)| a * b).sum() };
    while log.probes < 40 {
        let mut uv = vec![rng.gen_range(-0.5..6.5), rng.gen_range(-0.5..5.5)];
        let k = rng.gen_range(0..2);
        let key = grid.stencil_key([uv[0], uv[1]]);
        let mut shifted = uv.clone();
        shifted[k] += STEP;
        let up = grid.stencil_key([shifted[0], shifted[1]]);
        shifted[k] -= 2.0 * STEP;
        if up != key || grid.stencil_key([shifted[0], shifted[1]]) != key {
            continue;
        }
        let analytic = grid.interpolate_backward([uv[0], uv[1]], &w)[k];
        let numeric = central_difference(&mut uv, k, STEP, f);
        log.record(analytic, numeric, corrupt);
    }
    log
}

fn reparam_probes(rng: &mut ChaCha8Rng, corrupt: bool) -> ProbeLog {
    let mut log = ProbeLog::new();
    while log.probes < 40 {
        let n = 3;
        let away = |rng: &mut ChaCha8Rng| {
            let m: f64 = rng.gen_range(0.01..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let mu_2d: Vec<Vec2> = (0..n).map(|_| [away(rng), away(rng)]).collect();
        let mu_3d: Vec<Vec3> = (0..n).map(|_| [away(rng), away(rng), away(rng)]).collect();
        let params = NoiseParams {
            gamma: rng.gen_range(0.05..0.5),
            delta_2d: 0.3,
            delta_3d: 0.02,
        };
        let field = NoiseField::new(mu_2d.clone(), mu_3d.clone(), params).expect("valid field");
        let seed = rng.gen();
        let sample = field.sample(seed);
        let up2: Vec<Vec2> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let up3: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
        let (d2, d3) = field.sample_gradient(&sample, &up2, &up3).expect("shapes");
        // objective at fixed z: sum(up * (mu + sigma(mu) z))
        let eval = |m2: &[Vec2], m3: &[Vec3]| -> f64 {
            let f = NoiseField::new(m2.to_vec(), m3.to_vec(), params).expect("valid");
            let s = f.sample(seed);
            let a: f64 = s.eps_2d.iter().flatten().zip(up2.iter().flatten()).map(|(a, b)| a * b).sum();
            let b: f64 = s.eps_3d.iter().flatten().zip(up3.iter().flatten()).map(|(a, b)| a * b).sum();
            a + b
        };
        let i = rng.gen_range(0..n);
        if rng.gen_bool(0.5) {
            let k = rng.gen_range(0..2);
            let mut flat: Vec<f64> = mu_2d.iter().flatten().copied().collect();
            let numeric = central_difference(&mut flat, 2 * i + k, STEP, |x| {
                let m2: Vec<Vec2> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
                eval(&m2, &mu_3d)
            });
            log.record(d2[i][k], numeric, corrupt);
        } else {
            let k = rng.gen_range(0..3);
            let mut flat: Vec<f64> = mu_3d.iter().flatten().copied().collect();
            let numeric = central_difference(&mut flat, 3 * i + k, STEP, |x| {
                let m3: Vec<Vec3> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                eval(&mu_2d, &m3)
            });
            log.record(d3[i][k], numeric, corrupt);
        }
    }
    log
}

fn loss_probes(rng: &mut ChaCha8Rng, corrupt: bool) -> ProbeLog {
    let mut log = ProbeLog::new();
    let n = 5;
    let (m, r) = (2, 3);
    while log.probes < 40 {
        let gt = random_points(rng, n);
        let gt_cam = random_camera(rng);
        let stages: Vec<StageSamples> = (0..m)
            .map(|_| StageSamples {
                samples: (0..r).map(|_| random_points(rng, n)).collect(),
                mean: random_points(rng, n),
                camera: random_camera(rng),
            })
            .collect();
        let (l2, l3) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
        let (_, grads) = loss_v_grad(&stages, &gt, &gt_cam, l2, l3).expect("shapes");
        let stage = rng.gen_range(0..m);
        let which = rng.gen_range(0..3);
        let mut st = stages.clone();
        let eval = |st: &[StageSamples]| loss_v_grad(st, &gt, &gt_cam, l2, l3).expect("shapes").0;
        let (analytic, numeric) = match which {
            0 => {
                let (s, i, k) = (rng.gen_range(0..r), rng.gen_range(0..n), rng.gen_range(0..3));
                let a = grads[stage].samples[s][i][k];
                let base = st[stage].samples[s][i][k];
                st[stage].samples[s][i][k] = base + STEP;
                let up = eval(&st);
                st[stage].samples[s][i][k] = base - STEP;
                (a, (up - eval(&st)) / (2.0 * STEP))
            }
            1 => {
                let (i, k) = (rng.gen_range(0..n), rng.gen_range(0..3));
                let a = grads[stage].mean[i][k];
                let base = st[stage].mean[i][k];
                st[stage].mean[i][k] = base + STEP;
                let up = eval(&st);
                st[stage].mean[i][k] = base - STEP;
                (a, (up - eval(&st)) / (2.0 * STEP))
            }
            _ => {
                let k = rng.gen_range(0..4);
                let a = grads[stage].camera.to_array()[k];
                let mut c = st[stage].camera.to_array();
                let base = c[k];
                c[k] = base + STEP;
                st[stage].camera = Camera::from_array(c);
                let up = eval(&st);
                c[k] = base - STEP;
                st[stage].camera = Camera::from_array(c);
                (a, (up - eval(&st)) / (2.0 * STEP))
            }
        };
        // random continuous data is almost surely away from every |.| kink
        log.record(analytic, numeric, corrupt);
    }
    log
}

/// A small differentiable scene: a 10-vertex mesh over a smooth random grid.
pub struct MicroScene {
    pub params: DnePipelineParams,
    pub vertices: Vec<Vec3>,
    pub coords: Vec<Vec2>,
    pub camera: Camera,
    pub grid: FeatureGrid,
    pub gt: HandMesh,
    pub gt_camera: Camera,
}

impl MicroScene {
    pub fn new(seed: u64, modules: usize, use_2d: bool, use_3d: bool) -> MicroScene {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[0x111C]));
        let n = 10;
        let (h, w, c) = (8, 9, 3);
        // smooth field: sums of a few random planar waves
        let waves: Vec<[f64; 4]> = (0..c * 3)
            .map(|_| [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.0..6.3), rng.gen_range(0.3..1.0)])
            .collect();
        let mut values = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v: f64 = waves[ch * 3..ch * 3 + 3]
                        .iter()
                        .map(|[a, b, ph, amp]| amp * (a * x as f64 + b * y as f64 + ph).sin())
                        .sum();
                    values.push(v);
                }
            }
        }
        let grid = FeatureGrid::new(h, w, c, values).expect("valid grid");

        let mut config = PipelineConfig {
            modules,
            samples: 2,
            hidden: 6,
            voxel_resolution: 2,
            use_2d,
            use_3d,
            ..PipelineConfig::default()
        };
        config.data.height = h;
        config.data.width = w;
        config.data.channels = 7;
        let mut params = DnePipelineParams::init(&config, n, rng.gen()).expect("valid config");
        for stage in &mut params.stages {
            for mlp in [&mut stage.phi, &mut stage.psi] {
                for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
                    let (rows, cols) = layer.weight.dim();
                    let s = if i == 0 { 0.8 } else { 0.3 };
                    layer.weight = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s) / (c as f64).sqrt());
                    layer.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
                }
            }
            let reg = &mut stage.regressor;
            reg.spatial.mapv_inplace(|x| 0.3 * x);
            reg.head.mapv_inplace(|x| 0.5 * x);
        }
        // the micro grid has fewer channels than real data; rebuild first layers
        for stage in &mut params.stages {
            for (mlp, width) in [(&mut stage.phi, 2 * c), (&mut stage.psi, 3 * c)] {
                let first = &mut mlp.layers_mut()[0];
                let rows = first.weight.nrows();
                first.weight = Array2::from_shape_fn((rows, width), |_| rng.gen_range(-0.8..0.8) / (width as f64).sqrt());
            }
            let rows = stage.regressor.head.nrows();
            stage.regressor.head = Array2::from_shape_fn((rows, c), |_| rng.gen_range(-0.5..0.5));
        }

        let vertices: Vec<Vec3> = (0..n)
            .map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)])
            .collect();
        let camera = Camera::new(rng.gen_range(8.0..10.0), rng.gen_range(8.0..10.0), 4.0, 3.5);
        let coords: Vec<Vec2> = camera
            .project_all(&vertices)
            .iter()
            .map(|p| [p[0] + rng.gen_range(-0.4..0.4), p[1] + rng.gen_range(-0.4..0.4)])
            .collect();
        let gt_vertices: Vec<Vec3> = vertices
            .iter()
            .map(|v| std::array::from_fn(|k| v[k] + rng.gen_range(-0.05..0.05)))
            .collect();
        let gt = HandMesh::new(gt_vertices, vec![], vec![(0..n).collect()]).expect("valid mesh");
        let gt_camera = Camera::new(9.0, 9.0, 4.2, 3.8);
        MicroScene {
            params,
            vertices,
            coords,
            camera,
            grid,
            gt,
            gt_camera,
        }
    }

    /// Objective value and kink key with the 2D targets pinned to `targets`.
    #[allow(clippy::too_many_arguments)]
    pub fn eval(
        &self,
        params: &DnePipelineParams,
        vertices: &[Vec3],
        coords: &[Vec2],
        camera: &Camera,
        seed: u64,
        targets: &[Vec<Vec3>],
    ) -> (f64, u64) {
        let o = objective_with_targets(
            params,
            vertices,
            coords,
            camera,
            &self.grid,
            &self.gt,
            &self.gt_camera,
            seed,
            Some(targets),
        )
        .expect("micro scene is well formed");
        (o.loss, o.kink_key)
    }
}

/// Probes of the full multi-stage objective w.r.t. every parameter tensor and
/// the starting vertices, coordinates and camera.
fn pipeline_probes(rng: &mut ChaCha8Rng, corrupt: bool, target: usize) -> ProbeLog {
    let mut log = ProbeLog::new();
    let variants = [(2, true, true), (1, true, false), (1, false, true), (3, true, true)];
    let mut scene_index = 0u64;
    while log.probes < target {
        let (modules, use_2d, use_3d) = variants[scene_index as usize % variants.len()];
        let scene = MicroScene::new(rng.gen::<u64>() ^ scene_index, modules, use_2d, use_3d);
        scene_index += 1;
        let seed: u64 = rng.gen();
        let base = objective(
            &scene.params,
            &scene.vertices,
            &scene.coords,
            &scene.camera,
            &scene.grid,
            &scene.gt,
            &scene.gt_camera,
            seed,
        )
        .expect("micro scene is well formed");
        for _ in 0..12 {
            let kind = rng.gen_range(0..4);
            let (analytic, plus, minus) = match kind {
                0 => {
                    let tensors = scene.params.tensors();
                    let t = rng.gen_range(0..tensors.len());
                    let e = rng.gen_range(0..tensors[t].1.len());
                    let analytic = base.grads.tensors()[t].1[e];
                    let run = |s: f64| {
                        let mut p = scene.params.clone();
                        p.tensors_mut()[t][e] += s;
                        scene.eval(&p, &scene.vertices, &scene.coords, &scene.camera, seed, &base.targets)
                    };
                    (analytic, run(STEP), run(-STEP))
                }
                1 => {
                    let (i, k) = (rng.gen_range(0..scene.vertices.len()), rng.gen_range(0..3));
                    let run = |s: f64| {
                        let mut v = scene.vertices.clone();
                        v[i][k] += s;
                        scene.eval(&scene.params, &v, &scene.coords, &scene.camera, seed, &base.targets)
                    };
                    (base.d_vertices[i][k], run(STEP), run(-STEP))
                }
                2 => {
                    let (i, k) = (rng.gen_range(0..scene.coords.len()), rng.gen_range(0..2));
                    let run = |s: f64| {
                        let mut u = scene.coords.clone();
                        u[i][k] += s;
                        scene.eval(&scene.params, &scene.vertices, &u, &scene.camera, seed, &base.targets)
                    };
                    (base.d_coords[i][k], run(STEP), run(-STEP))
                }
                _ => {
                    let k = rng.gen_range(0..4);
                    let run = |s: f64| {
                        let mut c = scene.camera.to_array();
                        c[k] += s;
                        scene.eval(&scene.params, &scene.vertices, &scene.coords, &Camera::from_array(c), seed, &base.targets)
                    };
                    (base.d_camera.to_array()[k], run(STEP), run(-STEP))
                }
            };
            // a probe straddling a kink says nothing about the derivative
            if plus.1 != base.kink_key || minus.1 != base.kink_key {
                continue;
            }
            log.record(analytic, (plus.0 - minus.0) / (2.0 * STEP), corrupt);
        }
    }
    log
}

fn gradcheck_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(opts.seed, &[0x6AD]));
    let c = opts.corrupt_gradients;
    vec![
        mlp_probes(&mut rng, c).into_check("mlp"),
        interpolation_probes(&mut rng, c).into_check("bilinear_query"),
        reparam_probes(&mut rng, c).into_check("reparameterized_sample"),
        loss_probes(&mut rng, c).into_check("loss_v"),
        pipeline_probes(&mut rng, c, 120).into_check("dne_stages"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_textbook_case() {
        // x = (0, 1), u = (0, 1), xi = 0.1: M = [[1.1, 1], [1, 2.1]], b = (1, 1)
        let (s, t) = ridge_oracle(&[0.0, 1.0], &[0.0, 1.0], 0.1).unwrap();
        let det = 1.1 * 2.1 - 1.0;
        assert!((s - (2.1 - 1.0) / det).abs() < 1e-15);
        assert!((t - (1.1 - 1.0) / det).abs() < 1e-15);
    }

    #[test]
    fn pooling_oracle_small() {
        let v = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let f = ndarray::array![[1.0], [3.0], [2.0]];
        let o = pooling_oracle(&v, &f, 2);
        // vertices 0 and 1 share the front column
        assert_eq!(o[[0, 0]], 3.0);
        assert_eq!(o[[1, 0]], 3.0);
        assert_eq!(o[[2, 0]], 2.0);
        // lateral drops x: (y, z) = (0, 0) vs (0, 1) differ
        assert_eq!(o[[0, 1]], 1.0);
    }
}
