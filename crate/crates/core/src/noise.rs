//! Dual Gaussian noise model.
//!
//! Each element of the 2D and 3D noise is independent with
//! `eps ~ N(mu, sigma^2)`, `sigma = gamma |mu| + delta` (a standard
//! deviation). Training draws `eps = mu + sigma z` with `z ~ N(0, 1)`;
//! inference uses `eps = mu`.

use serde::{Deserialize, Serialize};

use crate::error::{DneError, Result};
use crate::rng::IndexedNormal;
use crate::{Vec2, Vec3};

/// Stream kinds of the 2D and 3D standard normals.
pub const STREAM_2D: u64 = 2;
pub const STREAM_3D: u64 = 3;

/// Scale and margin hyperparameters; the margin has separate pixel and scene-unit values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub gamma: f64,
    pub delta_2d: f64,
    pub delta_3d: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            gamma: 0.1,
            delta_2d: 0.5,
            delta_3d: 1e-3,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("gamma", self.gamma),
            ("delta_2d", self.delta_2d),
            ("delta_3d", self.delta_3d),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(DneError::Config(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub mu_2d: Vec<Vec2>,
    pub mu_3d: Vec<Vec3>,
    pub params: NoiseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub eps_2d: Vec<Vec2>,
    pub eps_3d: Vec<Vec3>,
    pub z_2d: Vec<Vec2>,
    pub z_3d: Vec<Vec3>,
}

/// Standard deviation of one element.
pub fn sigma(mu: f64, gamma: f64, delta: f64) -> f64 {
    gamma * mu.abs() + delta
}

/// `d eps / d mu` at fixed `z`; the subgradient at `mu = 0` is taken as 1.
pub fn reparam_slope(mu: f64, z: f64, gamma: f64) -> f64 {
    let sign = if mu > 0.0 {
        1.0
    } else if mu < 0.0 {
        -1.0
    } else {
        0.0
    };
    1.0 + gamma * sign * z
}

/// Draws `rows * D` standard normals for a given stage/sample/kind stream.
pub fn standard_normals<const D: usize>(
    seed: u64,
    stage: u64,
    sample: u64,
    kind: u64,
    rows: usize,
) -> Vec<[f64; D]> {
    let flat = IndexedNormal::new(seed).fill(&[stage, sample, kind], rows * D);
    flat.chunks_exact(D)
        .map(|c| std::array::from_fn(|k| c[k]))
        .collect()
}

pub(crate) fn apply<const D: usize>(mu: &[[f64; D]], z: &[[f64; D]], gamma: f64, delta: f64) -> Vec<[f64; D]> {
    mu.iter()
        .zip(z)
        .map(|(m, z)| std::array::from_fn(|k| m[k] + sigma(m[k], gamma, delta) * z[k]))
        .collect()
}

impl NoiseField {
    pub fn new(mu_2d: Vec<Vec2>, mu_3d: Vec<Vec3>, params: NoiseParams) -> Result<Self> {
        params.validate()?;
        if mu_2d.len() != mu_3d.len() {
            return Err(DneError::shape("NoiseField", mu_2d.len(), mu_3d.len()));
        }
        let finite = mu_2d.iter().flatten().chain(mu_3d.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(DneError::Config("noise means must be finite".into()));
        }
        Ok(NoiseField { mu_2d, mu_3d, params })
    }

    pub fn len(&self) -> usize {
        self.mu_2d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_2d.is_empty()
    }

    /// One reparameterized draw, addressed by `(seed, stage, sample)`.
    pub fn sample_indexed(&self, seed: u64, stage: u64, sample: u64) -> NoiseSample {
        let n = self.len();
        let z_2d = standard_normals::<2>(seed, stage, sample, STREAM_2D, n);
        let z_3d = standard_normals::<3>(seed, stage, sample, STREAM_3D, n);
        let p = &self.params;
        NoiseSample {
            eps_2d: apply(&self.mu_2d, &z_2d, p.gamma, p.delta_2d),
            eps_3d: apply(&self.mu_3d, &z_3d, p.gamma, p.delta_3d),
            z_2d,
            z_3d,
        }
    }

    pub fn sample(&self, seed: u64) -> NoiseSample {
        self.sample_indexed(seed, 0, 0)
    }

    /// Deterministic inference rule: `eps = mu`, `z = 0`.
    pub fn inference_noise(&self) -> NoiseSample {
        NoiseSample {
            eps_2d: self.mu_2d.clone(),
            eps_3d: self.mu_3d.clone(),
            z_2d: vec![[0.0; 2]; self.len()],
            z_3d: vec![[0.0; 3]; self.len()],
        }
    }

    /// Chains upstream gradients w.r.t. `eps` into gradients w.r.t. `mu`,
    /// using the standard normals retained in `sample`.
    pub fn sample_gradient(
        &self,
        sample: &NoiseSample,
        upstream_2d: &[Vec2],
        upstream_3d: &[Vec3],
    ) -> Result<(Vec<Vec2>, Vec<Vec3>)> {
        let n = self.len();
        if sample.z_2d.len() != n || upstream_2d.len() != n || upstream_3d.len() != n {
            return Err(DneError::shape("sample_gradient", n, upstream_2d.len()));
        }
        let g = self.params.gamma;
        let d2 = chain(&self.mu_2d, &sample.z_2d, upstream_2d, g);
        let d3 = chain(&self.mu_3d, &sample.z_3d, upstream_3d, g);
        Ok((d2, d3))
    }
}

pub(crate) fn chain<const D: usize>(
    mu: &[[f64; D]],
    z: &[[f64; D]],
    upstream: &[[f64; D]],
    gamma: f64,
) -> Vec<[f64; D]> {
    mu.iter()
        .zip(z)
        .zip(upstream)
        .map(|((m, z), g)| std::array::from_fn(|k| g[k] * reparam_slope(m[k], z[k], gamma)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(n: usize, mu2: f64, mu3: f64, gamma: f64, delta: f64) -> NoiseField {
        NoiseField::new(
            vec![[mu2; 2]; n],
            vec![[mu3; 3]; n],
            NoiseParams {
                gamma,
                delta_2d: delta,
                delta_3d: delta,
            },
        )
        .unwrap()
    }

    fn moments(xs: impl Iterator<Item = f64>) -> (f64, f64) {
        let xs: Vec<f64> = xs.collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    }

    #[test]
    fn zero_mean_std_is_delta() {
        let f = field(100_000, 0.0, 0.0, 0.1, 0.01);
        let s = f.sample(11);
        let (_, sd) = moments(s.eps_3d.iter().map(|e| e[1]));
        assert!((0.0097..=0.0103).contains(&sd), "{sd}");
    }

    #[test]
    fn deterministic_per_seed() {
        let f = field(50, 0.3, -0.2, 0.1, 0.01);
        assert_eq!(f.sample(5), f.sample(5));
        assert_ne!(f.sample(5).eps_2d, f.sample(6).eps_2d);
    }

    #[test]
    fn monte_carlo_moments() {
        let f = field(100_000, 1.0, 1.0, 0.5, 0.1);
        let s = f.sample(99);
        let (m, sd) = moments(s.eps_2d.iter().map(|e| e[0]));
        assert!((m - 1.0).abs() < 0.01, "{m}");
        assert!((sd - 0.6).abs() < 0.006, "{sd}");
    }

    #[test]
    fn inference_is_the_mean() {
        let mut f = field(4, 0.0, 0.0, 0.1, 0.01);
        f.mu_3d[2] = [0.1, 0.2, 0.3];
        f.mu_2d[1] = [-4.0, 2.5];
        let s = f.inference_noise();
        assert_eq!(s.eps_3d[2], [0.1, 0.2, 0.3]);
        assert_eq!(s.eps_2d, f.mu_2d);
        assert!(s.z_2d.iter().flatten().all(|&z| z == 0.0));
        let zero = field(3, 0.0, 0.0, 0.1, 0.01).inference_noise();
        assert!(zero.eps_3d.iter().flatten().all(|&e| e == 0.0));
    }

    #[test]
    fn gradient_limits() {
        let f = field(3, 0.0, 0.0, 1e-300, 0.01);
        let s = f.sample(1);
        let up2 = vec![[1.5, -2.0]; 3];
        let up3 = vec![[0.25, 1.0, -3.0]; 3];
        let (g2, g3) = f.sample_gradient(&s, &up2, &up3).unwrap();
        assert_eq!(g2, up2);
        assert_eq!(g3, up3);
        // sign(0) = 0 makes the factor exactly one even with large gamma
        let f = field(3, 0.0, 0.0, 5.0, 0.01);
        let (g2, _) = f.sample_gradient(&f.sample(2), &up2, &up3).unwrap();
        assert_eq!(g2, up2);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut f = field(6, 0.4, 0.7, 0.3, 0.05);
        f.mu_2d[3] = [-0.8, 1.2];
        let s = f.sample(17);
        let h = 1e-6;
        for k in 0..2 {
            let eval = |m: f64| {
                let mut g = f.clone();
                g.mu_2d[3][k] = m;
                apply(&g.mu_2d, &s.z_2d, g.params.gamma, g.params.delta_2d)[3][k]
            };
            let m = f.mu_2d[3][k];
            let fd = (eval(m + h) - eval(m - h)) / (2.0 * h);
            let mut up = vec![[0.0; 2]; 6];
            up[3][k] = 1.0;
            let (g, _) = f.sample_gradient(&s, &up, &vec![[0.0; 3]; 6]).unwrap();
            assert!(((g[3][k] - fd) / fd).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = NoiseParams {
            gamma: 0.0,
            ..NoiseParams::default()
        };
        assert!(NoiseField::new(vec![], vec![], p).is_err());
        assert!(NoiseField::new(vec![[0.0; 2]], vec![], NoiseParams::default()).is_err());
    }
}
