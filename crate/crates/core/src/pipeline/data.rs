//! Synthetic instances: a posed template as ground truth, a corrupted copy as
//! the coarse fit, and a synthesized feature grid.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stage::RefinementState;
use crate::camera::Camera;
use crate::error::{DneError, Result};
use crate::features::{synthesize_features, FeatureGrid, SynthOptions, MIN_CHANNELS};
use crate::mesh::{make_template, mpvpe, HandMesh, FINGERS, JOINTS_PER_FINGER, NUM_JOINTS};
use crate::pack;
use crate::rng::derive;

/// Instance `i` of a dataset is held out when `i % VAL_EVERY == VAL_EVERY - 1`.
pub const VAL_EVERY: usize = 6;

/// Corruption level at which the camera noise takes its nominal magnitude.
const NOMINAL_CORRUPTION: f64 = 0.05;

const TAG_POSE: u64 = 0x9053;
const TAG_GRID: u64 = 0x6121;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_sigma: f64,
    pub noise_level: f64,
    /// Standard deviation (scene units) of the per-joint-group offsets; the
    /// global offset uses half of it and camera noise scales with it.
    pub corruption: f64,
    /// Relative scale noise of the coarse camera at nominal corruption.
    pub camera_scale_noise: f64,
    /// Translation noise (pixels) of the coarse camera at nominal corruption.
    pub camera_shift_noise: f64,
    /// Mean ground-truth camera scale, pixels per scene unit.
    pub camera_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            channels: 16,
            kernel_sigma: 1.0,
            noise_level: 0.05,
            corruption: NOMINAL_CORRUPTION,
            camera_scale_noise: 0.05,
            camera_shift_noise: 2.0,
            camera_scale: 20.0,
        }
    }
}

impl DataConfig {
    pub fn grid_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn synth_options(&self) -> SynthOptions {
        SynthOptions {
            height: self.height,
            width: self.width,
            channels: self.channels,
            kernel_sigma: self.kernel_sigma,
            noise_level: self.noise_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.channels < MIN_CHANNELS {
            return Err(DneError::Config(format!(
                "feature grid must be at least 2x2x{MIN_CHANNELS}"
            )));
        }
        let nonneg = [
            self.noise_level,
            self.corruption,
            self.camera_scale_noise,
            self.camera_shift_noise,
        ];
        if nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || !(self.kernel_sigma > 0.0)
            || !(self.camera_scale > 0.0)
        {
            return Err(DneError::Config("data magnitudes must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub gt_mesh: HandMesh,
    pub gt_camera: Camera,
    pub coarse_mesh: HandMesh,
    pub coarse_camera: Camera,
    pub grid: FeatureGrid,
}

impl Instance {
    /// The starting state: coarse mesh, its camera and `u = P(v, c)`.
    pub fn coarse_state(&self) -> Result<RefinementState> {
        RefinementState::from_coarse(self.coarse_mesh.clone(), self.coarse_camera)
    }

    pub fn coarse_mpvpe(&self) -> Result<f64> {
        mpvpe(&self.coarse_mesh, &self.gt_mesh)
    }
}

fn random_pose(rng: &mut impl Rng) -> [f64; NUM_JOINTS] {
    let mut pose = [0.0; NUM_JOINTS];
    pose[0] = rng.gen_range(-0.3..0.3);
    for f in 0..FINGERS {
        let base = 1 + f * JOINTS_PER_FINGER;
        for k in 0..3 {
            pose[base + k] = rng.gen_range(0.0..1.2);
        }
        pose[base + 3] = rng.gen_range(-0.2..0.2);
    }
    pose
}

/// Builds one instance. The coarse mesh adds a rigid offset per joint group
/// (per-axis std `corruption / sqrt 3`) and a global offset (half that); the
/// coarse camera perturbs scale and translation. Corruption 0 reproduces the
/// ground truth exactly.
pub fn make_synthetic_instance(seed: u64, cfg: &DataConfig) -> Result<Instance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[TAG_POSE]));
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };

    let mut pose_rng = ChaCha8Rng::seed_from_u64(derive(seed, &[TAG_POSE, 1]));
    let gt_mesh = make_template(seed, &random_pose(&mut pose_rng));

    let sx = cfg.camera_scale * (0.05 * normal()).exp();
    let sy = sx * (0.02 * normal()).exp();
    let tx = (cfg.width - 1) as f64 / 2.0 + normal();
    let ty = (cfg.height - 1) as f64 / 2.0 + normal();
    let gt_camera = Camera::new(sx, sy, tx, ty);

    let axis_std = cfg.corruption / 3f64.sqrt();
    let global: [f64; 3] = std::array::from_fn(|_| 0.5 * axis_std * normal());
    let mut vertices = gt_mesh.vertices().to_vec();
    for group in gt_mesh.joint_groups() {
        let offset: [f64; 3] = std::array::from_fn(|_| axis_std * normal());
        for &i in group {
            (0..3).for_each(|k| vertices[i][k] += offset[k] + global[k]);
        }
    }
    let coarse_mesh = gt_mesh.with_vertices(vertices)?;

    let ratio = cfg.corruption / NOMINAL_CORRUPTION;
    let factor = 1.0 + cfg.camera_scale_noise * ratio * normal();
    let coarse_camera = Camera::new(
        sx * factor,
        sy * factor,
        tx + cfg.camera_shift_noise * ratio * normal(),
        ty + cfg.camera_shift_noise * ratio * normal(),
    );

    let grid = synthesize_features(
        &gt_mesh,
        &coarse_mesh,
        &gt_camera,
        &coarse_camera,
        &cfg.synth_options(),
        derive(seed, &[TAG_GRID]),
    )?;
    Ok(Instance {
        gt_mesh,
        gt_camera,
        coarse_mesh,
        coarse_camera,
        grid,
    })
}

/// Seed of instance `index` in a dataset generated from `seed`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    derive(seed, &[index as u64])
}

pub fn make_dataset(seed: u64, count: usize, cfg: &DataConfig) -> Result<Vec<Instance>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| make_synthetic_instance(instance_seed(seed, i), cfg))
        .collect()
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| DneError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    gt: Camera,
    coarse: Camera,
}

/// `gt_mesh.json`, `coarse_mesh.json`, `camera.json` and `features.dnepack`.
pub fn save_instance(dir: impl AsRef<Path>, inst: &Instance) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_atomic(dir.join("gt_mesh.json"), inst.gt_mesh.to_json()?.as_bytes())?;
    write_atomic(dir.join("coarse_mesh.json"), inst.coarse_mesh.to_json()?.as_bytes())?;
    let cams = CameraFile {
        gt: inst.gt_camera,
        coarse: inst.coarse_camera,
    };
    write_atomic(dir.join("camera.json"), serde_json::to_string_pretty(&cams)?.as_bytes())?;
    write_atomic(dir.join("features.dnepack"), &pack::encode_grid(&inst.grid)?)?;
    Ok(())
}

pub fn load_instance(dir: impl AsRef<Path>) -> Result<Instance> {
    let dir = dir.as_ref();
    let gt_mesh = HandMesh::load(dir.join("gt_mesh.json"))?;
    let coarse_mesh = HandMesh::load(dir.join("coarse_mesh.json"))?;
    if gt_mesh.topology_hash() != coarse_mesh.topology_hash() {
        return Err(DneError::InvalidMesh("coarse and ground-truth topologies differ".into()));
    }
    let cams: CameraFile = serde_json::from_str(&fs::read_to_string(dir.join("camera.json"))?)?;
    let grid = pack::decode_grid(&fs::read(dir.join("features.dnepack"))?)?;
    Ok(Instance {
        gt_mesh,
        gt_camera: cams.gt,
        coarse_mesh,
        coarse_camera: cams.coarse,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_corruption_is_ground_truth() {
        let cfg = DataConfig {
            corruption: 0.0,
            ..Default::default()
        };
        let inst = make_synthetic_instance(11, &cfg).unwrap();
        assert_eq!(inst.coarse_mesh, inst.gt_mesh);
        assert_eq!(inst.coarse_camera, inst.gt_camera);
        assert_eq!(inst.coarse_mpvpe().unwrap(), 0.0);
    }

    #[test]
    fn reproducible() {
        let cfg = DataConfig::default();
        assert_eq!(
            make_synthetic_instance(5, &cfg).unwrap(),
            make_synthetic_instance(5, &cfg).unwrap()
        );
        assert_ne!(
            make_synthetic_instance(5, &cfg).unwrap().coarse_mesh,
            make_synthetic_instance(6, &cfg).unwrap().coarse_mesh
        );
    }

    #[test]
    fn projections_land_in_the_grid() {
        let cfg = DataConfig::default();
        for seed in 0..20 {
            let inst = make_synthetic_instance(seed, &cfg).unwrap();
            for uv in inst.gt_camera.project_all(inst.gt_mesh.vertices()) {
                assert!((0.0..31.0).contains(&uv[0]) && (0.0..31.0).contains(&uv[1]), "{uv:?}");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("dne-data-{}", std::process::id()));
        let inst = make_synthetic_instance(3, &DataConfig::default()).unwrap();
        save_instance(&dir, &inst).unwrap();
        let back = load_instance(&dir).unwrap();
        fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back, inst);
    }
}
