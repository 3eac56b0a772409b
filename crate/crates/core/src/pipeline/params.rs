use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::DataConfig;
use crate::camera::RidgeConfig;
use crate::error::{DneError, Result};
use crate::features::CoordRegressor;
use crate::neural::{Activation, Dense, Mlp};
use crate::noise::NoiseParams;
use crate::pack;
use crate::rng::derive;

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Rescale the minibatch gradient to at most this global norm; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.005,
            lr_decay: 0.5,
            decay_every: 8,
            grad_clip: 0.0,
        }
    }
}

/// Everything a run needs besides the seed; the on-disk config mirrors it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modules: usize,
    pub samples: usize,
    pub gamma: f64,
    pub delta_2d: f64,
    pub delta_3d: f64,
    pub xi: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    /// Scene units per unit of 3D-branch output.
    pub psi_scale: f64,
    pub hidden: usize,
    pub voxel_resolution: usize,
    pub use_2d: bool,
    pub use_3d: bool,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let noise = NoiseParams::default();
        PipelineConfig {
            modules: 3,
            samples: 4,
            gamma: noise.gamma,
            delta_2d: noise.delta_2d,
            delta_3d: noise.delta_3d,
            xi: RidgeConfig::default().xi,
            lambda_2d: 1.0,
            lambda_3d: 20.0,
            psi_scale: 0.05,
            hidden: 64,
            voxel_resolution: 8,
            use_2d: true,
            use_3d: true,
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.settings()?;
        let bad = |what: &str| Err(DneError::Config(what.to_string()));
        if self.modules == 0 {
            return bad("modules must be at least 1");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if !(self.lambda_2d > 0.0 && self.lambda_3d > 0.0) {
            return bad("loss weights must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate >= 0.0) || !(t.lr_decay > 0.0) || !(t.grad_clip >= 0.0) {
            return bad("invalid training schedule");
        }
        self.data.validate()
    }

    pub fn settings(&self) -> Result<StageSettings> {
        let noise = NoiseParams {
            gamma: self.gamma,
            delta_2d: self.delta_2d,
            delta_3d: self.delta_3d,
        };
        noise.validate()?;
        if self.voxel_resolution == 0 {
            return Err(DneError::Config("voxel resolution must be positive".into()));
        }
        if !(self.psi_scale > 0.0 && self.psi_scale.is_finite()) {
            return Err(DneError::Config("psi_scale must be positive".into()));
        }
        Ok(StageSettings {
            noise,
            ridge: RidgeConfig::new(self.xi)?,
            voxel_resolution: self.voxel_resolution,
            psi_scale: self.psi_scale,
            use_2d: self.use_2d,
            use_3d: self.use_3d,
        })
    }
}

/// Hyperparameters shared by all stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSettings {
    pub noise: NoiseParams,
    pub ridge: RidgeConfig,
    pub voxel_resolution: usize,
    /// `mu_3d = psi_scale * psi(...)`.
    pub psi_scale: f64,
    /// Ablation switches: a disabled branch contributes zero noise.
    pub use_2d: bool,
    pub use_3d: bool,
}

impl Default for StageSettings {
    fn default() -> Self {
        PipelineConfig::default().settings().expect("defaults are valid")
    }
}

/// Learned weights of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DneStageParams {
    /// `2C -> 2`, pixels.
    pub phi: Mlp,
    /// `3C -> 3`, in units of `psi_scale` scene units.
    pub psi: Mlp,
    pub regressor: CoordRegressor,
}

fn zero_output_layer(mlp: &mut Mlp) {
    let last = mlp.layers_mut().last_mut().expect("non-empty");
    last.weight.fill(0.0);
    last.bias.fill(0.0);
}

impl DneStageParams {
    /// Glorot-initialised hidden layers and regressor; the `phi`/`psi` output
    /// layers start at zero so an untrained stage leaves `v` and `u` unchanged.
    pub fn init(vertices: usize, grid_shape: [usize; 3], hidden: usize, seed: u64) -> Result<Self> {
        let [h, w, c] = grid_shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = Mlp::init(&[2 * c, hidden, 2], &mut rng)?;
        let mut psi = Mlp::init(&[3 * c, hidden, 3], &mut rng)?;
        zero_output_layer(&mut phi);
        zero_output_layer(&mut psi);
        let centre = [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0];
        let regressor = CoordRegressor::init(vertices, h * w, c, centre, &mut rng);
        Ok(DneStageParams { phi, psi, regressor })
    }

    pub fn zeros_like(&self) -> Self {
        let r = &self.regressor;
        DneStageParams {
            phi: self.phi.zeros_like(),
            psi: self.psi.zeros_like(),
            regressor: CoordRegressor::zeros(r.spatial.nrows(), r.spatial.ncols(), r.head.ncols()),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out = Vec::new();
        for (name, values, shape) in self.phi.tensors() {
            out.push((format!("phi.{name}"), values, shape));
        }
        for (name, values, shape) in self.psi.tensors() {
            out.push((format!("psi.{name}"), values, shape));
        }
        for (name, values, shape) in self.regressor.tensors() {
            out.push((format!("regressor.{name}"), values, shape));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.phi.tensors_mut();
        out.extend(self.psi.tensors_mut());
        out.extend(self.regressor.tensors_mut());
        out
    }
}

/// All stages plus the hyperparameters needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct DnePipelineParams {
    pub stages: Vec<DneStageParams>,
    pub settings: StageSettings,
    /// Samples per stage in training.
    pub samples: usize,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
}

impl DnePipelineParams {
    pub fn init(config: &PipelineConfig, vertices: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.data.grid_shape();
        let stages = (0..config.modules)
            .map(|m| DneStageParams::init(vertices, grid, config.hidden, derive(seed, &[0x1417, m as u64])))
            .collect::<Result<_>>()?;
        Ok(DnePipelineParams {
            stages,
            settings: config.settings()?,
            samples: config.samples,
            lambda_2d: config.lambda_2d,
            lambda_3d: config.lambda_3d,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn zeros_like(&self) -> Self {
        DnePipelineParams {
            stages: self.stages.iter().map(DneStageParams::zeros_like).collect(),
            ..self.clone_settings()
        }
    }

    fn clone_settings(&self) -> Self {
        DnePipelineParams {
            stages: Vec::new(),
            settings: self.settings,
            samples: self.samples,
            lambda_2d: self.lambda_2d,
            lambda_3d: self.lambda_3d,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out = Vec::new();
        for (m, s) in self.stages.iter().enumerate() {
            for (name, values, shape) in s.tensors() {
                out.push((format!("stage{m}.{name}"), values, shape));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stages.iter_mut().flat_map(|s| s.tensors_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.1.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() {
            return Err(DneError::shape("parameter sets", mine.len(), theirs.len()));
        }
        for (a, (_, b, _)) in mine.into_iter().zip(theirs) {
            if a.len() != b.len() {
                return Err(DneError::shape("parameter tensor", a.len(), b.len()));
            }
            a.iter_mut().zip(b).for_each(|(a, b)| *a += scale * b);
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.1.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Serialises into a `checkpoint` container; `config` is stored verbatim.
    pub fn to_checkpoint(&self, config: &PipelineConfig) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "pipeline": config,
            "settings": self.settings,
            "samples": self.samples,
            "lambda_2d": self.lambda_2d,
            "lambda_3d": self.lambda_3d,
            "modules": self.stages.len(),
        });
        pack::encode_checkpoint(&self.tensors(), header)
    }

    /// Inverse of [`Self::to_checkpoint`]; tensor shapes come from the header.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, PipelineConfig)> {
        let (header, tensors) = pack::decode_checkpoint(bytes)?;
        let config: PipelineConfig = serde_json::from_value(header["pipeline"].clone())?;
        let settings: StageSettings = serde_json::from_value(header["settings"].clone())?;
        let modules = header["modules"]
            .as_u64()
            .ok_or_else(|| DneError::Format("checkpoint lacks a module count".into()))? as usize;
        let mut tensors = tensors.into_iter();
        let mut next = |want: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let (entry, values) = tensors
                .next()
                .ok_or_else(|| DneError::Format(format!("checkpoint is missing {want}")))?;
            if entry.name != want {
                return Err(DneError::Format(format!("expected tensor {want}, found {}", entry.name)));
            }
            Ok((entry.shape, values))
        };
        let mut stages = Vec::with_capacity(modules);
        for m in 0..modules {
            let mut mlp = |which: &str| -> Result<Mlp> {
                let mut layers = Vec::new();
                for i in 0..2 {
                    let (ws, w) = next(&format!("stage{m}.{which}.{i}.weight"))?;
                    let (_, b) = next(&format!("stage{m}.{which}.{i}.bias"))?;
                    let act = if i == 0 { Activation::Relu } else { Activation::None };
                    let weight = Array2::from_shape_vec((ws[0], ws[1]), w)
                        .map_err(|e| DneError::Format(e.to_string()))?;
                    layers.push(Dense::new(weight, Array1::from_vec(b), act)?);
                }
                Mlp::new(layers)
            };
            let phi = mlp("phi")?;
            let psi = mlp("psi")?;
            let matrix = |(s, v): (Vec<usize>, Vec<f64>)| -> Result<Array2<f64>> {
                Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| DneError::Format(e.to_string()))
            };
            let spatial = matrix(next(&format!("stage{m}.regressor.spatial"))?)?;
            let spatial_bias = Array1::from_vec(next(&format!("stage{m}.regressor.spatial_bias"))?.1);
            let head = matrix(next(&format!("stage{m}.regressor.head"))?)?;
            let head_bias = Array1::from_vec(next(&format!("stage{m}.regressor.head_bias"))?.1);
            stages.push(DneStageParams {
                phi,
                psi,
                regressor: CoordRegressor {
                    spatial,
                    spatial_bias,
                    head,
                    head_bias,
                },
            });
        }
        if next("<end>").is_ok() {
            return Err(DneError::Format("checkpoint has extra tensors".into()));
        }
        let samples = header["samples"].as_u64().unwrap_or(config.samples as u64) as usize;
        let params = DnePipelineParams {
            stages,
            settings,
            samples,
            lambda_2d: header["lambda_2d"].as_f64().unwrap_or(config.lambda_2d),
            lambda_3d: header["lambda_3d"].as_f64().unwrap_or(config.lambda_3d),
        };
        Ok((params, config))
    }
}
