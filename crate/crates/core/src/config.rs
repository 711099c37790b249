//! Experiment configuration: one TOML document, every field defaulted, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{generate_split, load_small_images, Dataset, DatasetKind, GeneratorParams, ImageSource, Split};
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::mi::MiConfig;
use crate::model::SubnetworkSplit;
use crate::probe::ProbeTrainConfig;
use crate::protocols::{LambdaConfig, NetworkSpec, RhoLearningConfig};
use crate::second_order::PowerIterConfig;
use crate::training::{EvalAttack, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Alg1,
    Alg2,
    Diagnostics,
    Bounds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub generator: GeneratorParams,
    pub n_train: usize,
    pub n_test: usize,
    /// Image files replace the generator when both are set.
    pub train_images: Option<ImageSource>,
    pub test_images: Option<ImageSource>,
    pub image_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: GeneratorParams {
                noise: 0.5,
                dim: 1,
                nonrobust_dims: 10,
                ..GeneratorParams::default()
            },
            n_train: 4000,
            n_test: 2000,
            train_images: None,
            test_images: None,
            image_limit: None,
        }
    }
}

impl DatasetConfig {
    /// Feature width and class count of the generated data; `None` for image files.
    pub fn generated_shape(&self) -> Option<(usize, usize)> {
        if self.train_images.is_some() || self.test_images.is_some() {
            return None;
        }
        let g = &self.generator;
        let width = match g.kind {
            DatasetKind::TwoGaussians => g.dim + g.nonrobust_dims,
            _ => 2,
        };
        let classes = match g.kind {
            DatasetKind::Spirals => g.classes,
            _ => 2,
        };
        Some((width, classes))
    }

    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match (&self.train_images, &self.test_images) {
            (Some(tr), Some(te)) => {
                let mut train = load_small_images(tr, self.image_limit)?;
                let mut test = load_small_images(te, self.image_limit)?;
                train.split = Split::Train;
                test.split = Split::Test;
                Ok((train, test))
            }
            (None, None) => generate_split(&self.generator, self.n_train, self.n_test, seed),
            _ => Err(Error::Config("train_images and test_images must be set together".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Diagnose this checkpoint instead of the pretrained semirobust network.
    pub checkpoint: Option<PathBuf>,
}

#[allow(clippy::derivable_impls)]
impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig { checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    /// Random tail perturbations compared against the bounds.
    pub perturbations: usize,
    /// L2 length of each tail perturbation.
    pub perturbation_norm: f64,
    /// Multiplier on the Hessian bound allowed for third-order Taylor terms.
    pub taylor_slack: f64,
    pub power: PowerIterConfig,
    pub stationarity_tol: f64,
    /// Full-batch gradient steps on the tail before measuring, to approach a stationary point.
    pub settle_steps: usize,
    pub settle_lr: f64,
    pub settle_tol: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            perturbations: 100,
            perturbation_norm: 1e-2,
            taylor_slack: 1.1,
            power: PowerIterConfig::default(),
            stationarity_tol: 1e-3,
            settle_steps: 3000,
            settle_lr: 0.05,
            settle_tol: 1e-5,
        }
    }
}

/// PGD at ε = 0.5 without range clamping, sized for the unit-noise synthetic data.
pub fn synthetic_attack() -> AttackConfig {
    AttackConfig {
        epsilon: 0.5,
        step_size: 0.125,
        clamp_inputs: false,
        ..AttackConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Pipeline run when the CLI gets no subcommand.
    pub algorithm: Algorithm,
    /// Head size `a`; the tail is layers `a+1..=n`.
    pub a: usize,
    pub loss: LossSpec,
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub training: TrainConfig,
    pub train_attack: AttackConfig,
    /// The first PGD entry doubles as the attack for every ρ-learning measurement.
    pub eval_attacks: Vec<EvalAttack>,
    pub mi: MiConfig,
    pub probes: ProbeTrainConfig,
    pub rho: RhoLearningConfig,
    pub lambda: LambdaConfig,
    pub bounds: BoundsConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            algorithm: Algorithm::Alg1,
            a: 3,
            loss: LossSpec::cross_entropy(),
            dataset: DatasetConfig::default(),
            network: NetworkSpec::default(),
            training: TrainConfig::default(),
            train_attack: synthetic_attack(),
            eval_attacks: vec![EvalAttack {
                kind: AttackKind::Pgd,
                config: synthetic_attack(),
            }],
            mi: MiConfig::default(),
            probes: ProbeTrainConfig::default(),
            rho: RhoLearningConfig::default(),
            lambda: LambdaConfig::default(),
            bounds: BoundsConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| e.in_phase(format!("config {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if let Some((width, classes)) = self.dataset.generated_shape() {
            let dims = &self.network.dims;
            if dims[0] != width {
                return Err(Error::Config(format!("network input width {} but the dataset has {width} features", dims[0])));
            }
            let out = dims[dims.len() - 1];
            if out != classes && !(out == 1 && classes == 2) {
                return Err(Error::Config(format!("network output width {out} but the dataset has {classes} classes")));
            }
        }
        SubnetworkSplit::new(self.a, self.network.depth())?;
        self.training.validate()?;
        self.train_attack.validate()?;
        for e in &self.eval_attacks {
            e.config.validate()?;
        }
        self.mi.validate()?;
        self.rho_config().validate(self.network.depth())?;
        self.loss.validate()?;
        if self.bounds.perturbation_norm <= 0.0 || self.bounds.taylor_slack < 1.0 {
            return Err(Error::Config("bounds need perturbation_norm > 0 and taylor_slack >= 1".into()));
        }
        if self.lambda.batch_size == 0 {
            return Err(Error::Config("lambda.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// ρ-learning settings with the experiment's head size.
    pub fn rho_config(&self) -> RhoLearningConfig {
        RhoLearningConfig {
            a: self.a,
            ..self.rho.clone()
        }
    }

    pub fn lambda_config(&self) -> LambdaConfig {
        LambdaConfig {
            a: self.a,
            ..self.lambda.clone()
        }
    }

    /// Attack for ρ-learning measurements: the first PGD evaluation attack,
    /// else the training attack.
    pub fn measurement_attack(&self) -> &AttackConfig {
        self.eval_attacks
            .iter()
            .find(|e| e.kind == AttackKind::Pgd)
            .map_or(&self.train_attack, |e| &e.config)
    }

    /// SHA-256 of `blob <len>\0<canonical TOML>`, as git hashes file contents.
    pub fn content_hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// `output_dir/<first 16 hex digits of the content hash>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(&self.content_hash()?[..16]))
    }
}
