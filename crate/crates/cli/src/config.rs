//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use certbnn::attacks::AttackConfig;
use certbnn::data::{head, load_idx_dataset, make_toy_dataset, ToyKind};
use certbnn::inference::HmcConfig;
use certbnn::interval_bound::ClipRange;
use certbnn::robust_likelihood::{EpsilonDistribution, EpsilonLaw};
use certbnn::training::{SwagConfig, TrainConfig};
use certbnn::{Dataset, NetworkArchitecture};
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub p_eps: PEpsSection,
    #[serde(default)]
    pub ramp: RampSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub swag: SwagSection,
    #[serde(default)]
    pub hmc: HmcSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Either IDX file pairs or a generated toy problem.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Out-of-distribution set for `uncertainty`.
    pub ood_images: Option<PathBuf>,
    pub ood_labels: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// `two_gaussians` or `xor`; replaces the IDX files.
    pub toy: Option<String>,
    #[serde(default = "default_toy_n")]
    pub toy_train: usize,
    #[serde(default = "default_toy_n")]
    pub toy_test: usize,
}

fn default_classes() -> usize {
    10
}

fn default_toy_n() -> usize {
    200
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128] }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: String,
    pub likelihood: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub prior_scaling: f64,
    /// Posterior temperature for bbb and natgrad.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Clip perturbed inputs to [0, 1].
    pub clip: bool,
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            method: "natgrad".into(),
            likelihood: "standard".into(),
            epochs: 15,
            batch_size: 128,
            learning_rate: 0.01,
            lr_decay: 0.0,
            prior_scaling: 1.0,
            temperature: 1.0,
            clip: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PEpsSection {
    /// `dirac0`, `discrete`, `rayleigh` or `exponential`.
    pub kind: String,
    pub lambda: f64,
    pub eta: f64,
    pub mc_samples: usize,
}

impl Default for PEpsSection {
    fn default() -> Self {
        Self {
            kind: "discrete".into(),
            lambda: 0.25,
            eta: 0.1,
            mc_samples: 10,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSection {
    pub warmup_epochs: f64,
    pub overshoot: f64,
}

impl Default for RampSection {
    fn default() -> Self {
        Self {
            warmup_epochs: 0.0,
            overshoot: 0.10,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub steps: usize,
    pub step_size: Option<f64>,
    pub restarts: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: None,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwagSection {
    pub warmup_epochs: usize,
    pub collect_every: usize,
}

impl Default for SwagSection {
    fn default() -> Self {
        let d = SwagConfig::default();
        Self {
            warmup_epochs: d.warmup_epochs,
            collect_every: d.collect_every,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcSection {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn_in: usize,
    pub burn_in_leapfrog_steps: usize,
    pub samples: usize,
    pub warm_start_epochs: usize,
}

impl Default for HmcSection {
    fn default() -> Self {
        let d = HmcConfig::default();
        Self {
            step_size: d.step_size,
            leapfrog_steps: d.leapfrog_steps,
            burn_in: d.burn_in,
            burn_in_leapfrog_steps: d.burn_in_leapfrog_steps,
            samples: d.samples,
            warm_start_epochs: 10,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub epsilon: f64,
    /// Posterior samples `N`; defaults to 25 for sample chains, 100 otherwise.
    pub samples: Option<usize>,
    pub radius_tol: f64,
    /// Test points used by `radius`.
    pub radius_points: usize,
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            samples: None,
            radius_tol: 1e-3,
            radius_points: 100,
            bins: 20,
        }
    }
}

fn field<T: std::str::FromStr<Err = certbnn::Error>>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|e: certbnn::Error| CliError::Config(format!("{key}: {e}")))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &span_hint(&e)))
    }

    pub fn clip(&self) -> Option<ClipRange> {
        self.train.clip.then_some(ClipRange::UNIT)
    }

    pub fn p_eps(&self) -> Result<EpsilonDistribution, CliError> {
        let p = &self.p_eps;
        let law = match p.kind.as_str() {
            "dirac0" => EpsilonLaw::Dirac0,
            "discrete" => EpsilonLaw::Discrete {
                lambda: p.lambda,
                eta: p.eta,
            },
            "rayleigh" => EpsilonLaw::Rayleigh { scale: p.eta },
            "exponential" => EpsilonLaw::Exponential { scale: p.eta },
            other => {
                return Err(CliError::Config(format!(
                    "p_eps.kind: unknown value {other:?} (expected dirac0, discrete, rayleigh or exponential)"
                )))
            }
        };
        EpsilonDistribution::new(law, p.mc_samples).map_err(|e| CliError::Config(format!("p_eps: {e}")))
    }

    pub fn attack(&self, epsilon: f64, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon,
            steps: self.attack.steps,
            step_size: self.attack.step_size,
            clip: self.clip(),
            restarts: self.attack.restarts,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let mut cfg = TrainConfig::new(field("train.method", &t.method)?, field("train.likelihood", &t.likelihood)?);
        cfg.p_eps = self.p_eps()?;
        cfg.warmup_epochs = self.ramp.warmup_epochs;
        cfg.overshoot = self.ramp.overshoot;
        cfg.attack = self.attack(0.0, seed);
        cfg.clip = self.clip();
        cfg.epochs = t.epochs;
        cfg.batch_size = t.batch_size;
        cfg.learning_rate = t.learning_rate;
        cfg.lr_decay = t.lr_decay;
        cfg.prior_scaling = t.prior_scaling;
        cfg.temperature = t.temperature;
        cfg.swag = SwagConfig {
            warmup_epochs: self.swag.warmup_epochs,
            collect_every: self.swag.collect_every,
        };
        let h = &self.hmc;
        cfg.hmc = HmcConfig {
            step_size: h.step_size,
            leapfrog_steps: h.leapfrog_steps,
            burn_in: h.burn_in,
            burn_in_leapfrog_steps: h.burn_in_leapfrog_steps,
            samples: h.samples,
            mass: None,
        };
        cfg.hmc_warm_start_epochs = h.warm_start_epochs;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self, data: &Dataset) -> Result<NetworkArchitecture, CliError> {
        Ok(NetworkArchitecture::mlp(data.input_dim(), &self.model.hidden, data.class_count())?)
    }

    fn toy(&self, n: usize, seed: u64) -> Result<Option<Dataset>, CliError> {
        let Some(kind) = &self.data.toy else { return Ok(None) };
        let kind = match kind.as_str() {
            "two_gaussians" => ToyKind::TwoGaussians,
            "xor" => ToyKind::Xor,
            other => {
                return Err(CliError::Config(format!(
                    "data.toy: unknown value {other:?} (expected two_gaussians or xor)"
                )))
            }
        };
        Ok(Some(make_toy_dataset(kind, n, seed)?))
    }

    fn idx(&self, images: &Option<PathBuf>, labels: &Option<PathBuf>, what: &str, limit: Option<usize>) -> Result<Dataset, CliError> {
        let (Some(i), Some(l)) = (images, labels) else {
            return Err(CliError::Config(format!("data.{what}_images and data.{what}_labels are required")));
        };
        let d = load_idx_dataset(i, l, self.data.classes)?;
        Ok(match limit {
            Some(n) if n < d.len() => head(&d, n)?,
            _ => d,
        })
    }

    pub fn train_data(&self) -> Result<Dataset, CliError> {
        if let Some(d) = self.toy(self.data.toy_train, 1)? {
            return Ok(d);
        }
        self.idx(&self.data.train_images, &self.data.train_labels, "train", self.data.train_limit)
    }

    pub fn test_data(&self) -> Result<Dataset, CliError> {
        if let Some(d) = self.toy(self.data.toy_test, 2)? {
            return Ok(d);
        }
        self.idx(&self.data.test_images, &self.data.test_labels, "test", self.data.test_limit)
    }

    pub fn ood_data(&self) -> Result<Dataset, CliError> {
        self.idx(&self.data.ood_images, &self.data.ood_labels, "ood", self.data.test_limit)
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\ntoy = \"xor\"\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let c = Config::parse(MINIMAL).unwrap();
        assert_eq!(c.train.method, "natgrad");
        assert_eq!(c.eval.epsilon, 0.1);
        let t = c.train_config(7).unwrap();
        assert_eq!(t.seed, 7);
        assert_eq!(t.clip, Some(ClipRange::UNIT));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::parse("[data]\ntoy = \"xor\"\n[train]\nmethodd = \"bbb\"\n").unwrap_err();
        assert!(err.to_string().contains("methodd"), "{err}");
        let err = Config::parse("[data]\ntoy = \"xor\"\n[train]\nmethod = \"sgld\"\nlikelihood=\"ibp\"\nepochs=1\nbatch_size=4\nlearning_rate=0.1\nlr_decay=0\nprior_scaling=1\nclip=true\n")
            .unwrap()
            .train_config(0)
            .unwrap_err();
        assert!(err.to_string().contains("train.method"), "{err}");
        let mut c = Config::parse(MINIMAL).unwrap();
        c.p_eps.kind = "uniform".into();
        assert!(c.p_eps().unwrap_err().to_string().contains("p_eps.kind"));
    }

    #[test]
    fn shipped_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_ibp.toml");
        let c = Config::load(&path).unwrap();
        c.train_config(c.seed).unwrap();
    }
}
