//! Experiment configuration: a TOML file with `[data]`, `[model]`,
//! `[train.source]` / `[train.da]` / `[train.kdde]`, and `[eval]` sections.
//! Every field has a toy-experiment default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ude_core::losses::KdVariant;
use ude_core::train::{LambdaMode, LrDecay, Method, TrainConfig};
use ude_core::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    /// Must agree with the serde field defaults, so it is derived from them.
    fn default() -> Self {
        toml::from_str("").expect("empty config must deserialize")
    }
}

fn default_seed() -> u64 {
    7
}

fn default_out_dir() -> String {
    "runs".to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_n_pos")]
    pub n_pos: usize,
    #[serde(default = "default_n_neg")]
    pub n_neg: usize,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_shift_dx")]
    pub shift_dx: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_data_dir")]
    pub dir: String,
}

fn default_n_pos() -> usize {
    100
}
fn default_n_neg() -> usize {
    300
}
fn default_noise_sd() -> f64 {
    0.05
}
fn default_shift_dx() -> f64 {
    0.4
}
fn default_train_fraction() -> f64 {
    0.5
}
fn default_data_dir() -> String {
    "data".to_string()
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_pos: default_n_pos(),
            n_neg: default_n_neg(),
            noise_sd: default_noise_sd(),
            shift_dx: default_shift_dx(),
            train_fraction: default_train_fraction(),
            dir: default_data_dir(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: String,
}

fn default_arch() -> String {
    "toy_backbone".to_string()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: default_arch(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub source: StageOverrides,
    #[serde(default)]
    pub da: StageOverrides,
    #[serde(default)]
    pub kdde: StageOverrides,
}

/// Per-stage overrides on top of the stage's toy defaults. `lambda` accepts a
/// number or the string `"dynamic"`; `lr_decay.factor = 1.0` disables decay.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverrides {
    pub method: Option<String>,
    pub lambda: Option<LambdaSpec>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub lr_decay: Option<LrDecaySpec>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub kd_variant: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Value(f64),
    Mode(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecaySpec {
    pub step_epochs: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_domains")]
    pub domains: Vec<String>,
    #[serde(default)]
    pub retrieval_n: Vec<usize>,
    #[serde(default)]
    pub boundary: Option<BoundarySpec>,
}

fn default_domains() -> Vec<String> {
    vec!["source".to_string(), "target".to_string()]
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            domains: default_domains(),
            retrieval_n: Vec::new(),
            boundary: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

/// Training stages a `train` invocation can run.
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub enum Stage {
    Source,
    Da,
    Kdde,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "source" => Ok(Stage::Source),
            "da" => Ok(Stage::Da),
            "kdde" => Ok(Stage::Kdde),
            other => Err(Error::Config(format!(
                "unknown stage '{other}' (expected source, da, or kdde)"
            ))),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.arch != "toy_backbone" {
            return Err(Error::Config(format!(
                "unknown model.arch '{}' (only 'toy_backbone' is available)",
                self.model.arch
            )));
        }
        if self.data.n_pos == 0 || self.data.n_neg == 0 {
            return Err(Error::Config(
                "data.n_pos and data.n_neg must be positive".into(),
            ));
        }
        if self.data.noise_sd < 0.0 {
            return Err(Error::Config("data.noise_sd must be non-negative".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(
                "data.train_fraction must be in (0, 1)".into(),
            ));
        }
        for domain in &self.eval.domains {
            if domain != "source" && domain != "target" {
                return Err(Error::Config(format!(
                    "eval.domains entry '{domain}' is not 'source' or 'target'"
                )));
            }
        }
        if let Some(b) = &self.eval.boundary {
            if b.resolution == 0 {
                return Err(Error::Config(
                    "eval.boundary.resolution must be positive".into(),
                ));
            }
        }
        // each stage must resolve cleanly
        self.train_config(Stage::Source, self.seed)?;
        self.train_config(Stage::Da, self.seed)?;
        self.train_config(Stage::Kdde, self.seed)?;
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.data.dir)
    }

    /// Resolve the effective training configuration for a stage: the stage's
    /// toy defaults overlaid with any `[train.<stage>]` keys.
    pub fn train_config(&self, stage: Stage, seed: u64) -> Result<TrainConfig> {
        let (mut cfg, overrides) = match stage {
            Stage::Source => (TrainConfig::toy_source(seed), &self.train.source),
            Stage::Da => (TrainConfig::toy_da(Method::Cdan, seed), &self.train.da),
            Stage::Kdde => (TrainConfig::toy_kdde(seed), &self.train.kdde),
        };
        if let Some(m) = &overrides.method {
            cfg.method = parse_method(m)?;
            if stage == Stage::Source && cfg.method != Method::Source {
                return Err(Error::Config("train.source.method must be 'source'".into()));
            }
            if stage == Stage::Da && cfg.method == Method::Source {
                return Err(Error::Config(
                    "train.da.method must be a domain-adaptation method".into(),
                ));
            }
        }
        if let Some(l) = &overrides.lambda {
            cfg.lambda = match l {
                LambdaSpec::Value(v) => LambdaMode::Constant(*v),
                LambdaSpec::Mode(s) if s == "dynamic" => LambdaMode::Dynamic,
                LambdaSpec::Mode(s) => {
                    return Err(Error::Config(format!(
                        "lambda must be a number or \"dynamic\", got \"{s}\""
                    )));
                }
            };
        }
        if let Some(v) = overrides.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = overrides.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = overrides.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(d) = &overrides.lr_decay {
            cfg.lr_decay = Some(LrDecay {
                step_epochs: d.step_epochs,
                factor: d.factor,
            });
        }
        if let Some(v) = overrides.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = overrides.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(k) = &overrides.kd_variant {
            cfg.kd_variant = parse_kd_variant(k)?;
        }
        cfg.validate(true)?;
        Ok(cfg)
    }
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "source" => Ok(Method::Source),
        "ddc" => Ok(Method::Ddc),
        "dann" => Ok(Method::Dann),
        "cdan" => Ok(Method::Cdan),
        "cdan_plus" => Ok(Method::CdanPlus),
        other => Err(Error::Config(format!(
            "unknown method '{other}' (expected source, ddc, dann, cdan, or cdan_plus)"
        ))),
    }
}

fn parse_kd_variant(s: &str) -> Result<KdVariant> {
    match s {
        "kl" => Ok(KdVariant::Kl),
        "ce" => Ok(KdVariant::Ce),
        "l2" => Ok(KdVariant::L2),
        other => Err(Error::Config(format!(
            "unknown kd_variant '{other}' (expected kl, ce, or l2)"
        ))),
    }
}
