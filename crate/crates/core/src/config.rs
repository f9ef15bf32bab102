//! Flat `section.key=value` run configuration.
//!
//! Files hold one assignment per line; blank lines and `#` comments are
//! ignored. Later assignments win, so command-line overrides are applied after
//! the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{DgdmError, Result};
use crate::eval::DEFAULT_THRESHOLD_FRACTION;
use crate::layer::DgdmConfig;
use crate::nn::{BackboneSpec, StageSpec, TrainConfig};
use crate::sagd::BlockSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Folder,
}

impl DataSource {
    fn as_str(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Folder => "folder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training folder when `source` is `folder`.
    pub root: Option<PathBuf>,
    /// Test folder when `source` is `folder`.
    pub test_root: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub distractors: bool,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            root: None,
            test_root: None,
            n_train: 2000,
            n_test: 500,
            image_size: 64,
            n_classes: 3,
            noise: 0.05,
            distractors: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stages: Vec<StageSpec>,
    pub insertion_points: Vec<usize>,
    pub input_mean: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let toy = BackboneSpec::toy(1);
        ModelConfig {
            stages: toy.stages,
            insertion_points: toy.dgdm_insertion_points,
            input_mean: toy.input_mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub threshold_fraction: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_fraction: DEFAULT_THRESHOLD_FRACTION,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub dgdm: DgdmConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            train: TrainConfig::default(),
            dgdm: DgdmConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DgdmError::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(DgdmError::config(
            key,
            format!("expected true or false, got `{value}`"),
        )),
    }
}

fn parse_with<T>(key: &str, value: &str, f: impl FnOnce(&str) -> Result<T, String>) -> Result<T> {
    f(value).map_err(|reason| DgdmError::config(key, reason))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Every snapshot key, sorted. `sagd.block_size`, `train.lr` and
    /// `data.train_root` are also accepted as input aliases.
    pub const KEYS: [&'static str; 32] = [
        "cagd.alpha",
        "cagd.beta",
        "data.distractors",
        "data.image_size",
        "data.n_classes",
        "data.n_test",
        "data.n_train",
        "data.noise",
        "data.root",
        "data.seed",
        "data.source",
        "data.test_root",
        "dgdm.drop_rate",
        "dgdm.stage",
        "dgdm.use_cagd",
        "eval.batch_size",
        "eval.threshold_fraction",
        "model.input_mean",
        "model.insertion_points",
        "model.stages",
        "out",
        "sagd.adaptive",
        "sagd.block_size_high",
        "sagd.block_size_low",
        "sagd.delta_h",
        "sagd.delta_l",
        "seed",
        "train.batch_size",
        "train.epochs",
        "train.learning_rate",
        "train.momentum",
        "train.weight_decay",
    ];

    /// Assigns one key. Range checks happen in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "train.learning_rate" | "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "dgdm.drop_rate" => self.dgdm.drop_rate = parse(key, value)?,
            "dgdm.use_cagd" => self.dgdm.use_cagd = parse_bool(key, value)?,
            "dgdm.stage" => self.dgdm.stage = parse_with(key, value, str::parse)?,
            "cagd.alpha" => self.dgdm.cagd.alpha = parse(key, value)?,
            "cagd.beta" => self.dgdm.cagd.beta = parse(key, value)?,
            "sagd.delta_l" => self.dgdm.sagd.delta_l = parse(key, value)?,
            "sagd.delta_h" => self.dgdm.sagd.delta_h = parse(key, value)?,
            "sagd.block_size_high" => {
                self.dgdm.sagd.block_size_high = parse_with(key, value, str::parse)?
            }
            "sagd.block_size_low" => {
                self.dgdm.sagd.block_size_low = parse_with(key, value, str::parse)?
            }
            "sagd.block_size" => {
                let b: BlockSize = parse_with(key, value, str::parse)?;
                self.dgdm.sagd.block_size_high = b;
                self.dgdm.sagd.block_size_low = b;
            }
            "sagd.adaptive" => match value {
                "fixed" => {}
                "adaptive_7" | "adap_7" | "adap7" => {
                    self.dgdm.sagd.block_size_high = BlockSize::Adaptive7;
                    self.dgdm.sagd.block_size_low = BlockSize::Adaptive7;
                }
                _ => {
                    return Err(DgdmError::config(
                        key,
                        format!("expected fixed or adaptive_7, got `{value}`"),
                    ))
                }
            },
            "eval.threshold_fraction" => self.eval.threshold_fraction = parse(key, value)?,
            "eval.batch_size" => self.eval.batch_size = parse(key, value)?,
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "folder" => DataSource::Folder,
                    _ => {
                        return Err(DgdmError::config(
                            key,
                            format!("expected synthetic or folder, got `{value}`"),
                        ))
                    }
                }
            }
            "data.root" | "data.train_root" => self.data.root = optional_path(value),
            "data.test_root" => self.data.test_root = optional_path(value),
            "data.n_train" => self.data.n_train = parse(key, value)?,
            "data.n_test" => self.data.n_test = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.n_classes" => self.data.n_classes = parse(key, value)?,
            "data.noise" => self.data.noise = parse(key, value)?,
            "data.distractors" => self.data.distractors = parse_bool(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "model.stages" => {
                self.model.stages = value
                    .split(',')
                    .map(|s| parse_with(key, s.trim(), str::parse))
                    .collect::<Result<_>>()?
            }
            "model.insertion_points" => self.model.insertion_points = parse_list(key, value)?,
            "model.input_mean" => self.model.input_mean = parse(key, value)?,
            _ => return Err(DgdmError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` assignments in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DgdmError::config(
                    format!("line {}", n + 1),
                    format!("expected key=value, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as those given by `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| DgdmError::config(o, "override must be key=value"))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `path` if given, then `overrides`; validated.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| DgdmError::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dgdm.validate()?;
        let t = self.eval.threshold_fraction;
        if !(t > 0.0 && t <= 1.0) {
            return Err(DgdmError::config(
                "eval.threshold_fraction",
                "must lie in (0, 1]",
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(DgdmError::config("eval.batch_size", "must be at least 1"));
        }
        match self.data.source {
            DataSource::Synthetic => {
                self.synthetic_spec(false).validate()?;
                if self.data.n_train == 0 {
                    return Err(DgdmError::config("data.n_train", "must be at least 1"));
                }
                if self.data.n_test == 0 {
                    return Err(DgdmError::config("data.n_test", "must be at least 1"));
                }
            }
            DataSource::Folder => {
                for (key, p) in [
                    ("data.root", &self.data.root),
                    ("data.test_root", &self.data.test_root),
                ] {
                    match p {
                        None => return Err(DgdmError::config(key, "required for folder data")),
                        Some(p) if !p.is_dir() => {
                            return Err(DgdmError::config(
                                key,
                                format!("{} is not a directory", p.display()),
                            ))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(DgdmError::config("out", "must not be empty"));
        }
        self.backbone_spec(self.data.n_classes.max(1)).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn backbone_spec(&self, num_classes: usize) -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            input_mean: self.model.input_mean,
            stages: self.model.stages.clone(),
            dgdm_insertion_points: self.model.insertion_points.clone(),
            num_classes,
        }
    }

    /// Generator settings for the train or test split. The splits use
    /// different generator seeds so they never share images.
    pub fn synthetic_spec(&self, test: bool) -> SyntheticSpec {
        SyntheticSpec {
            n_images: if test {
                self.data.n_test
            } else {
                self.data.n_train
            },
            image_size: self.data.image_size,
            n_classes: self.data.n_classes,
            noise: self.data.noise,
            distractors: self.data.distractors,
            seed: self.data.seed.wrapping_mul(2).wrapping_add(u64::from(test)),
        }
    }

    fn value_of(&self, key: &str) -> String {
        let s = &self.dgdm.sagd;
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".into(), |p| p.display().to_string())
        };
        match key {
            "cagd.alpha" => self.dgdm.cagd.alpha.to_string(),
            "cagd.beta" => self.dgdm.cagd.beta.to_string(),
            "data.distractors" => self.data.distractors.to_string(),
            "data.image_size" => self.data.image_size.to_string(),
            "data.n_classes" => self.data.n_classes.to_string(),
            "data.n_test" => self.data.n_test.to_string(),
            "data.n_train" => self.data.n_train.to_string(),
            "data.noise" => self.data.noise.to_string(),
            "data.root" => path(&self.data.root),
            "data.seed" => self.data.seed.to_string(),
            "data.source" => self.data.source.as_str().into(),
            "data.test_root" => path(&self.data.test_root),
            "dgdm.drop_rate" => self.dgdm.drop_rate.to_string(),
            "dgdm.stage" => self.dgdm.stage.to_string(),
            "dgdm.use_cagd" => self.dgdm.use_cagd.to_string(),
            "eval.batch_size" => self.eval.batch_size.to_string(),
            "eval.threshold_fraction" => self.eval.threshold_fraction.to_string(),
            "model.input_mean" => self.model.input_mean.to_string(),
            "model.insertion_points" => join(&self.model.insertion_points),
            "model.stages" => join(&self.model.stages),
            "out" => self.out_dir.display().to_string(),
            "sagd.adaptive" => {
                if s.block_size_high == BlockSize::Adaptive7
                    && s.block_size_low == BlockSize::Adaptive7
                {
                    "adaptive_7".into()
                } else {
                    "fixed".into()
                }
            }
            "sagd.block_size_high" => s.block_size_high.to_string(),
            "sagd.block_size_low" => s.block_size_low.to_string(),
            "sagd.delta_h" => s.delta_h.to_string(),
            "sagd.delta_l" => s.delta_l.to_string(),
            "seed" => self.seed.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            _ => unreachable!("snapshot key {key}"),
        }
    }

    /// Every setting as `key=value`, sorted by key. Parsing the snapshot
    /// yields an equal config.
    pub fn to_resolved_string(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key}={}", self.value_of(key)).expect("string write");
        }
        out
    }
}
