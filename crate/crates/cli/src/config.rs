//! `key = value` experiment files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use metaisda::datakit::SynthConfig;
use metaisda::metagrad::MetaGradMode;
use metaisda::trainer::{LrSchedule, TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line, when the problem has one.
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated per run; `seed: None` reuses the run seed.
    Synthetic {
        config: SynthConfig,
        seed: Option<u64>,
    },
    Idx(IdxPaths),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: DataSource::Synthetic {
                config: SynthConfig::default(),
                seed: None,
            },
            out: PathBuf::from("results"),
            seeds: vec![0],
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "lambda0",
    "schedule_alpha",
    "total_iterations",
    "batch_size",
    "lr_f",
    "lr_f_schedule",
    "lr_g",
    "lr_g_schedule",
    "meta_update_every",
    "freeze_blocks",
    "freeze_real",
    "theory_k",
    "theory_c",
    "theory_lipschitz",
    "theory_sigma",
    "block_widths",
    "covnet_hidden",
    "meta_grad",
    "fd_epsilon_scale",
    "metric_interval",
    "seeds",
    "out",
    "dataset",
    "data_seed",
    "synth_meta_categories",
    "synth_subclasses_per_meta",
    "synth_input_dim",
    "synth_train_per_class",
    "synth_test_per_class",
    "synth_meta_separation",
    "synth_sub_separation",
    "synth_pose_states",
    "synth_pose_noise_scale",
    "synth_base_noise_scale",
    "idx_train_images",
    "idx_train_labels",
    "idx_test_images",
    "idx_test_labels",
];

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

/// Key-value state before cross-key validation.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    dataset: String,
    synth: SynthConfig,
    data_seed: Option<u64>,
    idx: [Option<PathBuf>; 4],
    meta_grad: String,
    epsilon_scale: f64,
    synth_line: Option<usize>,
    idx_line: Option<usize>,
}

impl ConfigBuilder {
    pub fn new(base_dir: &Path) -> Self {
        Self {
            cfg: ExperimentConfig::default(),
            base_dir: base_dir.to_path_buf(),
            dataset: "synthetic".into(),
            synth: SynthConfig::default(),
            data_seed: None,
            idx: [None, None, None, None],
            meta_grad: "auto".into(),
            epsilon_scale: MetaGradMode::DEFAULT_EPSILON_SCALE,
            synth_line: None,
            idx_line: None,
        }
    }

    pub fn parse_text(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut b = Self::new(base_dir);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::at(
                    line,
                    format!("expected `key = value`, got `{content}`"),
                ));
            };
            b.set(key.trim(), value.trim(), line)?;
        }
        Ok(b)
    }

    /// Assigns one key; `line` labels any error.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        self.set_inner(key, value, line)
            .map_err(|m| ConfigError::at(line, format!("{key}: {m}")))
    }

    /// Assigns a command-line override of `key`.
    pub fn override_key(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_inner(key, value, 0)
            .map_err(|m| ConfigError::general(format!("--{key}: {m}")))
    }

    fn set_inner(&mut self, key: &str, value: &str, line: usize) -> Result<(), String> {
        let t = &mut self.cfg.train;
        let s = &mut self.synth;
        if key.starts_with("synth_") && line > 0 {
            self.synth_line.get_or_insert(line);
        }
        if key.starts_with("idx_") && line > 0 {
            self.idx_line.get_or_insert(line);
        }
        match key {
            "mode" => t.mode = value.parse::<TrainMode>().map_err(|e| e.to_string())?,
            "lambda0" => t.lambda0 = parse(value)?,
            "schedule_alpha" => t.schedule_alpha = parse(value)?,
            "total_iterations" => t.total_iterations = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "lr_f" => t.lr_f = parse(value)?,
            "lr_f_schedule" => {
                t.lr_f_schedule = value.parse::<LrSchedule>().map_err(|e| e.to_string())?
            }
            "lr_g" => t.lr_g = parse(value)?,
            "lr_g_schedule" => {
                t.lr_g_schedule = value.parse::<LrSchedule>().map_err(|e| e.to_string())?
            }
            "meta_update_every" => t.meta_update_every = parse(value)?,
            "freeze_blocks" => t.freeze_blocks = parse(value)?,
            "freeze_real" => t.freeze_real = parse_bool(value)?,
            "theory_k" => t.theory.k = parse(value)?,
            "theory_c" => t.theory.c = parse(value)?,
            "theory_lipschitz" => t.theory.lipschitz = parse(value)?,
            "theory_sigma" => t.theory.sigma = parse(value)?,
            "block_widths" => t.block_widths = parse_list(value)?,
            "covnet_hidden" => t.covnet_hidden = Some(parse_list(value)?),
            "meta_grad" => match value {
                "auto" | "exact" | "fd" => self.meta_grad = value.into(),
                _ => return Err(format!("expected auto, exact or fd, got `{value}`")),
            },
            "fd_epsilon_scale" => self.epsilon_scale = parse(value)?,
            "metric_interval" => t.metric_every = parse(value)?,
            "seeds" => self.cfg.seeds = parse_list(value)?,
            "out" => self.cfg.out = PathBuf::from(value),
            "dataset" => match value {
                "synthetic" | "idx" => self.dataset = value.into(),
                _ => return Err(format!("expected synthetic or idx, got `{value}`")),
            },
            "data_seed" => self.data_seed = Some(parse(value)?),
            "synth_meta_categories" => s.meta_categories = parse(value)?,
            "synth_subclasses_per_meta" => s.subclasses_per_meta = parse(value)?,
            "synth_input_dim" => s.input_dim = parse(value)?,
            "synth_train_per_class" => s.train_per_class = parse(value)?,
            "synth_test_per_class" => s.test_per_class = parse(value)?,
            "synth_meta_separation" => s.meta_separation = parse(value)?,
            "synth_sub_separation" => s.sub_separation = parse(value)?,
            "synth_pose_states" => s.pose_states = parse(value)?,
            "synth_pose_noise_scale" => s.pose_noise_scale = parse(value)?,
            "synth_base_noise_scale" => s.base_noise_scale = parse(value)?,
            "idx_train_images" => self.idx[0] = Some(self.base_dir.join(value)),
            "idx_train_labels" => self.idx[1] = Some(self.base_dir.join(value)),
            "idx_test_images" => self.idx[2] = Some(self.base_dir.join(value)),
            "idx_test_labels" => self.idx[3] = Some(self.base_dir.join(value)),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = self.cfg.clone();
        cfg.train.meta_grad_mode = match self.meta_grad.as_str() {
            "exact" => Some(MetaGradMode::Exact),
            "fd" => Some(MetaGradMode::FiniteDifference {
                epsilon_scale: self.epsilon_scale,
            }),
            _ => None,
        };
        cfg.data = if self.dataset == "idx" {
            if let Some(line) = self.synth_line {
                return Err(ConfigError::at(
                    line,
                    "synth_* keys conflict with dataset = idx",
                ));
            }
            let missing: Vec<&str> = [
                "idx_train_images",
                "idx_train_labels",
                "idx_test_images",
                "idx_test_labels",
            ]
            .iter()
            .zip(&self.idx)
            .filter(|(_, p)| p.is_none())
            .map(|(k, _)| *k)
            .collect();
            if !missing.is_empty() {
                return Err(ConfigError::general(format!(
                    "dataset = idx needs {}",
                    missing.join(", ")
                )));
            }
            let [a, b, c, d] = self.idx.clone().map(|p| p.expect("checked"));
            DataSource::Idx(IdxPaths {
                train_images: a,
                train_labels: b,
                test_images: c,
                test_labels: d,
            })
        } else {
            if let Some(line) = self.idx_line {
                return Err(ConfigError::at(line, "idx_* keys need dataset = idx"));
            }
            self.synth
                .validate()
                .map_err(|e| ConfigError::general(e.to_string()))?;
            DataSource::Synthetic {
                config: self.synth.clone(),
                seed: self.data_seed,
            }
        };
        if cfg.seeds.is_empty() {
            return Err(ConfigError::general("seed list is empty"));
        }
        cfg.train
            .validate()
            .map_err(|e| ConfigError::general(e.to_string()))?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        ConfigBuilder::parse_text(text, base_dir)?.build()
    }
}
