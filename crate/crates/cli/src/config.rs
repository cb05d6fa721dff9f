//! Run configuration: a flat key-value text file (`section.key = value`,
//! `#` comments) covering the model shape, the training recipe, the task,
//! the fusion mode, and the data/output paths. CLI flags override file
//! values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use xstitch_core::data::gen::Task;
use xstitch_core::error::{Error, Result};
use xstitch_core::heads::FusionMode;
use xstitch_core::model::ModelConfig;
use xstitch_core::training::TrainConfig;

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    /// Whether train.seed was set explicitly (otherwise `seed` drives it).
    #[serde(skip)]
    train_seed_explicit: bool,
    pub d_model: usize,
    pub heads: usize,
    pub speech_layers: usize,
    pub text_layers: usize,
    pub d_in: usize,
    pub k_max: usize,
    /// Vocabulary cap applied when building the vocab from the train split.
    pub vocab_cap: Option<usize>,
    pub train: TrainConfig,
    pub task: Task,
    pub fusion: FusionMode,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_seed_explicit: false,
            d_model: 64,
            heads: 8,
            speech_layers: 4,
            text_layers: 4,
            d_in: xstitch_core::data::gen::D_IN,
            k_max: 8,
            vocab_cap: None,
            train: TrainConfig::default(),
            task: Task::Punct,
            fusion: FusionMode::Xse,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            seed: 1,
        }
    }
}

impl RunConfig {
    /// Parse the flat key-value format. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key; also used for CLI `--set key=value` overrides. The
    /// global `seed` drives `train.seed` unless the latter was set itself.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "model.d_model" => self.d_model = num(key, value)?,
            "model.heads" => self.heads = num(key, value)?,
            "model.speech_layers" => self.speech_layers = num(key, value)?,
            "model.text_layers" => self.text_layers = num(key, value)?,
            "model.d_in" => self.d_in = num(key, value)?,
            "model.k_max" => self.k_max = num(key, value)?,
            "model.vocab_size" => self.vocab_cap = Some(num(key, value)?),
            "train.lr" => self.train.lr = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.freeze_steps" => self.train.freeze_steps = num(key, value)?,
            "train.patience" => self.train.patience = num(key, value)?,
            "train.max_epochs" => self.train.max_epochs = num(key, value)?,
            "train.seed" => {
                self.train.seed = num(key, value)?;
                self.train_seed_explicit = true;
            }
            "task" => self.task = Task::parse(value)?,
            "fusion" => self.fusion = FusionMode::parse(value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => {
                self.seed = num(key, value)?;
                if !self.train_seed_explicit {
                    self.train.seed = self.seed;
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The model config this run builds (vocab_size patched in later).
    pub fn model_config(&self) -> ModelConfig {
        let mut mc = ModelConfig::for_task(self.task, self.fusion);
        mc.d_model = self.d_model;
        mc.heads = self.heads;
        mc.speech_layers = self.speech_layers;
        mc.text_layers = self.text_layers;
        mc.d_in = self.d_in;
        mc.k_max = self.k_max;
        mc
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mut mc = self.model_config();
        mc.vocab_size = self.vocab_cap.unwrap_or(usize::MAX).max(4).min(1 << 20);
        mc.validate()
    }
}

/// Reproducibility manifest dropped next to every run's artifacts: the
/// resolved config, the seed, and content hashes of the inputs read.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seed,
            input_hashes: BTreeMap::new(),
        }
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}
