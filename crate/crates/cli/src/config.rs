//! Experiment configuration files.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasklab::datasets::{PROPRIO_DIM, TRAJ_LEN};
use tasklab::encoders::{DemoEncoderDims, LanguageBackend, EMBED_DIM};
use tasklab::expert::ExpertConfig;
use tasklab::policy::{ModelConfig, PolicyDims};
use tasklab::render::IMG;
use tasklab::trainer::TrainConfig;

/// Overrides the configured output directory when set.
pub const RUN_ROOT_ENV: &str = "TASKLAB_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub output_dir: PathBuf,
    /// Directory holding the generated buffers; defaults to `<run root>/<name>/data`.
    pub data_dir: Option<PathBuf>,
    pub buffer: Option<PathBuf>,
    pub val_set: Option<PathBuf>,
    pub finetune_set: Option<PathBuf>,
    pub embedding_cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            data_dir: None,
            buffer: None,
            val_set: None,
            finetune_set: None,
            embedding_cache: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub policy: Option<PolicyDims>,
    pub demo: Option<DemoEncoderDims>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed of the demonstration streams.
    pub data_seed: u64,
    /// Demos per test task in the finetuning pool.
    pub finetune_demos: usize,
    pub train: TrainConfig,
    pub expert: ExpertConfig,
    pub model: ModelOverrides,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            data_seed: 0,
            finetune_demos: 25,
            train: TrainConfig::default(),
            expert: ExpertConfig::default(),
            model: ModelOverrides::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.origin, l, self.msg),
            None => write!(f, "{}: {}", self.origin, self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

fn collect_keys(v: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, v) in t {
            out.insert(k.clone());
            collect_keys(v, out);
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    let mut full = ExperimentConfig::default();
    full.model.policy = Some(PolicyDims::default());
    full.model.demo = Some(DemoEncoderDims::default());
    full.paths.data_dir = Some(PathBuf::new());
    full.paths.buffer = Some(PathBuf::new());
    full.paths.val_set = Some(PathBuf::new());
    full.paths.finetune_set = Some(PathBuf::new());
    full.paths.embedding_cache = Some(PathBuf::new());
    collect_keys(
        &toml::Value::try_from(&full).expect("default config serializes"),
        &mut keys,
    );
    keys
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            line: None,
            msg: e.to_string(),
        })?;
        Self::parse(&text, &origin)
    }

    /// Parse and validate; errors carry the line of the offending key.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_at(text, s.start));
            let msg = e.message().trim().to_string();
            let key = line
                .and_then(|l| text.lines().nth(l - 1))
                .and_then(|l| l.split_once('='))
                .map(|(k, _)| k.trim());
            let msg = match key {
                Some(k) if !k.is_empty() && !msg.contains(k) => format!("{k}: {msg}"),
                _ => msg,
            };
            ConfigError {
                origin: origin.into(),
                line,
                msg,
            }
        })?;
        cfg.validate().map_err(|msg| {
            let keys = known_keys();
            let line = msg
                .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .filter(|w| keys.contains(*w))
                .find_map(|w| key_line(text, w));
            ConfigError {
                origin: origin.into(),
                line,
                msg,
            }
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(format!(
                "name {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.name
            ));
        }
        self.train.validate().map_err(|e| {
            e.to_string()
                .trim_start_matches("invalid argument: ")
                .to_string()
        })?;
        let e = &self.expert;
        if !(e.dist_thresh > 0.0) {
            return Err("dist_thresh must be positive".into());
        }
        if !(e.noise_sigma >= 0.0 && e.noise_sigma.is_finite()) {
            return Err("noise_sigma must be non-negative".into());
        }
        if e.num_timesteps != TRAJ_LEN {
            return Err(format!(
                "num_timesteps must be {TRAJ_LEN}, the stored trajectory length"
            ));
        }
        if e.attempt_factor == 0 {
            return Err("attempt_factor must be positive".into());
        }
        let m = self.model_config();
        if m.policy.obs_size != IMG {
            return Err(format!("obs_size must be {IMG}, the rendered image size"));
        }
        if m.policy.proprio_dim != PROPRIO_DIM {
            return Err(format!("proprio_dim must be {PROPRIO_DIM}"));
        }
        if m.mode.uses_language() && m.policy.embed_dim != EMBED_DIM {
            return Err(format!(
                "embed_dim must be {EMBED_DIM} to match the sentence encoder"
            ));
        }
        if let Some(d) = &m.demo {
            let (rows, cols) = self.train.demo_grid;
            if (d.height, d.width) != (rows * IMG, cols * IMG) {
                return Err(format!(
                    "height and width of the demo encoder must be {} and {} for demo_grid",
                    rows * IMG,
                    cols * IMG
                ));
            }
            if d.out_dim != m.policy.embed_dim {
                return Err(format!(
                    "out_dim of the demo encoder must equal embed_dim {}",
                    m.policy.embed_dim
                ));
            }
            if d.channels.len() != d.pools.len() {
                return Err("channels and pools of the demo encoder must have equal length".into());
            }
            let shrink: usize = d.pools.iter().product();
            if shrink == 0 || d.height % shrink != 0 || d.width % shrink != 0 {
                return Err("pools must divide the demo grid size".into());
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.train.model_config();
        if let Some(p) = &self.model.policy {
            m.policy = p.clone();
        }
        if let (Some(d), Some(slot)) = (&self.model.demo, m.demo.as_mut()) {
            *slot = d.clone();
        }
        m
    }

    pub fn run_root(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(r) if !r.is_empty() => PathBuf::from(r),
            _ => self.paths.output_dir.clone(),
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.run_root().join(&self.name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths
            .data_dir
            .clone()
            .unwrap_or_else(|| self.experiment_dir().join("data"))
    }

    pub fn data_paths(&self) -> crate::pipeline::DataPaths {
        let mut p = crate::pipeline::DataPaths::in_dir(&self.data_dir());
        if let Some(b) = &self.paths.buffer {
            if self.train.is_oracle() {
                p.oracle = b.clone();
            } else {
                p.train = b.clone();
            }
        }
        if let Some(v) = &self.paths.val_set {
            p.val = v.clone();
        }
        if let Some(f) = &self.paths.finetune_set {
            p.finetune = f.clone();
        }
        p
    }

    pub fn language_backend(&self) -> tasklab::Result<LanguageBackend> {
        match &self.paths.embedding_cache {
            Some(p) => LanguageBackend::from_cache_file(p),
            None => Ok(LanguageBackend::Stub),
        }
    }
}
