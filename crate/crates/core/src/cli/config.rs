use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::IoContext;
use crate::losses::LossConfig;
use crate::netcore::{DetectConfig, NetConfig};
use crate::syndata::{CorpusManifest, Interval};
use crate::tracker::TrackerConfig;
use crate::{Error, Result};

/// Corpus generation. Training and validation clips come from separate
/// seeds, so validation identities never appear in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub num_clips: usize,
    pub val_clips: usize,
    pub clip_length: usize,
    pub height: usize,
    pub width: usize,
    pub num_categories: usize,
    pub max_instances: usize,
    pub occlusion: bool,
    pub seed: u64,
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let m = CorpusManifest::default();
        Self {
            root: PathBuf::from("data/synthetic"),
            num_clips: m.num_clips,
            val_clips: 40,
            clip_length: m.clip_length,
            height: m.height,
            width: m.width,
            num_categories: m.num_categories,
            max_instances: m.max_instances,
            occlusion: m.occlusion,
            seed: 0,
            val_seed: 1_000_003,
        }
    }
}

impl DataConfig {
    pub fn manifest(&self, split: Split) -> CorpusManifest {
        let (num_clips, seed) = match split {
            Split::Train => (self.num_clips, self.seed),
            Split::Val => (self.val_clips, self.val_seed),
        };
        CorpusManifest {
            num_clips,
            clip_length: self.clip_length,
            height: self.height,
            width: self.width,
            num_categories: self.num_categories,
            max_instances: self.max_instances,
            occlusion: self.occlusion,
            seed,
            total_identities: 0,
        }
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.root.join(split.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split '{s}' (train|val)"))),
        }
    }
}

/// Model widths; category and identity counts come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_channels: [usize; 3],
    pub head_channels: usize,
    pub mask_channels: usize,
    pub mid_channels: usize,
    pub embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            backbone_channels: n.backbone_channels,
            head_channels: n.head_channels,
            mask_channels: n.mask_channels,
            mid_channels: n.mid_channels,
            embed_dim: n.embed_dim,
            norm_groups: n.norm_groups,
        }
    }
}

impl ModelConfig {
    pub fn net(&self, num_categories: usize, total_identities: usize) -> NetConfig {
        NetConfig {
            num_categories,
            total_identities,
            backbone_channels: self.backbone_channels,
            head_channels: self.head_channels,
            mask_channels: self.mask_channels,
            mid_channels: self.mid_channels,
            embed_dim: self.embed_dim,
            norm_groups: self.norm_groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Largest |δ| between the two frames of a training pair.
    pub interval: Interval,
    pub epochs: usize,
    /// Frame pairs drawn from every clip per epoch.
    pub pairs_per_clip: usize,
    pub lr: f64,
    /// Fractions of training after which the step size drops by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Step-size multiplier for the identity proxies. Each proxy row only
    /// sees gradient when its clip is drawn, a few times per epoch.
    pub proxy_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            interval: Interval::Infinite,
            epochs: 24,
            pairs_per_clip: 4,
            lr: 2e-3,
            milestones: vec![0.75, 0.92],
            decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 10.0,
            proxy_lr_scale: 10.0,
        }
    }
}

impl TrainConfig {
    /// Step size for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: usize,
    /// Sample intervals of the T sweep.
    pub intervals: Vec<Interval>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 3,
            intervals: vec![Interval::Finite(1), Interval::Finite(3), Interval::Finite(5), Interval::Infinite],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed: initialization and pair sampling. The corpus has its own.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub detect: DetectConfig,
    pub tracker: TrackerConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            detect: DetectConfig::default(),
            tracker: TrackerConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).at(path)?)
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML
    /// literals, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{set}' is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{key}' does not name a config key")))?;
                let slot = table
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
                if i + 1 == parts.len() {
                    *slot = value.clone();
                }
                node = slot;
            }
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // TOML would read these as floats; config values spelled this way are
    // intervals or names
    if matches!(raw, "inf" | "+inf" | "-inf" | "nan" | "+nan" | "-nan") {
        return toml::Value::String(raw.to_string());
    }
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
