use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attnet::{AttNetConfig, BackboneConfig, BlockKind, StageConfig};
use crate::dan::{DanConfig, LossWeights};
use crate::data::Layout;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dan,
    Reid,
}

/// A dataset on disk: either a JSON index file or a root read with `layout`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    #[serde(default)]
    pub layout: Option<Layout>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: Option<DataSource>,
    pub target: Option<DataSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DanTrainConfig {
    pub model: DanConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pool_size: usize,
}

impl Default for DanTrainConfig {
    fn default() -> Self {
        Self { model: DanConfig::default(), weights: LossWeights::default(), lr: 2e-4, beta1: 0.5, beta2: 0.999, pool_size: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidTrainConfig {
    pub model: AttNetConfig,
    pub lr: f64,
    /// Rate for the final `late_epochs` epochs.
    pub lr_late: f64,
    pub late_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pos_ratio: f64,
}

impl Default for ReidTrainConfig {
    fn default() -> Self {
        Self {
            model: AttNetConfig::default(),
            lr: 0.1,
            lr_late: 0.01,
            late_epochs: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            pos_ratio: 0.5,
        }
    }
}

impl ReidTrainConfig {
    /// Two-phase schedule over `epochs` (0-based `epoch`).
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        if epoch + self.late_epochs >= epochs { self.lr_late } else { self.lr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square side images are resized to.
    pub image_size: usize,
    pub checkpoint_dir: PathBuf,
    pub data: DataConfig,
    pub dan: DanTrainConfig,
    pub reid: ReidTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::dan_default()
    }
}

impl TrainConfig {
    /// Full-scale translation recipe: 6 epochs, batch 16, 256x256.
    pub fn dan_default() -> Self {
        Self {
            stage: Stage::Dan,
            seed: 0,
            epochs: 6,
            batch_size: 16,
            image_size: 256,
            checkpoint_dir: PathBuf::from("runs/dan"),
            data: DataConfig::default(),
            dan: DanTrainConfig::default(),
            reid: ReidTrainConfig::default(),
        }
    }

    /// Full-scale re-identification recipe: 55 epochs, batch 16, 224x224.
    pub fn reid_default() -> Self {
        Self { stage: Stage::Reid, epochs: 55, image_size: 224, checkpoint_dir: PathBuf::from("runs/reid"), ..Self::dan_default() }
    }

    /// Reduced DAN for CPU runs on 32x32 synthetic images.
    pub fn dan_smoke() -> Self {
        let mut cfg = Self::dan_default();
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.image_size = 32;
        cfg.dan.model = DanConfig { base_channels: 8, num_resblocks: 9, disc_channels: 16, init_std: 0.02 };
        cfg.dan.lr = 2e-3;
        // raw gram distances start four orders above the adversarial terms
        cfg.dan.weights.lambda_style = 1e-4;
        cfg
    }

    /// Reduced ATTNet for CPU runs on 32x32 synthetic images.
    pub fn reid_smoke() -> Self {
        let mut cfg = Self::reid_default();
        cfg.epochs = 5;
        cfg.batch_size = 8;
        cfg.image_size = 32;
        let stage = |blocks, width, stride| StageConfig { blocks, width, stride };
        cfg.reid.model = AttNetConfig {
            backbone: BackboneConfig {
                stem_channels: 32,
                block: BlockKind::Basic,
                stages: vec![stage(1, 32, 1), stage(1, 64, 2), stage(1, 128, 2)],
            },
            input_size: 32,
            hidden_dim: 128,
            embed_dim: 64,
            dropout: 0.5,
            num_identities: 20,
            pretrained: None,
        };
        cfg.reid.lr = 0.05;
        cfg.reid.lr_late = 0.005;
        cfg.reid.late_epochs = 1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!("image_size {} must be a positive multiple of 4", self.image_size)));
        }
        if self.stage == Stage::Reid {
            if self.reid.model.input_size != self.image_size {
                return Err(Error::InvalidArgument(format!(
                    "reid.model.input_size {} differs from image_size {}",
                    self.reid.model.input_size, self.image_size
                )));
            }
            self.reid.model.validate()?;
            if !(0.0..=1.0).contains(&self.reid.pos_ratio) {
                return Err(Error::InvalidArgument(format!("pos_ratio {} outside [0, 1]", self.reid.pos_ratio)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config is always serializable")
    }

    pub fn from_json(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| Error::json("train config", e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::from_json(value)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_json()).expect("config is always serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Layers a (possibly partial) JSON document over this config.
    pub fn overlay(&self, doc: &Value) -> Result<Self> {
        let mut json = self.to_json();
        let mut leaves = Vec::new();
        flatten("", doc, &json, &mut leaves);
        for (key, value) in leaves {
            set_dotted(&mut json, &key, value)?;
        }
        Self::from_json(json)
    }

    /// Applies `a.b.c=value` overrides. A value that parses as JSON is used
    /// as such, anything else as a string. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut json = self.to_json();
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_dotted(&mut json, key, value)?;
        }
        Self::from_json(json)
    }
}

fn flatten(prefix: &str, value: &Value, base: &Value, out: &mut Vec<(String, Value)>) {
    match (value, base) {
        (Value::Object(map), Value::Object(base_map)) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, base_map.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ => out.push((prefix.to_string(), value.clone())),
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    // keys inside a section created here are checked when deserializing
    let mut fresh = false;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("`{key}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !fresh && !obj.contains_key(*part) {
                return Err(Error::InvalidArgument(format!("unknown config key `{key}`")));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = match obj.get_mut(*part) {
            Some(v) if v.is_object() => v,
            // optional sections start out absent
            Some(v) if v.is_null() => {
                *v = Value::Object(Default::default());
                fresh = true;
                v
            }
            _ => return Err(Error::InvalidArgument(format!("unknown config key `{key}`"))),
        };
    }
    Ok(())
}
