//! Run configuration: a TOML file with one table per concern, every key
//! overridable from the command line as `section.key=value`.

use std::path::{Path, PathBuf};

use ffgan_core::fusion::AffineMode;
use ffgan_core::model::{ModelConfig, TrainHyper};
use ffgan_core::optim::AdamConfig;
use ffgan_core::shapes::CANVAS;
use ffgan_core::stages::AttentionSource;
use ffgan_core::AttnAxis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, io_err, Result};

/// Environment variable naming the compute device.
pub const DEVICE_VAR: &str = "RUN_DEVICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoints, logs and reports go here.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub n: usize,
    pub seed: u64,
}

/// Architecture settings; the vocabulary size comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub word_dim: usize,
    pub ca_dim: usize,
    pub noise_dim: usize,
    pub max_len: usize,
    pub channels: usize,
    pub disc_channels: usize,
    pub encoder_width: usize,
    pub base_resolution: usize,
    pub residual_blocks: usize,
    pub attn_axis: AttnAxis,
    pub use_ff_block: bool,
    pub use_gsr: bool,
    pub attention_source: AttentionSource,
    pub affine_mode: AffineMode,
    /// Written only when enabled so that existing runs keep their hash.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub word_level_damsm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Where the frozen encoders live; empty means `<out_dir>/pretrain`.
    pub dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mismatch_negatives: bool,
    /// Stop after this many steps in total (0: no limit).
    pub max_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Candidates per retrieval query, matched ones included.
    pub pool_size: usize,
    pub r: usize,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data/toyshapes"), n: 5000, seed: 0 }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(0);
        Self {
            embed_dim: m.embed_dim,
            word_dim: m.word_dim,
            ca_dim: m.ca_dim,
            noise_dim: m.noise_dim,
            max_len: m.max_len,
            channels: m.channels,
            disc_channels: m.disc_channels,
            encoder_width: m.encoder_width,
            base_resolution: m.base_resolution,
            residual_blocks: m.residual_blocks,
            attn_axis: m.attn_axis,
            use_ff_block: m.use_ff_block,
            use_gsr: m.use_gsr,
            attention_source: m.attention_source,
            affine_mode: m.affine_mode,
            word_level_damsm: m.word_level_damsm,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { dir: PathBuf::new(), epochs: 10, batch_size: 32, lr: 2e-3, gamma: 10.0 }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            epochs: 60,
            batch_size: 16,
            lambda1: h.lambda1,
            lambda2: h.lambda2,
            gamma: h.gamma,
            lr: h.adam.lr,
            beta1: h.adam.beta1,
            beta2: h.adam.beta2,
            mismatch_negatives: h.mismatch_negatives,
            max_steps: 0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 1000, pool_size: 10, r: 1, seeds: vec![0, 1, 2] }
    }
}

impl ModelSection {
    pub fn to_model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            word_dim: self.word_dim,
            ca_dim: self.ca_dim,
            noise_dim: self.noise_dim,
            max_len: self.max_len,
            channels: self.channels,
            disc_channels: self.disc_channels,
            encoder_width: self.encoder_width,
            base_resolution: self.base_resolution,
            residual_blocks: self.residual_blocks,
            attn_axis: self.attn_axis,
            use_ff_block: self.use_ff_block,
            use_gsr: self.use_gsr,
            attention_source: self.attention_source,
            affine_mode: self.affine_mode,
            word_level_damsm: self.word_level_damsm,
        }
    }

    pub fn resolutions(&self) -> [usize; 3] {
        let b = self.base_resolution;
        [b, 2 * b, 4 * b]
    }
}

impl TrainConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            gamma: self.gamma,
            mismatch_negatives: self.mismatch_negatives,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() },
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                text.parse::<toml::Table>()?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        if self.pretrain.dir.as_os_str().is_empty() {
            self.out_dir.join("pretrain")
        } else {
            self.pretrain.dir.clone()
        }
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.out_dir.join("loss.csv")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lambda1 >= 0.0 && t.lambda2 >= 0.0) {
            return Err(config_err!("train.lambda1 and train.lambda2 must be non-negative"));
        }
        if t.batch_size < 2 || self.pretrain.batch_size < 2 {
            return Err(config_err!("batch sizes must be at least 2"));
        }
        let base = self.model.base_resolution;
        if !base.is_power_of_two() || base < 8 {
            return Err(config_err!("model.base_resolution {base} must be a power of two >= 8"));
        }
        let top = self.model.resolutions()[2];
        if top > CANVAS {
            return Err(config_err!("final resolution {top} exceeds the {CANVAS}-pixel dataset images"));
        }
        if self.eval.pool_size <= self.eval.r || self.eval.r == 0 {
            return Err(config_err!("eval.pool_size must exceed eval.r >= 1"));
        }
        if self.eval.seeds.is_empty() {
            return Err(config_err!("eval.seeds must not be empty"));
        }
        self.train.hyper().validate()?;
        Ok(())
    }

    /// Digest of every setting that shapes the training trajectory. Paths,
    /// evaluation settings and the run length are excluded so a run can be
    /// moved or extended.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data.dir = PathBuf::new();
        c.pretrain.dir = PathBuf::new();
        c.eval = EvalConfig::default();
        c.train.epochs = 0;
        c.train.max_steps = 0;
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| config_err!("override {assignment:?} is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err!("bad override key {key:?}"));
    }
    let raw = raw.trim();
    // bare words become strings; anything TOML can parse keeps its type
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err!("override {key:?}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Fails unless the device variable is unset or names the CPU.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") || d.is_empty() => Ok(()),
        Ok(d) => Err(config_err!("{DEVICE_VAR}={d:?} is not available; only \"cpu\" is supported")),
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
