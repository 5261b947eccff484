use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::distill::{CombineMode, KDConfig, LossSwitches};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::tensor::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Title tokens for recommendation.
    pub title_len: usize,
    /// Title tokens for post-training and stage 1.
    pub posttrain_title_len: usize,
    pub body_len: usize,
    pub query_dim: usize,
    pub repr_dim: usize,
    pub teacher_layers: usize,
    pub student_layers: usize,
    /// Freeze embeddings and the first `k` blocks when finetuning teachers.
    pub freeze_below: usize,
    /// Redraw the pooling and output layers from the finetune seed.
    pub reinit_head_on_finetune: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 30_000,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            title_len: 30,
            posttrain_title_len: 24,
            body_len: 512,
            query_dim: 200,
            repr_dim: 256,
            teacher_layers: 12,
            student_layers: 4,
            freeze_below: 0,
            reinit_head_on_finetune: true,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers,
            max_len: self.body_len.max(self.title_len).max(self.posttrain_title_len),
            query_dim: self.query_dim,
            repr_dim: self.repr_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosttrainConfig {
    /// Negative titles per body (`N`).
    pub negatives: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        PosttrainConfig {
            negatives: 9,
            batch_size: 32,
            lr: 1e-6,
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Negatives per clicked candidate (`K`).
    pub negatives: usize,
    /// Most recent clicks kept (`L`).
    pub max_history: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Ensemble size (`M`).
    pub teachers: usize,
    /// One seed per teacher; empty derives `seed + 1 ..= seed + M`.
    pub teacher_seeds: Vec<u64>,
    pub validation_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            negatives: 4,
            max_history: 50,
            batch_size: 128,
            lr: 5e-5,
            epochs: 3,
            teachers: 4,
            teacher_seeds: Vec::new(),
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub t1: f64,
    pub t2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub omega_init: f64,
    pub stage1_lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Stage-2 learning rate; `None` uses the finetune rate.
    pub stage2_lr: Option<f64>,
    pub use_distill: bool,
    pub use_emb: bool,
    pub combine: CombineMode,
}

impl DistillConfig {
    pub fn kd(&self) -> KDConfig {
        KDConfig {
            t1: self.t1,
            t2: self.t2,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches {
            distill: self.use_distill,
            emb: self.use_emb,
        }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        let kd = KDConfig::default();
        DistillConfig {
            t1: kd.t1,
            t2: kd.t2,
            beta1: kd.beta1,
            beta2: kd.beta2,
            omega_init: 1.0,
            stage1_lr: 1e-4,
            stage1_epochs: 5,
            stage2_epochs: 3,
            stage2_lr: None,
            use_distill: true,
            use_emb: true,
            combine: CombineMode::Logits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Input files. Unset paths fall back to the synthetic generator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub news: Option<PathBuf>,
    pub train_behaviors: Option<PathBuf>,
    pub test_behaviors: Option<PathBuf>,
}

/// Every knob of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub execution: Execution,
    /// Samples per autodiff graph; batches are split into such chunks.
    pub microbatch: usize,
    pub model: ModelConfig,
    pub posttrain: PosttrainConfig,
    pub finetune: FinetuneConfig,
    pub distill: DistillConfig,
    pub adam: AdamParams,
    pub data: DataConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            execution: Execution::default(),
            microbatch: 8,
            model: ModelConfig::default(),
            posttrain: PosttrainConfig::default(),
            finetune: FinetuneConfig::default(),
            distill: DistillConfig::default(),
            adam: AdamParams::default(),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder(self.model.teacher_layers).validate()?;
        self.model.encoder(self.model.student_layers).validate()?;
        self.distill.kd().validate()?;
        let f = &self.finetune;
        if f.teachers == 0 {
            return Err(Error::Config("finetune.teachers must be at least 1".into()));
        }
        if !f.teacher_seeds.is_empty() {
            if f.teacher_seeds.len() != f.teachers {
                return Err(Error::Config(format!(
                    "{} teacher seeds for {} teachers",
                    f.teacher_seeds.len(),
                    f.teachers
                )));
            }
            let mut s = f.teacher_seeds.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != f.teachers {
                return Err(Error::Config("teacher seeds must be distinct".into()));
            }
        }
        if !(0.0..1.0).contains(&f.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if self.microbatch == 0 || self.posttrain.batch_size == 0 || f.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if f.negatives == 0 || self.posttrain.negatives == 0 {
            return Err(Error::Config("negative counts must be positive".into()));
        }
        if !(self.distill.omega_init > 0.0) {
            return Err(Error::Config("omega_init must be positive".into()));
        }
        Ok(())
    }

    /// Seeds of the `M` teachers.
    pub fn teacher_seeds(&self) -> Vec<u64> {
        if self.finetune.teacher_seeds.is_empty() {
            (1..=self.finetune.teachers as u64).map(|i| self.seed.wrapping_add(i)).collect()
        } else {
            self.finetune.teacher_seeds.clone()
        }
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `finetune.lr=1e-3`. Values are parsed as TOML, falling back to a
    /// bare string.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> Result<()> {
        if sets.is_empty() {
            return Ok(());
        }
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let cfg: PipelineConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// First 12 hex digits of [`PipelineConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
