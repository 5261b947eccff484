use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, NewsEncoder, RecModel, UserEncoder};
use crate::error::{Error, Result};
use crate::tensor::{load_tensors, save_tensors};

/// Pipeline phase that produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Posttrained,
    Stage1,
    Finetuned,
    Stage2,
    Baseline,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Posttrained => "posttrained",
            Stage::Stage1 => "stage1",
            Stage::Finetuned => "finetuned",
            Stage::Stage2 => "stage2",
            Stage::Baseline => "baseline",
        };
        f.write_str(s)
    }
}

/// Contents of `model.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub has_user_encoder: bool,
}

/// A news encoder with an optional user encoder, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: ModelManifest,
    pub news: NewsEncoder,
    pub user: Option<UserEncoder>,
}

impl Checkpoint {
    pub fn news_only(stage: Stage, seed: u64, config_hash: &str, news: NewsEncoder) -> Self {
        Checkpoint {
            manifest: ModelManifest {
                stage,
                seed,
                config_hash: config_hash.to_string(),
                encoder: news.cfg,
                has_user_encoder: false,
            },
            news,
            user: None,
        }
    }

    pub fn model(stage: Stage, seed: u64, config_hash: &str, model: RecModel) -> Self {
        Checkpoint {
            manifest: ModelManifest {
                stage,
                seed,
                config_hash: config_hash.to_string(),
                encoder: model.news.cfg,
                has_user_encoder: true,
            },
            news: model.news,
            user: Some(model.user),
        }
    }

    /// Writes `model.toml`, `news.manifest`/`news.bin` and, with a user
    /// encoder, `user.manifest`/`user.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join("model.toml"), text)?;
        save_tensors(&self.news.params, &dir.join("news.manifest"), &dir.join("news.bin"))?;
        if let Some(u) = &self.user {
            save_tensors(&u.params, &dir.join("user.manifest"), &dir.join("user.bin"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("model.toml"))?;
        let manifest: ModelManifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = load_tensors(&dir.join("news.manifest"), &dir.join("news.bin"))?;
        let news = NewsEncoder::from_params(manifest.encoder, params)?;
        let user = if manifest.has_user_encoder {
            let params = load_tensors(&dir.join("user.manifest"), &dir.join("user.bin"))?;
            Some(UserEncoder::from_params(
                manifest.encoder.repr_dim,
                manifest.encoder.query_dim,
                params,
            )?)
        } else {
            None
        };
        Ok(Checkpoint { manifest, news, user })
    }

    /// Fails unless the checkpoint was produced by one of `stages`.
    pub fn expect_stage(&self, stages: &[Stage]) -> Result<()> {
        if stages.contains(&self.manifest.stage) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint stage is `{}`, expected one of {:?}",
                self.manifest.stage, stages
            )))
        }
    }

    pub fn into_model(self) -> Result<RecModel> {
        let user = self
            .user
            .ok_or_else(|| Error::Checkpoint("checkpoint has no user encoder".into()))?;
        Ok(RecModel { news: self.news, user })
    }

    /// Digest over both parameter sets.
    pub fn digest(&self) -> String {
        let mut s = self.news.params.digest();
        if let Some(u) = &self.user {
            s.push_str(&u.params.digest());
        }
        s
    }
}
