//! TOML run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{Stage, StageConfig};
use crate::vocab::GenerationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub strict_determinism: bool,
    /// Supervise question and caption tokens as well as answers and images.
    pub prompt_loss: bool,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Grid/caption pairs generated by `gen-data` for training.
    pub train_examples: usize,
    /// Held-out pairs generated by `gen-data`.
    pub val_examples: usize,
    pub stage1_mmu: StageConfig,
    pub stage1_t2i: StageConfig,
    pub stage2: StageConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            strict_determinism: true,
            prompt_loss: false,
            checkpoint_every: 0,
            train_examples: 20_000,
            val_examples: 500,
            stage1_mmu: StageConfig::stage1_mmu(),
            stage1_t2i: StageConfig::stage1_t2i(),
            stage2: StageConfig::stage2(),
        }
    }
}

impl TrainSection {
    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Stage1Mmu => &self.stage1_mmu,
            Stage::Stage1T2i => &self.stage1_t2i,
            Stage::Stage2 => &self.stage2,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Stage1Mmu => &mut self.stage1_mmu,
            Stage::Stage1T2i => &mut self.stage1_t2i,
            Stage::Stage2 => &mut self.stage2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub shared_vocab: bool,
    pub lora_rank_override: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub gen: GenerationConfig,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::RunConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::RunConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::RunConfig(e.to_string()))
    }

    /// Model configuration after ablation switches. Overriding the rank keeps
    /// the `alpha / rank` scale of the base config.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.shared_vocab {
            m.shared_vocab = true;
        }
        if let Some(r) = self.ablation.lora_rank_override {
            let ratio = m.lora_scale();
            m.lora_rank = r;
            m.lora_alpha = ratio * r as f64;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model()
            .validate()
            .map_err(|e| Error::RunConfig(e.to_string()))?;
        for s in [Stage::Stage1Mmu, Stage::Stage1T2i, Stage::Stage2] {
            self.train
                .stage(s)
                .validate(s)
                .map_err(|e| Error::RunConfig(e.to_string()))?;
        }
        let g = &self.gen;
        if !(g.temperature > 0.0) || g.top_k == 0 || g.max_new_tokens == 0 {
            return Err(Error::RunConfig(
                "gen: temperature, top_k and max_new_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}
