//! Sectioned key=value run configuration (TOML on disk).
//!
//! Unknown keys are rejected; every field has a default, and
//! `peftlab print-config` dumps the full default file.

use peftlab::error::{Error, Result};
use peftlab::lora::LoraConfig;
use peftlab::optim::{AdamWConfig, ScheduleConfig};
use peftlab::vqa::VqaConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_images: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_images: 32,
            seed: 0,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub patch_size: usize,
    pub max_answer_len: usize,
    pub max_question_len: usize,
    pub freeze_vision: bool,
    pub vision_warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables it.
    pub max_grad_norm: f64,
    pub use_schedule: bool,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for VqaSection {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        VqaSection {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            patch_size: 4,
            max_answer_len: 8,
            max_question_len: 32,
            freeze_vision: true,
            vision_warmup_steps: 0,
            epochs: 10,
            batch_size: 2,
            accumulation_steps: 8,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            max_grad_norm: 0.0,
            use_schedule: true,
            warmup_steps: 200,
            min_lr: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub latent_size: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub rank: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; 0 disables it.
    pub max_grad_norm: f64,
    pub use_schedule: bool,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub prompt_embed_seed: u64,
    pub seed: u64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let adam = AdamWConfig::lora_default();
        DiffusionSection {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            latent_size: 8,
            cond_dim: 32,
            hidden_dim: 32,
            n_blocks: 3,
            rank: 4,
            alpha: 4.0,
            epochs: 10,
            batch_size: 4,
            accumulation_steps: 2,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            max_grad_norm: 0.0,
            use_schedule: true,
            warmup_steps: 500,
            min_lr: 0.0,
            prompt_embed_seed: 17,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Images generated per metric pass during diffusion training.
    pub eval_batch: usize,
    /// Images written by the `generate` command.
    pub gen_count: usize,
    pub feature_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            eval_batch: 8,
            gen_count: 8,
            feature_seed: 17,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub vqa: VqaSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the `--seed` override to every section.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.vqa.seed = seed;
        self.diffusion.seed = seed;
    }

    pub fn vqa_model_config(&self, vocab_size: usize) -> VqaConfig {
        VqaConfig {
            d_model: self.vqa.d_model,
            n_heads: self.vqa.n_heads,
            encoder_layers: self.vqa.encoder_layers,
            decoder_layers: self.vqa.decoder_layers,
            image_size: self.data.image_size,
            patch_size: self.vqa.patch_size,
            vocab_size,
            max_answer_len: self.vqa.max_answer_len,
            max_question_len: self.vqa.max_question_len,
            freeze_vision: self.vqa.freeze_vision,
        }
    }

    pub fn vqa_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.vqa.learning_rate,
            beta1: self.vqa.beta1,
            beta2: self.vqa.beta2,
            eps: self.vqa.eps,
            weight_decay: self.vqa.weight_decay,
            max_grad_norm: (self.vqa.max_grad_norm > 0.0).then_some(self.vqa.max_grad_norm),
        }
    }

    pub fn vqa_schedule(&self, total_steps: u64) -> Option<ScheduleConfig> {
        self.vqa.use_schedule.then(|| ScheduleConfig {
            peak_lr: self.vqa.learning_rate,
            warmup_steps: self.vqa.warmup_steps,
            total_steps: total_steps.max(self.vqa.warmup_steps + 1),
            min_lr: self.vqa.min_lr,
        })
    }

    pub fn diffusion_model_config(&self) -> peftlab::diffusion::DiffusionConfig {
        peftlab::diffusion::DiffusionConfig {
            timesteps: self.diffusion.timesteps,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            latent_size: self.diffusion.latent_size,
            cond_dim: self.diffusion.cond_dim,
            hidden_dim: self.diffusion.hidden_dim,
            n_blocks: self.diffusion.n_blocks,
        }
    }

    pub fn diffusion_optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.diffusion.learning_rate,
            beta1: self.diffusion.beta1,
            beta2: self.diffusion.beta2,
            eps: self.diffusion.eps,
            weight_decay: self.diffusion.weight_decay,
            max_grad_norm: (self.diffusion.max_grad_norm > 0.0)
                .then_some(self.diffusion.max_grad_norm),
        }
    }

    pub fn diffusion_schedule(&self, total_steps: u64) -> Option<ScheduleConfig> {
        self.diffusion.use_schedule.then(|| ScheduleConfig {
            peak_lr: self.diffusion.learning_rate,
            warmup_steps: self.diffusion.warmup_steps,
            total_steps: total_steps.max(self.diffusion.warmup_steps + 1),
            min_lr: self.diffusion.min_lr,
        })
    }

    pub fn lora_config(&self) -> LoraConfig {
        let mut lora = LoraConfig::with_rank(self.diffusion.rank);
        lora.alpha = self.diffusion.alpha;
        lora
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.vqa.learning_rate, cfg.vqa.learning_rate);
        assert_eq!(back.diffusion.warmup_steps, 500);
        assert_eq!(back.vqa.warmup_steps, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[data]\nn_images = 8\nbogus = 1\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[nonsense]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[data]\nn_images = 12\n").unwrap();
        assert_eq!(cfg.data.n_images, 12);
        assert_eq!(cfg.data.image_size, 32);
        assert_eq!(cfg.diffusion.rank, 4);
    }
}
