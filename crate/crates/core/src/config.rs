//! Serde-backed configuration with desk-scale defaults.
//!
//! Every knob a run can turn lives here; the CLI loads overrides from a JSON
//! file and everything downstream takes these structs. `validate` rejects
//! combinations the code cannot honor (exit code 2 territory).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_records: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_records: 1000, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Encoder accepts clips of `min_frames..=max_frames`.
    pub min_frames: usize,
    pub max_frames: usize,
    pub kl_weight: f64,
    /// Fraction of training during which the KL weight ramps 0 → kl_weight.
    pub kl_warmup_frac: f64,
    pub logvar_clamp: f64,
    /// Number of decoder memory slots the latent is projected into; queries
    /// cross-attend over these.
    pub memory_tokens: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            model_dim: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            min_frames: 8,
            max_frames: 64,
            kl_weight: 1e-4,
            kl_warmup_frac: 0.1,
            logvar_clamp: 10.0,
            memory_tokens: 8,
            steps: 1500,
            batch: 32,
            lr: 4e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub context: usize,
    /// Motion placeholders emitted per motion block.
    pub holders: usize,
    /// Fraction of layers (from the top) whose attention merges the two
    /// branch streams; the rest attend within their own branch only.
    pub shared_ratio: f64,
    /// Explicit per-layer placement bitmap (true = shared attention);
    /// overrides `shared_ratio` when present.
    pub placement: Option<Vec<bool>>,
    /// Motion-branch FFN width factor ρ relative to `ffn_dim`.
    pub motion_ffn_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            context: 256,
            holders: 4,
            shared_ratio: 1.0,
            placement: None,
            motion_ffn_ratio: 1.0,
        }
    }
}

impl BackboneConfig {
    /// Per-layer flag: true = shared attention over the merged sequence.
    /// Partial sharing fills from the top (cross-modal connections in later
    /// layers); an explicit `placement` bitmap overrides the ratio.
    pub fn shared_layers(&self) -> Vec<bool> {
        if let Some(p) = &self.placement {
            assert_eq!(p.len(), self.layers, "placement bitmap length != layer count");
            return p.clone();
        }
        let n_shared = ((self.layers as f64 * self.shared_ratio).round() as usize).min(self.layers);
        (0..self.layers).map(|i| i >= self.layers - n_shared).collect()
    }

    /// Motion-branch FFN width after applying ρ.
    pub fn motion_ffn_dim(&self) -> usize {
        ((self.ffn_dim as f64 * self.motion_ffn_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Ancestral sampling uses this many evenly strided steps.
    pub sample_steps: usize,
    pub width: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Probability of dropping the condition during training (for CFG).
    pub p_uncond: f64,
    /// Default guidance weight at sampling time.
    pub guidance: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            sample_steps: 100,
            width: 256,
            blocks: 3,
            cond_dim: 64,
            time_dim: 64,
            p_uncond: 0.1,
            guidance: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Learning rate for the diffusion head parameter group.
    pub lr_head: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    /// Validation cadence (steps); also the checkpoint cadence.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 2e-4,
            lr_head: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_frac: 0.05,
            seed: 7,
            stage0_steps: 1500,
            stage1_steps: 2000,
            stage2_steps: 4000,
            stage3_steps: 1000,
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Retrieval batch for R-Precision / MM-Dist.
    pub retrieval_batch: usize,
    /// Repetitions with distinct seeds behind each reported mean ± CI.
    pub reps: usize,
    /// Paired subset size for the diversity metric.
    pub diversity_subset: usize,
    /// Generations per prompt for MultiModality.
    pub mm_samples: usize,
    pub evaluator_layers: usize,
    pub evaluator_dim: usize,
    pub evaluator_embed: usize,
    pub temperature: f64,
    /// Minimum val retrieval margin for the evaluator to be considered fit.
    pub margin_gate: f64,
    pub evaluator_steps: usize,
    pub evaluator_batch: usize,
    pub evaluator_lr: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_batch: 8,
            reps: 5,
            diversity_subset: 32,
            mm_samples: 8,
            evaluator_layers: 2,
            evaluator_dim: 32,
            evaluator_embed: 32,
            temperature: 0.07,
            margin_gate: 0.2,
            evaluator_steps: 1200,
            evaluator_batch: 32,
            evaluator_lr: 1e-3,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub vae: VaeConfig,
    pub backbone: BackboneConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Config = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.vae.model_dim % self.vae.heads != 0 {
            return fail(format!(
                "vae model_dim {} not divisible by heads {}",
                self.vae.model_dim, self.vae.heads
            ));
        }
        if self.backbone.model_dim % self.backbone.heads != 0 {
            return fail(format!(
                "backbone model_dim {} not divisible by heads {}",
                self.backbone.model_dim, self.backbone.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.backbone.shared_ratio) {
            return fail(format!("shared_ratio {} outside [0, 1]", self.backbone.shared_ratio));
        }
        if self.vae.min_frames < 2 || self.vae.min_frames > self.vae.max_frames {
            return fail(format!(
                "vae frame bounds [{}, {}] are invalid",
                self.vae.min_frames, self.vae.max_frames
            ));
        }
        if self.diffusion.timesteps < 2 {
            return fail(format!("timesteps {} too small", self.diffusion.timesteps));
        }
        if self.diffusion.sample_steps == 0
            || self.diffusion.sample_steps > self.diffusion.timesteps
        {
            return fail(format!(
                "sample_steps {} outside [1, {}]",
                self.diffusion.sample_steps, self.diffusion.timesteps
            ));
        }
        if !(0.0 < self.diffusion.beta_start && self.diffusion.beta_start < self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return fail(format!(
                "beta schedule ({}, {}) must satisfy 0 < start < end < 1",
                self.diffusion.beta_start, self.diffusion.beta_end
            ));
        }
        if !(0.0..=1.0).contains(&self.diffusion.p_uncond) {
            return fail(format!("p_uncond {} outside [0, 1]", self.diffusion.p_uncond));
        }
        if self.backbone.holders == 0 {
            return fail("holders must be at least 1".into());
        }
        if self.train.batch == 0 || self.vae.batch == 0 || self.eval.evaluator_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.eval.retrieval_batch < 2 {
            return fail(format!(
                "retrieval_batch {} must be at least 2",
                self.eval.retrieval_batch
            ));
        }
        Ok(())
    }
}
