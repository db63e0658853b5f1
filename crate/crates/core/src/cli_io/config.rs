//! Flat JSON run configuration. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::haze_synth::HazeMode;
use crate::schedule::ScheduleParams;
use crate::trainer::{TimestepPolicy, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,

    pub steps: usize,
    pub kappa: f64,
    pub gamma: f64,

    /// Window size for tiled sampling and crop size for training.
    pub patch: usize,
    pub stride: usize,

    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_scale: usize,
    pub timestep_embed_dim: usize,

    pub patches_per_image: usize,
    pub images_per_batch: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
    pub timestep_sampling: TimestepPolicy,

    pub synth_count: usize,
    pub synth_size: usize,
    pub haze_mode: HazeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = ScheduleParams::default();
        let net = DenoiserConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            deterministic: false,
            threads: 0,
            steps: schedule.steps,
            kappa: schedule.kappa,
            gamma: schedule.gamma,
            patch: train.patch_size,
            stride: 32,
            image_channels: net.image_channels,
            base_channels: net.base_channels,
            channel_multipliers: net.channel_multipliers,
            num_res_blocks_per_scale: net.num_res_blocks_per_scale,
            timestep_embed_dim: net.timestep_embed_dim,
            patches_per_image: train.patches_per_image,
            images_per_batch: train.images_per_batch,
            learning_rate: train.learning_rate,
            iterations: train.iterations,
            checkpoint_every: train.checkpoint_every,
            grad_clip: train.grad_clip,
            timestep_sampling: train.timestep_sampling,
            synth_count: 32,
            synth_size: 64,
            haze_mode: HazeMode::Mixed,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            kappa: self.kappa,
            gamma: self.gamma,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: self.image_channels,
            base_channels: self.base_channels,
            channel_multipliers: self.channel_multipliers.clone(),
            num_res_blocks_per_scale: self.num_res_blocks_per_scale,
            timestep_embed_dim: self.timestep_embed_dim,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            patch_size: self.patch,
            patches_per_image: self.patches_per_image,
            images_per_batch: self.images_per_batch,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            seed: self.seed,
            timestep_sampling: self.timestep_sampling,
            checkpoint_every: self.checkpoint_every,
            grad_clip: self.grad_clip,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
