//! Patch-based training on paired clear/hazy images.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{image_to_map, UNet};
use crate::diffusion::{gaussian_like, marginal_x_with_noise, marginal_y_with_noise, DualState};
use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::imaging::Image;
use crate::optim::{clip_grad_norm, Adam};
use crate::schedule::Schedule;
use crate::seeding::rng_for;

/// Samples per gradient chunk. Chunks are reduced in a fixed order, so the
/// result does not depend on how many threads run them.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepPolicy {
    /// `t_x`, `t_y` independent and uniform on `{0..T}`, redrawn on `(0, 0)`.
    #[default]
    IndependentUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub images_per_batch: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub seed: u64,
    pub timestep_sampling: TimestepPolicy,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            patches_per_image: 16,
            images_per_batch: 16,
            learning_rate: 5e-5,
            iterations: 1000,
            seed: 0,
            timestep_sampling: TimestepPolicy::IndependentUniform,
            checkpoint_every: 500,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.images_per_batch * self.patches_per_image
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("patches_per_image", self.patches_per_image),
            ("images_per_batch", self.images_per_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub x_patch: Image,
    pub y_patch: Image,
    pub origin: (usize, usize),
}

/// `n` aligned crops of size `p × p` with origins uniform over all valid
/// positions.
pub fn sample_patch_pairs<R: Rng + ?Sized>(
    x0: &Image,
    y0: &Image,
    p: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    x0.ensure_same_shape(y0)?;
    let (h, w, _) = x0.shape();
    if p == 0 || p > h || p > w {
        return Err(Error::InvalidArgument(format!("patch size {p} does not fit a {h}x{w} image")));
    }
    (0..n)
        .map(|_| {
            let row = rng.random_range(0..=h - p);
            let col = rng.random_range(0..=w - p);
            Ok(PatchPair {
                x_patch: x0.crop(row, col, p, p)?,
                y_patch: y0.crop(row, col, p, p)?,
                origin: (row, col),
            })
        })
        .collect()
}

pub fn sample_timesteps<R: Rng + ?Sized>(steps: usize, rng: &mut R, policy: TimestepPolicy) -> (usize, usize) {
    match policy {
        TimestepPolicy::IndependentUniform => loop {
            let t_x = rng.random_range(0..=steps);
            let t_y = rng.random_range(0..=steps);
            if (t_x, t_y) != (0, 0) {
                return (t_x, t_y);
            }
        },
    }
}

/// A training sample: the perturbed pair plus its clean targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub state: DualState,
    pub target_x: Image,
    pub target_y: Image,
}

/// Perturbs both images of `pair` with the forward marginals, using
/// independent noise for the two chains.
pub fn perturb_pair<R: Rng + ?Sized>(
    pair: &PatchPair,
    schedule: &Schedule,
    policy: TimestepPolicy,
    rng: &mut R,
) -> Result<TrainSample> {
    let (t_x, t_y) = sample_timesteps(schedule.steps(), rng, policy);
    let noise_x = gaussian_like(&pair.x_patch, rng);
    let noise_y = gaussian_like(&pair.y_patch, rng);
    let x = marginal_x_with_noise(&pair.x_patch, &pair.y_patch, schedule, t_x, &noise_x)?;
    let y = marginal_y_with_noise(&pair.x_patch, &pair.y_patch, schedule, t_y, &noise_y)?;
    Ok(TrainSample {
        state: DualState::new(x, y, t_x, t_y)?,
        target_x: pair.x_patch.clone(),
        target_y: pair.y_patch.clone(),
    })
}

/// Mean L1 loss over the batch and its gradient.
pub fn batch_loss_and_gradient(net: &UNet<f32>, samples: &[TrainSample]) -> Result<(f64, Vec<f32>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let weight = 1.0 / samples.len() as f32;
    let partials: Vec<Result<(f64, Vec<f32>)>> = samples
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0f32; net.params().len()];
            let mut loss = 0.0f64;
            for s in chunk {
                let l = net.accumulate_l1_gradient(
                    &image_to_map(&s.state.x),
                    &image_to_map(&s.state.y),
                    s.state.t_x,
                    s.state.t_y,
                    s.target_x.data(),
                    s.target_y.data(),
                    weight,
                    &mut grads,
                )?;
                loss += f64::from(l);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = vec![0.0f32; net.params().len()];
    let mut loss = 0.0f64;
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
    }
    Ok((loss, total))
}

/// One optimizer update. Returns the batch loss before the update.
pub fn train_step(
    net: &mut UNet<f32>,
    optimizer: &mut Adam,
    samples: &[TrainSample],
    grad_clip: Option<f64>,
    iteration: u64,
) -> Result<f64> {
    let (loss, mut grads) = batch_loss_and_gradient(net, samples)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { iteration, loss });
    }
    if let Some(max_norm) = grad_clip {
        clip_grad_norm(&mut grads, max_norm);
    }
    optimizer.update(net.params_mut(), &grads)?;
    Ok(loss)
}

/// Aligned clear/hazy images held in memory.
#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pub names: Vec<String>,
    pub clear: Vec<Image>,
    pub hazy: Vec<Image>,
}

impl PairedDataset {
    pub fn from_images(names: Vec<String>, clear: Vec<Image>, hazy: Vec<Image>) -> Result<Self> {
        if names.len() != clear.len() || clear.len() != hazy.len() {
            return Err(Error::Dataset("names, clear and hazy lists differ in length".into()));
        }
        for ((n, c), h) in names.iter().zip(&clear).zip(&hazy) {
            if c.shape() != h.shape() {
                return Err(Error::Dataset(format!(
                    "{n}: clear is {:?} but hazy is {:?}",
                    c.shape(),
                    h.shape()
                )));
            }
        }
        Ok(PairedDataset { names, clear, hazy })
    }

    /// Loads `root/clear` and `root/hazy`, which must hold the same PNG
    /// file names.
    pub fn load(root: &Path) -> Result<Self> {
        let list = |sub: &str| -> Result<BTreeSet<String>> {
            let dir = root.join(sub);
            let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut names = BTreeSet::new();
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.to_ascii_lowercase().ends_with(".png") {
                    names.insert(name);
                }
            }
            Ok(names)
        };
        let clear_names = list("clear")?;
        let hazy_names = list("hazy")?;
        if clear_names != hazy_names {
            let only_clear: Vec<_> = clear_names.difference(&hazy_names).cloned().collect();
            let only_hazy: Vec<_> = hazy_names.difference(&clear_names).cloned().collect();
            return Err(Error::Dataset(format!(
                "clear/ and hazy/ differ: only in clear: [{}]; only in hazy: [{}]",
                only_clear.join(", "),
                only_hazy.join(", ")
            )));
        }
        if clear_names.is_empty() {
            return Err(Error::Dataset(format!("no PNG pairs under {}", root.display())));
        }
        let names: Vec<String> = clear_names.into_iter().collect();
        let loaded: Vec<Result<(Image, Image)>> = names
            .par_iter()
            .map(|n| Ok((load_image(root.join("clear").join(n))?, load_image(root.join("hazy").join(n))?)))
            .collect();
        let mut clear = Vec::with_capacity(names.len());
        let mut hazy = Vec::with_capacity(names.len());
        for pair in loaded {
            let (c, h) = pair?;
            clear.push(c);
            hazy.push(h);
        }
        Self::from_images(names, clear, hazy)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn min_side(&self) -> usize {
        self.clear.iter().map(|c| c.height().min(c.width())).min().unwrap_or(0)
    }
}

/// Draws the training batch for `iteration`. Depends only on the seed, the
/// iteration and the dataset, so a resumed run sees the same batches.
pub fn draw_batch(
    dataset: &PairedDataset,
    config: &TrainConfig,
    schedule: &Schedule,
    iteration: u64,
) -> Result<Vec<TrainSample>> {
    let mut rng = rng_for(config.seed, iteration);
    let mut samples = Vec::with_capacity(config.batch_size());
    for _ in 0..config.images_per_batch {
        let i = rng.random_range(0..dataset.len());
        let pairs = sample_patch_pairs(
            &dataset.clear[i],
            &dataset.hazy[i],
            config.patch_size,
            config.patches_per_image,
            &mut rng,
        )?;
        for pair in &pairs {
            samples.push(perturb_pair(pair, schedule, config.timestep_sampling, &mut rng)?);
        }
    }
    Ok(samples)
}

/// Network, optimizer and the number of completed iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: UNet<f32>,
    pub optimizer: Adam,
    pub iteration: u64,
}

/// Runs iterations `state.iteration + 1 ..= config.iterations`. `on_loss`
/// sees every `(iteration, loss)`; `on_checkpoint` runs every
/// `checkpoint_every` iterations and after the last one.
pub fn train<L, C>(
    dataset: &PairedDataset,
    config: &TrainConfig,
    schedule: &Schedule,
    state: &mut TrainState,
    mut on_loss: L,
    mut on_checkpoint: C,
) -> Result<()>
where
    L: FnMut(u64, f64) -> Result<()>,
    C: FnMut(&TrainState) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    if config.patch_size > dataset.min_side() {
        return Err(Error::Config(format!(
            "patch_size {} exceeds the smallest image side {}",
            config.patch_size,
            dataset.min_side()
        )));
    }
    let multiple = state.net.config().size_multiple();
    if config.patch_size % multiple != 0 {
        return Err(Error::Config(format!(
            "patch_size {} must be a multiple of {multiple} for this network",
            config.patch_size
        )));
    }
    let start = state.iteration;
    for iteration in start + 1..=config.iterations {
        let batch = draw_batch(dataset, config, schedule, iteration)?;
        let loss = train_step(&mut state.net, &mut state.optimizer, &batch, config.grad_clip, iteration)?;
        state.iteration = iteration;
        log::debug!("iteration {iteration} loss {loss:.6}");
        on_loss(iteration, loss)?;
        let periodic = config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0;
        if periodic || iteration == config.iterations {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}
