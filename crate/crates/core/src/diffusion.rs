//! The two residual-shifting Markov chains.
//!
//! The x-chain starts at the clear image `x0` and drifts toward the hazy
//! image `y0` by the residual `e0 = y0 − x0`; the y-chain mirrors it with
//! `e1 = x0 − y0`. Both share one schedule. Dehazing runs the x-chain in
//! reverse conditioned on the unperturbed `y0`; haze generation runs the
//! y-chain in reverse conditioned on `x0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserEstimate};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schedule::Schedule;

/// A perturbed pair as seen by the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub x: Image,
    pub y: Image,
    pub t_x: usize,
    pub t_y: usize,
}

impl DualState {
    pub fn new(x: Image, y: Image, t_x: usize, t_y: usize) -> Result<Self> {
        x.ensure_same_shape(&y)?;
        Ok(DualState { x, y, t_x, t_y })
    }
}

/// Mean and isotropic variance of a Gaussian over images.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mean: Image,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Reverse the x-chain: hazy observation → clear estimate.
    Dehaze,
    /// Reverse the y-chain: clear observation → hazy estimate.
    Hazify,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Dehaze => "dehaze",
            Direction::Hazify => "hazify",
        })
    }
}

/// Standard normal noise shaped like `like`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &Image, rng: &mut R) -> Image {
    let mut out = like.clone();
    for v in out.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// `start·(1 − w) + target·w + scale·noise`, written as a convex
/// combination so that `w = 0` and `w = 1` reproduce the endpoints exactly.
pub fn shift_with_noise(start: &Image, target: &Image, weight: f64, noise_scale: f64, noise: &Image) -> Result<Image> {
    start.ensure_same_shape(target)?;
    start.ensure_same_shape(noise)?;
    let (keep, take, s) = ((1.0 - weight) as f32, weight as f32, noise_scale as f32);
    let mut out = start.clone();
    for ((o, &t), &n) in out.data_mut().iter_mut().zip(target.data()).zip(noise.data()) {
        *o = *o * keep + t * take + s * n;
    }
    Ok(out)
}

/// One forward transition of a chain: `prev + α·(toward − from) + κ·√α·ε`.
fn forward_step(
    prev: &Image,
    from: &Image,
    toward: &Image,
    s: &Schedule,
    t: usize,
    noise: &Image,
) -> Result<Image> {
    prev.ensure_same_shape(from)?;
    prev.ensure_same_shape(toward)?;
    prev.ensure_same_shape(noise)?;
    let alpha = s.alpha(t)?;
    let (a, scale) = (alpha as f32, (s.kappa() * alpha.sqrt()) as f32);
    let mut out = prev.clone();
    for (((o, &f), &g), &n) in out
        .data_mut()
        .iter_mut()
        .zip(from.data())
        .zip(toward.data())
        .zip(noise.data())
    {
        *o += a * (g - f) + scale * n;
    }
    Ok(out)
}

pub fn forward_step_x<R: Rng + ?Sized>(
    x_prev: &Image,
    x0: &Image,
    y0: &Image,
    s: &Schedule,
    t: usize,
    rng: &mut R,
) -> Result<Image> {
    let noise = gaussian_like(x_prev, rng);
    forward_step(x_prev, x0, y0, s, t, &noise)
}

pub fn forward_step_y<R: Rng + ?Sized>(
    y_prev: &Image,
    x0: &Image,
    y0: &Image,
    s: &Schedule,
    t: usize,
    rng: &mut R,
) -> Result<Image> {
    let noise = gaussian_like(y_prev, rng);
    forward_step(y_prev, y0, x0, s, t, &noise)
}

/// Draws `x_t ~ N(x0 + β_t·(y0 − x0), κ²β_t)` from the supplied noise.
pub fn marginal_x_with_noise(x0: &Image, y0: &Image, s: &Schedule, t: usize, noise: &Image) -> Result<Image> {
    let beta = s.beta(t)?;
    if t == 0 {
        x0.ensure_same_shape(y0)?;
        return Ok(x0.clone());
    }
    shift_with_noise(x0, y0, beta, s.kappa() * beta.sqrt(), noise)
}

/// Draws `y_t ~ N(y0 + β_t·(x0 − y0), κ²β_t)` from the supplied noise.
pub fn marginal_y_with_noise(x0: &Image, y0: &Image, s: &Schedule, t: usize, noise: &Image) -> Result<Image> {
    marginal_x_with_noise(y0, x0, s, t, noise)
}

pub fn forward_marginal_x<R: Rng + ?Sized>(
    x0: &Image,
    y0: &Image,
    s: &Schedule,
    t: usize,
    rng: &mut R,
) -> Result<Image> {
    s.beta(t)?;
    if t == 0 {
        x0.ensure_same_shape(y0)?;
        return Ok(x0.clone());
    }
    let noise = gaussian_like(x0, rng);
    marginal_x_with_noise(x0, y0, s, t, &noise)
}

pub fn forward_marginal_y<R: Rng + ?Sized>(
    x0: &Image,
    y0: &Image,
    s: &Schedule,
    t: usize,
    rng: &mut R,
) -> Result<Image> {
    forward_marginal_x(y0, x0, s, t, rng)
}

fn posterior(state: &Image, clean: &Image, s: &Schedule, t: usize) -> Result<PosteriorParams> {
    state.ensure_same_shape(clean)?;
    let c = s.posterior(t)?;
    let (a, b) = (c.state as f32, c.clean as f32);
    let mean = state.zip_map(clean, |z, z0| a * z + b * z0)?;
    Ok(PosteriorParams {
        mean,
        variance: c.variance,
    })
}

/// `q(x_{t−1} | x_t, x0)`.
pub fn posterior_x(x_t: &Image, x0_est: &Image, s: &Schedule, t: usize) -> Result<PosteriorParams> {
    posterior(x_t, x0_est, s, t)
}

/// `q(y_{t−1} | y_t, y0)`.
pub fn posterior_y(y_t: &Image, y0_est: &Image, s: &Schedule, t: usize) -> Result<PosteriorParams> {
    posterior(y_t, y0_est, s, t)
}

/// One reverse transition of the active chain. The mean plugs the
/// denoiser's clean estimate into the closed-form posterior; noise is
/// skipped at `t = 1` (zero variance) and whenever `noiseless` is set.
pub fn reverse_step<R: Rng + ?Sized>(
    state: &DualState,
    estimate: &DenoiserEstimate,
    s: &Schedule,
    direction: Direction,
    rng: &mut R,
    noiseless: bool,
) -> Result<Image> {
    let (active, clean, t) = match direction {
        Direction::Dehaze => (&state.x, &estimate.x0_hat, state.t_x),
        Direction::Hazify => (&state.y, &estimate.y0_hat, state.t_y),
    };
    if t == 0 {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 1,
            max: s.steps(),
        });
    }
    let PosteriorParams { mut mean, variance } = posterior(active, clean, s, t)?;
    if variance > 0.0 && !noiseless {
        let sd = variance.sqrt() as f32;
        for v in mean.data_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v += sd * n;
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplerOptions {
    /// Suppress reverse-step noise at every step.
    pub noiseless: bool,
}

/// Counters reported by a sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleTrace {
    pub reverse_steps: usize,
    pub denoiser_rounds: usize,
}

/// Generic reverse loop. `estimate` produces the clean-pair estimate for a
/// full-size state; it is called exactly once per step.
pub fn run_reverse_chain<R, F>(
    observation: &Image,
    direction: Direction,
    s: &Schedule,
    rng: &mut R,
    options: SamplerOptions,
    mut estimate: F,
) -> Result<(Image, SampleTrace)>
where
    R: Rng + ?Sized,
    F: FnMut(&DualState) -> Result<DenoiserEstimate>,
{
    let steps = s.steps();
    let noise = gaussian_like(observation, rng);
    let start = shift_with_noise(observation, observation, 0.0, s.kappa(), &noise)?;
    let mut state = match direction {
        Direction::Dehaze => DualState::new(start, observation.clone(), steps, 0)?,
        Direction::Hazify => DualState::new(observation.clone(), start, 0, steps)?,
    };
    let mut trace = SampleTrace::default();
    for t in (1..=steps).rev() {
        match direction {
            Direction::Dehaze => state.t_x = t,
            Direction::Hazify => state.t_y = t,
        }
        let est = estimate(&state)?;
        trace.denoiser_rounds += 1;
        let next = reverse_step(&state, &est, s, direction, rng, options.noiseless)?;
        trace.reverse_steps += 1;
        match direction {
            Direction::Dehaze => state.x = next,
            Direction::Hazify => state.y = next,
        }
    }
    log::debug!(
        "{direction}: {} reverse steps, {} denoiser rounds",
        trace.reverse_steps,
        trace.denoiser_rounds
    );
    let out = match direction {
        Direction::Dehaze => state.x,
        Direction::Hazify => state.y,
    };
    Ok((out.clipped(), trace))
}

pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    observation: &Image,
    direction: Direction,
    denoiser: &D,
    s: &Schedule,
    rng: &mut R,
    options: SamplerOptions,
) -> Result<(Image, SampleTrace)> {
    run_reverse_chain(observation, direction, s, rng, options, |state| denoiser.denoise(state))
}

/// Clear-image estimate for a hazy observation.
pub fn sample_dehaze<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    y0: &Image,
    denoiser: &D,
    s: &Schedule,
    rng: &mut R,
) -> Result<Image> {
    Ok(sample(y0, Direction::Dehaze, denoiser, s, rng, SamplerOptions::default())?.0)
}

/// Hazy-image estimate for a clear observation.
pub fn sample_hazify<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x0: &Image,
    denoiser: &D,
    s: &Schedule,
    rng: &mut R,
) -> Result<Image> {
    Ok(sample(x0, Direction::Hazify, denoiser, s, rng, SamplerOptions::default())?.0)
}
