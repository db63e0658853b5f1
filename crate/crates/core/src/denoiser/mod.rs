//! The dual-timestep denoiser `f(x_{t_x}, y_{t_y}, t_x, t_y) → (x̂0, ŷ0)`.

pub mod nn;
mod unet;

pub(crate) use unet::image_to_map;
pub use unet::{DenoiserConfig, UNet};

use crate::diffusion::DualState;
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Predicted clean pair. Values are not clipped here.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserEstimate {
    pub x0_hat: Image,
    pub y0_hat: Image,
}

/// Anything that maps a perturbed pair to an estimate of its clean endpoints.
///
/// A single implementation serves both dehazing and haze generation.
pub trait Denoiser: Sync {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate>;

    /// Batch evaluation; samples never influence each other.
    fn denoise_batch(&self, states: &[DualState]) -> Result<Vec<DenoiserEstimate>> {
        states.iter().map(|s| self.denoise(s)).collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
        (**self).denoise(state)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
        (**self).denoise(state)
    }
}

/// Returns the true clean pair whatever the input. Used to check that the
/// reverse chains land exactly on their targets.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: Image,
    pub y0: Image,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
        self.x0.ensure_same_shape(&state.x)?;
        self.y0.ensure_same_shape(&state.y)?;
        Ok(DenoiserEstimate {
            x0_hat: self.x0.clone(),
            y0_hat: self.y0.clone(),
        })
    }
}

/// Returns its inputs unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
        Ok(DenoiserEstimate {
            x0_hat: state.x.clone(),
            y0_hat: state.y.clone(),
        })
    }
}

/// Sinusoidal encoding of both timesteps, concatenated: the first `dim / 2`
/// entries encode `t_x`, the rest `t_y`. Timesteps are used as raw integers.
pub fn embed_timesteps(t_x: usize, t_y: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep embedding dimension must be even and at least 2, got {dim}"
        )));
    }
    let mut out = sinusoid(t_x, dim / 2);
    out.extend(sinusoid(t_y, dim / 2));
    Ok(out)
}

fn sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let freqs = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..freqs {
        let freq = (-(10_000f64.ln()) * i as f64 / freqs.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[freqs + i] = arg.cos();
    }
    // odd `dim` leaves a trailing zero
    out
}
