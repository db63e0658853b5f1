//! Residual-based bidirectional diffusion for image dehazing and haze
//! generation.

pub mod cli_io;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod haze_synth;
pub mod image_io;
pub mod imaging;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod seeding;
pub mod tiled_sampler;
pub mod trainer;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserEstimate, UNet};
pub use diffusion::{Direction, DualState};
pub use error::{Error, Result};
pub use imaging::Image;
pub use schedule::Schedule;
