//! Command-line workflows and the file formats they share.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use crate::denoiser::Denoiser;
use crate::diffusion::{Direction, SampleTrace, SamplerOptions};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schedule::Schedule;
use crate::seeding::{derive_seed, rng_for};
use crate::tiled_sampler::tiled_sample;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

/// Largest usable window for an `h × w` image: `patch` itself if it fits,
/// otherwise the biggest multiple of `multiple` inside the shorter side.
pub fn effective_patch(h: usize, w: usize, patch: usize, multiple: usize) -> Result<usize> {
    let side = h.min(w);
    if patch <= side {
        return Ok(patch);
    }
    let p = side / multiple * multiple;
    if p == 0 {
        return Err(Error::InvalidArgument(format!(
            "a {h}x{w} image is smaller than the network's minimum size {multiple}"
        )));
    }
    Ok(p)
}

/// Replicates a grayscale image to `channels` channels when needed.
pub fn adapt_channels(image: Image, channels: usize) -> Result<Image> {
    let (h, w, c) = image.shape();
    if c == channels {
        return Ok(image);
    }
    if c == 1 {
        let plane = image.into_vec();
        let data = plane.iter().copied().cycle().take(channels * h * w).collect();
        return Image::from_vec(h, w, channels, data);
    }
    Err(Error::ShapeMismatch {
        expected: (h, w, channels),
        actual: (h, w, c),
    })
}

/// Stable 64-bit FNV-1a hash, used to give every file its own seed stream.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

pub fn image_seed(master: u64, name: &str, stage: u64) -> u64 {
    derive_seed(derive_seed(master, name_hash(name)), stage)
}

/// Tiled sampling of one image of any size.
#[allow(clippy::too_many_arguments)]
pub fn translate<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &Schedule,
    image: &Image,
    direction: Direction,
    patch: usize,
    stride: usize,
    size_multiple: usize,
    seed: u64,
) -> Result<(Image, SampleTrace)> {
    let p = effective_patch(image.height(), image.width(), patch, size_multiple)?;
    let r = stride.clamp(1, p);
    let mut rng = rng_for(seed, 0);
    tiled_sample(image, direction, schedule, denoiser, p, r, &mut rng, SamplerOptions::default())
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::IdentityDenoiser;

    #[test]
    fn patch_shrinks_for_small_images() {
        assert_eq!(effective_patch(200, 150, 64, 2).unwrap(), 64);
        assert_eq!(effective_patch(50, 70, 64, 4).unwrap(), 48);
        assert_eq!(effective_patch(37, 90, 64, 2).unwrap(), 36);
        assert!(effective_patch(3, 90, 64, 4).is_err());
    }

    #[test]
    fn grayscale_is_replicated() {
        let g = Image::from_fn(2, 3, 1, |_, i, j| (i * 3 + j) as f32 / 10.0);
        let rgb = adapt_channels(g.clone(), 3).unwrap();
        for c in 0..3 {
            assert_eq!(&rgb.data()[c * 6..(c + 1) * 6], g.data());
        }
        assert!(adapt_channels(Image::zeros(2, 2, 3), 1).is_err());
    }

    #[test]
    fn per_file_seeds_are_stable_and_distinct() {
        assert_eq!(image_seed(1, "a.png", 0), image_seed(1, "a.png", 0));
        assert_ne!(image_seed(1, "a.png", 0), image_seed(1, "b.png", 0));
        assert_ne!(image_seed(1, "a.png", 0), image_seed(1, "a.png", 1));
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn translate_preserves_size() {
        let s = Schedule::new(3, 1.0, 1.0).unwrap();
        let img = Image::from_fn(100, 76, 3, |c, i, j| ((c + i + j) as f32 * 0.05).sin());
        let (out, trace) = translate(&IdentityDenoiser, &s, &img, Direction::Dehaze, 64, 32, 4, 9).unwrap();
        assert_eq!(out.shape(), (100, 76, 3));
        assert_eq!(trace.reverse_steps, 3);
    }
}
