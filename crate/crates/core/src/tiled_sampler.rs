//! Size-agnostic sampling with overlapping windows.
//!
//! At every reverse step the full-size state is cut into `p × p` windows
//! placed every `r` pixels, the denoiser estimates each window, and the
//! estimates are averaged per pixel by coverage count. The reverse update
//! itself is applied once to the full image.

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{Denoiser, DenoiserEstimate};
use crate::diffusion::{run_reverse_chain, Direction, DualState, SampleTrace, SamplerOptions};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
    offsets: Vec<(usize, usize)>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + patch <= len).collect();
    if let Some(&last) = origins.last() {
        if last + patch < len {
            origins.push(len - patch);
        }
    }
    origins
}

impl PatchGrid {
    /// Window origins at multiples of `stride`, plus a final origin on each
    /// axis clamped so the last window ends on the image border.
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 || stride > patch {
            return Err(Error::InvalidGrid(format!(
                "need 1 <= stride <= patch, got patch {patch}, stride {stride}"
            )));
        }
        if patch > height || patch > width {
            return Err(Error::InvalidGrid(format!(
                "patch {patch} does not fit in a {height}x{width} image"
            )));
        }
        let rows = axis_origins(height, patch, stride);
        let cols = axis_origins(width, patch, stride);
        let offsets = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            height,
            width,
            patch,
            stride,
            offsets,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Row-major sorted, duplicate-free window origins.
    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    /// Number of windows covering each pixel, row-major `H × W`.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.height * self.width];
        for &(r, c) in &self.offsets {
            for i in r..r + self.patch {
                for v in &mut count[i * self.width + c..i * self.width + c + self.patch] {
                    *v += 1;
                }
            }
        }
        count
    }
}

/// Running per-pixel sum of window estimates (`Sample`) and coverage (`M`).
#[derive(Debug, Clone)]
pub struct Accumulator {
    height: usize,
    width: usize,
    channels: usize,
    sample_sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Accumulator {
            height,
            width,
            channels,
            sample_sum: vec![0.0; height * width * channels],
            count: vec![0; height * width],
        }
    }

    pub fn add(&mut self, row: usize, col: usize, patch: &Image) -> Result<()> {
        let (ph, pw, pc) = patch.shape();
        if pc != self.channels || row + ph > self.height || col + pw > self.width {
            return Err(Error::InvalidArgument(format!(
                "{ph}x{pw}x{pc} patch at ({row}, {col}) does not fit the accumulator"
            )));
        }
        for c in 0..pc {
            for i in 0..ph {
                let dst = (c * self.height + row + i) * self.width + col;
                let src = &patch.data()[(c * ph + i) * pw..][..pw];
                for (d, &s) in self.sample_sum[dst..dst + pw].iter_mut().zip(src) {
                    *d += f64::from(s);
                }
            }
        }
        for i in 0..ph {
            let dst = (row + i) * self.width + col;
            for v in &mut self.count[dst..dst + pw] {
                *v += 1;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    /// `sample_sum / count`; fails if any pixel was never covered.
    pub fn finish(self) -> Result<Image> {
        if self.count.contains(&0) {
            return Err(Error::InvalidGrid("some pixels are not covered by any window".into()));
        }
        let hw = self.height * self.width;
        let data = self
            .sample_sum
            .iter()
            .enumerate()
            .map(|(i, &s)| (s / f64::from(self.count[i % hw])) as f32)
            .collect();
        Image::from_vec(self.height, self.width, self.channels, data)
    }
}

/// Denoises every window of `state` and averages the overlapping estimates.
///
/// Windows may be evaluated in parallel; accumulation always follows the
/// grid order, so the result does not depend on the thread count.
pub fn fused_denoise<D: Denoiser + ?Sized>(
    state: &DualState,
    grid: &PatchGrid,
    denoiser: &D,
) -> Result<DenoiserEstimate> {
    let (h, w, c) = state.x.shape();
    state.x.ensure_same_shape(&state.y)?;
    if (h, w) != (grid.height, grid.width) {
        return Err(Error::InvalidGrid(format!(
            "grid is for {}x{} but the state is {h}x{w}",
            grid.height, grid.width
        )));
    }
    let p = grid.patch;
    let estimates: Vec<Result<DenoiserEstimate>> = grid
        .offsets
        .par_iter()
        .map(|&(row, col)| {
            let window = DualState {
                x: state.x.crop(row, col, p, p)?,
                y: state.y.crop(row, col, p, p)?,
                t_x: state.t_x,
                t_y: state.t_y,
            };
            denoiser.denoise(&window).map_err(|e| Error::Window {
                row,
                col,
                source: Box::new(e),
            })
        })
        .collect();
    let mut acc_x = Accumulator::new(h, w, c);
    let mut acc_y = Accumulator::new(h, w, c);
    for (&(row, col), est) in grid.offsets.iter().zip(estimates) {
        let est = est?;
        acc_x.add(row, col, &est.x0_hat)?;
        acc_y.add(row, col, &est.y0_hat)?;
    }
    Ok(DenoiserEstimate {
        x0_hat: acc_x.finish()?,
        y0_hat: acc_y.finish()?,
    })
}

/// Reverse sampling where every denoiser evaluation is a fused window pass.
#[allow(clippy::too_many_arguments)]
pub fn tiled_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    observation: &Image,
    direction: Direction,
    schedule: &Schedule,
    denoiser: &D,
    patch: usize,
    stride: usize,
    rng: &mut R,
    options: SamplerOptions,
) -> Result<(Image, SampleTrace)> {
    let grid = PatchGrid::new(observation.height(), observation.width(), patch, stride)?;
    run_reverse_chain(observation, direction, schedule, rng, options, |state| {
        fused_denoise(state, &grid, denoiser)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{IdentityDenoiser, OracleDenoiser};
    use crate::diffusion::sample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant(f32);

    impl Denoiser for Constant {
        fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
            Ok(DenoiserEstimate {
                x0_hat: state.x.map(|_| self.0),
                y0_hat: state.y.map(|_| self.0),
            })
        }
    }

    struct Failing;

    impl Denoiser for Failing {
        fn denoise(&self, _: &DualState) -> Result<DenoiserEstimate> {
            Err(Error::InvalidArgument("boom".into()))
        }
    }

    fn state(h: usize, w: usize, seed: u64) -> DualState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Image::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let y = Image::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0..1.0));
        DualState::new(x, y, 4, 0).unwrap()
    }

    #[test]
    fn single_window_grid() {
        let g = PatchGrid::new(8, 8, 8, 8).unwrap();
        assert_eq!(g.offsets(), &[(0, 0)]);
    }

    #[test]
    fn half_overlap_grid() {
        let g = PatchGrid::new(8, 8, 4, 2).unwrap();
        let origins = [0, 2, 4];
        let expected: Vec<(usize, usize)> =
            origins.iter().flat_map(|&r| origins.iter().map(move |&c| (r, c))).collect();
        assert_eq!(g.offsets(), expected.as_slice());
    }

    #[test]
    fn clamped_final_origin() {
        let g = PatchGrid::new(70, 70, 64, 32).unwrap();
        assert_eq!(g.offsets(), &[(0, 0), (0, 6), (6, 0), (6, 6)]);
    }

    #[test]
    fn grid_errors() {
        assert!(PatchGrid::new(8, 8, 9, 4).is_err());
        assert!(PatchGrid::new(8, 8, 4, 0).is_err());
        assert!(PatchGrid::new(8, 8, 4, 5).is_err());
    }

    #[test]
    fn single_window_matches_direct_call() {
        let s = state(8, 8, 1);
        let g = PatchGrid::new(8, 8, 8, 4).unwrap();
        let direct = IdentityDenoiser.denoise(&s).unwrap();
        assert_eq!(fused_denoise(&s, &g, &IdentityDenoiser).unwrap(), direct);
    }

    #[test]
    fn constants_fuse_to_constants() {
        let s = state(13, 9, 2);
        let g = PatchGrid::new(13, 9, 4, 3).unwrap();
        let est = fused_denoise(&s, &g, &Constant(0.3)).unwrap();
        assert!(est.x0_hat.data().iter().all(|&v| v == 0.3));
        assert!(est.y0_hat.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn identity_windows_fuse_to_the_state() {
        let s = state(8, 8, 3);
        let g = PatchGrid::new(8, 8, 4, 2).unwrap();
        let est = fused_denoise(&s, &g, &IdentityDenoiser).unwrap();
        assert_eq!(est.x0_hat, s.x);
        assert_eq!(est.y0_hat, s.y);
    }

    #[test]
    fn window_failures_carry_the_origin() {
        let s = state(8, 8, 4);
        let g = PatchGrid::new(8, 8, 4, 4).unwrap();
        match fused_denoise(&s, &g, &Failing) {
            Err(Error::Window { row: 0, col: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_size_window_reproduces_untiled_sampler() {
        let sched = Schedule::new(15, 2.0, 1.0).unwrap();
        let s = state(8, 8, 5);
        let oracle = OracleDenoiser {
            x0: s.x.clone(),
            y0: s.y.clone(),
        };
        for direction in [Direction::Dehaze, Direction::Hazify] {
            let obs = if direction == Direction::Dehaze { &s.y } else { &s.x };
            let mut r1 = ChaCha8Rng::seed_from_u64(9);
            let mut r2 = ChaCha8Rng::seed_from_u64(9);
            let a = sample(obs, direction, &IdentityDenoiser, &sched, &mut r1, SamplerOptions::default()).unwrap();
            let b = tiled_sample(obs, direction, &sched, &IdentityDenoiser, 8, 8, &mut r2, SamplerOptions::default())
                .unwrap();
            assert_eq!(a, b);
            let mut r3 = ChaCha8Rng::seed_from_u64(1);
            let (c, trace) =
                tiled_sample(obs, direction, &sched, &oracle, 8, 4, &mut r3, SamplerOptions::default()).unwrap();
            assert_eq!(trace.denoiser_rounds, 15);
            let target = if direction == Direction::Dehaze { &s.x } else { &s.y };
            assert_eq!(&c, target);
        }
    }

    proptest! {
        #[test]
        fn grid_covers_every_pixel(h in 1usize..80, w in 1usize..80, p_frac in 0.0f64..1.0, r_frac in 0.0f64..1.0) {
            let p = 1 + ((h.min(w) - 1) as f64 * p_frac) as usize;
            let r = 1 + ((p - 1) as f64 * r_frac) as usize;
            let g = PatchGrid::new(h, w, p, r).unwrap();
            prop_assert!(g.coverage().iter().all(|&c| c >= 1));
            for &(row, col) in g.offsets() {
                prop_assert!(row + p <= h && col + p <= w);
            }
            let mut sorted = g.offsets().to_vec();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.as_slice(), g.offsets());
        }
    }
}
