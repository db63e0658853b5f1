//! Paired clear/hazy data from the atmospheric scattering model
//! `I = J·t + A·(1 − t)`, `t = exp(−β·d)`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::save_png;
use crate::imaging::{unit_to_internal, Image};
use crate::seeding::{derive_seed, rng_for};

pub const AIRLIGHT_RANGE: (f32, f32) = (0.7, 1.0);
pub const SCATTER_RANGE: (f32, f32) = (0.3, 2.5);
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub enum ScatterField {
    Uniform(f32),
    /// Per-pixel coefficients, row-major `H × W`.
    Field(Vec<f32>),
}

impl ScatterField {
    fn at(&self, pixel: usize) -> f32 {
        match self {
            ScatterField::Uniform(b) => *b,
            ScatterField::Field(f) => f[pixel],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazeParams {
    /// Atmospheric light per channel, unit range.
    pub airlight: [f32; 3],
    pub scatter: ScatterField,
    /// Normalized scene depth, row-major `H × W`.
    pub depth: Vec<f32>,
}

impl HazeParams {
    /// Transmission `exp(−β·d)` per pixel.
    pub fn transmission(&self) -> Vec<f32> {
        self.depth
            .iter()
            .enumerate()
            .map(|(i, &d)| (-self.scatter.at(i) * d).exp())
            .collect()
    }
}

/// Applies the scattering model to a clear image. Works directly on the
/// internal range: the model is a convex combination, so the affine range
/// map commutes with it.
pub fn apply_asm(clear: &Image, params: &HazeParams) -> Result<Image> {
    let (h, w, _) = clear.shape();
    if params.depth.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: (h, w, 1),
            actual: (params.depth.len(), 1, 1),
        });
    }
    if let ScatterField::Field(f) = &params.scatter {
        if f.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: (h, w, 1),
                actual: (f.len(), 1, 1),
            });
        }
    }
    let t = params.transmission();
    let hw = h * w;
    let mut out = clear.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        let a = unit_to_internal(params.airlight[ch.min(2)]);
        for (v, &tp) in plane.iter_mut().zip(&t) {
            *v = (*v * tp + a * (1.0 - tp)).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStyle {
    LinearRamp,
    SmoothNoise,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HazeMode {
    Homogeneous,
    NonHomogeneous,
    #[default]
    Mixed,
}

impl std::str::FromStr for HazeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(HazeMode::Homogeneous),
            "non-homogeneous" => Ok(HazeMode::NonHomogeneous),
            "mixed" => Ok(HazeMode::Mixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown haze mode '{other}' (homogeneous, non-homogeneous, mixed)"
            ))),
        }
    }
}

/// Multi-octave value noise normalized to `[0, 1]`. The finest lattice
/// spacing is 16 pixels.
pub fn smooth_noise<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Vec<f32> {
    const FINEST_CELL: f32 = 16.0;
    let mut field = vec![0.0f32; height * width];
    let mut cell = (height.max(width) as f32 / 2.0).max(FINEST_CELL * 2.0);
    let mut amplitude = 1.0f32;
    while cell >= FINEST_CELL {
        let gh = (height as f32 / cell).ceil() as usize + 2;
        let gw = (width as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
        let (oy, ox) = (rng.random::<f32>(), rng.random::<f32>());
        for i in 0..height {
            let fy = i as f32 / cell + oy;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for j in 0..width {
                let fx = j as f32 / cell + ox;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let at = |y: usize, x: usize| lattice[y * gw + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                field[i * width + j] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        cell /= 2.0;
        amplitude /= 2.0;
    }
    normalize(&mut field);
    field
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn normalize(field: &mut [f32]) {
    let (lo, hi) = field
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in field.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Depth map in `[0, 1]`. `LinearRamp` is 0 on the top row and 1 on the
/// bottom row.
pub fn gen_depth<R: Rng + ?Sized>(height: usize, width: usize, style: DepthStyle, rng: &mut R) -> Vec<f32> {
    let ramp = || -> Vec<f32> {
        let denom = (height.max(2) - 1) as f32;
        (0..height * width).map(|p| (p / width) as f32 / denom).collect()
    };
    match style {
        DepthStyle::LinearRamp => ramp(),
        DepthStyle::SmoothNoise => smooth_noise(height, width, rng),
        DepthStyle::Mixed => {
            let noise = smooth_noise(height, width, rng);
            let mut d: Vec<f32> = ramp().iter().zip(&noise).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            normalize(&mut d);
            d
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.02..0.98), rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)]
}

/// Procedural RGB scene: a two-colour gradient backdrop with a handful of
/// flat or striped rectangles and discs.
pub fn gen_scene<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let (top, bottom) = (random_color(rng), random_color(rng));
    let mut unit = vec![0.0f32; 3 * height * width];
    let hw = height * width;
    for i in 0..height {
        let t = i as f32 / (height.max(2) - 1) as f32;
        for j in 0..width {
            for c in 0..3 {
                unit[c * hw + i * width + j] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..=8);
    let scale = height.min(width) as f32;
    for _ in 0..shapes {
        let color = random_color(rng);
        let (ci, cj) = (rng.random_range(0.0..height as f32), rng.random_range(0.0..width as f32));
        let (ri, rj) = (rng.random_range(0.08..0.35) * scale, rng.random_range(0.08..0.35) * scale);
        let disc = rng.random_bool(0.4);
        let stripes = rng.random_bool(0.5);
        let (freq, angle) = (rng.random_range(0.3..1.2), rng.random_range(0.0..std::f32::consts::PI));
        let (ca, sa) = (angle.cos(), angle.sin());
        for i in 0..height {
            for j in 0..width {
                let (di, dj) = ((i as f32 - ci) / ri, (j as f32 - cj) / rj);
                let inside = if disc {
                    di * di + dj * dj <= 1.0
                } else {
                    di.abs() <= 1.0 && dj.abs() <= 1.0
                };
                if !inside {
                    continue;
                }
                let shade = if stripes {
                    0.75 + 0.25 * (freq * (i as f32 * sa + j as f32 * ca)).sin()
                } else {
                    1.0
                };
                for c in 0..3 {
                    unit[c * hw + i * width + j] = (color[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
    Image::from_unit(height, width, 3, &unit).expect("finite scene")
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub file: String,
    pub index: u64,
    pub master_seed: u64,
    pub seed: u64,
    pub size: usize,
    pub homogeneous: bool,
    pub airlight: [f32; 3],
    /// Scattering coefficient for homogeneous haze.
    pub beta: Option<f32>,
    /// `(min, max)` of the coefficient field for non-homogeneous haze.
    pub beta_range: Option<[f32; 2]>,
    pub beta_field_seed: Option<u64>,
    pub depth_style: DepthStyle,
}

/// A clear scene and its hazy counterpart, fully determined by `seed`.
pub fn gen_pair(size: usize, homogeneous: bool, seed: u64) -> (Image, Image, HazeParams, PairRecord) {
    let mut rng = rng_for(seed, 0);
    let clear = gen_scene(size, size, &mut rng);
    let style = match rng.random_range(0..3) {
        0 => DepthStyle::LinearRamp,
        1 => DepthStyle::SmoothNoise,
        _ => DepthStyle::Mixed,
    };
    let depth = gen_depth(size, size, style, &mut rng);
    let base = rng.random_range(AIRLIGHT_RANGE.0..AIRLIGHT_RANGE.1);
    let airlight = [0, 1, 2].map(|_| (base + rng.random_range(-0.05..0.05)).clamp(AIRLIGHT_RANGE.0, AIRLIGHT_RANGE.1));
    let (scatter, beta, beta_range, beta_field_seed) = if homogeneous {
        let b = rng.random_range(SCATTER_RANGE.0..SCATTER_RANGE.1);
        (ScatterField::Uniform(b), Some(b), None, None)
    } else {
        let lo = rng.random_range(SCATTER_RANGE.0..1.2);
        let hi = rng.random_range((lo + 0.5)..SCATTER_RANGE.1);
        let field_seed = derive_seed(seed, 1);
        let noise = smooth_noise(size, size, &mut rng_for(field_seed, 0));
        let field = noise.iter().map(|n| lo + (hi - lo) * n).collect();
        (ScatterField::Field(field), None, Some([lo, hi]), Some(field_seed))
    };
    let params = HazeParams {
        airlight,
        scatter,
        depth,
    };
    let hazy = apply_asm(&clear, &params).expect("shapes agree by construction");
    let record = PairRecord {
        file: String::new(),
        index: 0,
        master_seed: 0,
        seed,
        size,
        homogeneous,
        airlight,
        beta,
        beta_range,
        beta_field_seed,
        depth_style: style,
    };
    (clear, hazy, params, record)
}

pub fn pair_file_name(index: u64) -> String {
    format!("{index:05}.png")
}

/// The record for pair `index` of a dataset (without generating pixels).
pub fn pair_plan(index: u64, master_seed: u64, mode: HazeMode) -> (u64, bool) {
    let seed = derive_seed(master_seed, index);
    let homogeneous = match mode {
        HazeMode::Homogeneous => true,
        HazeMode::NonHomogeneous => false,
        HazeMode::Mixed => index % 2 == 0,
    };
    (seed, homogeneous)
}

/// Writes `n_pairs` aligned images to `out_dir/clear` and `out_dir/hazy`
/// plus a JSON-lines manifest.
pub fn gen_dataset(
    n_pairs: usize,
    size: usize,
    mode: HazeMode,
    master_seed: u64,
    out_dir: &Path,
) -> Result<Vec<PairRecord>> {
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let clear_dir = out_dir.join("clear");
    let hazy_dir = out_dir.join("hazy");
    for dir in [&clear_dir, &hazy_dir] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let records: Vec<Result<PairRecord>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|index| {
            let (seed, homogeneous) = pair_plan(index, master_seed, mode);
            let (clear, hazy, _, mut record) = gen_pair(size, homogeneous, seed);
            record.file = pair_file_name(index);
            record.index = index;
            record.master_seed = master_seed;
            save_png(clear_dir.join(&record.file), &clear)?;
            save_png(hazy_dir.join(&record.file), &hazy)?;
            Ok(record)
        })
        .collect();
    let records: Vec<PairRecord> = records.into_iter().collect::<Result<_>>()?;
    write_manifest(&out_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[PairRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PairRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Rewrites every pair listed in a manifest into `out_dir`.
pub fn regenerate_from_manifest(manifest: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_manifest(manifest)?;
    let mut written = Vec::new();
    for dir in ["clear", "hazy"] {
        let d = out_dir.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for r in &records {
        let (clear, hazy, _, _) = gen_pair(r.size, r.homogeneous, r.seed);
        let (c, h) = (out_dir.join("clear").join(&r.file), out_dir.join("hazy").join(&r.file));
        save_png(&c, &clear)?;
        save_png(&h, &hazy)?;
        written.extend([c, h]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(depth: Vec<f32>, beta: f32, a: f32) -> HazeParams {
        HazeParams {
            airlight: [a; 3],
            scatter: ScatterField::Uniform(beta),
            depth,
        }
    }

    #[test]
    fn zero_depth_is_identity() {
        let j = Image::from_fn(4, 4, 3, |c, i, k| ((c + i * 3 + k) as f32 * 0.21).sin());
        let out = apply_asm(&j, &params(vec![0.0; 16], 2.0, 0.9)).unwrap();
        assert_eq!(out, j);
    }

    #[test]
    fn dense_haze_tends_to_airlight() {
        let j = Image::filled(2, 2, 3, -0.8);
        let out = apply_asm(&j, &params(vec![1.0; 4], 60.0, 0.9)).unwrap();
        for &v in out.data() {
            assert!((v - unit_to_internal(0.9)).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_model_value() {
        // J = 0.5, A = 1, t = 0.5 -> I = 0.75 on the unit range
        let j = Image::from_unit(1, 1, 1, &[0.5]).unwrap();
        let p = params(vec![std::f32::consts::LN_2], 1.0, 1.0);
        let out = apply_asm(&j, &p).unwrap();
        assert!((out.to_unit()[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn depth_size_checked() {
        let j = Image::zeros(3, 3, 3);
        assert!(apply_asm(&j, &params(vec![0.0; 8], 1.0, 0.8)).is_err());
    }

    #[test]
    fn linear_ramp_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = gen_depth(5, 3, DepthStyle::LinearRamp, &mut rng);
        for j in 0..3 {
            assert_eq!(d[j], 0.0);
            assert_eq!(d[4 * 3 + j], 1.0);
            for i in 1..5 {
                assert!(d[i * 3 + j] > d[(i - 1) * 3 + j]);
            }
        }
    }

    #[test]
    fn smooth_noise_is_seeded_and_smooth() {
        let a = gen_depth(64, 64, DepthStyle::SmoothNoise, &mut ChaCha8Rng::seed_from_u64(4));
        let b = gen_depth(64, 64, DepthStyle::SmoothNoise, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..63 {
            for j in 0..63 {
                let gx = a[i * 64 + j + 1] - a[i * 64 + j];
                let gy = a[(i + 1) * 64 + j] - a[i * 64 + j];
                total += (gx * gx + gy * gy).sqrt();
                n += 1;
            }
        }
        assert!(total / (n as f32) < 0.1);
    }

    #[test]
    fn haze_mode_controls_scatter_variance() {
        let (_, _, p, r) = gen_pair(32, true, 11);
        assert!(matches!(p.scatter, ScatterField::Uniform(_)) && r.beta.is_some());
        let (_, _, p, r) = gen_pair(32, false, 11);
        match p.scatter {
            ScatterField::Field(f) => {
                let mean = f.iter().sum::<f32>() / f.len() as f32;
                let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / f.len() as f32;
                assert!(var > 0.0);
                assert!(f.iter().all(|v| (SCATTER_RANGE.0..=SCATTER_RANGE.1).contains(v)));
            }
            ScatterField::Uniform(_) => panic!("expected a field"),
        }
        assert!(r.beta_range.is_some());
    }

    #[test]
    fn hazy_lies_between_scene_and_airlight() {
        for seed in 0..6 {
            let (clear, hazy, p, _) = gen_pair(32, seed % 2 == 0, seed);
            let hw = 32 * 32;
            for (i, (&j, &v)) in clear.data().iter().zip(hazy.data()).enumerate() {
                let a = unit_to_internal(p.airlight[i / hw]);
                assert!(v >= j.min(a) - 1e-6 && v <= j.max(a) + 1e-6);
            }
        }
    }

    #[test]
    fn parse_haze_mode() {
        assert_eq!("mixed".parse::<HazeMode>().unwrap(), HazeMode::Mixed);
        assert!("fog".parse::<HazeMode>().is_err());
    }
}
