//! Minimal layer library with hand-written backward passes.
//!
//! Every layer refers to its parameters by offset into one flat parameter
//! vector, so optimizers, checkpoints and gradient checks all see the
//! network as a single `[T]`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c ← alpha · a · b + beta · c` for strided matrices.
    ///
    /// # Safety
    /// Strides and dimensions must describe matrices that lie inside the
    /// given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only view of a row-major matrix, optionally used transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out ← a · b` (or `out += a · b` when `accumulate`), `out` row-major.
pub fn matmul<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Channel-major feature map of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn same_layout(&self, data: Vec<T>) -> Self {
        FeatureMap::from_vec(self.channels, self.height, self.width, data)
    }

    pub fn add_assign(&mut self, other: &FeatureMap<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks channels of `self` followed by `other`.
    pub fn concat(&self, other: &FeatureMap<T>) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        FeatureMap::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`FeatureMap::concat`]: splits after `first` channels.
    pub fn split(self, first: usize) -> (Self, Self) {
        let at = first * self.pixels();
        let mut data = self.data;
        let rest = data.split_off(at);
        (
            FeatureMap::from_vec(first, self.height, self.width, data),
            FeatureMap::from_vec(self.channels - first, self.height, self.width, rest),
        )
    }
}

/// Hands out consecutive parameter ranges while a network is being laid out.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
    inits: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

impl ParamAllocator {
    pub fn alloc(&mut self, len: usize, init: Init) -> usize {
        let offset = self.len;
        self.inits.push((offset, len, init));
        self.len += len;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn initialize<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut params = vec![T::zero(); self.len];
        for &(offset, len, init) in &self.inits {
            let slot = &mut params[offset..offset + len];
            match init {
                Init::Zeros => {}
                Init::Ones => slot.fill(T::one()),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in slot {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
            }
        }
        params
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    weight: usize,
    bias: usize,
}

/// Saved input columns (`3×3`) or the input itself (`1×1`).
pub struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
}

impl Conv2d {
    /// `kernel` is 1 or 3; 3×3 convolutions use zero padding of one pixel.
    pub fn new(alloc: &mut ParamAllocator, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3);
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: alloc.alloc(out_channels * fan_in, Init::FanIn(fan_in)),
            bias: alloc.alloc(out_channels, Init::Zeros),
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight..self.weight + self.out_channels * self.fan_in()
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let hw = x.pixels();
        let cols = if self.kernel == 3 {
            im2col3(x)
        } else {
            x.data.clone()
        };
        let mut out = vec![T::zero(); self.out_channels * hw];
        for (co, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(params[self.bias + co]);
        }
        matmul(
            Mat::new(&params[self.weight_range()], self.out_channels, self.fan_in()),
            Mat::new(&cols, self.fan_in(), hw),
            &mut out,
            true,
        );
        (
            FeatureMap::from_vec(self.out_channels, x.height, x.width, out),
            ConvCache {
                cols,
                height: x.height,
                width: x.width,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &ConvCache<T>,
        dy: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let hw = cache.height * cache.width;
        let fan_in = self.fan_in();
        matmul(
            Mat::new(&dy.data, self.out_channels, hw),
            Mat::new(&cache.cols, fan_in, hw).t(),
            &mut grads[self.weight_range()],
            true,
        );
        for (co, row) in dy.data.chunks_exact(hw).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            grads[self.bias + co] += s;
        }
        let mut dcols = vec![T::zero(); fan_in * hw];
        matmul(
            Mat::new(&params[self.weight_range()], self.out_channels, fan_in).t(),
            Mat::new(&dy.data, self.out_channels, hw),
            &mut dcols,
            false,
        );
        if self.kernel == 3 {
            col2im3(&dcols, self.in_channels, cache.height, cache.width)
        } else {
            FeatureMap::from_vec(self.in_channels, cache.height, cache.width, dcols)
        }
    }
}

fn im2col3<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let mut cols = vec![T::zero(); x.channels * 9 * hw];
    for c in 0..x.channels {
        let plane = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                let y0 = usize::from(ky == 0);
                let y1 = if ky == 2 { h - 1 } else { h };
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    let src = &plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Real>(cols: &[T], channels: usize, h: usize, w: usize) -> FeatureMap<T> {
    let hw = h * w;
    let mut out = FeatureMap::zeros(channels, h, w);
    for c in 0..channels {
        let plane = &mut out.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                let y0 = usize::from(ky == 0);
                let y1 = if ky == 2 { h - 1 } else { h };
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: usize,
    beta: usize,
}

pub struct NormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    /// Uses the largest group count up to 8 that divides `channels`.
    pub fn new(alloc: &mut ParamAllocator, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        GroupNorm {
            channels,
            groups,
            gamma: alloc.alloc(channels, Init::Ones),
            beta: alloc.alloc(channels, Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &FeatureMap<T>) -> (FeatureMap<T>, NormCache<T>) {
        assert_eq!(x.channels, self.channels, "norm channels");
        let hw = x.pixels();
        let per_group = self.channels / self.groups * hw;
        let count = T::of(per_group as f64);
        let mut normalized = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (src, dst) in x.data.chunks_exact(per_group).zip(normalized.chunks_exact_mut(per_group)) {
            let mut mean = T::zero();
            for &v in src {
                mean += v;
            }
            mean = mean / count;
            let mut var = T::zero();
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var = var / count;
            let inv = T::one() / (var + T::of(NORM_EPS)).sqrt();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut out = normalized.clone();
        for (c, plane) in out.chunks_exact_mut(hw).enumerate() {
            let (gamma, beta) = (params[self.gamma + c], params[self.beta + c]);
            for v in plane {
                *v = *v * gamma + beta;
            }
        }
        (x.same_layout(out), NormCache { normalized, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &NormCache<T>,
        dy: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let hw = dy.pixels();
        let channels_per_group = self.channels / self.groups;
        let per_group = channels_per_group * hw;
        let count = T::of(per_group as f64);
        let mut dx = vec![T::zero(); dy.data.len()];
        for g in 0..self.groups {
            let range = g * per_group..(g + 1) * per_group;
            let xhat = &cache.normalized[range.clone()];
            let dyg = &dy.data[range.clone()];
            let dxg = &mut dx[range];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..channels_per_group {
                let channel = g * channels_per_group + c;
                let gamma = params[self.gamma + channel];
                let mut dgamma = T::zero();
                let mut dbeta = T::zero();
                for i in c * hw..(c + 1) * hw {
                    dgamma += dyg[i] * xhat[i];
                    dbeta += dyg[i];
                    let dxhat = dyg[i] * gamma;
                    dxg[i] = dxhat;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[i];
                }
                grads[self.gamma + channel] += dgamma;
                grads[self.beta + channel] += dbeta;
            }
            let scale = cache.inv_std[g] / count;
            for (d, &xh) in dxg.iter_mut().zip(xhat) {
                *d = scale * (count * *d - sum_dxhat - xh * sum_dxhat_xhat);
            }
        }
        dy.same_layout(dx)
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<T: Real>(input: &[T], dy: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(dy)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect()
}

pub fn silu_map<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    x.same_layout(silu(&x.data))
}

pub fn silu_map_backward<T: Real>(input: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    input.same_layout(silu_backward(&input.data, &dy.data))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(alloc: &mut ParamAllocator, inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: alloc.alloc(inputs * outputs, Init::FanIn(inputs)),
            bias: alloc.alloc(outputs, Init::Zeros),
        }
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &params[self.weight + o * self.inputs..][..self.inputs];
                let mut acc = params[self.bias + o];
                for (&w, &v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }

    pub fn backward<T: Real>(&self, params: &[T], grads: &mut [T], x: &[T], dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            let row = self.weight + o * self.inputs;
            for i in 0..self.inputs {
                grads[row + i] += g * x[i];
                dx[i] += g * params[row + i];
            }
            grads[self.bias + o] += g;
        }
        dx
    }
}

/// 2×2 average pooling; height and width must be even.
pub fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    assert!(x.height % 2 == 0 && x.width % 2 == 0, "pooling needs even sizes");
    let (h, w) = (x.height / 2, x.width / 2);
    let quarter = T::of(0.25);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = &x.data[c * x.pixels()..(c + 1) * x.pixels()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            let r0 = &src[2 * i * x.width..][..x.width];
            let r1 = &src[(2 * i + 1) * x.width..][..x.width];
            for j in 0..w {
                dst[i * w + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let quarter = T::of(0.25);
    let mut dx = upsample2(dy);
    for v in &mut dx.data {
        *v *= quarter;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = &x.data[c * x.pixels()..(c + 1) * x.pixels()];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            let srow = &src[(i / 2) * x.width..][..x.width];
            for (j, d) in dst[i * w..(i + 1) * w].iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = &dy.data[c * dy.pixels()..(c + 1) * dy.pixels()];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for i in 0..dy.height {
            for j in 0..dy.width {
                dst[(i / 2) * w + j / 2] += src[i * dy.width + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv3(x: &FeatureMap<f64>, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let (h, wd) = (x.height as isize, x.width as isize);
        let mut out = vec![0.0; cout * x.pixels()];
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..x.channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (si, sj) = (i + ky - 1, j + kx - 1);
                                if si < 0 || sj < 0 || si >= h || sj >= wd {
                                    continue;
                                }
                                let wi = ((co * x.channels + ci) * 3 + ky as usize) * 3 + kx as usize;
                                acc += w[wi] * x.data[(ci * h as usize + si as usize) * wd as usize + sj as usize];
                            }
                        }
                    }
                    out[(co * h as usize + i as usize) * wd as usize + j as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut alloc = ParamAllocator::default();
        let conv = Conv2d::new(&mut alloc, 3, 4, 3);
        let mut params: Vec<f64> = alloc.initialize(&mut rng);
        for v in &mut params[conv.bias..conv.bias + 4] {
            *v = rng.random_range(-1.0..1.0);
        }
        let data = (0..3 * 5 * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = FeatureMap::from_vec(3, 5, 7, data);
        let (y, _) = conv.forward(&params, &x);
        let expected = naive_conv3(&x, &params[conv.weight_range()], &params[conv.bias..conv.bias + 4], 4);
        for (a, b) in y.data.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = FeatureMap::from_vec(2, 4, 6, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let cols = im2col3(&x);
        let c: Vec<f64> = (0..cols.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im3(&c, 2, 4, 6);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::from_vec(2, 4, 6, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let y = FeatureMap::from_vec(2, 2, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&y);
        let lhs: f64 = up.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data.iter().zip(&upsample2_backward(&x).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut alloc = ParamAllocator::default();
        let norm = GroupNorm::new(&mut alloc, 6);
        assert_eq!(norm.groups, 6);
        let params: Vec<f64> = alloc.initialize(&mut ChaCha8Rng::seed_from_u64(0));
        let x = FeatureMap::from_vec(6, 3, 3, (0..54).map(|i| (i as f64).sin() * 3.0 + 1.0).collect());
        let (y, _) = norm.forward(&params, &x);
        for plane in y.data.chunks(9) {
            let mean: f64 = plane.iter().sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn group_count_divides_channels() {
        let mut alloc = ParamAllocator::default();
        assert_eq!(GroupNorm::new(&mut alloc, 48).groups, 8);
        assert_eq!(GroupNorm::new(&mut alloc, 12).groups, 6);
        assert_eq!(GroupNorm::new(&mut alloc, 4).groups, 4);
    }
}
