//! Small encoder–decoder with skip connections, group normalization and a
//! timestep embedding injected into every residual block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, silu_map, silu_map_backward, upsample2,
    upsample2_backward, Conv2d, ConvCache, FeatureMap, GroupNorm, Linear, NormCache,
    ParamAllocator, Real,
};
use super::{embed_timesteps, Denoiser, DenoiserEstimate};
use crate::diffusion::DualState;
use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_scale: usize,
    pub timestep_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            num_res_blocks_per_scale: 1,
            timestep_embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.image_channels != 1 && self.image_channels != 3 {
            return bad(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be a non-empty list of positive integers".into());
        }
        if self.num_res_blocks_per_scale == 0 {
            return bad("num_res_blocks_per_scale must be positive".into());
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return bad(format!(
                "timestep_embed_dim must be even and at least 2, got {}",
                self.timestep_embed_dim
            ));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales() - 1)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache<T> {
    norm1: NormCache<T>,
    norm1_out: FeatureMap<T>,
    conv1: ConvCache<T>,
    norm2: NormCache<T>,
    norm2_out: FeatureMap<T>,
    conv2: ConvCache<T>,
    skip: Option<ConvCache<T>>,
}

impl ResBlock {
    fn new(alloc: &mut ParamAllocator, cin: usize, cout: usize, embed: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(alloc, cin),
            conv1: Conv2d::new(alloc, cin, cout, 3),
            emb_proj: Linear::new(alloc, embed, cout),
            norm2: GroupNorm::new(alloc, cout),
            conv2: Conv2d::new(alloc, cout, cout, 3),
            skip: (cin != cout).then(|| Conv2d::new(alloc, cin, cout, 1)),
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: FeatureMap<T>, emb_act: &[T]) -> (FeatureMap<T>, ResCache<T>) {
        let (n1, norm1) = self.norm1.forward(p, &x);
        let (mut h, conv1) = self.conv1.forward(p, &silu_map(&n1));
        let shift = self.emb_proj.forward(p, emb_act);
        let hw = h.pixels();
        for (plane, &s) in h.data.chunks_exact_mut(hw).zip(&shift) {
            for v in plane {
                *v += s;
            }
        }
        let (n2, norm2) = self.norm2.forward(p, &h);
        let (mut out, conv2) = self.conv2.forward(p, &silu_map(&n2));
        let skip = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(p, &x);
                out.add_assign(&s);
                Some(cache)
            }
            None => {
                out.add_assign(&x);
                None
            }
        };
        (
            out,
            ResCache {
                norm1,
                norm1_out: n1,
                conv1,
                norm2,
                norm2_out: n2,
                conv2,
                skip,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &ResCache<T>,
        emb_act: &[T],
        d_emb_act: &mut [T],
        dout: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let ds2 = self.conv2.backward(p, g, &cache.conv2, dout);
        let dn2 = silu_map_backward(&cache.norm2_out, &ds2);
        let dh = self.norm2.backward(p, g, &cache.norm2, &dn2);
        let hw = dh.pixels();
        let dshift: Vec<T> = dh
            .data
            .chunks_exact(hw)
            .map(|plane| plane.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let de = self.emb_proj.backward(p, g, emb_act, &dshift);
        for (a, b) in d_emb_act.iter_mut().zip(de) {
            *a += b;
        }
        let ds1 = self.conv1.backward(p, g, &cache.conv1, &dh);
        let dn1 = silu_map_backward(&cache.norm1_out, &ds1);
        let mut dx = self.norm1.backward(p, g, &cache.norm1, &dn1);
        match (&self.skip, &cache.skip) {
            (Some(conv), Some(sc)) => dx.add_assign(&conv.backward(p, g, sc, dout)),
            _ => dx.add_assign(dout),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct Layout {
    config: DenoiserConfig,
    param_count: usize,
    allocator_inits: std::sync::Arc<ParamAllocator>,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    down: Vec<Vec<ResBlock>>,
    mid: ResBlock,
    /// `up[i]` handles scale `i`; evaluated from the coarsest scale down.
    up: Vec<Vec<ResBlock>>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Layout {
    fn new(config: &DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut a = ParamAllocator::default();
        let e = config.timestep_embed_dim;
        let ch: Vec<usize> = config
            .channel_multipliers
            .iter()
            .map(|m| m * config.base_channels)
            .collect();
        let scales = ch.len();
        let time1 = Linear::new(&mut a, e, e);
        let time2 = Linear::new(&mut a, e, e);
        let input = Conv2d::new(&mut a, 2 * config.image_channels, ch[0], 3);
        let mut down = Vec::with_capacity(scales);
        let mut cur = ch[0];
        for &c in &ch {
            let blocks = (0..config.num_res_blocks_per_scale)
                .map(|b| ResBlock::new(&mut a, if b == 0 { cur } else { c }, c, e))
                .collect();
            cur = c;
            down.push(blocks);
        }
        let mid = ResBlock::new(&mut a, cur, cur, e);
        let mut up: Vec<Vec<ResBlock>> = Vec::with_capacity(scales);
        for i in (0..scales).rev() {
            let blocks = (0..config.num_res_blocks_per_scale)
                .map(|b| {
                    let cin = if b == 0 { cur + ch[i] } else { ch[i] };
                    ResBlock::new(&mut a, cin, ch[i], e)
                })
                .collect();
            cur = ch[i];
            up.push(blocks);
        }
        up.reverse();
        let out_norm = GroupNorm::new(&mut a, ch[0]);
        let out_conv = Conv2d::new(&mut a, ch[0], 2 * config.image_channels, 3);
        Ok(Layout {
            config: config.clone(),
            param_count: a.len(),
            allocator_inits: std::sync::Arc::new(a),
            time1,
            time2,
            input,
            down,
            mid,
            up,
            out_norm,
            out_conv,
        })
    }
}

struct Cache<T> {
    emb_in: Vec<T>,
    time_hidden: Vec<T>,
    emb: Vec<T>,
    emb_act: Vec<T>,
    input: ConvCache<T>,
    down: Vec<Vec<ResCache<T>>>,
    mid: ResCache<T>,
    up: Vec<Vec<ResCache<T>>>,
    up_in_channels: Vec<usize>,
    out_norm: NormCache<T>,
    out_norm_out: FeatureMap<T>,
    out_conv: ConvCache<T>,
}

/// The denoising network together with its weights.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> UNet<T> {
    /// Freshly initialized network.
    pub fn new<R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let layout = Layout::new(config)?;
        let params = layout.allocator_inits.initialize(rng);
        Ok(UNet { layout, params })
    }

    pub fn from_params(config: &DenoiserConfig, params: Vec<T>) -> Result<Self> {
        let layout = Layout::new(config)?;
        if params.len() != layout.param_count {
            return Err(Error::WeightCount {
                expected: layout.param_count,
                actual: params.len(),
            });
        }
        Ok(UNet { layout, params })
    }

    pub fn param_count_for(config: &DenoiserConfig) -> Result<usize> {
        Ok(Layout::new(config)?.param_count)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.layout.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    /// Parameter indices of the final projection (weights only).
    pub fn output_projection_weights(&self) -> std::ops::Range<usize> {
        self.layout.out_conv.weight_range()
    }

    fn check_input(&self, x: &FeatureMap<T>, y: &FeatureMap<T>) -> Result<()> {
        let c = self.layout.config.image_channels;
        let m = self.layout.config.size_multiple();
        if x.channels != c || y.channels != c {
            return Err(Error::InvalidArgument(format!(
                "network expects {c}-channel images, got {} and {}",
                x.channels, y.channels
            )));
        }
        if (x.height, x.width) != (y.height, y.width) {
            return Err(Error::ShapeMismatch {
                expected: (x.height, x.width, x.channels),
                actual: (y.height, y.width, y.channels),
            });
        }
        if x.height % m != 0 || x.width % m != 0 || x.height == 0 || x.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {}x{} must be a positive multiple of {m}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    /// Runs the network; output channels are `(x̂0, ŷ0)` stacked.
    pub fn forward(&self, x: &FeatureMap<T>, y: &FeatureMap<T>, t_x: usize, t_y: usize) -> Result<FeatureMap<T>> {
        self.check_input(x, y)?;
        Ok(self.forward_cached(x, y, t_x, t_y)?.0)
    }

    fn forward_cached(
        &self,
        x: &FeatureMap<T>,
        y: &FeatureMap<T>,
        t_x: usize,
        t_y: usize,
    ) -> Result<(FeatureMap<T>, Cache<T>)> {
        let l = &self.layout;
        let p = &self.params[..];
        let emb_in: Vec<T> = embed_timesteps(t_x, t_y, l.config.timestep_embed_dim)?
            .into_iter()
            .map(T::of)
            .collect();
        let time_hidden = l.time1.forward(p, &emb_in);
        let emb = l.time2.forward(p, &silu(&time_hidden));
        let emb_act = silu(&emb);

        let (mut h, input) = l.input.forward(p, &x.concat(y));
        let scales = l.down.len();
        let mut skips = Vec::with_capacity(scales);
        let mut down = Vec::with_capacity(scales);
        for (i, blocks) in l.down.iter().enumerate() {
            let mut caches = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (out, c) = block.forward(p, h, &emb_act);
                caches.push(c);
                h = out;
            }
            down.push(caches);
            skips.push(h.clone());
            if i + 1 < scales {
                h = avg_pool2(&h);
            }
        }
        let (out, mid) = l.mid.forward(p, h, &emb_act);
        h = out;
        let mut up: Vec<Vec<ResCache<T>>> = (0..scales).map(|_| Vec::new()).collect();
        let mut up_in_channels = vec![0; scales];
        for i in (0..scales).rev() {
            up_in_channels[i] = h.channels;
            h = h.concat(&skips[i]);
            for block in &l.up[i] {
                let (out, c) = block.forward(p, h, &emb_act);
                up[i].push(c);
                h = out;
            }
            if i > 0 {
                h = upsample2(&h);
            }
        }
        let (n, out_norm) = l.out_norm.forward(p, &h);
        let (out, out_conv) = l.out_conv.forward(p, &silu_map(&n));
        Ok((
            out,
            Cache {
                emb_in,
                time_hidden,
                emb,
                emb_act,
                input,
                down,
                mid,
                up,
                up_in_channels,
                out_norm,
                out_norm_out: n,
                out_conv,
            },
        ))
    }

    fn backward(&self, cache: &Cache<T>, dout: &FeatureMap<T>, g: &mut [T]) {
        let l = &self.layout;
        let p = &self.params[..];
        let mut d_emb_act = vec![T::zero(); cache.emb_act.len()];
        let ds = l.out_conv.backward(p, g, &cache.out_conv, dout);
        let dn = silu_map_backward(&cache.out_norm_out, &ds);
        let mut dh = l.out_norm.backward(p, g, &cache.out_norm, &dn);

        let scales = l.down.len();
        let mut dskips = Vec::with_capacity(scales);
        for i in 0..scales {
            if i > 0 {
                dh = upsample2_backward(&dh);
            }
            for (block, c) in l.up[i].iter().zip(&cache.up[i]).rev() {
                dh = block.backward(p, g, c, &cache.emb_act, &mut d_emb_act, &dh);
            }
            let (rest, dskip) = dh.split(cache.up_in_channels[i]);
            dskips.push(dskip);
            dh = rest;
        }
        dh = l.mid.backward(p, g, &cache.mid, &cache.emb_act, &mut d_emb_act, &dh);
        for i in (0..scales).rev() {
            if i + 1 < scales {
                dh = avg_pool2_backward(&dh);
            }
            dh.add_assign(&dskips[i]);
            for (block, c) in l.down[i].iter().zip(&cache.down[i]).rev() {
                dh = block.backward(p, g, c, &cache.emb_act, &mut d_emb_act, &dh);
            }
        }
        l.input.backward(p, g, &cache.input, &dh);

        let d_emb = silu_backward(&cache.emb, &d_emb_act);
        let d_hidden_act = l.time2.backward(p, g, &silu(&cache.time_hidden), &d_emb);
        let d_hidden = silu_backward(&cache.time_hidden, &d_hidden_act);
        l.time1.backward(p, g, &cache.emb_in, &d_hidden);
    }

    /// Adds `weight · ∂L/∂θ` to `grads` and returns `weight · L`, where `L`
    /// is the mean absolute error of both predicted images against their
    /// clean targets. The subgradient of `|·|` at zero is taken as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate_l1_gradient(
        &self,
        x: &FeatureMap<T>,
        y: &FeatureMap<T>,
        t_x: usize,
        t_y: usize,
        target_x: &[T],
        target_y: &[T],
        weight: T,
        grads: &mut [T],
    ) -> Result<T> {
        self.check_input(x, y)?;
        if target_x.len() != x.data.len() || target_y.len() != y.data.len() {
            return Err(Error::InvalidArgument("target size differs from input size".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::WeightCount {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        let (out, cache) = self.forward_cached(x, y, t_x, t_y)?;
        let n = T::of(out.data.len() as f64);
        let scale = weight / n;
        let mut loss = T::zero();
        let mut dout = vec![T::zero(); out.data.len()];
        for ((d, &o), &t) in dout
            .iter_mut()
            .zip(&out.data)
            .zip(target_x.iter().chain(target_y))
        {
            let diff = o - t;
            loss += diff.abs();
            *d = if diff > T::zero() {
                scale
            } else if diff < T::zero() {
                -scale
            } else {
                T::zero()
            };
        }
        self.backward(&cache, &out.same_layout(dout), grads);
        Ok(loss * scale)
    }

    pub fn l1_loss_and_gradient(
        &self,
        x: &FeatureMap<T>,
        y: &FeatureMap<T>,
        t_x: usize,
        t_y: usize,
        target_x: &[T],
        target_y: &[T],
    ) -> Result<(T, Vec<T>)> {
        let mut grads = vec![T::zero(); self.params.len()];
        let loss = self.accumulate_l1_gradient(x, y, t_x, t_y, target_x, target_y, T::one(), &mut grads)?;
        Ok((loss, grads))
    }

    pub fn l1_loss(
        &self,
        x: &FeatureMap<T>,
        y: &FeatureMap<T>,
        t_x: usize,
        t_y: usize,
        target_x: &[T],
        target_y: &[T],
    ) -> Result<T> {
        let out = self.forward(x, y, t_x, t_y)?;
        let mut loss = T::zero();
        for (&o, &t) in out.data.iter().zip(target_x.iter().chain(target_y)) {
            loss += (o - t).abs();
        }
        Ok(loss / T::of(out.data.len() as f64))
    }
}

pub(crate) fn image_to_map(image: &Image) -> FeatureMap<f32> {
    FeatureMap::from_vec(image.channels(), image.height(), image.width(), image.data().to_vec())
}

impl Denoiser for UNet<f32> {
    fn denoise(&self, state: &DualState) -> Result<DenoiserEstimate> {
        state.x.ensure_same_shape(&state.y)?;
        let (h, w, c) = state.x.shape();
        let out = self.forward(&image_to_map(&state.x), &image_to_map(&state.y), state.t_x, state.t_y)?;
        let (xh, yh) = out.split(c);
        Ok(DenoiserEstimate {
            x0_hat: Image::from_vec(h, w, c, xh.data)?,
            y0_hat: Image::from_vec(h, w, c, yh.data)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            num_res_blocks_per_scale: 1,
            timestep_embed_dim: 8,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes_follow_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: UNet<f32> = UNet::new(&DenoiserConfig::default(), &mut rng).unwrap();
        let x = random_image(&mut rng, 64, 64);
        let y = random_image(&mut rng, 64, 64);
        let est = net.denoise(&DualState::new(x, y, 3, 0).unwrap()).unwrap();
        assert_eq!(est.x0_hat.shape(), (64, 64, 3));
        assert_eq!(est.y0_hat.shape(), (64, 64, 3));
    }

    #[test]
    fn zero_output_projection_gives_zero_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: UNet<f32> = UNet::new(&tiny(), &mut rng).unwrap();
        let range = net.output_projection_weights();
        net.params_mut()[range].fill(0.0);
        let x = random_image(&mut rng, 8, 8);
        let est = net.denoise(&DualState::new(x.clone(), x, 2, 1).unwrap()).unwrap();
        assert!(est.x0_hat.data().iter().chain(est.y0_hat.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn batch_order_does_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: UNet<f32> = UNet::new(&tiny(), &mut rng).unwrap();
        let states: Vec<DualState> = (0..3)
            .map(|i| {
                DualState::new(random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8), i, 2 - i).unwrap()
            })
            .collect();
        let forward = net.denoise_batch(&states).unwrap();
        let reversed: Vec<DualState> = states.iter().rev().cloned().collect();
        let mut backward = net.denoise_batch(&reversed).unwrap();
        backward.reverse();
        assert_eq!(forward, backward);
    }

    #[test]
    fn rejects_bad_sizes_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: UNet<f32> = UNet::new(&tiny(), &mut rng).unwrap();
        let odd = random_image(&mut rng, 7, 8);
        assert!(net.denoise(&DualState::new(odd.clone(), odd, 1, 0).unwrap()).is_err());
        assert!(UNet::<f32>::from_params(&tiny(), vec![0.0; 3]).is_err());
        let mut bad = tiny();
        bad.timestep_embed_dim = 5;
        assert!(UNet::<f32>::new(&bad, &mut rng).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: UNet<f32> = UNet::new(&tiny(), &mut rng).unwrap();
        let s = DualState::new(random_image(&mut rng, 16, 8), random_image(&mut rng, 16, 8), 5, 0).unwrap();
        let a = net.denoise(&s).unwrap();
        let b = net.denoise(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_prediction_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: UNet<f64> = UNet::new(&tiny(), &mut rng).unwrap();
        let x = FeatureMap::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = FeatureMap::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out = net.forward(&x, &y, 1, 0).unwrap();
        let (tx, ty) = out.data.split_at(192);
        let (loss, grads) = net.l1_loss_and_gradient(&x, &y, 1, 0, tx, ty).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_scales_with_loss_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net: UNet<f64> = UNet::new(&tiny(), &mut rng).unwrap();
        let x = FeatureMap::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = FeatureMap::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g1 = vec![0.0; net.params().len()];
        let mut g3 = vec![0.0; net.params().len()];
        let l1 = net.accumulate_l1_gradient(&x, &y, 2, 0, &t, &t, 1.0, &mut g1).unwrap();
        let l3 = net.accumulate_l1_gradient(&x, &y, 2, 0, &t, &t, 3.0, &mut g3).unwrap();
        assert!((l3 - 3.0 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
