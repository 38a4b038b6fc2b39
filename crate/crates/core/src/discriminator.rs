//! U-Net discriminator: residual downsampling encoder, upsampling decoder
//! with skip connections, embedded-Gaussian non-local blocks, and two
//! output heads (a per-sample scalar logit and a full-resolution pixel
//! logit map).

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::generator::ImagePair;
use crate::graph::{Graph, Var};
use crate::nn::{self, Conv2d, Linear, ParamBind, ParamModule, ACT_GAIN, LRELU_SLOPE};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub encoder_features: Vec<usize>,
    pub decoder_features: Vec<usize>,
    /// Channels after concatenating both domains (timesteps x 2).
    pub input_channels: usize,
    /// Encoder stage indices that get a non-local block after them.
    pub nonlocal_stages: BTreeSet<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            encoder_features: vec![128, 256, 384, 768, 1024],
            decoder_features: vec![768, 384, 256, 128],
            input_channels: 6,
            nonlocal_stages: BTreeSet::from([2, 3]),
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny(features: &[usize], input_channels: usize) -> Self {
        let decoder = features[..features.len() - 1]
            .iter()
            .rev()
            .cloned()
            .collect();
        DiscriminatorConfig {
            encoder_features: features.to_vec(),
            decoder_features: decoder,
            input_channels,
            nonlocal_stages: BTreeSet::new(),
        }
    }

    /// Spatial downsampling factor between input and the deepest features.
    pub fn total_downsample(&self) -> usize {
        1 << (self.encoder_features.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_features.is_empty() {
            return Err(Error::invalid("DiscriminatorConfig", "encoder_features must be non-empty"));
        }
        if self.decoder_features.len() != self.encoder_features.len() - 1 {
            return Err(Error::invalid(
                "DiscriminatorConfig",
                format!(
                    "decoder must have {} blocks, got {}",
                    self.encoder_features.len() - 1,
                    self.decoder_features.len()
                ),
            ));
        }
        if self.encoder_features.iter().chain(&self.decoder_features).any(|&f| f == 0) {
            return Err(Error::invalid("DiscriminatorConfig", "feature counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
pub struct DiscriminatorOutput {
    /// (B,) raw logits.
    pub scalar: Var,
    /// (B, 1, H, W) raw logits at input resolution.
    pub pixel_map: Var,
}

/// Residual block: out = (skip(x) + main(x)) / sqrt(2), optionally halving
/// the spatial resolution. The skip path is a bias-free 1x1 projection.
pub struct ResidualBlock<T: Elem> {
    pub skip: Conv2d<T>,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub downsample: bool,
}

impl<T: Elem> ResidualBlock<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        downsample: bool,
        rng: &mut R,
    ) -> Self {
        ResidualBlock {
            skip: Conv2d::new(format!("{name}.skip"), in_ch, out_ch, 1, false, rng),
            conv1: Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, true, rng),
            conv2: Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, true, rng),
            downsample,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &mut ParamBind, x: Var) -> Var {
        let mut skip = self.skip.forward_raw(g, bind, x);
        let mut main = self.conv1.forward_act(g, bind, x);
        main = self.conv2.forward_act(g, bind, main);
        if self.downsample {
            skip = g.downsample2x(skip);
            main = g.downsample2x(main);
        }
        let sum = g.add(skip, main);
        g.scale(sum, T::from_f64(std::f64::consts::FRAC_1_SQRT_2))
    }
}

impl<T: Elem> ParamModule<T> for ResidualBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.skip.visit(f);
        self.conv1.visit(f);
        self.conv2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.skip.visit_mut(f);
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
    }
}

/// Embedded-Gaussian self-attention over spatial positions with a learned
/// residual gate initialized to zero, so the block starts as the identity.
pub struct NonLocalBlock<T: Elem> {
    pub name: String,
    pub theta: Conv2d<T>,
    pub phi: Conv2d<T>,
    pub g_path: Conv2d<T>,
    pub out_proj: Conv2d<T>,
    pub gamma: ArrayD<T>, // 0-d
}

impl<T: Elem> NonLocalBlock<T> {
    pub fn new<R: Rng>(name: &str, channels: usize, rng: &mut R) -> Self {
        let embed = (channels / 8).max(1);
        let inner = (channels / 2).max(1);
        NonLocalBlock {
            name: name.to_string(),
            theta: Conv2d::new(format!("{name}.theta"), channels, embed, 1, false, rng),
            phi: Conv2d::new(format!("{name}.phi"), channels, embed, 1, false, rng),
            g_path: Conv2d::new(format!("{name}.g"), channels, inner, 1, false, rng),
            out_proj: Conv2d::new(format!("{name}.out"), inner, channels, 1, false, rng),
            gamma: nn::zeros(&[]),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &mut ParamBind, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (b, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = h * w;
        let embed = self.theta.weight.shape()[0];
        let inner = self.g_path.weight.shape()[0];

        let th = self.theta.forward_raw(g, bind, x);
        let th = g.reshape(th, &[b, embed, n]);
        let th = g.permute(th, &[0, 2, 1]); // (B, N, embed)
        let ph = self.phi.forward_raw(g, bind, x);
        let ph = g.reshape(ph, &[b, embed, n]); // (B, embed, N)
        let logits = g.batch_matmul(th, ph); // (B, N, N)
        let attn = g.softmax_last(logits);

        let gv = self.g_path.forward_raw(g, bind, x);
        let gv = g.reshape(gv, &[b, inner, n]);
        let gv = g.permute(gv, &[0, 2, 1]); // (B, N, inner)
        let y = g.batch_matmul(attn, gv); // (B, N, inner)
        let y = g.permute(y, &[0, 2, 1]);
        let y = g.reshape(y, &[b, inner, h, w]);
        let y = self.out_proj.forward_raw(g, bind, y);

        let gamma = bind.bind(g, &format!("{}.gamma", self.name), &self.gamma);
        let gated = g.mul(y, gamma);
        g.add(x, gated)
    }
}

impl<T: Elem> ParamModule<T> for NonLocalBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.theta.visit(f);
        self.phi.visit(f);
        self.g_path.visit(f);
        self.out_proj.visit(f);
        f(&format!("{}.gamma", self.name), &self.gamma);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.theta.visit_mut(f);
        self.phi.visit_mut(f);
        self.g_path.visit_mut(f);
        self.out_proj.visit_mut(f);
        f(&format!("{}.gamma", self.name), &mut self.gamma);
    }
}

struct DecoderBlock<T: Elem> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

pub struct Discriminator<T: Elem> {
    pub config: DiscriminatorConfig,
    from_input: Conv2d<T>,
    encoder: Vec<ResidualBlock<T>>,
    nonlocal: Vec<(usize, NonLocalBlock<T>)>,
    decoder: Vec<DecoderBlock<T>>,
    scalar_head: Linear<T>,
    pixel_head: Conv2d<T>,
}

impl<T: Elem> Discriminator<T> {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ef = &config.encoder_features;
        let from_input = Conv2d::new("d.from_input", config.input_channels, ef[0], 1, true, rng);
        let encoder: Vec<_> = (0..ef.len())
            .map(|i| {
                let in_ch = if i == 0 { ef[0] } else { ef[i - 1] };
                // The first block keeps resolution so the decoder can
                // restore the input size with one fewer upsample.
                ResidualBlock::new(&format!("d.enc{i}"), in_ch, ef[i], i > 0, rng)
            })
            .collect();
        let nonlocal = config
            .nonlocal_stages
            .iter()
            .filter(|&&s| s < ef.len())
            .map(|&s| (s, NonLocalBlock::new(&format!("d.nl{s}"), ef[s], rng)))
            .collect();
        let decoder = config
            .decoder_features
            .iter()
            .enumerate()
            .map(|(j, &out_ch)| {
                let prev = if j == 0 { ef[ef.len() - 1] } else { config.decoder_features[j - 1] };
                let skip_ch = ef[ef.len() - 2 - j];
                DecoderBlock {
                    conv1: Conv2d::new(format!("d.dec{j}.conv1"), prev + skip_ch, out_ch, 3, true, rng),
                    conv2: Conv2d::new(format!("d.dec{j}.conv2"), out_ch, out_ch, 3, true, rng),
                }
            })
            .collect();
        let scalar_head = Linear::new("d.scalar_head", ef[ef.len() - 1], 1, rng);
        let pixel_head = Conv2d::new("d.pixel_head", ef[0], 1, 1, true, rng);
        Ok(Discriminator { config, from_input, encoder, nonlocal, decoder, scalar_head, pixel_head })
    }

    /// Concatenate both domains on the channel axis in the fixed order
    /// [BF t1..tk, GFP t1..tk].
    pub fn pack_input(&self, g: &mut Graph<T>, x: ImagePair) -> Var {
        g.concat(&[x.bf, x.gfp], 1)
    }

    pub fn discriminate(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        x: ImagePair,
    ) -> Result<DiscriminatorOutput> {
        let packed = self.pack_input(g, x);
        self.discriminate_packed(g, bind, packed)
    }

    /// Forward from an already-packed (B, input_channels, H, W) tensor.
    pub fn discriminate_packed(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        packed: Var,
    ) -> Result<DiscriminatorOutput> {
        let shape = g.value(packed).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::shape(
                "discriminate",
                format!("(B, {}, H, W)", self.config.input_channels),
                format!("{shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        let div = self.config.total_downsample();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(
                "discriminate",
                format!("spatial dims divisible by {div}"),
                format!("{h}x{w}"),
            ));
        }

        let mut feat = self.from_input.forward_act(g, bind, packed);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            feat = block.forward(g, bind, feat);
            if let Some((_, nl)) = self.nonlocal.iter().find(|(s, _)| *s == i) {
                feat = nl.forward(g, bind, feat);
            }
            skips.push(feat);
        }

        let deep_shape = g.value(feat).shape().to_vec();
        let pooled = g.sum_to(feat, &[deep_shape[0], deep_shape[1], 1, 1]);
        let pooled = g.reshape(pooled, &[deep_shape[0], deep_shape[1]]);
        let scalar = self.scalar_head.forward(g, bind, pooled);
        let scalar = g.reshape(scalar, &[deep_shape[0]]);

        let mut dec = feat;
        for (j, block) in self.decoder.iter().enumerate() {
            let up = g.upsample2x(dec);
            let skip = skips[skips.len() - 2 - j];
            let cat = g.concat(&[up, skip], 1);
            let a = block.conv1.forward_act(g, bind, cat);
            dec = block.conv2.forward_act(g, bind, a);
        }
        let raw = self.pixel_head.forward_raw(g, bind, dec);
        let pb = bind.bind(g, "d.pixel_head.bias", self.pixel_head.bias.as_ref().unwrap());
        let pb = g.reshape(pb, &[1, 1, 1, 1]);
        let pixel_map = g.add(raw, pb);
        Ok(DiscriminatorOutput { scalar, pixel_map })
    }
}

impl<T: Elem> ParamModule<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.from_input.visit(f);
        for b in &self.encoder {
            b.visit(f);
        }
        for (_, nl) in &self.nonlocal {
            nl.visit(f);
        }
        for d in &self.decoder {
            d.conv1.visit(f);
            d.conv2.visit(f);
        }
        self.scalar_head.visit(f);
        self.pixel_head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.from_input.visit_mut(f);
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        for (_, nl) in &mut self.nonlocal {
            nl.visit_mut(f);
        }
        for d in &mut self.decoder {
            d.conv1.visit_mut(f);
            d.conv2.visit_mut(f);
        }
        self.scalar_head.visit_mut(f);
        self.pixel_head.visit_mut(f);
    }
}

// keep the activation constants referenced so the import list stays honest
#[allow(dead_code)]
const _: (f64, f64) = (LRELU_SLOPE, ACT_GAIN);

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_disc(seed: u64) -> Discriminator<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Discriminator::new(DiscriminatorConfig::tiny(&[8, 12, 16], 6), &mut rng).unwrap()
    }

    fn rand_pair(g: &mut Graph<f64>, b: usize, t: usize, res: usize, seed: u64) -> ImagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bf = g.constant(nn::randn(&mut rng, &[b, t, res, res], 1.0));
        let gfp = g.constant(nn::randn(&mut rng, &[b, t, res, res], 1.0));
        ImagePair { bf, gfp }
    }

    #[test]
    fn tiny_config_shape_law() {
        let d = tiny_disc(1);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = rand_pair(&mut g, 2, 3, 32, 2);
        let out = d.discriminate(&mut g, &mut bind, x).unwrap();
        assert_eq!(g.value(out.scalar).shape(), &[2]);
        assert_eq!(g.value(out.pixel_map).shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let d = tiny_disc(1);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = rand_pair(&mut g, 1, 3, 30, 2);
        assert!(d.discriminate(&mut g, &mut bind, x).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let d = tiny_disc(3);
        let run = || {
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::trainable();
            let x = rand_pair(&mut g, 1, 3, 16, 4);
            let out = d.discriminate(&mut g, &mut bind, x).unwrap();
            (g.value(out.scalar).clone(), g.value(out.pixel_map).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn samples_do_not_couple_across_batch() {
        let d = tiny_disc(5);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let pair = rand_pair(&mut g, 3, 3, 16, 6);
        let out = d.discriminate(&mut g, &mut bind, pair).unwrap();
        // Same sample 0 alone in its own batch.
        let bf0 = g.slice_axis(pair.bf, 0, 0, 1);
        let gfp0 = g.slice_axis(pair.gfp, 0, 0, 1);
        let solo = d
            .discriminate(&mut g, &mut bind, ImagePair { bf: bf0, gfp: gfp0 })
            .unwrap();
        let batch_s0 = g.value(out.scalar)[[0]];
        let solo_s0 = g.value(solo.scalar)[[0]];
        assert!((batch_s0 - solo_s0).abs() < 1e-9, "{batch_s0} vs {solo_s0}");
    }

    #[test]
    fn residual_block_dead_main_path_gives_scaled_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = ResidualBlock::<f64>::new("rb", 4, 4, false, &mut rng);
        block.conv1.weight.fill(0.0);
        block.conv2.weight.fill(0.0);
        block.conv1.bias.as_mut().unwrap().fill(0.0);
        block.conv2.bias.as_mut().unwrap().fill(0.0);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = g.constant(nn::randn(&mut rng, &[1, 4, 8, 8], 1.0));
        let out = block.forward(&mut g, &mut bind, x);
        let skip = block.skip.forward_raw(&mut g, &mut bind, x);
        let expected = g.value(skip).mapv(|v| v / 2f64.sqrt());
        let diff = (g.value(out) - &expected).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn residual_block_downsample_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = ResidualBlock::<f64>::new("rb", 2, 3, true, &mut rng);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = g.constant(nn::randn(&mut rng, &[1, 2, 16, 16], 1.0));
        let out = block.forward(&mut g, &mut bind, x);
        assert_eq!(g.value(out).shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn residual_block_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = ResidualBlock::<f64>::new("rb", 2, 2, false, &mut rng);
        let x0 = nn::randn::<f64, _>(&mut rng, &[1, 2, 4, 4], 1.0);

        let loss_at = |x: &ArrayD<f64>| {
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::trainable();
            let xv = g.constant(x.clone());
            let out = block.forward(&mut g, &mut bind, xv);
            let sq = g.square(out);
            let l = g.sum_all(sq);
            g.scalar_value(l)
        };

        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let xv = g.leaf(x0.clone());
        let out = block.forward(&mut g, &mut bind, xv);
        let sq = g.square(out);
        let l = g.sum_all(sq);
        let grad = g.grad(l, &[xv]);
        let analytic = g.value(grad[0]).clone();

        let eps = 1e-5;
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 3, 1]] {
            let mut plus = x0.clone();
            plus[IxDyn(&idx)] += eps;
            let mut minus = x0.clone();
            minus[IxDyn(&idx)] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let a = analytic[IxDyn(&idx)];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-4, "idx {idx:?}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn nonlocal_gamma_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let nl = NonLocalBlock::<f64>::new("nl", 8, &mut rng);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = g.constant(nn::randn(&mut rng, &[2, 8, 4, 4], 1.0));
        let out = nl.forward(&mut g, &mut bind, x);
        assert_eq!(g.value(out), g.value(x));
    }

    #[test]
    fn nonlocal_single_pixel_hand_case() {
        // 1x1 spatial: attention is trivially the identity, so
        // out = x + gamma * Wz(g(x)). One channel makes every projection a
        // scalar multiply.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut nl = NonLocalBlock::<f64>::new("nl", 1, &mut rng);
        nl.gamma.fill(0.5);
        nl.g_path.weight.fill(3.0);
        nl.out_proj.weight.fill(2.0);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 4.0));
        let out = nl.forward(&mut g, &mut bind, x);
        // fan_in = 1 for both 1x1 convs so equalized scale is 1:
        // 4 + 0.5 * 2 * (3 * 4) = 16
        assert!((g.value(out)[[0, 0, 0, 0]] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn nonlocal_attention_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = g.constant(nn::randn(&mut rng, &[2, 5, 5], 1.0));
        let attn = g.softmax_last(logits);
        let v = g.value(attn);
        for b in 0..2 {
            for i in 0..5 {
                let s: f64 = (0..5).map(|j| v[[b, i, j]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_gradient_reaches_input() {
        let d = tiny_disc(13);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let bf = g.leaf(nn::randn(&mut rng, &[1, 3, 16, 16], 1.0));
        let gfp = g.leaf(nn::randn(&mut rng, &[1, 3, 16, 16], 1.0));
        let out = d.discriminate(&mut g, &mut bind, ImagePair { bf, gfp }).unwrap();
        let s = g.sum_all(out.scalar);
        let grads = g.grad(s, &[bf, gfp]);
        let norm: f64 = g.value(grads[0]).iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "dead network: zero input gradient");
    }

    #[test]
    fn nonlocal_stage_runs_in_default_style_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut cfg = DiscriminatorConfig::tiny(&[8, 12, 16], 6);
        cfg.nonlocal_stages = BTreeSet::from([1]);
        let d = Discriminator::<f64>::new(cfg, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let bf = g.constant(nn::randn(&mut r, &[1, 3, 16, 16], 1.0));
        let gfp = g.constant(nn::randn(&mut r, &[1, 3, 16, 16], 1.0));
        let out = d.discriminate(&mut g, &mut bind, ImagePair { bf, gfp }).unwrap();
        assert_eq!(g.value(out.pixel_map).shape(), &[1, 1, 16, 16]);
    }
}
