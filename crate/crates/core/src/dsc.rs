//! Dual-styled-convolutional block: one style vector modulates the weights
//! of two parallel convolution paths, one per imaging domain, keeping the
//! domains consistent while their kernels stay decoupled.
//!
//! Per block and domain d: optionally 2x bilinear upsample, convolve with
//! the (de)modulated kernel, add bias, add per-pixel Gaussian noise scaled
//! by a learned gain, then leaky ReLU (slope 0.2, gain sqrt(2)).

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, ParamBind, ParamModule, ACT_GAIN, LRELU_SLOPE};
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::rc::Rc;

/// Default epsilon inside the demodulation square root.
pub const DEMOD_EPS: f64 = 1e-8;

/// A pair of same-shaped feature maps, one per domain (brightfield /
/// fluorescence).
#[derive(Clone, Copy)]
pub struct FeaturePair {
    pub bf: Var,
    pub gfp: Var,
}

/// Noise injection policy for one forward pass.
pub enum NoiseMode<'a> {
    /// All noise maps zero; the forward pass is deterministic.
    Zero,
    /// Fresh unit-Gaussian maps drawn from the given rng.
    Fresh(&'a mut rand_chacha::ChaCha8Rng),
}

/// s = style_weight . w + style_bias for a batch of latents.
///
/// `w`: (B, latent), `style_weight`: (in_ch, latent), `style_bias`: (in_ch).
/// Returns (B, in_ch).
pub fn style_from_latent<T: Elem>(
    g: &mut Graph<T>,
    w: Var,
    style_weight: Var,
    style_bias: Var,
) -> Result<Var> {
    let wd = g.value(w).shape().to_vec();
    let sw = g.value(style_weight).shape().to_vec();
    if wd.len() != 2 || sw.len() != 2 || wd[1] != sw[1] {
        return Err(Error::shape(
            "style_from_latent",
            format!("w (B, {}) for style_weight {:?}", sw.get(1).copied().unwrap_or(0), sw),
            format!("{wd:?}"),
        ));
    }
    let swt = g.permute(style_weight, &[1, 0]);
    let prod = g.matmul(w, swt);
    Ok(g.add(prod, style_bias))
}

/// Style modulation of a conv kernel, optionally demodulated.
///
/// theta: (out, in, k, k); s: (in,). Returns theta' = s_i * theta_oik, or
/// theta'' = theta' / sqrt(sum_ik theta'^2 + eps) when demodulating.
pub fn modulate_weights<T: Elem>(
    g: &mut Graph<T>,
    theta: Var,
    s: Var,
    demodulate: bool,
    eps: T,
) -> Result<Var> {
    let ts = g.value(theta).shape().to_vec();
    let ss = g.value(s).shape().to_vec();
    if ts.len() != 4 || ss != [ts[1]] {
        return Err(Error::shape(
            "modulate_weights",
            format!("s of length in_ch = {}", ts.get(1).copied().unwrap_or(0)),
            format!("theta {ts:?}, s {ss:?}"),
        ));
    }
    if !g.value(theta).iter().all(|v| v.is_finite()) || !g.value(s).iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("modulate_weights", "non-finite theta or style"));
    }
    let s_b = g.reshape(s, &[1, ts[1], 1, 1]);
    let modulated = g.mul(theta, s_b);
    if !demodulate {
        return Ok(modulated);
    }
    let sq = g.square(modulated);
    let sum = g.sum_to(sq, &[ts[0], 1, 1, 1]);
    let sum = g.add_scalar(sum, eps);
    let sigma = g.sqrt(sum);
    Ok(g.div(modulated, sigma))
}

/// Parameters of one dual-styled-convolutional block.
pub struct DscBlock<T: Elem> {
    pub name: String,
    pub latent_dim: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub demodulate: bool,
    pub upsample: bool,
    /// Style affine: raw weight (in_ch, latent), bias initialized to ones so
    /// modulation starts as the identity.
    pub style_weight: ArrayD<T>,
    pub style_bias: ArrayD<T>,
    pub theta_bf: ArrayD<T>,  // (out, in, k, k)
    pub theta_gfp: ArrayD<T>, // same shape
    pub bias_bf: ArrayD<T>,   // (out,)
    pub bias_gfp: ArrayD<T>,
    pub noise_gain_bf: ArrayD<T>, // 0-d
    pub noise_gain_gfp: ArrayD<T>,
}

impl<T: Elem> DscBlock<T> {
    pub fn new<R: Rng>(
        name: impl Into<String>,
        latent_dim: usize,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        demodulate: bool,
        upsample: bool,
        rng: &mut R,
    ) -> Self {
        DscBlock {
            name: name.into(),
            latent_dim,
            in_ch,
            out_ch,
            k,
            demodulate,
            upsample,
            // Small random style weight + unit bias: initial s ~= 1.
            style_weight: nn::randn(rng, &[in_ch, latent_dim], 0.05),
            style_bias: ArrayD::from_elem(ndarray::IxDyn(&[in_ch]), T::one()),
            theta_bf: nn::randn(rng, &[out_ch, in_ch, k, k], 1.0),
            theta_gfp: nn::randn(rng, &[out_ch, in_ch, k, k], 1.0),
            bias_bf: nn::zeros(&[out_ch]),
            bias_gfp: nn::zeros(&[out_ch]),
            noise_gain_bf: nn::zeros(&[]),
            noise_gain_gfp: nn::zeros(&[]),
        }
    }

    /// Forward one block for a batch.
    ///
    /// `inp` feature maps: (B, in_ch, H, W); `w`: (B, latent). Both domains
    /// consume the same per-sample style vector.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        inp: FeaturePair,
        w: Var,
        noise: &mut NoiseMode,
    ) -> Result<FeaturePair> {
        let in_shape = g.value(inp.bf).shape().to_vec();
        let gfp_shape = g.value(inp.gfp).shape().to_vec();
        if in_shape != gfp_shape {
            return Err(Error::shape("dsc_block_forward", format!("{in_shape:?}"), format!("{gfp_shape:?}")));
        }
        if in_shape.len() != 4 || in_shape[1] != self.in_ch {
            return Err(Error::shape(
                "dsc_block_forward",
                format!("(B, {}, H, W)", self.in_ch),
                format!("{in_shape:?}"),
            ));
        }
        let batch = in_shape[0];
        if g.value(w).shape() != [batch, self.latent_dim] {
            return Err(Error::shape(
                "dsc_block_forward",
                format!("w (B={batch}, {})", self.latent_dim),
                format!("{:?}", g.value(w).shape()),
            ));
        }

        // Bind parameters (leafs shared across calls through `bind`).
        let n = &self.name;
        let style_w = bind.bind(g, &format!("{n}.style.weight"), &self.style_weight);
        let style_b = bind.bind(g, &format!("{n}.style.bias"), &self.style_bias);
        let style_w = g.scale(style_w, T::from_f64(nn::eq_scale(self.latent_dim)));
        let theta_scale = T::from_f64(nn::eq_scale(self.in_ch * self.k * self.k));
        let theta = [
            bind.bind(g, &format!("{n}.theta_bf"), &self.theta_bf),
            bind.bind(g, &format!("{n}.theta_gfp"), &self.theta_gfp),
        ]
        .map(|t| g.scale(t, theta_scale));
        let bias = [
            bind.bind(g, &format!("{n}.bias_bf"), &self.bias_bf),
            bind.bind(g, &format!("{n}.bias_gfp"), &self.bias_gfp),
        ];
        let gain = [
            bind.bind(g, &format!("{n}.noise_gain_bf"), &self.noise_gain_bf),
            bind.bind(g, &format!("{n}.noise_gain_gfp"), &self.noise_gain_gfp),
        ];

        let styles = style_from_latent(g, w, style_w, style_b)?;

        let mut out = [inp.bf, inp.gfp];
        if self.upsample {
            for o in out.iter_mut() {
                *o = g.upsample2x(*o);
            }
        }
        let (h, w_sp) = {
            let s = g.value(out[0]).shape();
            (s[2], s[3])
        };

        // Per-sample modulated convolution, same style for both domains.
        for (d, dom_out) in out.iter_mut().enumerate() {
            let mut per_sample = Vec::with_capacity(batch);
            for b in 0..batch {
                let s_row = g.slice_axis(styles, 0, b, 1);
                let s_vec = g.reshape(s_row, &[self.in_ch]);
                let wm = modulate_weights(g, theta[d], s_vec, self.demodulate, T::from_f64(DEMOD_EPS))?;
                let x_b = g.slice_axis(*dom_out, 0, b, 1);
                per_sample.push(g.conv2d(x_b, wm));
            }
            *dom_out = g.concat(&per_sample, 0);
        }

        let noise_maps = self.make_noise(batch, h, w_sp, noise);
        let act = |g: &mut Graph<T>, x: Var, d: usize, nm: Rc<ArrayD<T>>| {
            g.bias_noise_act(x, bias[d], gain[d], nm, T::from_f64(LRELU_SLOPE), T::from_f64(ACT_GAIN))
        };
        let bf = act(g, out[0], 0, noise_maps.0);
        let gfp = act(g, out[1], 1, noise_maps.1);
        Ok(FeaturePair { bf, gfp })
    }

    /// One unit-Gaussian map per spatial location per domain, shared across
    /// channels.
    fn make_noise(
        &self,
        batch: usize,
        h: usize,
        w: usize,
        mode: &mut NoiseMode,
    ) -> (Rc<ArrayD<T>>, Rc<ArrayD<T>>) {
        let shape = [batch, 1, h, w];
        match mode {
            NoiseMode::Zero => {
                let z = Rc::new(nn::zeros::<T>(&shape));
                (z.clone(), z)
            }
            NoiseMode::Fresh(rng) => {
                let mut draw = || {
                    Rc::new(ArrayD::from_shape_simple_fn(ndarray::IxDyn(&shape), || {
                        let x: f64 = StandardNormal.sample(*rng);
                        T::from_f64(x)
                    }))
                };
                (draw(), draw())
            }
        }
    }
}

impl<T: Elem> ParamModule<T> for DscBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        let n = &self.name;
        f(&format!("{n}.style.weight"), &self.style_weight);
        f(&format!("{n}.style.bias"), &self.style_bias);
        f(&format!("{n}.theta_bf"), &self.theta_bf);
        f(&format!("{n}.theta_gfp"), &self.theta_gfp);
        f(&format!("{n}.bias_bf"), &self.bias_bf);
        f(&format!("{n}.bias_gfp"), &self.bias_gfp);
        f(&format!("{n}.noise_gain_bf"), &self.noise_gain_bf);
        f(&format!("{n}.noise_gain_gfp"), &self.noise_gain_gfp);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let n = self.name.clone();
        f(&format!("{n}.style.weight"), &mut self.style_weight);
        f(&format!("{n}.style.bias"), &mut self.style_bias);
        f(&format!("{n}.theta_bf"), &mut self.theta_bf);
        f(&format!("{n}.theta_gfp"), &mut self.theta_gfp);
        f(&format!("{n}.bias_bf"), &mut self.bias_bf);
        f(&format!("{n}.bias_gfp"), &mut self.bias_gfp);
        f(&format!("{n}.noise_gain_bf"), &mut self.noise_gain_bf);
        f(&format!("{n}.noise_gain_gfp"), &mut self.noise_gain_gfp);
    }
}
