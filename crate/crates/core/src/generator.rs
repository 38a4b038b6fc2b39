//! Full generator: mapping network, learned constant input, a pyramid of
//! resolution stages built from dual-styled-convolutional blocks, and
//! output-skip accumulation into two image sequences (one per domain).
//!
//! Each stage runs two main-path DSC blocks (the first upsampling, except
//! in the lowest stage) and one 1x1 output-mapping DSC block whose
//! `timesteps`-channel result is added to the bilinearly upsampled running
//! output.

use crate::dsc::{DscBlock, FeaturePair, NoiseMode};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, Linear, ParamBind, ParamModule, ACT_GAIN, LRELU_SLOPE};
use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    pub stages: usize,
    pub features_per_stage: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub base_resolution: usize,
    pub timesteps: usize,
    /// Probability of mixing two latents during training (0 disables).
    pub style_mixing_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            stages: 7,
            features_per_stage: 512,
            latent_dim: 512,
            mapping_layers: 8,
            base_resolution: 4,
            timesteps: 3,
            style_mixing_prob: 0.0,
        }
    }
}

impl GeneratorConfig {
    /// Smaller preset used by tests and smoke runs.
    pub fn tiny(stages: usize, features: usize) -> Self {
        GeneratorConfig {
            stages,
            features_per_stage: features,
            latent_dim: 64,
            mapping_layers: 3,
            base_resolution: 4,
            timesteps: 3,
            style_mixing_prob: 0.0,
        }
    }

    pub fn output_resolution(&self) -> usize {
        self.base_resolution << (self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.timesteps == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("GeneratorConfig", "stages, timesteps and latent_dim must be positive"));
        }
        Ok(())
    }
}

/// Generated (or real) paired sequences inside a graph.
#[derive(Clone, Copy)]
pub struct ImagePair {
    /// (B, timesteps, H, W)
    pub bf: Var,
    pub gfp: Var,
}

pub struct MappingNetwork<T: Elem> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Elem> MappingNetwork<T> {
    fn new<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.mapping_layers)
            .map(|i| Linear::new(format!("mapping.l{i}"), cfg.latent_dim, cfg.latent_dim, rng))
            .collect();
        MappingNetwork { layers }
    }

    /// z (B, latent) -> w (B, latent); the input is RMS-normalized per
    /// vector first so the map is invariant to positive rescaling of z.
    pub fn forward(&self, g: &mut Graph<T>, bind: &mut ParamBind, z: Var) -> Result<Var> {
        let shape = g.value(z).shape().to_vec();
        let latent = self.layers[0].in_dim();
        if shape.len() != 2 || shape[1] != latent {
            return Err(Error::shape("map_latent", format!("(B, {latent})"), format!("{shape:?}")));
        }
        let sq = g.square(z);
        let ms = g.sum_to(sq, &[shape[0], 1]);
        let ms = g.scale(ms, T::from_f64(1.0 / latent as f64));
        let ms = g.add_scalar(ms, T::from_f64(1e-8));
        let rms = g.sqrt(ms);
        let mut x = g.div(z, rms);
        for layer in &self.layers {
            x = layer.forward(g, bind, x);
            x = g.leaky_relu(x, T::from_f64(LRELU_SLOPE));
            x = g.scale(x, T::from_f64(ACT_GAIN));
        }
        Ok(x)
    }
}

impl<T: Elem> ParamModule<T> for MappingNetwork<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

struct Stage<T: Elem> {
    block1: DscBlock<T>,
    block2: DscBlock<T>,
    /// 1x1 output-mapping block (features -> timesteps, demodulation off).
    to_out: DscBlock<T>,
}

pub struct Generator<T: Elem> {
    pub config: GeneratorConfig,
    pub mapping: MappingNetwork<T>,
    /// Learned constant input, shared by both domain paths.
    pub constant: ArrayD<T>,
    stages: Vec<Stage<T>>,
}

impl<T: Elem> Generator<T> {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mapping = MappingNetwork::new(&config, rng);
        let f = config.features_per_stage;
        let constant = nn::randn(rng, &[f, config.base_resolution, config.base_resolution], 1.0);
        let stages = (0..config.stages)
            .map(|s| Stage {
                block1: DscBlock::new(
                    format!("g.s{s}.b1"),
                    config.latent_dim,
                    f,
                    f,
                    3,
                    true,
                    s > 0,
                    rng,
                ),
                block2: DscBlock::new(format!("g.s{s}.b2"), config.latent_dim, f, f, 3, true, false, rng),
                to_out: DscBlock::new(
                    format!("g.s{s}.out"),
                    config.latent_dim,
                    f,
                    config.timesteps,
                    1,
                    false,
                    false,
                    rng,
                ),
            })
            .collect();
        Ok(Generator { config, mapping, constant, stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Map a batch of input noise vectors to intermediate latents.
    pub fn map_latent(&self, g: &mut Graph<T>, bind: &mut ParamBind, z: Var) -> Result<Var> {
        self.mapping.forward(g, bind, z)
    }

    /// Synthesize from one latent per sample (same w at every stage).
    pub fn synthesize(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        w: Var,
        noise: &mut NoiseMode,
    ) -> Result<ImagePair> {
        let ws = vec![w; self.config.stages];
        self.synthesize_per_stage(g, bind, &ws, noise)
    }

    /// Synthesize with an explicit latent per stage (style mixing).
    pub fn synthesize_per_stage(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        ws: &[Var],
        noise: &mut NoiseMode,
    ) -> Result<ImagePair> {
        if ws.len() != self.config.stages {
            return Err(Error::shape(
                "synthesize",
                format!("{} per-stage latents", self.config.stages),
                format!("{}", ws.len()),
            ));
        }
        let batch = g.value(ws[0]).shape()[0];
        let c = bind.bind(g, "g.constant", &self.constant);
        let f = self.config.features_per_stage;
        let r = self.config.base_resolution;
        let c = g.reshape(c, &[1, f, r, r]);
        let c = g.broadcast_to(c, &[batch, f, r, r]);
        let mut feat = FeaturePair { bf: c, gfp: c };
        let mut out: Option<ImagePair> = None;
        for (stage, w) in self.stages.iter().zip(ws) {
            feat = stage.block1.forward(g, bind, feat, *w, noise)?;
            feat = stage.block2.forward(g, bind, feat, *w, noise)?;
            let contrib = stage.to_out.forward(g, bind, feat, *w, noise)?;
            out = Some(match out {
                None => ImagePair { bf: contrib.bf, gfp: contrib.gfp },
                Some(prev) => {
                    let up_bf = g.upsample2x(prev.bf);
                    let up_gfp = g.upsample2x(prev.gfp);
                    ImagePair {
                        bf: g.add(up_bf, contrib.bf),
                        gfp: g.add(up_gfp, contrib.gfp),
                    }
                }
            });
        }
        Ok(out.expect("at least one stage"))
    }

    /// Stages before `crossover` receive w1, stages at/after receive w2.
    pub fn style_mix(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        w1: Var,
        w2: Var,
        crossover: usize,
        noise: &mut NoiseMode,
    ) -> Result<ImagePair> {
        let n = self.config.stages;
        if crossover > n {
            return Err(Error::invalid(
                "style_mix",
                format!("crossover {crossover} out of range 0..={n}"),
            ));
        }
        let ws: Vec<Var> = (0..n).map(|s| if s < crossover { w1 } else { w2 }).collect();
        self.synthesize_per_stage(g, bind, &ws, noise)
    }

    /// Linear interpolation in W-space over `steps` uniform points
    /// (endpoints inclusive), synthesized with zero noise.
    pub fn interpolate_latents(
        &self,
        g: &mut Graph<T>,
        bind: &mut ParamBind,
        z1: Var,
        z2: Var,
        steps: usize,
    ) -> Result<Vec<ImagePair>> {
        if steps < 2 {
            return Err(Error::invalid("interpolate_latents", "steps must be >= 2"));
        }
        let w1 = self.map_latent(g, bind, z1)?;
        let w2 = self.map_latent(g, bind, z2)?;
        let mut frames = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = i as f64 / (steps - 1) as f64;
            let a = g.scale(w1, T::from_f64(1.0 - t));
            let b = g.scale(w2, T::from_f64(t));
            let w = g.add(a, b);
            frames.push(self.synthesize(g, bind, w, &mut NoiseMode::Zero)?);
        }
        Ok(frames)
    }
}

impl<T: Elem> ParamModule<T> for Generator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.mapping.visit(f);
        f("g.constant", &self.constant);
        for s in &self.stages {
            s.block1.visit(f);
            s.block2.visit(f);
            s.to_out.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.mapping.visit_mut(f);
        f("g.constant", &mut self.constant);
        for s in &mut self.stages {
            s.block1.visit_mut(f);
            s.block2.visit_mut(f);
            s.to_out.visit_mut(f);
        }
    }
}

/// Draw a batch of latent noise vectors z ~ N(0, I).
pub fn sample_latents<T: Elem, R: Rng>(rng: &mut R, batch: usize, latent_dim: usize) -> ArrayD<T> {
    nn::randn(rng, &[batch, latent_dim], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_gen(seed: u64) -> Generator<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Generator::new(GeneratorConfig::tiny(3, 16), &mut rng).unwrap()
    }

    #[test]
    fn map_latent_scale_invariant() {
        let gen = tiny_gen(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_latents::<f64, _>(&mut rng, 2, 64);
        let z2 = z.mapv(|v| v * 2.0);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let za = g.constant(z);
        let zb = g.constant(z2);
        let wa = gen.map_latent(&mut g, &mut bind, za).unwrap();
        let wb = gen.map_latent(&mut g, &mut bind, zb).unwrap();
        let diff = (g.value(wa) - g.value(wb)).mapv(f64::abs);
        assert!(diff.iter().cloned().fold(0.0, f64::max) < 1e-6);
        assert_eq!(g.value(wa).shape(), &[2, 64]);
    }

    #[test]
    fn distinct_seeds_give_distinct_w() {
        let gen = tiny_gen(1);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let z1 = g.constant(sample_latents::<f64, _>(&mut r1, 1, 64));
        let z2 = g.constant(sample_latents::<f64, _>(&mut r2, 1, 64));
        let w1 = gen.map_latent(&mut g, &mut bind, z1).unwrap();
        let w2 = gen.map_latent(&mut g, &mut bind, z2).unwrap();
        assert_ne!(g.value(w1), g.value(w2));
    }

    #[test]
    fn tiny_config_shape_law() {
        // 3 stages, base 4 -> 16^2
        let gen = tiny_gen(3);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = g.constant(sample_latents::<f64, _>(&mut rng, 2, 64));
        let w = gen.map_latent(&mut g, &mut bind, z).unwrap();
        let out = gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Zero).unwrap();
        assert_eq!(g.value(out.bf).shape(), &[2, 3, 16, 16]);
        assert_eq!(g.value(out.gfp).shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn zero_noise_synthesis_is_deterministic() {
        let gen = tiny_gen(5);
        let run = || {
            let mut g = Graph::<f64>::new();
            let mut bind = ParamBind::trainable();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let z = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
            let w = gen.map_latent(&mut g, &mut bind, z).unwrap();
            let out = gen.synthesize(&mut g, &mut bind, w, &mut NoiseMode::Zero).unwrap();
            g.value(out.bf).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn style_mix_boundaries_are_bit_exact() {
        let gen = tiny_gen(7);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z1 = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
        let z2 = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
        let w1 = gen.map_latent(&mut g, &mut bind, z1).unwrap();
        let w2 = gen.map_latent(&mut g, &mut bind, z2).unwrap();
        let plain1 = gen.synthesize(&mut g, &mut bind, w1, &mut NoiseMode::Zero).unwrap();
        let plain2 = gen.synthesize(&mut g, &mut bind, w2, &mut NoiseMode::Zero).unwrap();
        let n = gen.num_stages();
        let at_end = gen.style_mix(&mut g, &mut bind, w1, w2, n, &mut NoiseMode::Zero).unwrap();
        let at_zero = gen.style_mix(&mut g, &mut bind, w1, w2, 0, &mut NoiseMode::Zero).unwrap();
        assert_eq!(g.value(at_end.bf), g.value(plain1.bf));
        assert_eq!(g.value(at_end.gfp), g.value(plain1.gfp));
        assert_eq!(g.value(at_zero.bf), g.value(plain2.bf));
        // Degenerate mix: w1 == w2 at any crossover.
        let degenerate = gen.style_mix(&mut g, &mut bind, w1, w1, 2, &mut NoiseMode::Zero).unwrap();
        assert_eq!(g.value(degenerate.bf), g.value(plain1.bf));
    }

    #[test]
    fn interpolation_endpoints_match_plain_synthesis() {
        let gen = tiny_gen(9);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z1 = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
        let z2 = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
        let frames = gen.interpolate_latents(&mut g, &mut bind, z1, z2, 5).unwrap();
        assert_eq!(frames.len(), 5);
        let w1 = gen.map_latent(&mut g, &mut bind, z1).unwrap();
        let w2 = gen.map_latent(&mut g, &mut bind, z2).unwrap();
        let e1 = gen.synthesize(&mut g, &mut bind, w1, &mut NoiseMode::Zero).unwrap();
        let e2 = gen.synthesize(&mut g, &mut bind, w2, &mut NoiseMode::Zero).unwrap();
        let d1 = (g.value(frames[0].bf) - g.value(e1.bf)).mapv(f64::abs);
        let d2 = (g.value(frames[4].gfp) - g.value(e2.gfp)).mapv(f64::abs);
        assert!(d1.iter().cloned().fold(0.0, f64::max) < 1e-12);
        assert!(d2.iter().cloned().fold(0.0, f64::max) < 1e-12);
    }

    #[test]
    fn interpolation_rejects_single_step() {
        let gen = tiny_gen(11);
        let mut g = Graph::<f64>::new();
        let mut bind = ParamBind::trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = g.constant(sample_latents::<f64, _>(&mut rng, 1, 64));
        assert!(gen.interpolate_latents(&mut g, &mut bind, z, z, 1).is_err());
    }
}
