//! Shared network plumbing: parameter registration, equalized-learning-rate
//! layers and initializers.
//!
//! Model structs own plain `ArrayD` parameters. Each forward pass binds them
//! into the graph as leaves through a [`ParamBind`], which remembers the
//! name -> leaf association so the optimizer can route gradients back.

use crate::elem::Elem;
use crate::graph::{Graph, Var};
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

pub const LRELU_SLOPE: f64 = 0.2;
/// Variance-preserving gain applied after leaky ReLU activations.
pub const ACT_GAIN: f64 = std::f64::consts::SQRT_2;

/// Visitor-based access to a model's named parameters.
pub trait ParamModule<T: Elem> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>));

    fn named_values(&self) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, arr| out.push((name.to_string(), arr.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, arr| n += arr.len());
        n
    }
}

/// Records the leaf var created for every bound parameter during one
/// forward build.
#[derive(Default)]
pub struct ParamBind {
    pairs: HashMap<String, Var>,
    /// When false, parameters are bound as constants (no gradients), e.g.
    /// the discriminator while the generator trains.
    pub trainable: bool,
}

impl ParamBind {
    pub fn trainable() -> Self {
        ParamBind { pairs: HashMap::new(), trainable: true }
    }

    pub fn frozen() -> Self {
        ParamBind { pairs: HashMap::new(), trainable: false }
    }

    pub fn bind<T: Elem>(&mut self, g: &mut Graph<T>, name: &str, value: &ArrayD<T>) -> Var {
        if let Some(v) = self.pairs.get(name) {
            return *v;
        }
        let var = if self.trainable {
            g.leaf(value.clone())
        } else {
            g.constant(value.clone())
        };
        self.pairs.insert(name.to_string(), var);
        var
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.pairs.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.pairs.iter()
    }
}

/// Standard-normal tensor scaled by `std`.
pub fn randn<T: Elem, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        let x: f64 = StandardNormal.sample(rng);
        T::from_f64(x * std)
    })
}

pub fn zeros<T: Elem>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(ndarray::IxDyn(shape))
}

/// Runtime weight multiplier for equalized learning rate: stored weights
/// stay near unit variance and are scaled by 1/sqrt(fan_in) on use.
pub fn eq_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Fully connected layer with equalized learning rate.
pub struct Linear<T: Elem> {
    pub name: String,
    pub weight: ArrayD<T>, // (out, in)
    pub bias: ArrayD<T>,   // (out,)
}

impl<T: Elem> Linear<T> {
    pub fn new<R: Rng>(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            name: name.into(),
            weight: randn(rng, &[out_dim, in_dim], 1.0),
            bias: zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// x: (B, in) -> (B, out)
    pub fn forward(&self, g: &mut Graph<T>, bind: &mut ParamBind, x: Var) -> Var {
        let w = bind.bind(g, &format!("{}.weight", self.name), &self.weight);
        let b = bind.bind(g, &format!("{}.bias", self.name), &self.bias);
        let w = g.scale(w, T::from_f64(eq_scale(self.in_dim())));
        let wt = g.permute(w, &[1, 0]);
        let y = g.matmul(x, wt);
        g.add(y, b)
    }
}

impl<T: Elem> ParamModule<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        f(&format!("{}.bias", self.name), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Plain (unmodulated) convolution with equalized learning rate, used by
/// the discriminator.
pub struct Conv2d<T: Elem> {
    pub name: String,
    pub weight: ArrayD<T>, // (out, in, k, k)
    pub bias: Option<ArrayD<T>>,
}

impl<T: Elem> Conv2d<T> {
    pub fn new<R: Rng>(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            name: name.into(),
            weight: randn(rng, &[out_ch, in_ch, k, k], 1.0),
            bias: bias.then(|| zeros(&[out_ch])),
        }
    }

    pub fn fan_in(&self) -> usize {
        let s = self.weight.shape();
        s[1] * s[2] * s[3]
    }

    /// Convolution only; callers apply bias/activation themselves.
    pub fn forward_raw(&self, g: &mut Graph<T>, bind: &mut ParamBind, x: Var) -> Var {
        let w = bind.bind(g, &format!("{}.weight", self.name), &self.weight);
        let w = g.scale(w, T::from_f64(eq_scale(self.fan_in())));
        g.conv2d(x, w)
    }

    /// Convolution followed by bias + leaky ReLU (gain sqrt(2)).
    pub fn forward_act(&self, g: &mut Graph<T>, bind: &mut ParamBind, x: Var) -> Var {
        let y = self.forward_raw(g, bind, x);
        let b = self
            .bias
            .as_ref()
            .expect("forward_act requires a bias term");
        let b = bind.bind(g, &format!("{}.bias", self.name), b);
        g.bias_act(y, b, T::from_f64(LRELU_SLOPE), T::from_f64(ACT_GAIN))
    }
}

impl<T: Elem> ParamModule<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&format!("{}.weight", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.name), b);
        }
    }
}
