//! Training objectives: non-saturating adversarial losses over the scalar
//! and pixel heads with top-k filtering on the generator side, R1 and
//! path-length regularizers (both need gradients of gradients, which the
//! graph supports), CutMix consistency and disordered-sequence negatives.

use crate::discriminator::DiscriminatorOutput;
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::generator::ImagePair;
use crate::graph::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Fraction of the batch kept by top-k at step 0 and after annealing.
    pub topk_start: f64,
    pub topk_end: f64,
    pub pixel_loss_weight: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub pl_weight: f64,
    pub pl_interval: usize,
    pub pl_ema_decay: f64,
    pub cutmix_prob: f64,
    pub consistency_weight: f64,
    /// Probability that a batch's fake stream is a disordered real batch.
    pub disordered_prob: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            topk_start: 1.0,
            topk_end: 0.5,
            pixel_loss_weight: 1.0,
            r1_gamma: 10.0,
            r1_interval: 16,
            pl_weight: 2.0,
            pl_interval: 8,
            pl_ema_decay: 0.99,
            cutmix_prob: 0.5,
            consistency_weight: 1.0,
            disordered_prob: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.topk_start,
            self.topk_end,
            self.pixel_loss_weight,
            self.r1_gamma,
            self.pl_weight,
            self.consistency_weight,
        ];
        if weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("LossConfig", "weights must be non-negative"));
        }
        if self.r1_interval == 0 || self.pl_interval == 0 {
            return Err(Error::invalid("LossConfig", "lazy intervals must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.pl_ema_decay) {
            return Err(Error::invalid("LossConfig", "pl_ema_decay must lie in (0, 1)"));
        }
        for p in [self.cutmix_prob, self.disordered_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("LossConfig", "probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Top-k batch fraction at `step`: anneals linearly from start to end
    /// over the first half of training, constant afterwards.
    pub fn topk_fraction(&self, step: usize, total_steps: usize) -> f64 {
        let half = (total_steps / 2).max(1);
        let t = (step as f64 / half as f64).min(1.0);
        self.topk_start + (self.topk_end - self.topk_start) * t
    }
}

/// Resolve a fraction to a concrete k, always keeping at least one sample.
pub fn topk_count(batch: usize, fraction: f64) -> usize {
    ((batch as f64 * fraction).round() as usize).clamp(1, batch)
}

/// Indices of the k largest scores, ties broken toward the lower index.
/// The result is sorted ascending.
pub fn topk_filter<T: Elem>(scores: &ArrayD<T>, k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::invalid("topk_filter", format!("k = {k} out of range 1..={n}")));
    }
    let flat: Vec<T> = scores.iter().cloned().collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending score keeps equal scores in index order.
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn softplus_neg<T: Elem>(g: &mut Graph<T>, x: Var) -> Var {
    let nx = g.neg(x);
    g.softplus(nx)
}

/// Generator loss: softplus(-scalar) plus pixel-head softplus(-logits),
/// both averaged over only the top-k most realistic fakes.
pub fn g_loss<T: Elem>(
    g: &mut Graph<T>,
    fake: DiscriminatorOutput,
    k: usize,
    pixel_weight: f64,
) -> Result<Var> {
    let scores = g.value(fake.scalar).clone();
    if scores.is_empty() {
        return Err(Error::invalid("g_loss", "empty batch"));
    }
    let idx = topk_filter(&scores, k)?;
    let sel_scalar = g.select_rows(fake.scalar, &idx);
    let sel_pixel = g.select_rows(fake.pixel_map, &idx);
    let s_term = softplus_neg(g, sel_scalar);
    let s_term = g.mean_all(s_term);
    let p_term = softplus_neg(g, sel_pixel);
    let p_term = g.mean_all(p_term);
    let p_term = g.scale(p_term, T::from_f64(pixel_weight));
    Ok(g.add(s_term, p_term))
}

/// Discriminator loss term for a batch of reals.
pub fn d_real_term<T: Elem>(g: &mut Graph<T>, out: DiscriminatorOutput, pixel_weight: f64) -> Var {
    let s = softplus_neg(g, out.scalar);
    let s = g.mean_all(s);
    let p = softplus_neg(g, out.pixel_map);
    let p = g.mean_all(p);
    let p = g.scale(p, T::from_f64(pixel_weight));
    g.add(s, p)
}

/// Discriminator loss term for a batch of fakes (including disordered
/// negatives, which are penalized on both heads).
pub fn d_fake_term<T: Elem>(g: &mut Graph<T>, out: DiscriminatorOutput, pixel_weight: f64) -> Var {
    let s = g.softplus(out.scalar);
    let s = g.mean_all(s);
    let p = g.softplus(out.pixel_map);
    let p = g.mean_all(p);
    let p = g.scale(p, T::from_f64(pixel_weight));
    g.add(s, p)
}

pub fn d_loss<T: Elem>(
    g: &mut Graph<T>,
    real: DiscriminatorOutput,
    fake: DiscriminatorOutput,
    pixel_weight: f64,
) -> Var {
    let r = d_real_term(g, real, pixel_weight);
    let f = d_fake_term(g, fake, pixel_weight);
    g.add(r, f)
}

/// (gamma/2) * mean over the batch of the squared input-gradient norm of
/// the scalar head, evaluated on reals. `inputs` are the leaf image vars.
pub fn r1_penalty<T: Elem>(
    g: &mut Graph<T>,
    scalar: Var,
    inputs: &[Var],
    gamma: f64,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::invalid("r1_penalty", "no inputs to differentiate"));
    }
    let batch = g.value(inputs[0]).shape()[0];
    let total = g.sum_all(scalar);
    let grads = g.grad(total, inputs);
    let mut acc: Option<Var> = None;
    for gr in grads {
        let sq = g.square(gr);
        let s = g.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s),
        });
    }
    let acc = acc.unwrap();
    Ok(g.scale(acc, T::from_f64(gamma / (2.0 * batch as f64))))
}

/// Path-length regularizer state: running EMA of the Jacobian norm.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PlState {
    pub ema: f64,
    pub decay: f64,
}

impl PlState {
    pub fn new(decay: f64) -> Self {
        PlState { ema: 0.0, decay }
    }
}

/// Core path-length computation with explicit perturbation images, so
/// tests can pin the noise. `out` must be built from leaf `w`.
pub fn path_length_penalty_with_noise<T: Elem>(
    g: &mut Graph<T>,
    out: ImagePair,
    w: Var,
    state: &PlState,
    y_bf: ArrayD<T>,
    y_gfp: ArrayD<T>,
) -> Result<(Var, PlState)> {
    let bf_shape = g.value(out.bf).shape().to_vec();
    let gfp_shape = g.value(out.gfp).shape().to_vec();
    let batch = bf_shape[0];
    let per_sample: usize =
        bf_shape[1..].iter().product::<usize>() + gfp_shape[1..].iter().product::<usize>();
    let norm = 1.0 / (per_sample as f64).sqrt();

    let yb = g.constant(y_bf);
    let yg = g.constant(y_gfp);
    let pb = g.mul(out.bf, yb);
    let pg = g.mul(out.gfp, yg);
    let sb = g.sum_all(pb);
    let sg = g.sum_all(pg);
    let inner = g.add(sb, sg);
    let inner = g.scale(inner, T::from_f64(norm));

    let j = g.grad(inner, &[w])[0]; // (B, latent)
    let sq = g.square(j);
    let row = g.sum_to(sq, &[batch, 1]);
    let norms = g.sqrt(row); // per-sample |J|
    let mean_norm = {
        let m = g.mean_all(norms);
        g.scalar_value(m).to_f64()
    };
    let dev = g.add_scalar(norms, T::from_f64(-state.ema));
    let dev = g.square(dev);
    let penalty = g.mean_all(dev);

    let mut next = *state;
    next.ema = state.ema + (1.0 - state.decay) * (mean_norm - state.ema);
    Ok((penalty, next))
}

/// Path-length penalty with fresh unit-Gaussian perturbations.
pub fn path_length_penalty<T: Elem, R: Rng>(
    g: &mut Graph<T>,
    out: ImagePair,
    w: Var,
    state: &PlState,
    rng: &mut R,
) -> Result<(Var, PlState)> {
    let bf_shape = g.value(out.bf).shape().to_vec();
    let gfp_shape = g.value(out.gfp).shape().to_vec();
    let y_bf = crate::nn::randn(rng, &bf_shape, 1.0);
    let y_gfp = crate::nn::randn(rng, &gfp_shape, 1.0);
    path_length_penalty_with_noise(g, out, w, state, y_bf, y_gfp)
}

/// A single axis-aligned rectangle of ones; lambda is its exact area
/// fraction after rounding to integer sides.
#[derive(Debug, Clone)]
pub struct CutMixMask<T: Elem> {
    /// (1, 1, H, W)
    pub mask: ArrayD<T>,
    pub lambda: f64,
}

impl<T: Elem> CutMixMask<T> {
    pub fn from_rect(h: usize, w: usize, top: usize, left: usize, rh: usize, rw: usize) -> Self {
        let mut mask = ArrayD::<T>::zeros(IxDyn(&[1, 1, h, w]));
        for i in top..(top + rh).min(h) {
            for j in left..(left + rw).min(w) {
                mask[IxDyn(&[0, 0, i, j])] = T::one();
            }
        }
        let ones: f64 = mask.iter().map(|v| Elem::to_f64(*v)).sum();
        CutMixMask { lambda: ones / (h * w) as f64, mask }
    }
}

/// Sample a rectangle with target area fraction lambda ~ Uniform(0, 1).
pub fn sample_cutmix_mask<T: Elem, R: Rng>(rng: &mut R, h: usize, w: usize) -> CutMixMask<T> {
    let lam: f64 = rng.gen();
    let rh = ((h as f64 * lam.sqrt()).round() as usize).min(h);
    let rw = ((w as f64 * lam.sqrt()).round() as usize).min(w);
    let top = if rh < h { rng.gen_range(0..=h - rh) } else { 0 };
    let left = if rw < w { rng.gen_range(0..=w - rw) } else { 0 };
    CutMixMask::from_rect(h, w, top, left, rh, rw)
}

/// mixed = mask * x1 + (1 - mask) * x2, one mask shared across timesteps
/// and both domains.
pub fn cutmix_pair<T: Elem>(
    g: &mut Graph<T>,
    x1: ImagePair,
    x2: ImagePair,
    mask: &CutMixMask<T>,
) -> Result<ImagePair> {
    let s1 = g.value(x1.bf).shape().to_vec();
    let s2 = g.value(x2.bf).shape().to_vec();
    if s1 != s2 || g.value(x1.gfp).shape() != g.value(x2.gfp).shape() {
        return Err(Error::shape("cutmix_pair", format!("{s1:?}"), format!("{s2:?}")));
    }
    if mask.mask.shape()[2] != s1[2] || mask.mask.shape()[3] != s1[3] {
        return Err(Error::shape(
            "cutmix_pair",
            format!("mask {}x{}", s1[2], s1[3]),
            format!("{:?}", mask.mask.shape()),
        ));
    }
    let m = Rc::new(mask.mask.clone());
    let inv = Rc::new(mask.mask.mapv(|v| T::one() - v));
    let mix = |g: &mut Graph<T>, a: Var, b: Var| {
        let ma = g.mul_const(a, m.clone());
        let mb = g.mul_const(b, inv.clone());
        g.add(ma, mb)
    };
    Ok(ImagePair {
        bf: mix(g, x1.bf, x2.bf),
        gfp: mix(g, x1.gfp, x2.gfp),
    })
}

/// Mean squared deviation of the pixel map on the mixed image from the
/// mask-blended pixel maps of the two sources.
pub fn consistency_loss<T: Elem>(
    g: &mut Graph<T>,
    pixel_mixed: Var,
    pixel_x1: Var,
    pixel_x2: Var,
    mask: &CutMixMask<T>,
) -> Var {
    let m = Rc::new(mask.mask.clone());
    let inv = Rc::new(mask.mask.mapv(|v| T::one() - v));
    let p1 = g.mul_const(pixel_x1, m);
    let p2 = g.mul_const(pixel_x2, inv);
    let blended = g.add(p1, p2);
    let diff = g.sub(pixel_mixed, blended);
    let sq = g.square(diff);
    g.mean_all(sq)
}

/// Permute the timestep axis of both domains with one uniformly random
/// non-identity permutation.
pub fn make_disordered<T: Elem, R: Rng>(
    bf: &ArrayD<T>,
    gfp: &ArrayD<T>,
    rng: &mut R,
) -> Result<(ArrayD<T>, ArrayD<T>, Vec<usize>)> {
    let t = bf.shape()[1];
    if gfp.shape()[1] != t {
        return Err(Error::shape("make_disordered", format!("{t} timesteps"), format!("{}", gfp.shape()[1])));
    }
    if t < 2 {
        return Err(Error::invalid("make_disordered", "needs at least 2 timesteps"));
    }
    let mut perm: Vec<usize> = (0..t).collect();
    loop {
        // Fisher-Yates, resampled until the permutation moves something.
        for i in (1..t).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            break;
        }
    }
    let apply = |x: &ArrayD<T>| {
        let mut out = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(1), dst)
                .assign(&x.index_axis(ndarray::Axis(1), src));
        }
        out
    };
    Ok((apply(bf), apply(gfp), perm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr1(v: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap()
    }

    #[test]
    fn topk_basic_and_ties() {
        assert_eq!(topk_filter(&arr1(&[3.0, 1.0, 2.0]), 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_filter(&arr1(&[3.0, 1.0, 2.0]), 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(topk_filter(&arr1(&[2.0, 2.0, 1.0]), 1).unwrap(), vec![0]);
        assert!(topk_filter(&arr1(&[1.0]), 0).is_err());
        assert!(topk_filter(&arr1(&[1.0]), 2).is_err());
    }

    #[test]
    fn topk_fraction_schedule_anneals_then_holds() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.topk_fraction(0, 1000), 1.0);
        assert!((cfg.topk_fraction(250, 1000) - 0.75).abs() < 1e-12);
        assert!((cfg.topk_fraction(500, 1000) - 0.5).abs() < 1e-12);
        assert!((cfg.topk_fraction(900, 1000) - 0.5).abs() < 1e-12);
    }

    fn out_from(g: &mut Graph<f64>, scalar: ArrayD<f64>, pixel: ArrayD<f64>) -> DiscriminatorOutput {
        DiscriminatorOutput {
            scalar: g.constant(scalar),
            pixel_map: g.constant(pixel),
        }
    }

    #[test]
    fn g_loss_zero_logits_is_two_ln2() {
        let mut g = Graph::<f64>::new();
        let out = out_from(
            &mut g,
            ArrayD::zeros(IxDyn(&[4])),
            ArrayD::zeros(IxDyn(&[4, 1, 2, 2])),
        );
        let l = g_loss(&mut g, out, 4, 1.0).unwrap();
        assert!((g.scalar_value(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn topk_g_loss_never_exceeds_full_batch_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut g = Graph::<f64>::new();
            let scalar = nn::randn::<f64, _>(&mut rng, &[6], 1.0);
            let pixel = nn::randn::<f64, _>(&mut rng, &[6, 1, 2, 2], 1.0);
            // Pixel scores must rank with the scalar for the bound to be
            // guaranteed; tie them by deriving pixels from the scalar.
            let pixel = {
                let mut p = pixel;
                for b in 0..6 {
                    let s = scalar[IxDyn(&[b])];
                    p.index_axis_mut(ndarray::Axis(0), b).fill(s);
                }
                p
            };
            let out = out_from(&mut g, scalar.clone(), pixel.clone());
            let out2 = out_from(&mut g, scalar, pixel);
            let lk = g_loss(&mut g, out, 3, 1.0).unwrap();
            let lfull = g_loss(&mut g, out2, 6, 1.0).unwrap();
            assert!(g.scalar_value(lk) <= g.scalar_value(lfull) + 1e-12);
        }
    }

    #[test]
    fn d_loss_zero_logits_is_two_ln2() {
        let mut g = Graph::<f64>::new();
        let real = out_from(&mut g, ArrayD::zeros(IxDyn(&[3])), ArrayD::zeros(IxDyn(&[3, 1, 2, 2])));
        let fake = out_from(&mut g, ArrayD::zeros(IxDyn(&[3])), ArrayD::zeros(IxDyn(&[3, 1, 2, 2])));
        let l = d_loss(&mut g, real, fake, 0.0);
        assert!((g.scalar_value(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn d_loss_symmetric_under_sign_flipped_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rs = nn::randn::<f64, _>(&mut rng, &[4], 1.0);
        let rp = nn::randn::<f64, _>(&mut rng, &[4, 1, 2, 2], 1.0);
        let fs = nn::randn::<f64, _>(&mut rng, &[4], 1.0);
        let fp = nn::randn::<f64, _>(&mut rng, &[4, 1, 2, 2], 1.0);
        let mut g = Graph::<f64>::new();
        let real = out_from(&mut g, rs.clone(), rp.clone());
        let fake = out_from(&mut g, fs.clone(), fp.clone());
        let l1 = d_loss(&mut g, real, fake, 1.0);
        let real2 = out_from(&mut g, fs.mapv(|v| -v), fp.mapv(|v| -v));
        let fake2 = out_from(&mut g, rs.mapv(|v| -v), rp.mapv(|v| -v));
        let l2 = d_loss(&mut g, real2, fake2, 1.0);
        assert!((g.scalar_value(l1) - g.scalar_value(l2)).abs() < 1e-12);
    }

    #[test]
    fn d_loss_vanishes_for_perfect_discriminator() {
        let mut g = Graph::<f64>::new();
        let real = out_from(&mut g, arr1(&[50.0, 50.0]), ArrayD::from_elem(IxDyn(&[2, 1, 1, 1]), 50.0));
        let fake = out_from(&mut g, arr1(&[-50.0, -50.0]), ArrayD::from_elem(IxDyn(&[2, 1, 1, 1]), -50.0));
        let l = d_loss(&mut g, real, fake, 1.0);
        assert!(g.scalar_value(l) < 1e-12);
    }

    #[test]
    fn r1_linear_scalar_head_closed_form() {
        // scalar(x) = <a, x> per sample: penalty = (gamma/2) * |a|^2
        let a = array![[0.5, -1.0], [2.0, 0.25]].into_dyn();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 2, 2]), (0..12).map(|v| v as f64).collect()).unwrap());
        let ac = Rc::new(a.clone());
        let prod = g.mul_const(x, ac);
        let scalar = g.sum_to(prod, &[3, 1, 1]);
        let scalar = g.reshape(scalar, &[3]);
        let pen = r1_penalty(&mut g, scalar, &[x], 10.0).unwrap();
        let a_norm_sq: f64 = a.iter().map(|v| v * v).sum();
        assert!((g.scalar_value(pen) - 5.0 * a_norm_sq).abs() < 1e-9);
    }

    #[test]
    fn r1_constant_discriminator_and_zero_gamma_are_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 4]), 1.0));
        let scalar = g.constant(arr1(&[3.0, 3.0]));
        let pen = r1_penalty(&mut g, scalar, &[x], 10.0).unwrap();
        assert_eq!(g.scalar_value(pen), 0.0);
        let xs = g.sum_to(x, &[2, 1]);
        let xs = g.reshape(xs, &[2]);
        let pen0 = r1_penalty(&mut g, xs, &[x], 0.0).unwrap();
        assert_eq!(g.scalar_value(pen0), 0.0);
    }

    #[test]
    fn path_length_linear_generator_closed_form() {
        // G(w) = A w with A = [[1,2],[3,4]], outputs shaped (1,1,1,2); the
        // GFP domain is constant zero. y = ones. n = 4 per sample, so
        // J = A^T y / 2 = [2, 3], |J| = sqrt(13).
        let a = array![[1.0, 3.0], [2.0, 4.0]].into_dyn(); // A^T as (in,out)
        let mut g = Graph::<f64>::new();
        let w = g.leaf(array![[1.0, 1.0]].into_dyn());
        let at = g.constant(a);
        let gw = g.matmul(w, at); // (1,2)
        let bf = g.reshape(gw, &[1, 1, 1, 2]);
        let gfp = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 2])));
        let out = ImagePair { bf, gfp };
        let y = ArrayD::from_elem(IxDyn(&[1, 1, 1, 2]), 1.0);
        let state = PlState { ema: 13f64.sqrt(), decay: 0.99 };
        let (pen, next) =
            path_length_penalty_with_noise(&mut g, out, w, &state, y.clone(), ArrayD::zeros(IxDyn(&[1, 1, 1, 2]))).unwrap();
        assert!(g.scalar_value(pen).abs() < 1e-12, "penalty at matched ema should vanish");
        assert!((next.ema - 13f64.sqrt()).abs() < 1e-9);

        let zero_state = PlState { ema: 0.0, decay: 0.99 };
        let (pen2, _) = path_length_penalty_with_noise(
            &mut g,
            out,
            w,
            &zero_state,
            y,
            ArrayD::zeros(IxDyn(&[1, 1, 1, 2])),
        )
        .unwrap();
        assert!((g.scalar_value(pen2) - 13.0).abs() < 1e-9);
    }

    #[test]
    fn path_length_penalty_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let w = g.leaf(nn::randn::<f64, _>(&mut rng, &[2, 3], 1.0));
        let m = g.constant(nn::randn::<f64, _>(&mut rng, &[3, 8], 1.0));
        let o = g.matmul(w, m);
        let bf = g.reshape(o, &[2, 1, 2, 4]);
        let gfp = g.reshape(o, &[2, 1, 2, 4]);
        let state = PlState::new(0.99);
        let (pen, _) =
            path_length_penalty(&mut g, ImagePair { bf, gfp }, w, &state, &mut rng).unwrap();
        assert!(g.scalar_value(pen) >= 0.0);
    }

    #[test]
    fn cutmix_mask_area_is_exact() {
        let m = CutMixMask::<f64>::from_rect(64, 64, 10, 20, 16, 32);
        assert_eq!(m.lambda, 0.125);
        let ones: f64 = m.mask.iter().sum();
        assert_eq!(ones, 512.0);
    }

    #[test]
    fn cutmix_boundaries_return_pure_inputs() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = ImagePair {
            bf: g.constant(nn::randn(&mut rng, &[1, 3, 4, 4], 1.0)),
            gfp: g.constant(nn::randn(&mut rng, &[1, 3, 4, 4], 1.0)),
        };
        let x2 = ImagePair {
            bf: g.constant(nn::randn(&mut rng, &[1, 3, 4, 4], 1.0)),
            gfp: g.constant(nn::randn(&mut rng, &[1, 3, 4, 4], 1.0)),
        };
        let full = CutMixMask::<f64>::from_rect(4, 4, 0, 0, 4, 4);
        let none = CutMixMask::<f64>::from_rect(4, 4, 0, 0, 0, 0);
        let mixed1 = cutmix_pair(&mut g, x1, x2, &full).unwrap();
        let mixed0 = cutmix_pair(&mut g, x1, x2, &none).unwrap();
        assert_eq!(g.value(mixed1.bf), g.value(x1.bf));
        assert_eq!(g.value(mixed1.gfp), g.value(x1.gfp));
        assert_eq!(g.value(mixed0.bf), g.value(x2.bf));
    }

    #[test]
    fn cutmix_sampled_lambda_matches_mask_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = sample_cutmix_mask::<f64, _>(&mut rng, 16, 16);
            let mean: f64 = m.mask.iter().sum::<f64>() / 256.0;
            assert_eq!(mean, m.lambda);
            assert!((0.0..=1.0).contains(&m.lambda));
        }
    }

    #[test]
    fn consistency_loss_zero_for_linear_pixel_head() {
        // pixel head = 1x1 conv (linear in the input) commutes with the
        // mask blend, so the loss must vanish.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let wt = nn::randn::<f64, _>(&mut rng, &[1, 6, 1, 1], 1.0);
        let mut g = Graph::<f64>::new();
        let wv = g.constant(wt);
        let pix = |g: &mut Graph<f64>, p: ImagePair| {
            let packed = g.concat(&[p.bf, p.gfp], 1);
            g.conv2d(packed, wv)
        };
        let x1 = ImagePair {
            bf: g.constant(nn::randn(&mut rng, &[2, 3, 8, 8], 1.0)),
            gfp: g.constant(nn::randn(&mut rng, &[2, 3, 8, 8], 1.0)),
        };
        let x2 = ImagePair {
            bf: g.constant(nn::randn(&mut rng, &[2, 3, 8, 8], 1.0)),
            gfp: g.constant(nn::randn(&mut rng, &[2, 3, 8, 8], 1.0)),
        };
        let mask = CutMixMask::<f64>::from_rect(8, 8, 1, 2, 4, 5);
        let mixed = cutmix_pair(&mut g, x1, x2, &mask).unwrap();
        let pm = pix(&mut g, mixed);
        let p1 = pix(&mut g, x1);
        let p2 = pix(&mut g, x2);
        let l = consistency_loss(&mut g, pm, p1, p2, &mask);
        assert!(g.scalar_value(l).abs() < 1e-6);
    }

    #[test]
    fn consistency_loss_trivial_masks_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let p = g.constant(nn::randn::<f64, _>(&mut rng, &[1, 1, 4, 4], 1.0));
        let q = g.constant(nn::randn::<f64, _>(&mut rng, &[1, 1, 4, 4], 1.0));
        let ones = CutMixMask::<f64>::from_rect(4, 4, 0, 0, 4, 4);
        let l = consistency_loss(&mut g, p, p, q, &ones);
        assert!(g.scalar_value(l).abs() < 1e-12);
        let zeros = CutMixMask::<f64>::from_rect(4, 4, 0, 0, 0, 0);
        let l0 = consistency_loss(&mut g, q, p, q, &zeros);
        assert!(g.scalar_value(l0).abs() < 1e-12);
    }

    #[test]
    fn disordered_is_shared_nonidentity_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bf = nn::randn::<f64, _>(&mut rng, &[2, 3, 2, 2], 1.0);
        let gfp = nn::randn::<f64, _>(&mut rng, &[2, 3, 2, 2], 1.0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let (db, dg, perm) = make_disordered(&bf, &gfp, &mut rng).unwrap();
            assert_ne!(perm, vec![0, 1, 2], "identity permutation produced");
            seen.insert(perm.clone());
            for (dst, &src) in perm.iter().enumerate() {
                assert_eq!(
                    db.index_axis(ndarray::Axis(1), dst),
                    bf.index_axis(ndarray::Axis(1), src)
                );
                assert_eq!(
                    dg.index_axis(ndarray::Axis(1), dst),
                    gfp.index_axis(ndarray::Axis(1), src)
                );
            }
        }
        // S3 minus the identity has exactly 5 elements.
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn disordered_rejects_single_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bf = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        assert!(make_disordered(&bf, &bf, &mut rng).is_err());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut bad = LossConfig::default();
        bad.r1_interval = 0;
        assert!(bad.validate().is_err());
        let mut bad2 = LossConfig::default();
        bad2.cutmix_prob = 1.5;
        assert!(bad2.validate().is_err());
    }
}
