//! Adaptive discriminator augmentation limited to two categories: pixel
//! blitting (flips, quarter rotations, integer translations) and geometric
//! warps (isotropic scale, free rotation, fractional translation) composed
//! into a single affine transform with reflection padding.
//!
//! The controller raises or lowers the augmentation probability p so the
//! discriminator's mean sign on reals tracks a target value.

use crate::elem::Elem;
use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdaState {
    /// Augmentation probability, always clamped to [0, 1].
    pub p: f64,
    /// EMA of the mean discriminator sign on reals.
    pub r_t: f64,
    pub target: f64,
    /// Change in p per 1000 images when the controller is saturated.
    pub adjustment_speed: f64,
    pub ema_decay: f64,
}

impl Default for AdaState {
    fn default() -> Self {
        AdaState {
            p: 0.0,
            r_t: 0.0,
            target: 0.6,
            // p can cross the full [0, 1] range in 500k images.
            adjustment_speed: 1000.0 / 500_000.0,
            ema_decay: 0.99,
        }
    }
}

impl AdaState {
    /// One controller sample from a batch of real scalar logits: the mean
    /// sign, folded into r_t by EMA.
    pub fn overfitting_heuristic(&mut self, real_scalar_logits: &[f64]) -> Result<f64> {
        if real_scalar_logits.is_empty() {
            return Err(Error::invalid("overfitting_heuristic", "empty batch"));
        }
        let sample = real_scalar_logits.iter().map(|&v| sign(v)).sum::<f64>()
            / real_scalar_logits.len() as f64;
        self.r_t = self.ema_decay * self.r_t + (1.0 - self.ema_decay) * sample;
        Ok(sample)
    }

    /// p <- clamp(p + sign(r_t - target) * speed * images_seen / 1000).
    pub fn update_p(&mut self, images_seen: usize) {
        let step = sign(self.r_t - self.target) * self.adjustment_speed * images_seen as f64 / 1000.0;
        self.p = (self.p + step).clamp(0.0, 1.0);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Exact pixel-blitting parameters shared by every frame of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlitParams {
    pub hflip: bool,
    /// Number of counter-clockwise quarter turns (0..4).
    pub rot90: usize,
    /// Integer translation (dy, dx) with reflection padding.
    pub shift: (isize, isize),
}

impl BlitParams {
    pub const IDENTITY: BlitParams = BlitParams { hflip: false, rot90: 0, shift: (0, 0) };
}

/// Affine warp parameters, also shared per sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoParams {
    pub scale: f64,
    /// Rotation angle in radians.
    pub angle: f64,
    /// Fractional translation (dy, dx) in pixels.
    pub shift: (f64, f64),
}

impl GeoParams {
    pub const IDENTITY: GeoParams = GeoParams { scale: 1.0, angle: 0.0, shift: (0.0, 0.0) };
}

/// The full per-sample transform; `None` in a slot means that category did
/// not fire.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleTransform {
    pub blit: Option<BlitParams>,
    pub geo: Option<GeoParams>,
}

impl SampleTransform {
    pub const IDENTITY: SampleTransform = SampleTransform { blit: None, geo: None };
}

/// Draw one sample's transform. Each category fires independently with
/// probability p; sub-transforms are then sampled within the category.
pub fn sample_transform<R: Rng>(rng: &mut R, p: f64, resolution: usize) -> SampleTransform {
    let blit = if rng.gen::<f64>() < p {
        let max_shift = (resolution / 8) as isize;
        Some(BlitParams {
            hflip: rng.gen::<bool>(),
            rot90: rng.gen_range(0..4),
            shift: (
                rng.gen_range(-max_shift..=max_shift),
                rng.gen_range(-max_shift..=max_shift),
            ),
        })
    } else {
        None
    };
    let geo = if rng.gen::<f64>() < p {
        let log2_scale: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        Some(GeoParams {
            scale: (0.2 * log2_scale).exp2(),
            angle: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            shift: (n1 * 0.125 * resolution as f64, n2 * 0.125 * resolution as f64),
        })
    } else {
        None
    };
    SampleTransform { blit, geo }
}

/// Mirror an index into [0, n) (reflection around the edge pixels).
fn reflect(mut i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Apply blitting to one frame, writing into `out`.
pub fn apply_blit<T: Elem>(frame: &ndarray::ArrayView2<T>, params: &BlitParams, out: &mut ArrayViewMut2<T>) {
    let (h, w) = frame.dim();
    for i in 0..h {
        for j in 0..w {
            // Walk the output pixel back through shift, rotation, flip.
            let (si, sj) = (
                reflect(i as isize - params.shift.0, h as isize),
                reflect(j as isize - params.shift.1, w as isize),
            );
            let (ri, rj) = match params.rot90 % 4 {
                0 => (si, sj),
                1 => (sj, h - 1 - si),          // inverse of CCW quarter turn
                2 => (h - 1 - si, w - 1 - sj),
                _ => (w - 1 - sj, si),
            };
            let fj = if params.hflip { w - 1 - rj } else { rj };
            out[[i, j]] = frame[[ri, fj]];
        }
    }
}

/// Apply the affine warp to one frame with bilinear sampling and
/// reflection padding.
pub fn apply_geo<T: Elem>(frame: &ndarray::ArrayView2<T>, params: &GeoParams, out: &mut ArrayViewMut2<T>) {
    let (h, w) = frame.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = params.angle.sin_cos();
    let inv_scale = 1.0 / params.scale;
    for i in 0..h {
        for j in 0..w {
            // Inverse map: undo translation, then rotation, then scale.
            let y = i as f64 - cy - params.shift.0;
            let x = j as f64 - cx - params.shift.1;
            let sy = inv_scale * (cos * y + sin * x) + cy;
            let sx = inv_scale * (-sin * y + cos * x) + cx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let mut acc = 0.0;
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let py = reflect(y0 as isize + dy, h as isize);
                    let px = reflect(x0 as isize + dx, w as isize);
                    acc += wy * wx * frame[[py, px]].to_f64();
                }
            }
            out[[i, j]] = T::from_f64(acc);
        }
    }
}

fn apply_to_sample<T: Elem>(x: &mut ArrayD<T>, b: usize, tf: &SampleTransform) {
    let t = x.shape()[1];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    for ti in 0..t {
        let src: ndarray::Array2<T> = x
            .slice(ndarray::s![b, ti, .., ..])
            .to_owned()
            .into_dimensionality()
            .unwrap();
        let mut buf = ndarray::Array2::<T>::zeros((h, w));
        let mut cur = src;
        if let Some(blit) = &tf.blit {
            apply_blit(&cur.view(), blit, &mut buf.view_mut());
            std::mem::swap(&mut cur, &mut buf);
        }
        if let Some(geo) = &tf.geo {
            apply_geo(&cur.view(), geo, &mut buf.view_mut());
            std::mem::swap(&mut cur, &mut buf);
        }
        x.slice_mut(ndarray::s![b, ti, .., ..]).assign(&cur);
    }
}

/// Augment a paired batch in place-of-copy. One transform is drawn per
/// sample and applied to every timestep of both domains. p = 0 returns the
/// inputs bit-identically (no resampling at all).
pub fn apply_augmentation<T: Elem, R: Rng>(
    bf: &ArrayD<T>,
    gfp: &ArrayD<T>,
    p: f64,
    rng: &mut R,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    if bf.shape() != gfp.shape() {
        return Err(Error::shape(
            "apply_augmentation",
            format!("{:?}", bf.shape()),
            format!("{:?}", gfp.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("apply_augmentation", format!("p = {p} outside [0, 1]")));
    }
    let mut out_bf = bf.clone();
    let mut out_gfp = gfp.clone();
    let batch = bf.shape()[0];
    let res = bf.shape()[2];
    for b in 0..batch {
        let tf = sample_transform(rng, p, res);
        if tf.blit.is_none() && tf.geo.is_none() {
            continue;
        }
        apply_to_sample(&mut out_bf, b, &tf);
        apply_to_sample(&mut out_gfp, b, &tf);
    }
    Ok((out_bf, out_gfp))
}

/// Apply one explicit transform to every sample (test hook).
pub fn apply_transform_batch<T: Elem>(
    bf: &ArrayD<T>,
    gfp: &ArrayD<T>,
    tf: &SampleTransform,
) -> (ArrayD<T>, ArrayD<T>) {
    let mut out_bf = bf.clone();
    let mut out_gfp = gfp.clone();
    for b in 0..bf.shape()[0] {
        apply_to_sample(&mut out_bf, b, tf);
        apply_to_sample(&mut out_gfp, b, tf);
    }
    (out_bf, out_gfp)
}
