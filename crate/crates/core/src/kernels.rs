//! Raw array kernels behind the autograd ops: convolution (and its two
//! adjoints), fixed 2x bilinear resampling and 2x average pooling (and their
//! adjoints).
//!
//! All convolutions are stride 1 with "same" padding (pad = k/2, odd k).
//! Layout is NCHW everywhere.
//!
//! Bilinear 2x upsampling uses half-pixel-centre alignment: output sample
//! 2j mixes inputs (j-1, j) with weights (1/4, 3/4), output sample 2j+1
//! mixes (j, j+1) with weights (3/4, 1/4), indices clamped at the borders.
//! Applied separably to rows and columns. 2x downsampling is the 2x2 mean,
//! which is the same filter family evaluated at the coarse grid.

use crate::elem::Elem;
use crate::par;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2};

/// Zero-pad the spatial dims of a single sample (C, H, W) into `out`.
fn pad_sample<T: Elem>(x: &ArrayView4<T>, b: usize, pad: usize, out: &mut ndarray::Array3<T>) {
    out.fill(T::zero());
    let (_, c, h, w) = x.dim();
    let mut inner = out.slice_mut(s![.., pad..pad + h, pad..pad + w]);
    inner.assign(&x.slice(s![b, .., .., ..]));
    let _ = c;
}

/// Convolution y[b,o,p] = sum_{i,k} w[o,i,k] x[b,i,p+k-pad], stride 1,
/// same padding. Implemented as one GEMM per kernel offset.
pub fn conv2d<T: Elem>(x: &ArrayView4<T>, w: &ArrayView4<T>) -> Array4<T> {
    let (bsz, ci, h, wd) = x.dim();
    let (co, ci_w, k, k2) = w.dim();
    assert_eq!(ci, ci_w, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d kernel must be square");
    assert_eq!(k % 2, 1, "conv2d kernel must be odd");
    let pad = k / 2;
    let mut y = Array4::<T>::zeros((bsz, co, h, wd));

    if k == 1 {
        // Pure channel mixing: a single GEMM per sample.
        let wmat = w
            .to_shape((co, ci))
            .expect("1x1 kernel reshape")
            .to_owned();
        let ptr = SendPtr(y.as_mut_ptr());
        par::for_each_index(bsz, |b| {
            let xb = x.slice(s![b, .., .., ..]);
            let xb = xb
                .to_shape((ci, h * wd))
                .expect("conv2d input must be standard layout");
            let yb = unsafe { view_mut_2d(ptr.get(), b, co, h * wd) };
            gemm_acc(&wmat.view(), &xb.view(), yb, T::zero());
        });
        return y;
    }

    let ptr = SendPtr(y.as_mut_ptr());
    par::for_each_index(bsz, |b| {
        let mut padded = ndarray::Array3::<T>::zeros((ci, h + 2 * pad, wd + 2 * pad));
        pad_sample(x, b, pad, &mut padded);
        let mut window = Array2::<T>::zeros((ci, h * wd));
        let yb = unsafe { view_mut_2d(ptr.get(), b, co, h * wd) };
        let mut yb = yb;
        let mut first = true;
        for ky in 0..k {
            for kx in 0..k {
                copy_window(&padded, ky, kx, h, wd, &mut window);
                let wk = w.slice(s![.., .., ky, kx]);
                let beta = if first { T::zero() } else { T::one() };
                first = false;
                gemm_acc(&wk, &window.view(), yb.view_mut(), beta);
            }
        }
    });
    y
}

/// Adjoint of `conv2d` w.r.t. the input: full correlation with the
/// spatially flipped, in/out-transposed kernel.
pub fn conv2d_back_input<T: Elem>(gy: &ArrayView4<T>, w: &ArrayView4<T>) -> Array4<T> {
    let (co, ci, k, _) = w.dim();
    let mut wt = Array4::<T>::zeros((ci, co, k, k));
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    wt[[i, o, k - 1 - ky, k - 1 - kx]] = w[[o, i, ky, kx]];
                }
            }
        }
    }
    conv2d(gy, &wt.view())
}

/// Adjoint of `conv2d` w.r.t. the weights.
pub fn conv2d_back_weight<T: Elem>(
    x: &ArrayView4<T>,
    gy: &ArrayView4<T>,
    k: usize,
) -> Array4<T> {
    let (bsz, ci, h, wd) = x.dim();
    let (bsz_g, co, hg, wg) = gy.dim();
    assert_eq!(bsz, bsz_g);
    assert_eq!((h, wd), (hg, wg));
    let pad = k / 2;

    // Per-sample partial weight grads, summed at the end; keeps the inner
    // loop free of shared mutable state.
    let partials = par::map_indices(bsz, |b| {
        let mut gw = Array4::<T>::zeros((co, ci, k, k));
        let gyb = gy.slice(s![b, .., .., ..]);
        let gyb = gyb
            .to_shape((co, h * wd))
            .expect("conv2d grad must be standard layout");
        if k == 1 {
            let xb = x.slice(s![b, .., .., ..]);
            let xb = xb.to_shape((ci, h * wd)).expect("standard layout");
            let mut gwk = gw.slice_mut(s![.., .., 0, 0]);
            gemm_acc_t(&gyb.view(), &xb.view(), gwk.view_mut(), T::zero());
            return gw;
        }
        let mut padded = ndarray::Array3::<T>::zeros((ci, h + 2 * pad, wd + 2 * pad));
        pad_sample(x, b, pad, &mut padded);
        let mut window = Array2::<T>::zeros((ci, h * wd));
        for ky in 0..k {
            for kx in 0..k {
                copy_window(&padded, ky, kx, h, wd, &mut window);
                let mut gwk = gw.slice_mut(s![.., .., ky, kx]);
                gemm_acc_t(&gyb.view(), &window.view(), gwk.view_mut(), T::zero());
            }
        }
        gw
    });
    let mut total = Array4::<T>::zeros((co, ci, k, k));
    for p in partials {
        total = total + p;
    }
    total
}

/// 2x bilinear upsampling (see module docs for the exact kernel).
pub fn upsample2x<T: Elem>(x: &ArrayView4<T>) -> Array4<T> {
    let (bsz, c, h, w) = x.dim();
    let q = T::from_f64(0.25);
    let t = T::from_f64(0.75);
    let mut rows = Array4::<T>::zeros((bsz, c, 2 * h, w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h {
                let im = i.saturating_sub(1);
                let ip = (i + 1).min(h - 1);
                for j in 0..w {
                    let v = x[[b, ch, i, j]];
                    rows[[b, ch, 2 * i, j]] = q * x[[b, ch, im, j]] + t * v;
                    rows[[b, ch, 2 * i + 1, j]] = t * v + q * x[[b, ch, ip, j]];
                }
            }
        }
    }
    let mut y = Array4::<T>::zeros((bsz, c, 2 * h, 2 * w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..w {
                    let jm = j.saturating_sub(1);
                    let jp = (j + 1).min(w - 1);
                    let v = rows[[b, ch, i, j]];
                    y[[b, ch, i, 2 * j]] = q * rows[[b, ch, i, jm]] + t * v;
                    y[[b, ch, i, 2 * j + 1]] = t * v + q * rows[[b, ch, i, jp]];
                }
            }
        }
    }
    y
}

/// Adjoint of `upsample2x`.
pub fn upsample2x_t<T: Elem>(gy: &ArrayView4<T>) -> Array4<T> {
    let (bsz, c, h2, w2) = gy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let q = T::from_f64(0.25);
    let t = T::from_f64(0.75);
    // Transpose of the column pass.
    let mut cols = Array4::<T>::zeros((bsz, c, h2, w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w {
                    let jm = j.saturating_sub(1);
                    let jp = (j + 1).min(w - 1);
                    let g0 = gy[[b, ch, i, 2 * j]];
                    let g1 = gy[[b, ch, i, 2 * j + 1]];
                    cols[[b, ch, i, j]] = cols[[b, ch, i, j]] + t * g0 + t * g1;
                    cols[[b, ch, i, jm]] = cols[[b, ch, i, jm]] + q * g0;
                    cols[[b, ch, i, jp]] = cols[[b, ch, i, jp]] + q * g1;
                }
            }
        }
    }
    let mut gx = Array4::<T>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h {
                let im = i.saturating_sub(1);
                let ip = (i + 1).min(h - 1);
                for j in 0..w {
                    let g0 = cols[[b, ch, 2 * i, j]];
                    let g1 = cols[[b, ch, 2 * i + 1, j]];
                    gx[[b, ch, i, j]] = gx[[b, ch, i, j]] + t * g0 + t * g1;
                    gx[[b, ch, im, j]] = gx[[b, ch, im, j]] + q * g0;
                    gx[[b, ch, ip, j]] = gx[[b, ch, ip, j]] + q * g1;
                }
            }
        }
    }
    gx
}

/// 2x2 mean pooling.
pub fn downsample2x<T: Elem>(x: &ArrayView4<T>) -> Array4<T> {
    let (bsz, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "downsample2x needs even dims");
    let quarter = T::from_f64(0.25);
    let mut y = Array4::<T>::zeros((bsz, c, h / 2, w / 2));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let sum = x[[b, ch, 2 * i, 2 * j]]
                        + x[[b, ch, 2 * i, 2 * j + 1]]
                        + x[[b, ch, 2 * i + 1, 2 * j]]
                        + x[[b, ch, 2 * i + 1, 2 * j + 1]];
                    y[[b, ch, i, j]] = sum * quarter;
                }
            }
        }
    }
    y
}

/// Adjoint of `downsample2x`: spread g/4 over each 2x2 block.
pub fn downsample2x_t<T: Elem>(gy: &ArrayView4<T>) -> Array4<T> {
    let (bsz, c, h, w) = gy.dim();
    let quarter = T::from_f64(0.25);
    let mut gx = Array4::<T>::zeros((bsz, c, 2 * h, 2 * w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let g = gy[[b, ch, i, j]] * quarter;
                    gx[[b, ch, 2 * i, 2 * j]] = g;
                    gx[[b, ch, 2 * i, 2 * j + 1]] = g;
                    gx[[b, ch, 2 * i + 1, 2 * j]] = g;
                    gx[[b, ch, 2 * i + 1, 2 * j + 1]] = g;
                }
            }
        }
    }
    gx
}

fn copy_window<T: Elem>(
    padded: &ndarray::Array3<T>,
    ky: usize,
    kx: usize,
    h: usize,
    w: usize,
    out: &mut Array2<T>,
) {
    let ci = padded.dim().0;
    let src = padded.slice(s![.., ky..ky + h, kx..kx + w]);
    let mut dst = out
        .view_mut()
        .into_shape_with_order((ci, h, w))
        .expect("window buffer shape");
    dst.assign(&src);
}

/// y += a · b (or y = a · b when beta = 0).
fn gemm_acc<T: Elem>(a: &ArrayView2<T>, b: &ArrayView2<T>, mut y: ArrayViewMut2<T>, beta: T) {
    general_mat_mul(T::one(), a, b, beta, &mut y);
}

/// y = beta·y + a · b^T.
fn gemm_acc_t<T: Elem>(a: &ArrayView2<T>, b: &ArrayView2<T>, mut y: ArrayViewMut2<T>, beta: T) {
    general_mat_mul(T::one(), a, &b.t(), beta, &mut y);
}

/// Raw pointer wrapper so disjoint per-sample output slices can be written
/// from parallel workers.
struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

/// View sample `b` of a contiguous (B, C, H*W) buffer as a mutable 2D slab.
///
/// Safety: callers must guarantee distinct `b` across concurrent calls and
/// that `ptr` points at a live (B, rows, cols) standard-layout array.
unsafe fn view_mut_2d<'a, T: Elem>(
    ptr: *mut T,
    b: usize,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'a, T> {
    let offset = b * rows * cols;
    ndarray::ArrayViewMut2::from_shape_ptr((rows, cols), ptr.add(offset))
}
