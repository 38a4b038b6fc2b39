//! PNG export of generated sequence pairs: 8-bit, denormalized from
//! [-1, 1], timesteps left to right, BF row in grayscale above the
//! green-tinted GFP row for each sample.

use crate::data::denormalize_u8;
use crate::elem::Elem;
use crate::error::{Error, Result};
use ndarray::ArrayD;
use std::path::Path;

/// Write a (B, T, H, W) pair as one RGB grid image. Each sample occupies
/// two rows of frames: BF (gray) then GFP (green).
pub fn save_sequence_grid<T: Elem>(path: &Path, bf: &ArrayD<T>, gfp: &ArrayD<T>) -> Result<()> {
    let shape = bf.shape().to_vec();
    if shape.len() != 4 || gfp.shape() != bf.shape() {
        return Err(Error::shape(
            "save_sequence_grid",
            "(B, T, H, W) in both domains",
            format!("{:?} vs {:?}", bf.shape(), gfp.shape()),
        ));
    }
    let (b, t, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut img = image::RgbImage::new((t * w) as u32, (b * 2 * h) as u32);
    for bi in 0..b {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let vb = denormalize_u8(bf[[bi, ti, y, x]].to_f64());
                    let vg = denormalize_u8(gfp[[bi, ti, y, x]].to_f64());
                    let px = ((ti * w + x) as u32, ((bi * 2) * h + y) as u32);
                    img.put_pixel(px.0, px.1, image::Rgb([vb, vb, vb]));
                    let pg = ((ti * w + x) as u32, ((bi * 2 + 1) * h + y) as u32);
                    img.put_pixel(pg.0, pg.1, image::Rgb([0, vg, 0]));
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::invalid("save_sequence_grid", format!("{}: {e}", path.display())))
}
