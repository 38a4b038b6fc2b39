//! Dataset ingestion for paired two-domain image sequences.
//!
//! On-disk layout:
//!
//! ```text
//! root/<sequence_id>/bf/<timestep:04>.png
//! root/<sequence_id>/gfp/<timestep:04>.png
//! ```
//!
//! `tif` is accepted alongside `png`; 16-bit images are rescaled by their
//! full representable range. Pixels are mapped to [-1, 1]. Training
//! consumes overlapping windows of `window_length` consecutive frames.

use crate::elem::Elem;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DOMAIN_BF: &str = "bf";
pub const DOMAIN_GFP: &str = "gfp";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub frame_paths_bf: Vec<PathBuf>,
    pub frame_paths_gfp: Vec<PathBuf>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.frame_paths_bf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths_bf.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub records: Vec<SequenceRecord>,
    pub window_length: usize,
    pub stride: usize,
    pub resolution: usize,
}

impl DatasetIndex {
    /// Total number of training windows: sum over sequences of
    /// max(0, len - window_length + 1) with stride 1.
    pub fn count_windows(&self) -> usize {
        self.records
            .iter()
            .map(|r| (r.len() + 1).saturating_sub(self.window_length))
            .sum()
    }

    /// (record index, start frame) for a flat window id.
    pub fn locate_window(&self, window_id: usize) -> Result<(usize, usize)> {
        let mut remaining = window_id;
        for (ri, r) in self.records.iter().enumerate() {
            let n = (r.len() + 1).saturating_sub(self.window_length);
            if remaining < n {
                return Ok((ri, remaining));
            }
            remaining -= n;
        }
        Err(Error::invalid(
            "locate_window",
            format!("window id {window_id} out of range 0..{}", self.count_windows()),
        ))
    }

    /// A seeded shuffle of all window ids for one epoch.
    pub fn epoch_order(&self, seed: u64) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.count_windows()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids
    }
}

fn list_frames(dir: &Path, errors: &mut Vec<String>) -> BTreeMap<u64, PathBuf> {
    let mut frames = BTreeMap::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            errors.push(format!("{}: unreadable directory ({e})", dir.display()));
            return frames;
        }
    };
    for entry in entries.flatten() {
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !matches!(ext, "png" | "tif" | "tiff") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        match stem.parse::<u64>() {
            Ok(t) => {
                if let Some(prev) = frames.insert(t, path.clone()) {
                    errors.push(format!(
                        "{}: duplicate timestep {t} (also {})",
                        path.display(),
                        prev.display()
                    ));
                }
            }
            Err(_) => errors.push(format!(
                "{}: filename stem is not a timestep index",
                path.display()
            )),
        }
    }
    frames
}

/// Build a deterministic index of the dataset tree, validating that both
/// domains pair up frame-for-frame and every image has the expected size.
/// All problems are aggregated into a single error listing the offending
/// paths.
pub fn index_dataset(root: &Path, resolution: usize, window_length: usize) -> Result<DatasetIndex> {
    let mut errors = Vec::new();
    let mut records = Vec::new();
    if !root.is_dir() {
        return Err(Error::invalid("index_dataset", format!("{} is not a directory", root.display())));
    }
    let mut seq_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    for seq in seq_dirs {
        let id = seq.file_name().unwrap().to_string_lossy().into_owned();
        let bf = list_frames(&seq.join(DOMAIN_BF), &mut errors);
        let gfp = list_frames(&seq.join(DOMAIN_GFP), &mut errors);
        for (t, p) in &bf {
            if !gfp.contains_key(t) {
                errors.push(format!("{}: missing {DOMAIN_GFP} counterpart", p.display()));
            }
        }
        for (t, p) in &gfp {
            if !bf.contains_key(t) {
                errors.push(format!("{}: missing {DOMAIN_BF} counterpart", p.display()));
            }
        }
        let paired: Vec<u64> = bf.keys().filter(|t| gfp.contains_key(t)).cloned().collect();
        for t in &paired {
            for path in [&bf[t], &gfp[t]] {
                match image::image_dimensions(path) {
                    Ok((w, h)) => {
                        if w as usize != resolution || h as usize != resolution {
                            errors.push(format!(
                                "{}: expected {resolution}x{resolution}, got {w}x{h}",
                                path.display()
                            ));
                        }
                    }
                    Err(e) => errors.push(format!("{}: undecodable ({e})", path.display())),
                }
            }
        }
        if !paired.is_empty() {
            records.push(SequenceRecord {
                sequence_id: id,
                frame_paths_bf: paired.iter().map(|t| bf[t].clone()).collect(),
                frame_paths_gfp: paired.iter().map(|t| gfp[t].clone()).collect(),
            });
        }
    }
    if !errors.is_empty() {
        return Err(Error::DatasetValidation(errors));
    }
    Ok(DatasetIndex { records, window_length, stride: 1, resolution })
}

/// Map an 8-bit intensity to [-1, 1].
pub fn normalize_u8(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Inverse of [`normalize_u8`], exact for all 256 inputs.
pub fn denormalize_u8(v: f64) -> u8 {
    ((v + 1.0) * 255.0 / 2.0).round().clamp(0.0, 255.0) as u8
}

fn load_frame<T: Elem>(path: &Path, resolution: usize) -> Result<ndarray::Array2<T>> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != resolution || h != resolution {
        return Err(Error::shape(
            "load_frame",
            format!("{resolution}x{resolution}"),
            format!("{w}x{h} ({})", path.display()),
        ));
    }
    let mut out = ndarray::Array2::<T>::zeros((resolution, resolution));
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            for (i, px) in buf.pixels().enumerate() {
                let v = 2.0 * px.0[0] as f64 / 65535.0 - 1.0;
                out[[i / resolution, i % resolution]] = T::from_f64(v);
            }
        }
        other => {
            let gray = other.to_luma8();
            for (i, px) in gray.pixels().enumerate() {
                out[[i / resolution, i % resolution]] = T::from_f64(normalize_u8(px.0[0]));
            }
        }
    }
    Ok(out)
}

/// Load one window as a pair of (window_length, H, W) arrays in [-1, 1].
/// When `flip` is set, the same horizontal flip is applied to all frames
/// of both domains.
pub fn load_window<T: Elem>(
    index: &DatasetIndex,
    window_id: usize,
    flip: bool,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    let (ri, start) = index.locate_window(window_id)?;
    let rec = &index.records[ri];
    let res = index.resolution;
    let load_domain = |paths: &[PathBuf]| -> Result<ArrayD<T>> {
        let mut out = ArrayD::<T>::zeros(IxDyn(&[index.window_length, res, res]));
        for (k, path) in paths[start..start + index.window_length].iter().enumerate() {
            let mut frame = load_frame::<T>(path, res)?;
            if flip {
                frame.invert_axis(ndarray::Axis(1));
            }
            out.index_axis_mut(ndarray::Axis(0), k).assign(&frame);
        }
        Ok(out)
    };
    Ok((load_domain(&rec.frame_paths_bf)?, load_domain(&rec.frame_paths_gfp)?))
}

/// Stack several windows into a training batch of shape (B, T, H, W) per
/// domain.
pub fn load_batch<T: Elem>(
    index: &DatasetIndex,
    window_ids: &[usize],
    rng: &mut ChaCha8Rng,
    augment_flip: bool,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    use rand::Rng;
    let res = index.resolution;
    let t = index.window_length;
    let b = window_ids.len();
    let mut bf = ArrayD::<T>::zeros(IxDyn(&[b, t, res, res]));
    let mut gfp = ArrayD::<T>::zeros(IxDyn(&[b, t, res, res]));
    for (i, &wid) in window_ids.iter().enumerate() {
        let flip = augment_flip && rng.gen::<bool>();
        let (wb, wg) = load_window::<T>(index, wid, flip)?;
        bf.index_axis_mut(ndarray::Axis(0), i).assign(&wb);
        gfp.index_axis_mut(ndarray::Axis(0), i).assign(&wg);
    }
    Ok((bf, gfp))
}

/// Write a small synthetic dataset tree: a bright disk drifting across the
/// BF frames and a matching disk of monotonically increasing intensity in
/// GFP. Used by tests and smoke runs.
pub fn write_synthetic_fixture(
    root: &Path,
    sequence_lengths: &[usize],
    resolution: usize,
) -> Result<()> {
    for (si, &len) in sequence_lengths.iter().enumerate() {
        let id = format!("seq{si:03}");
        for domain in [DOMAIN_BF, DOMAIN_GFP] {
            let dir = root.join(&id).join(domain);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for t in 0..len {
                let cx = (resolution / 4 + (t * resolution / 2) / len.max(1)) as f64
                    + si as f64 * 3.0;
                let cy = resolution as f64 / 2.0 + (si as f64 - 1.0) * 5.0;
                let r = resolution as f64 / 6.0;
                let mut img = image::GrayImage::new(resolution as u32, resolution as u32);
                for (x, y, px) in img.enumerate_pixels_mut() {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let inside = d < r;
                    let v = match (domain, inside) {
                        (DOMAIN_BF, true) => 210,
                        (DOMAIN_BF, false) => 60,
                        // GFP intensity rises over the sequence.
                        (_, true) => (40 + (200 * (t + 1)) / len.max(1)).min(255) as u8,
                        (_, false) => 10,
                    };
                    *px = image::Luma([v]);
                }
                let path = dir.join(format!("{t:04}.png"));
                img.save(&path).map_err(|e| {
                    Error::invalid("write_synthetic_fixture", format!("{}: {e}", path.display()))
                })?;
            }
        }
    }
    Ok(())
}
