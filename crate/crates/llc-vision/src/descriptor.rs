//! Dense multi-scale SIFT descriptors (PHOW-style).
//!
//! Descriptors are extracted on a regular grid at every configured bin size
//! rather than at detected keypoints. A descriptor at scale `s` summarises a
//! `4s x 4s` patch as a 4x4 spatial grid of 8-bin gradient-orientation
//! histograms, giving the classic 128-dimensional vector. Unlike keypoint
//! SIFT there is no rotation normalization and no Gaussian window: every
//! pixel in the patch contributes with its full gradient magnitude, split
//! bilinearly across neighbouring spatial cells and orientation bins.
//!
//! Finalization follows the standard recipe: L2-normalize, clamp every
//! component at 0.2 to tame bursty gradients, renormalize. Patches with no
//! gradient energy at all yield the all-zero descriptor, which downstream
//! stages treat as "no evidence" rather than noise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// 4 x 4 spatial cells x 8 orientation bins.
pub const DESCRIPTOR_DIM: usize = 128;
pub const SPATIAL_BINS: usize = 4;
pub const ORIENTATION_BINS: usize = 8;

/// Dense extraction grid: sample step in pixels and the SIFT bin sizes
/// (scales) to extract at. A bin size `s` covers a `4s x 4s` patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorConfig {
    pub step: u32,
    pub bin_sizes: Vec<u32>,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig { step: 5, bin_sizes: vec![4, 6] }
    }
}

/// One dense SIFT descriptor: patch center, bin size, and 128 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub x: u32,
    pub y: u32,
    pub scale: u32,
    pub values: Vec<f32>,
}

impl Descriptor {
    /// True for descriptors of flat patches (no gradient energy anywhere).
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Extract dense descriptors at every configured scale.
///
/// Patch centers at scale `s` run over `x, y in {2s, 2s + step, ...}` as long
/// as the whole `4s x 4s` patch fits inside the image; the patch spans pixels
/// `[c - 2s, c + 2s)` on each axis. Scales too large for the image are
/// skipped; if no scale fits, this is an error. Output is ordered by
/// `(scale, y, x)` ascending, which fixes the descriptor order for
/// serialization and pooling.
pub fn extract_dense(img: &GrayImage, cfg: &DescriptorConfig) -> Result<Vec<Descriptor>> {
    if cfg.step == 0 {
        return Err(Error::InvalidArgument("descriptor step must be positive".into()));
    }
    if cfg.bin_sizes.is_empty() || cfg.bin_sizes.contains(&0) {
        return Err(Error::InvalidArgument("bin_sizes must be non-empty and positive".into()));
    }
    let mut scales = cfg.bin_sizes.clone();
    scales.sort_unstable();
    scales.dedup();

    let (w, h) = (img.width(), img.height());
    let fitting: Vec<u32> = scales.iter().copied().filter(|&s| 4 * s <= w && 4 * s <= h).collect();
    if fitting.is_empty() {
        return Err(Error::NoValidScale { width: w, height: h, min_patch: 4 * scales[0] });
    }

    let grad = GradientField::compute(img);
    let mut out = Vec::new();
    for &s in &fitting {
        let mut cy = 2 * s;
        while cy + 2 * s <= h {
            let mut cx = 2 * s;
            while cx + 2 * s <= w {
                out.push(Descriptor { x: cx, y: cy, scale: s, values: describe_patch(&grad, cx, cy, s) });
                cx += cfg.step;
            }
            cy += cfg.step;
        }
    }
    Ok(out)
}

/// Per-pixel gradient magnitude and orientation, computed once per image.
/// Central differences with border replication; orientation in `[0, 2pi)`.
struct GradientField {
    width: usize,
    mag: Vec<f32>,
    ori: Vec<f32>,
}

impl GradientField {
    fn compute(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let n = (w * h) as usize;
        let mut mag = vec![0.0f32; n];
        let mut ori = vec![0.0f32; n];
        for y in 0..h {
            for x in 0..w {
                let dx = (img.get_clamped(x + 1, y) as f32 - img.get_clamped(x - 1, y) as f32) * 0.5;
                let dy = (img.get_clamped(x, y + 1) as f32 - img.get_clamped(x, y - 1) as f32) * 0.5;
                let idx = (y * w + x) as usize;
                mag[idx] = (dx * dx + dy * dy).sqrt();
                let mut angle = dy.atan2(dx);
                if angle < 0.0 {
                    angle += std::f32::consts::TAU;
                }
                ori[idx] = angle;
            }
        }
        GradientField { width: img.width() as usize, mag, ori }
    }
}

/// Histogram one `4s x 4s` patch centered at `(cx, cy)` into 128 bins and
/// finalize (normalize, clamp 0.2, renormalize).
fn describe_patch(grad: &GradientField, cx: u32, cy: u32, s: u32) -> Vec<f32> {
    let mut hist = [0.0f32; DESCRIPTOR_DIM];
    let x0 = (cx - 2 * s) as usize;
    let y0 = (cy - 2 * s) as usize;
    let side = (4 * s) as usize;
    let inv_s = 1.0 / s as f32;
    let ori_scale = ORIENTATION_BINS as f32 / std::f32::consts::TAU;

    for py in 0..side {
        // Continuous cell coordinate of this pixel: cell k spans [k, k+1) in
        // units of s, sampled at pixel centers.
        let v = (py as f32 + 0.5) * inv_s - 0.5;
        let v0 = v.floor();
        let fv = v - v0;
        let v0 = v0 as i32;
        let row = (y0 + py) * grad.width + x0;
        for px in 0..side {
            let m = grad.mag[row + px];
            if m == 0.0 {
                continue;
            }
            let u = (px as f32 + 0.5) * inv_s - 0.5;
            let u0 = u.floor();
            let fu = u - u0;
            let u0 = u0 as i32;

            let o = grad.ori[row + px] * ori_scale;
            let o0 = (o.floor() as usize) % ORIENTATION_BINS;
            let fo = o - o.floor();
            let o1 = (o0 + 1) % ORIENTATION_BINS;

            for (dv, wv) in [(v0, 1.0 - fv), (v0 + 1, fv)] {
                if !(0..SPATIAL_BINS as i32).contains(&dv) || wv == 0.0 {
                    continue;
                }
                for (du, wu) in [(u0, 1.0 - fu), (u0 + 1, fu)] {
                    if !(0..SPATIAL_BINS as i32).contains(&du) || wu == 0.0 {
                        continue;
                    }
                    let cell = (dv as usize * SPATIAL_BINS + du as usize) * ORIENTATION_BINS;
                    let w = m * wv * wu;
                    hist[cell + o0] += w * (1.0 - fo);
                    hist[cell + o1] += w * fo;
                }
            }
        }
    }
    finalize(&mut hist);
    hist.to_vec()
}

fn finalize(hist: &mut [f32; DESCRIPTOR_DIM]) {
    let norm = hist.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        hist.fill(0.0);
        return;
    }
    let inv = (1.0 / norm) as f32;
    for v in hist.iter_mut() {
        *v = (*v * inv).min(0.2);
    }
    let norm2 = hist.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let inv2 = (1.0 / norm2) as f32;
    for v in hist.iter_mut() {
        *v *= inv2;
    }
}

// ---------------------------------------------------------------------------
// Serialization: a headerless little-endian record stream, 524 bytes per
// descriptor (x u32, y u32, scale u32, 128 f32).
// ---------------------------------------------------------------------------

const RECORD_BYTES: usize = 12 + DESCRIPTOR_DIM * 4;

pub fn write_descriptors(w: &mut impl Write, descriptors: &[Descriptor]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(RECORD_BYTES);
    for d in descriptors {
        debug_assert_eq!(d.values.len(), DESCRIPTOR_DIM);
        buf.clear();
        buf.extend_from_slice(&d.x.to_le_bytes());
        buf.extend_from_slice(&d.y.to_le_bytes());
        buf.extend_from_slice(&d.scale.to_le_bytes());
        for &v in &d.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_descriptors(r: &mut impl Read) -> Result<Vec<Descriptor>> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)
        .map_err(|e| Error::BadDescriptorStream(e.to_string()))?;
    if data.len() % RECORD_BYTES != 0 {
        return Err(Error::BadDescriptorStream(format!(
            "{} bytes is not a multiple of the {RECORD_BYTES}-byte record size",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(data.len() / RECORD_BYTES);
    for rec in data.chunks_exact(RECORD_BYTES) {
        let u32_at = |i: usize| u32::from_le_bytes(rec[i..i + 4].try_into().unwrap());
        let mut values = Vec::with_capacity(DESCRIPTOR_DIM);
        for i in 0..DESCRIPTOR_DIM {
            let off = 12 + i * 4;
            values.push(f32::from_le_bytes(rec[off..off + 4].try_into().unwrap()));
        }
        out.push(Descriptor { x: u32_at(0), y: u32_at(4), scale: u32_at(8), values });
    }
    Ok(out)
}

pub fn save_descriptors(path: &Path, descriptors: &[Descriptor]) -> Result<()> {
    let mut buf = Vec::with_capacity(descriptors.len() * RECORD_BYTES);
    write_descriptors(&mut buf, descriptors).expect("write to vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_descriptors(&mut data.as_slice())
}

// ---------------------------------------------------------------------------
