//! Grayscale image container, binary PNM (PGM/PPM) loading, and the
//! preprocessing stages applied before feature extraction: contrast-limited
//! adaptive histogram equalization (CLAHE) followed by a median filter.
//!
//! Only binary `P5`/`P6` files with a maximum value of 255 are accepted; color
//! input is collapsed to luma with the Rec. 601 weights. Everything here is
//! integer or table-driven arithmetic, so preprocessing is bit-reproducible
//! across runs and platforms.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit single-channel image in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayImage {
    /// Build an image from row-major pixel data. Dimensions must be positive
    /// and match the buffer length.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let expect = width as usize * height as usize;
        if pixels.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer holds {} bytes, {width}x{height} needs {expect}",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    /// Image filled with a single value.
    pub fn constant(width: u32, height: u32, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Read with coordinates clamped to the border (replication padding).
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> u8 {
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        self.pixels[y * self.width as usize + x]
    }
}

/// Preprocessing knobs: CLAHE tile grid and clip limit, then a median filter.
///
/// `median_radius = r` means a `(2r+1) x (2r+1)` window; `r = 0` disables the
/// filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub clahe_tiles_x: u32,
    pub clahe_tiles_y: u32,
    pub clahe_clip_limit: f32,
    pub median_radius: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe_tiles_x: 8,
            clahe_tiles_y: 8,
            clahe_clip_limit: 2.0,
            median_radius: 1,
        }
    }
}

/// Run the full preprocessing chain: CLAHE then median filter.
pub fn preprocess(img: &GrayImage, cfg: &PreprocessConfig) -> Result<GrayImage> {
    let equalized = clahe(img, cfg)?;
    Ok(median_filter(&equalized, cfg.median_radius))
}

// ---------------------------------------------------------------------------
// PNM loading
// ---------------------------------------------------------------------------

/// Load a binary PGM (`P5`) or PPM (`P6`) file as grayscale.
///
/// PPM data is converted per pixel with the Rec. 601 luma weights
/// `0.299 R + 0.587 G + 0.114 B`, rounded to nearest. The header may contain
/// `#` comments; the maximum sample value must be 255.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&data, path)
}

fn parse_pnm(data: &[u8], path: &Path) -> Result<GrayImage> {
    let corrupt = |detail: &str| Error::CorruptImage { path: path.to_path_buf(), detail: detail.to_string() };

    if data.len() < 2 {
        return Err(corrupt("shorter than a magic number"));
    }
    let channels = match &data[..2] {
        b"P5" => 1usize,
        b"P6" => 3usize,
        magic => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("magic {:?}, expected binary P5 or P6", String::from_utf8_lossy(magic)),
            })
        }
    };

    let mut pos = 2;
    let mut fields = [0u64; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        *field = next_header_int(data, &mut pos).ok_or_else(|| corrupt("truncated or non-numeric header"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(corrupt("missing whitespace before raster"));
    }
    pos += 1;

    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 || width > u32::MAX as u64 || height > u32::MAX as u64 {
        return Err(corrupt(&format!("bad dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("maxval {maxval}, only 255 is supported"),
        });
    }

    let npix = width as usize * height as usize;
    let need = npix * channels;
    let raster = &data[pos..];
    if raster.len() < need {
        return Err(corrupt(&format!("raster truncated: need {need} bytes, found {}", raster.len())));
    }

    let pixels = if channels == 1 {
        raster[..need].to_vec()
    } else {
        let mut out = Vec::with_capacity(npix);
        for rgb in raster[..need].chunks_exact(3) {
            let luma = 0.299 * rgb[0] as f32 + 0.587 * rgb[1] as f32 + 0.114 * rgb[2] as f32;
            out.push(luma.round() as u8);
        }
        out
    };
    GrayImage::new(width as u32, height as u32, pixels)
}

/// Read the next unsigned integer from a PNM header, skipping whitespace and
/// `#` comments. Returns `None` on malformed input.
fn next_header_int(data: &[u8], pos: &mut usize) -> Option<u64> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&data[start..*pos]).ok()?.parse().ok()
}

/// Write a binary PGM file.
pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("write to vec");
    out.extend_from_slice(&img.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// CLAHE
// ---------------------------------------------------------------------------

/// Contrast-limited adaptive histogram equalization.
///
/// The image is partitioned into `tiles_x x tiles_y` tiles with boundaries at
/// `floor(i * extent / tiles)`. Each tile gets a clipped-histogram
/// equalization lookup table: the histogram is normalized by tile area,
/// density above `clip_limit / 256` is clipped, the excess is redistributed
/// uniformly over all 256 bins (at most two redistribution passes; whatever
/// still exceeds the ceiling afterwards is dropped), and the mapping is
/// `lut[v] = floor(cdf[v] / cdf[255] * 255)`. Normalizing first makes the
/// table a function of the tile's value distribution alone, so tiles seeing
/// the same content map it identically even when the floor-based boundaries
/// give them different pixel counts — in particular a constant image stays
/// exactly constant. Output pixels bilinearly interpolate the mappings of
/// the up-to-four nearest tile centers, so tile seams stay invisible.
///
/// Fails if the image has fewer pixels per axis than tiles.
pub fn clahe(img: &GrayImage, cfg: &PreprocessConfig) -> Result<GrayImage> {
    let (tx, ty) = (cfg.clahe_tiles_x, cfg.clahe_tiles_y);
    if tx == 0 || ty == 0 {
        return Err(Error::InvalidArgument("CLAHE tile counts must be positive".into()));
    }
    if !(cfg.clahe_clip_limit.is_finite() && cfg.clahe_clip_limit > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "CLAHE clip limit must be positive and finite, got {}",
            cfg.clahe_clip_limit
        )));
    }
    if img.width < tx || img.height < ty {
        return Err(Error::ImageSmallerThanTileGrid {
            width: img.width,
            height: img.height,
            tiles_x: tx,
            tiles_y: ty,
        });
    }

    let (w, h) = (img.width as usize, img.height as usize);
    let (tx, ty) = (tx as usize, ty as usize);

    // Tile boundaries; tile (i, j) covers [xb[i], xb[i+1]) x [yb[j], yb[j+1]).
    let xb: Vec<usize> = (0..=tx).map(|i| i * w / tx).collect();
    let yb: Vec<usize> = (0..=ty).map(|j| j * h / ty).collect();

    // One 256-entry LUT per tile.
    let mut luts = vec![[0u8; 256]; tx * ty];
    for tj in 0..ty {
        for ti in 0..tx {
            let mut hist = [0u64; 256];
            for y in yb[tj]..yb[tj + 1] {
                let row = &img.pixels[y * w..(y + 1) * w];
                for &v in &row[xb[ti]..xb[ti + 1]] {
                    hist[v as usize] += 1;
                }
            }
            let area = (xb[ti + 1] - xb[ti]) as u64 * (yb[tj + 1] - yb[tj]) as u64;
            let mut density = [0.0f64; 256];
            for (d, &c) in density.iter_mut().zip(&hist) {
                *d = c as f64 / area as f64;
            }
            clip_histogram(&mut density, cfg.clahe_clip_limit);

            let lut = &mut luts[tj * tx + ti];
            let mut cdf = [0.0f64; 256];
            let mut acc = 0.0f64;
            for (c, &d) in cdf.iter_mut().zip(&density) {
                acc += d;
                *c = acc;
            }
            let total = cdf[255];
            debug_assert!(total > 0.0);
            for v in 0..256 {
                // cdf is a monotone running sum, so cdf[v] / total <= 1
                // exactly and the cast below cannot overflow.
                lut[v] = (cdf[v] / total * 255.0).floor() as u8;
            }
        }
    }

    // Bilinear interpolation between tile-center mappings. Tile centers are
    // taken on a uniform grid (tile k centered at (k + 0.5) * extent / tiles),
    // which matches the floor-based boundaries to within a pixel.
    let tile_w = w as f64 / tx as f64;
    let tile_h = h as f64 / ty as f64;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let gy = (y as f64 + 0.5) / tile_h - 0.5;
        let j0f = gy.floor();
        let fy = gy - j0f;
        let j0 = (j0f as i64).clamp(0, ty as i64 - 1) as usize;
        let j1 = (j0f as i64 + 1).clamp(0, ty as i64 - 1) as usize;
        for x in 0..w {
            let gx = (x as f64 + 0.5) / tile_w - 0.5;
            let i0f = gx.floor();
            let fx = gx - i0f;
            let i0 = (i0f as i64).clamp(0, tx as i64 - 1) as usize;
            let i1 = (i0f as i64 + 1).clamp(0, tx as i64 - 1) as usize;

            let v = img.pixels[y * w + x] as usize;
            let v00 = luts[j0 * tx + i0][v] as f64;
            let v10 = luts[j0 * tx + i1][v] as f64;
            let v01 = luts[j1 * tx + i0][v] as f64;
            let v11 = luts[j1 * tx + i1][v] as f64;
            let top = v00 + (v10 - v00) * fx;
            let bot = v01 + (v11 - v01) * fx;
            out[y * w + x] = (top + (bot - top) * fy).round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Clip a normalized tile histogram at `clip_limit / 256` and redistribute
/// the excess mass uniformly, at most twice; any residual excess is dropped.
fn clip_histogram(density: &mut [f64; 256], clip_limit: f32) {
    let ceiling = clip_limit as f64 / 256.0;
    let mut excess = 0.0f64;
    for bin in density.iter_mut() {
        if *bin > ceiling {
            excess += *bin - ceiling;
            *bin = ceiling;
        }
    }
    for _pass in 0..2 {
        if excess <= 0.0 {
            break;
        }
        let share = excess / 256.0;
        excess = 0.0;
        for bin in density.iter_mut() {
            *bin += share;
            if *bin > ceiling {
                excess += *bin - ceiling;
                *bin = ceiling;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Median filter
// ---------------------------------------------------------------------------

/// Median filter with a `(2r+1) x (2r+1)` window and border replication.
/// `radius = 0` returns the image unchanged.
pub fn median_filter(img: &GrayImage, radius: u32) -> GrayImage {
    if radius == 0 {
        return img.clone();
    }
    let r = radius as i64;
    let side = 2 * radius as usize + 1;
    let rank = (side * side - 1) / 2; // 0-based index of the median
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..img.height as i64 {
        for x in 0..img.width as i64 {
            let mut hist = [0u32; 256];
            for wy in y - r..=y + r {
                for wx in x - r..=x + r {
                    hist[img.get_clamped(wx, wy) as usize] += 1;
                }
            }
            let mut seen = 0u32;
            let mut median = 0u8;
            for (v, &count) in hist.iter().enumerate() {
                seen += count;
                if seen > rank as u32 {
                    median = v as u8;
                    break;
                }
            }
            out[y as usize * img.width as usize + x as usize] = median;
        }
    }
    GrayImage { width: img.width, height: img.height, pixels: out }
}

// ---------------------------------------------------------------------------
