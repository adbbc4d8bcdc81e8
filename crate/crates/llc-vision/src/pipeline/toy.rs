//! Procedural toy corpus generator.
//!
//! The corpus substitutes a real photo dataset for desk-scale end-to-end
//! runs: each known class is a sinusoidal grating at a class-specific
//! orientation and frequency plus one class-specific geometric primitive,
//! with per-image phase/position jitter and additive noise. Two extra
//! holdout classes under the reserved `unknown_heavy` / `unknown_light`
//! names use crossed-grating (plaid) mixtures at orientations no known
//! class has, so they are structurally unlike every known texture.
//!
//! Every image gets its own RNG seeded from (corpus seed, class name,
//! split, index), which makes the output byte-identical across runs and
//! independent of generation order.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{save_pgm, GrayImage};
use crate::pipeline::dataset::{UNKNOWN_HEAVY, UNKNOWN_LIGHT};

const SIDE: u32 = 96;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySummary {
    pub root: PathBuf,
    pub known_classes: usize,
    pub unknown_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub total_images: usize,
}

/// Derived split sizes: a fifth of `per_class` for validation and three
/// tenths for test, at least one image each.
pub fn split_counts(per_class: usize) -> (usize, usize, usize) {
    (per_class, (per_class / 5).max(1), (per_class * 3 / 10).max(1))
}

fn image_seed(seed: u64, class: &str, split: &str, index: usize) -> u64 {
    // FNV-1a over the identifying strings, mixed with the corpus seed.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in class.bytes().chain([0u8]).chain(split.bytes()).chain([0u8]) {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^= index as u64;
    h.wrapping_mul(0x1000_0000_01b3)
}

#[derive(Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Cross,
    Bar,
    Ring,
}

const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Cross, Shape::Bar, Shape::Ring];

fn draw_shape(canvas: &mut [f32], shape: Shape, cx: f32, cy: f32, r: f32, delta: f32) {
    let side = SIDE as i32;
    let lo_x = ((cx - r).floor() as i32).max(0);
    let hi_x = ((cx + r).ceil() as i32).min(side - 1);
    let lo_y = ((cy - r).floor() as i32).max(0);
    let hi_y = ((cy + r).ceil() as i32).min(side - 1);
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let hit = match shape {
                Shape::Disc => dx * dx + dy * dy <= r * r,
                Shape::Square => dx.abs() <= r && dy.abs() <= r,
                Shape::Cross => {
                    (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
                }
                Shape::Bar => (dx - dy).abs() <= r / 2.0 && dx.abs() <= r && dy.abs() <= r,
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
                }
            };
            if hit {
                canvas[(y * side + x) as usize] += delta;
            }
        }
    }
}

fn add_grating(canvas: &mut [f32], theta: f32, freq: f32, phase: f32, amplitude: f32) {
    let (s, c) = theta.sin_cos();
    for y in 0..SIDE {
        for x in 0..SIDE {
            let u = x as f32 * c + y as f32 * s;
            canvas[(y * SIDE + x) as usize] += amplitude * (2.0 * PI * freq * u + phase).sin();
        }
    }
}

fn finish(canvas: &[f32]) -> GrayImage {
    let pixels = canvas.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::new(SIDE, SIDE, pixels).expect("canvas dimensions are fixed")
}

/// Render one known-class image. `classes` fixes the orientation spacing.
fn known_image(class: usize, classes: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut canvas = vec![128.0f32 + rng.random_range(-12.0..12.0); (SIDE * SIDE) as usize];
    let theta = class as f32 * PI / classes as f32 + rng.random_range(-0.05..0.05);
    let freq = (0.08 + 0.03 * (class % 3) as f32) * rng.random_range(0.95..1.05);
    let phase = rng.random_range(0.0..2.0 * PI);
    add_grating(&mut canvas, theta, freq, phase, rng.random_range(40.0..50.0));

    let shape = SHAPES[class % SHAPES.len()];
    let cx = rng.random_range(20.0..(SIDE as f32 - 20.0));
    let cy = rng.random_range(20.0..(SIDE as f32 - 20.0));
    let r = rng.random_range(8.0..14.0);
    let delta = if rng.random::<bool>() { 60.0 } else { -60.0 };
    draw_shape(&mut canvas, shape, cx, cy, r, delta);

    for v in canvas.iter_mut() {
        *v += rng.random_range(-10.0..10.0);
    }
    finish(&canvas)
}

/// Render one holdout image: a plaid of two gratings at half-step
/// orientations that never occur in known classes.
fn unknown_image(heavy: bool, classes: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut canvas = vec![128.0f32 + rng.random_range(-12.0..12.0); (SIDE * SIDE) as usize];
    let step = PI / classes as f32;
    let theta_a = 0.5 * step + rng.random_range(-0.05..0.05);
    let theta_b = (classes as f32 / 2.0 + 0.5) * step + rng.random_range(-0.05..0.05);
    let amp = if heavy { 32.0 } else { 16.0 };
    for (theta, freq) in [(theta_a, 0.11f32), (theta_b, 0.09)] {
        let phase = rng.random_range(0.0..2.0 * PI);
        add_grating(&mut canvas, theta, freq * rng.random_range(0.95..1.05), phase, amp);
    }

    let shapes = if heavy { 5 } else { 1 };
    for _ in 0..shapes {
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let cx = rng.random_range(16.0..(SIDE as f32 - 16.0));
        let cy = rng.random_range(16.0..(SIDE as f32 - 16.0));
        let r = rng.random_range(6.0..12.0);
        let delta = if rng.random::<bool>() { 50.0 } else { -50.0 };
        draw_shape(&mut canvas, shape, cx, cy, r, delta);
    }

    let noise = if heavy { 10.0 } else { 14.0 };
    for v in canvas.iter_mut() {
        *v += rng.random_range(-noise..noise);
    }
    finish(&canvas)
}

/// Generate the corpus under `out` in the split layout
/// (`out/<class>/{train,val,test}/img_NNN.pgm`).
///
/// `classes` counts the known classes (at least 3); the two holdout classes
/// are always added on top. Validation and test sizes derive from
/// `per_class` via [`split_counts`].
pub fn make_toy_corpus(out: &Path, classes: usize, per_class: usize, seed: u64) -> Result<ToySummary> {
    if classes < 3 {
        return Err(Error::InvalidArgument(format!(
            "toy corpus needs at least 3 known classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("toy corpus needs per_class >= 1".into()));
    }
    let (n_train, n_val, n_test) = split_counts(per_class);

    let mut class_names: Vec<String> = (0..classes).map(|c| format!("class_{c:02}")).collect();
    class_names.push(UNKNOWN_HEAVY.to_string());
    class_names.push(UNKNOWN_LIGHT.to_string());

    let mut total = 0usize;
    for (id, name) in class_names.iter().enumerate() {
        for (split, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
            let dir = out.join(name).join(split);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, name, split, i));
                let img = if id < classes {
                    known_image(id, classes, &mut rng)
                } else {
                    unknown_image(name == UNKNOWN_HEAVY, classes, &mut rng)
                };
                save_pgm(&img, &dir.join(format!("img_{i:03}.pgm")))?;
                total += 1;
            }
        }
    }

    Ok(ToySummary {
        root: out.to_path_buf(),
        known_classes: classes,
        unknown_classes: 2,
        train_per_class: n_train,
        val_per_class: n_val,
        test_per_class: n_test,
        total_images: total,
    })
}

// ---------------------------------------------------------------------------
