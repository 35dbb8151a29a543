//! Seeded synthetic leaf-image datasets for demos and end-to-end tests.
//!
//! Each class gets a distinct base hue; each image adds seeded spatial
//! modulation, speckle noise, and a few dark blotches. Hue is what separates
//! the classes, and hue survives every training-time augmentation (flips and
//! rotations move pixels, brightness scales all three channels together), so
//! a classifier that works must actually learn color structure rather than
//! memorize pixel positions. Pixel values stay below 0.77 so a 1.3×
//! brightness jitter cannot clip them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DataError;
use crate::util::derive_seed;

const STREAM_SYNTH: u64 = 4;

/// One class directory to generate.
#[derive(Clone, Debug)]
pub struct SynthClass {
    pub name: String,
    pub count: usize,
}

/// A whole synthetic dataset: class layout, image side, master seed.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub classes: Vec<SynthClass>,
    pub img_size: u32,
    pub seed: u64,
}

impl SynthSpec {
    /// Balanced helper: `num_classes` classes of `count` images each.
    pub fn balanced(num_classes: usize, count: usize, img_size: u32, seed: u64) -> Self {
        SynthSpec {
            classes: (0..num_classes)
                .map(|c| SynthClass {
                    name: format!("class_{c}"),
                    count,
                })
                .collect(),
            img_size,
            seed,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Writes `root/<class>/img_<i>.png` for every requested class.
///
/// Every image is fully determined by `(seed, class index, image index)`, so
/// regenerating into a fresh directory reproduces identical bytes.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<(), DataError> {
    let side = spec.img_size;
    for (class_id, class) in spec.classes.iter().enumerate() {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir).map_err(|e| {
            DataError::Ingest(format!("cannot create {}: {e}", dir.display()))
        })?;
        // Hues spread over the wheel; classes stay far apart.
        let hue = 360.0 * class_id as f64 / spec.classes.len() as f64;
        for i in 0..class.count {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                STREAM_SYNTH,
                &[class_id as u64, i as u64],
            ));
            let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
            let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(1.5..4.0);
            let hue_jitter = rng.random_range(-12.0..12.0);
            let blotches: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.05..0.15),
                    )
                })
                .collect();

            let mut img = image::RgbImage::new(side, side);
            for y in 0..side {
                for x in 0..side {
                    let u = x as f64 / side as f64;
                    let v = y as f64 / side as f64;
                    let wave = 0.5
                        + 0.25
                            * ((freq * std::f64::consts::TAU * u + phase_x).sin()
                                * (freq * std::f64::consts::TAU * v + phase_y).cos());
                    let mut value = 0.35 + 0.4 * wave;
                    for &(bx, by, br) in &blotches {
                        let d2 = (u - bx) * (u - bx) + (v - by) * (v - by);
                        if d2 < br * br {
                            value *= 0.55;
                        }
                    }
                    let noise = rng.random_range(-0.04..0.04);
                    let value = (value + noise).clamp(0.05, 0.77);
                    let rgb = hsv_to_rgb(hue + hue_jitter, 0.85, value);
                    img.put_pixel(
                        x,
                        y,
                        image::Rgb([
                            (rgb[0] * 255.0).round() as u8,
                            (rgb[1] * 255.0).round() as u8,
                            (rgb[2] * 255.0).round() as u8,
                        ]),
                    );
                }
            }
            let path = dir.join(format!("img_{i:05}.png"));
            img.save(&path).map_err(|e| DataError::Decode {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        }
    }
    Ok(())
}
