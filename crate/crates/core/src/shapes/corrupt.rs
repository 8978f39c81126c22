//! Parametric corruptions, the sketch transform and crop augmentation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{ShapesError, PIXELS, SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    GaussianBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Strength parameter for severities 1 to 5.
    pub fn table(self) -> [f32; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            // photons per unit intensity
            CorruptionKind::ShotNoise => [60.0, 25.0, 12.0, 5.0, 3.0],
            CorruptionKind::GaussianBlur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            // retained contrast
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            // block size
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 4.0, 6.0],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = ShapesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ShapesError::UnknownCorruption(s.to_string()))
    }
}

/// Applies `kind` at `severity` (0 is the identity, 1 to 5 index the
/// table) to an HWC pixel buffer. Randomness comes from `seed` only.
pub fn corrupt(
    pixels: &[f32],
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
) -> Result<Vec<f32>, ShapesError> {
    if severity == 0 {
        return Ok(pixels.to_vec());
    }
    if severity > 5 {
        return Err(ShapesError::Severity(severity));
    }
    let p = kind.table()[severity as usize - 1];
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0f32, 1.0).expect("unit normal");
            pixels.iter().map(|&x| x + p * n.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => pixels
            .iter()
            .map(|&x| {
                let lambda = (x.max(0.0) * p) as f64;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .expect("positive rate")
                        .sample(&mut rng)
                } else {
                    0.0
                };
                k as f32 / p
            })
            .collect(),
        CorruptionKind::GaussianBlur => gaussian_blur(pixels, p),
        CorruptionKind::Brightness => pixels.iter().map(|&x| x + p).collect(),
        CorruptionKind::Contrast => {
            let mean = pixels.iter().map(|&x| x as f64).sum::<f64>() as f32 / pixels.len() as f32;
            pixels.iter().map(|&x| (x - mean) * p + mean).collect()
        }
        CorruptionKind::Pixelate => pixelate(pixels, p as usize),
    };
    out.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_blur(pixels: &[f32], sigma: f32) -> Vec<f32> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let at = |i: isize| i.clamp(0, SIDE as isize - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    for y in 0..SIDE {
        for x in 0..SIDE {
            for ch in 0..3 {
                tmp[(y * SIDE + x) * 3 + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        w * pixels[(y * SIDE + at(x as isize + k as isize - radius)) * 3 + ch]
                    })
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; pixels.len()];
    for y in 0..SIDE {
        for x in 0..SIDE {
            for ch in 0..3 {
                out[(y * SIDE + x) * 3 + ch] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        w * tmp[(at(y as isize + k as isize - radius) * SIDE + x) * 3 + ch]
                    })
                    .sum();
            }
        }
    }
    out
}

fn pixelate(pixels: &[f32], block: usize) -> Vec<f32> {
    let mut out = vec![0.0; pixels.len()];
    for by in (0..SIDE).step_by(block) {
        for bx in (0..SIDE).step_by(block) {
            let ys = by..(by + block).min(SIDE);
            let xs = bx..(bx + block).min(SIDE);
            let n = (ys.len() * xs.len()) as f32;
            for ch in 0..3 {
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += pixels[(y * SIDE + x) * 3 + ch];
                    }
                }
                for y in ys.clone() {
                    for x in xs.clone() {
                        out[(y * SIDE + x) * 3 + ch] = s / n;
                    }
                }
            }
        }
    }
    out
}

/// Edge threshold of the sketch transform.
pub const SKETCH_THRESHOLD: f32 = 0.15;

const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbours(p: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((p % SIDE) as isize, (p / SIDE) as isize);
    NEIGHBOURS.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < SIDE as isize && ny < SIDE as isize)
            .then(|| ny as usize * SIDE + nx as usize)
    })
}

/// Dark-on-light line drawing. A pixel is an edge when some 4-neighbour
/// differs from it by more than the threshold in any channel and is
/// brighter (ties go to the lower index); edges are then thinned to those
/// touching a non-edge pixel.
pub fn sketch(pixels: &[f32]) -> Vec<f32> {
    let lum = |p: usize| pixels[p * 3] + pixels[p * 3 + 1] + pixels[p * 3 + 2];
    let diff = |a: usize, b: usize| {
        (0..3)
            .map(|c| (pixels[a * 3 + c] - pixels[b * 3 + c]).abs())
            .fold(0.0, f32::max)
    };
    let edge: Vec<bool> = (0..PIXELS)
        .map(|p| {
            neighbours(p).any(|n| {
                let (lp, ln) = (lum(p), lum(n));
                diff(p, n) > SKETCH_THRESHOLD && (lp < ln || (lp == ln && p < n))
            })
        })
        .collect();
    let mut out = vec![1.0; PIXELS * 3];
    for p in 0..PIXELS {
        if edge[p] && neighbours(p).any(|n| !edge[n]) {
            out[p * 3..p * 3 + 3].fill(0.0);
        }
    }
    out
}

/// Square crop of side `crop` at (`x0`, `y0`), resized back to full size
/// bilinearly.
pub fn crop_resize(pixels: &[f32], x0: usize, y0: usize, crop: usize) -> Vec<f32> {
    let mut out = vec![0.0; pixels.len()];
    let s = crop as f32 / SIDE as f32;
    let last = (crop - 1) as f32;
    for y in 0..SIDE {
        let fy = ((y as f32 + 0.5) * s - 0.5).clamp(0.0, last);
        let (y0i, wy) = (fy.floor() as usize, fy.fract());
        let y1i = (y0i + 1).min(crop - 1);
        for x in 0..SIDE {
            let fx = ((x as f32 + 0.5) * s - 0.5).clamp(0.0, last);
            let (x0i, wx) = (fx.floor() as usize, fx.fract());
            let x1i = (x0i + 1).min(crop - 1);
            for ch in 0..3 {
                let px = |xx: usize, yy: usize| pixels[((y0 + yy) * SIDE + x0 + xx) * 3 + ch];
                let a = px(x0i, y0i) * (1.0 - wx) + px(x1i, y0i) * wx;
                let b = px(x0i, y1i) * (1.0 - wx) + px(x1i, y1i) * wx;
                out[(y * SIDE + x) * 3 + ch] = a * (1.0 - wy) + b * wy;
            }
        }
    }
    out
}

/// Random square crop with side in `min_crop..=SIDE`, resized back.
pub fn random_crop(pixels: &[f32], min_crop: usize, rng: &mut impl Rng) -> Vec<f32> {
    let crop = rng.random_range(min_crop.clamp(1, SIDE)..=SIDE);
    let x0 = rng.random_range(0..=SIDE - crop);
    let y0 = rng.random_range(0..=SIDE - crop);
    crop_resize(pixels, x0, y0, crop)
}
