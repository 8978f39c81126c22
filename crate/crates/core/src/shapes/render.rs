//! Glyph geometry and the two rendering styles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, Nuisance, Rgb, PALETTE, PIXELS, SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
    Diamond,
    Star,
}

impl Glyph {
    pub const ALL: [Glyph; 8] = [
        Glyph::Circle,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Cross,
        Glyph::Ring,
        Glyph::Bar,
        Glyph::Diamond,
        Glyph::Star,
    ];

    /// Membership test in glyph coordinates, where the glyph fits the unit
    /// disc and `v` points down.
    pub fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Glyph::Circle => u * u + v * v <= 0.9,
            Glyph::Square => u.abs().max(v.abs()) <= 0.72,
            Glyph::Triangle => in_polygon(u, v, &TRIANGLE),
            Glyph::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0)
            }
            Glyph::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Glyph::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            Glyph::Diamond => u.abs() + v.abs() <= 1.0,
            Glyph::Star => in_polygon(u, v, &STAR),
        }
    }

    /// A point well inside the glyph, in glyph coordinates.
    pub fn interior_point(self) -> (f32, f32) {
        match self {
            Glyph::Ring => (0.77, 0.0),
            Glyph::Triangle => (0.0, 0.1),
            _ => (0.0, 0.0),
        }
    }
}

const TRIANGLE: [(f32, f32); 3] = [(0.0, -1.0), (0.94, 0.72), (-0.94, 0.72)];

const STAR: [(f32, f32); 10] = {
    // outer radius 1, inner 0.45, first point straight up
    [
        (0.0, -1.0),
        (0.2645, -0.3641),
        (0.9511, -0.3090),
        (0.4280, 0.1391),
        (0.5878, 0.8090),
        (0.0, 0.45),
        (-0.5878, 0.8090),
        (-0.4280, 0.1391),
        (-0.9511, -0.3090),
        (-0.2645, -0.3641),
    ]
};

fn in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Glyph radius in pixels at scale 1.
pub const BASE_RADIUS: f32 = 7.5;
const SUPERSAMPLE: usize = 3;

/// Fractional glyph coverage per pixel, row-major `SIDE × SIDE`.
pub fn coverage(glyph: Glyph, n: &Nuisance) -> Vec<f32> {
    let r = BASE_RADIUS * n.scale;
    let (s, c) = n.rotation.sin_cos();
    let mut out = vec![0.0; PIXELS];
    let step = 1.0 / SUPERSAMPLE as f32;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * step - n.cx;
                    let py = y as f32 + (sy as f32 + 0.5) * step - n.cy;
                    let u = (c * px + s * py) / r;
                    let v = (-s * px + c * py) / r;
                    if glyph.contains(u, v) {
                        hits += 1;
                    }
                }
            }
            out[y * SIDE + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    out
}

/// Pixel that holds the glyph's interior point.
pub fn interior_pixel(glyph: Glyph, n: &Nuisance) -> (usize, usize) {
    let (u, v) = glyph.interior_point();
    let r = BASE_RADIUS * n.scale;
    let (s, c) = n.rotation.sin_cos();
    let px = c * u * r - s * v * r + n.cx;
    let py = s * u * r + c * v * r + n.cy;
    (
        (px.floor() as isize).clamp(0, SIDE as isize - 1) as usize,
        (py.floor() as isize).clamp(0, SIDE as isize - 1) as usize,
    )
}

pub fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth noise on a coarse lattice, bilinearly upsampled, in `[-1, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = vec![0.0; PIXELS];
    let scale = cells as f32 / SIDE as f32;
    for y in 0..SIDE {
        for x in 0..SIDE {
            let gx = (x as f32 + 0.5) * scale;
            let gy = (y as f32 + 0.5) * scale;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f32, gy - y0 as f32);
            let (x1, y1) = ((x0 + 1).min(cells), (y0 + 1).min(cells));
            let a = lattice[y0 * n + x0] * (1.0 - fx) + lattice[y0 * n + x1] * fx;
            let b = lattice[y1 * n + x0] * (1.0 - fx) + lattice[y1 * n + x1] * fx;
            out[y * SIDE + x] = a * (1.0 - fy) + b * fy;
        }
    }
    out
}

/// Background and foreground layers for one sample.
pub struct Layers {
    pub background: Vec<f32>,
    pub foreground: Vec<f32>,
}

/// Style knobs for the natural domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NaturalStyle {
    /// Amplitude of the coarse background texture.
    pub texture: f32,
    /// Standard deviation of per-pixel background noise.
    pub noise: f32,
    /// Half-width of the uniform per-pixel jitter on the glyph.
    pub glyph_jitter: f32,
    /// Half-range of the linear shading gradient across the glyph.
    pub glyph_shading: f32,
    /// Upper bound of the background saturation.
    pub saturation: f32,
    /// Number of palette-coloured distractor blobs behind the glyph.
    pub clutter: usize,
}

impl Default for NaturalStyle {
    fn default() -> Self {
        Self {
            texture: 0.25,
            noise: 0.06,
            glyph_jitter: 0.03,
            glyph_shading: 0.05,
            saturation: 0.8,
            clutter: 3,
        }
    }
}

pub fn layers(domain: Domain, color: Rgb, n: &Nuisance, style: &NaturalStyle, seed: u64) -> Layers {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let mut background = vec![0.0; PIXELS * 3];
    let mut foreground = vec![0.0; PIXELS * 3];
    let base = n.background;
    match domain {
        Domain::Synthetic | Domain::Sketch => {
            for p in 0..PIXELS {
                background[p * 3..p * 3 + 3].copy_from_slice(&base);
                foreground[p * 3..p * 3 + 3].copy_from_slice(&color);
            }
        }
        Domain::Natural => {
            let mut bg_rng = ChaCha8Rng::seed_from_u64(n.background_seed);
            let tex: Vec<Vec<f32>> = (0..3).map(|_| value_noise(&mut bg_rng, 4)).collect();
            let fine = value_noise(&mut bg_rng, 8);
            let normal = Normal::new(0.0f32, style.noise.max(0.0)).expect("finite sigma");
            let (gs, gc) = rng.random_range(0.0f32..std::f32::consts::TAU).sin_cos();
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let p = y * SIDE + x;
                    let grad =
                        ((x as f32 - n.cx) * gc + (y as f32 - n.cy) * gs) / SIDE as f32 * 2.0;
                    let shade = (grad * style.glyph_shading)
                        .clamp(-style.glyph_shading, style.glyph_shading);
                    for ch in 0..3 {
                        let t = style.texture * (0.6 * tex[ch][p] + 0.4 * fine[p]);
                        background[p * 3 + ch] =
                            (base[ch] * n.lighting + t + normal.sample(&mut rng)).clamp(0.0, 1.0);
                        let j = if style.glyph_jitter > 0.0 {
                            rng.random_range(-style.glyph_jitter..=style.glyph_jitter)
                        } else {
                            0.0
                        };
                        foreground[p * 3 + ch] = (color[ch] + shade + j).clamp(0.0, 1.0);
                    }
                }
            }
            for _ in 0..style.clutter {
                let c = PALETTE[bg_rng.random_range(0..PALETTE.len())];
                let (bx, by) = (
                    bg_rng.random_range(0.0..SIDE as f32),
                    bg_rng.random_range(0.0..SIDE as f32),
                );
                let r = bg_rng.random_range(2.5f32..5.5);
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        let d =
                            ((x as f32 + 0.5 - bx).powi(2) + (y as f32 + 0.5 - by).powi(2)).sqrt();
                        let a = (r + 0.5 - d).clamp(0.0, 1.0);
                        let p = (y * SIDE + x) * 3;
                        for ch in 0..3 {
                            background[p + ch] = a * c[ch] + (1.0 - a) * background[p + ch];
                        }
                    }
                }
            }
        }
    }
    Layers {
        background,
        foreground,
    }
}

pub fn composite(alpha: &[f32], layers: &Layers) -> Vec<f32> {
    let mut out = vec![0.0; PIXELS * 3];
    for p in 0..PIXELS {
        let a = alpha[p];
        for ch in 0..3 {
            let i = p * 3 + ch;
            out[i] = a * layers.foreground[i] + (1.0 - a) * layers.background[i];
        }
    }
    out
}
