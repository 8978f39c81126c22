//! Procedural shape images standing in for photographs and generated data.
//!
//! Every image is 24×24 RGB, stored HWC row-major with values in `[0, 1]`.
//! A class is a glyph drawn in the class's palette colour. Natural images
//! have textured, noisy backgrounds and slightly shaded glyphs; synthetic
//! images are flat and crisp and take their nuisances from diversified
//! prompts; sketches are line drawings of synthetic renders.

mod corrupt;
mod render;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use corrupt::{corrupt, crop_resize, random_crop, sketch, CorruptionKind, SKETCH_THRESHOLD};
pub use render::{coverage, hsv, interior_pixel, Glyph, NaturalStyle, BASE_RADIUS};

use crate::prompts::{self, build_covering_array, ClassPrompt, PromptError, PromptSpec};
use crate::tensor::Tensor;

pub const SIDE: usize = 24;
pub const PIXELS: usize = SIDE * SIDE;
/// Flattened length of one image.
pub const IMAGE_LEN: usize = PIXELS * 3;

pub type Rgb = [f32; 3];

#[derive(Debug, Error)]
pub enum ShapesError {
    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
    #[error("severity must be in 0..=5, got {0}")]
    Severity(u8),
    #[error("class id {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
    #[error("at most {max} classes are supported, got {got}")]
    TooManyClasses { got: usize, max: usize },
    #[error("a dataset needs at least one sample per class")]
    EmptySpec,
    #[error("unknown {what} `{value}`")]
    UnknownTag { what: &'static str, value: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, ShapesError>;

/// Eight saturated colours at 45° hue steps.
pub const PALETTE: [Rgb; 8] = [
    [0.95, 0.095, 0.095],
    [0.95, 0.73625, 0.095],
    [0.5225, 0.95, 0.095],
    [0.095, 0.95, 0.30875],
    [0.095, 0.95, 0.95],
    [0.095, 0.30875, 0.95],
    [0.5225, 0.095, 0.95],
    [0.95, 0.095, 0.73625],
];

/// Colour of the spurious feature tied to class `c`: the palette entry
/// opposite the class's own glyph colour.
pub fn spurious_color(c: usize) -> Rgb {
    PALETTE[(c + 4) % PALETTE.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub name: String,
    pub superclass: String,
    pub glyph: Glyph,
    pub color: Rgb,
}

impl ClassDef {
    pub fn prompt(&self) -> ClassPrompt {
        ClassPrompt::new(&self.name, &self.superclass)
    }
}

/// The eight glyph classes, coloured by palette index.
pub fn default_classes() -> Vec<ClassDef> {
    let sup = |g: Glyph| match g {
        Glyph::Circle | Glyph::Ring => "round shape",
        Glyph::Cross | Glyph::Bar => "line figure",
        _ => "polygon",
    };
    Glyph::ALL
        .iter()
        .enumerate()
        .map(|(i, &g)| ClassDef {
            name: serde_json::to_value(g)
                .expect("glyph name")
                .as_str()
                .expect("string")
                .to_string(),
            superclass: sup(g).to_string(),
            glyph: g,
            color: PALETTE[i],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Natural,
    Synthetic,
    Sketch,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Natural => "natural",
            Domain::Synthetic => "synthetic",
            Domain::Sketch => "sketch",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = ShapesError;

    fn from_str(s: &str) -> Result<Self> {
        [Domain::Natural, Domain::Synthetic, Domain::Sketch]
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| ShapesError::UnknownTag {
                what: "domain",
                value: s.into(),
            })
    }
}

/// Spurious feature carried by one sample, with the class it encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spurious {
    None,
    Marker(usize),
    Background(usize),
}

impl Spurious {
    pub fn class(self) -> Option<usize> {
        match self {
            Spurious::None => None,
            Spurious::Marker(c) | Spurious::Background(c) => Some(c),
        }
    }

    pub fn tag(self) -> String {
        match self {
            Spurious::None => "none".into(),
            Spurious::Marker(c) => format!("marker:{c}"),
            Spurious::Background(c) => format!("background:{c}"),
        }
    }
}

/// How a dataset attaches spurious features. The shuffled variants encode
/// class `(label + 1) mod M` instead of the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpuriousMode {
    #[default]
    None,
    Marker,
    Background,
    ShuffledMarker,
    ShuffledBackground,
}

impl SpuriousMode {
    pub fn for_label(self, label: usize, classes: usize) -> Spurious {
        let shuffled = (label + 1) % classes;
        match self {
            SpuriousMode::None => Spurious::None,
            SpuriousMode::Marker => Spurious::Marker(label),
            SpuriousMode::Background => Spurious::Background(label),
            SpuriousMode::ShuffledMarker => Spurious::Marker(shuffled),
            SpuriousMode::ShuffledBackground => Spurious::Background(shuffled),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diversity {
    /// Canonical position, scale, pose, background and lighting.
    Simple,
    #[default]
    Diversified,
}

/// Per-sample nuisance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub cx: f32,
    pub cy: f32,
    pub scale: f32,
    pub rotation: f32,
    pub background: Rgb,
    pub background_seed: u64,
    pub lighting: f32,
    /// Option index per contextual dimension, when driven by a prompt.
    pub levels: Option<Vec<usize>>,
}

const CENTRE: f32 = SIDE as f32 / 2.0;
const MAX_OFFSET: f32 = 3.0;
const MAX_ROTATION: f32 = 0.45;

fn level_frac(level: usize, v: usize) -> f32 {
    if v <= 1 {
        0.5
    } else {
        level as f32 / (v - 1) as f32
    }
}

/// Spreads consecutive levels apart so neighbouring options do not map to
/// neighbouring parameter values.
fn scrambled(level: usize, v: usize, mult: usize) -> f32 {
    level_frac(level * mult % v.max(1), v)
}

impl Nuisance {
    pub fn canonical(class_id: usize) -> Self {
        Self {
            cx: CENTRE,
            cy: CENTRE,
            scale: 1.0,
            rotation: 0.0,
            background: [0.55, 0.55, 0.55],
            background_seed: class_id as u64,
            lighting: 1.0,
            levels: None,
        }
    }

    /// Nuisances for levels `[location, position, daytime, camera angle]`
    /// out of `v` options each, with a small continuous jitter.
    pub fn from_levels(levels: &[usize], v: usize, rng: &mut impl Rng) -> Self {
        let l = |i: usize| levels.get(i).copied().unwrap_or(0);
        let (loc, pos, day, cam) = (l(0), l(1), l(2), l(3));
        let angle = std::f32::consts::TAU * level_frac(pos, v + 1);
        let radius = MAX_OFFSET * (0.25 + 0.75 * scrambled(pos, v, 7));
        let jit = |rng: &mut dyn rand::RngCore, a: f32| rng.random_range(-a..=a);
        let background = hsv(
            scrambled(loc, v, 5),
            0.1 + 0.3 * scrambled(loc, v, 3),
            0.35 + 0.35 * level_frac(loc, v),
        );
        Self {
            cx: CENTRE + radius * angle.cos() + jit(rng, 0.5),
            cy: CENTRE + radius * angle.sin() + jit(rng, 0.5),
            scale: 0.8 + 0.3 * scrambled(cam, v, 4) + jit(rng, 0.02),
            rotation: MAX_ROTATION * (2.0 * level_frac(cam, v) - 1.0) + jit(rng, 0.03),
            background,
            background_seed: rng.random(),
            lighting: 0.8 + 0.4 * level_frac(day, v),
            levels: Some(levels.to_vec()),
        }
    }

    /// Fully random nuisances, as for photographs.
    pub fn random(rng: &mut impl Rng, style: &NaturalStyle) -> Self {
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let radius = MAX_OFFSET * rng.random_range(0.0f32..1.0).sqrt();
        Self {
            cx: CENTRE + radius * angle.cos(),
            cy: CENTRE + radius * angle.sin(),
            scale: rng.random_range(0.8..1.1),
            rotation: rng.random_range(-MAX_ROTATION..MAX_ROTATION),
            background: hsv(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..=style.saturation.clamp(0.0, 1.0)),
                rng.random_range(0.25..0.7),
            ),
            background_seed: rng.random(),
            lighting: rng.random_range(0.8..1.2),
            levels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    /// HWC, `IMAGE_LEN` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// Glyph coverage per pixel.
    #[serde(skip)]
    pub alpha: Vec<f32>,
    pub class_id: usize,
    pub domain: Domain,
    pub spurious: Spurious,
    pub nuisance: Nuisance,
    pub sample_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Number of contextual dimensions driving synthetic nuisances.
pub const DIMENSIONS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: Vec<ClassDef>,
    pub domain: Domain,
    pub per_class: usize,
    pub diversity: Diversity,
    pub spurious: SpuriousMode,
    pub corruption: Option<Corruption>,
    pub split_seed: u64,
    /// Options per contextual dimension for prompt-driven synthesis.
    pub options: usize,
    pub style: NaturalStyle,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: default_classes(),
            domain: Domain::Synthetic,
            per_class: 64,
            diversity: Diversity::Diversified,
            spurious: SpuriousMode::None,
            corruption: None,
            split_seed: 0,
            options: 15,
            style: NaturalStyle::default(),
        }
    }
}

/// Deterministic 64-bit hash of a sequence of integers.
pub fn seed_hash(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Renders one sample of `class_id`. Synthetic renders take their
/// nuisances from `prompt` when given.
pub fn render_sample(
    spec: &DatasetSpec,
    class_id: usize,
    sample_seed: u64,
    prompt: Option<&PromptSpec>,
) -> Result<ImageSample> {
    let class = spec
        .classes
        .get(class_id)
        .ok_or(ShapesError::ClassOutOfRange(class_id, spec.classes.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let nuisance = match (spec.diversity, spec.domain, prompt) {
        (Diversity::Simple, _, _) => Nuisance::canonical(class_id),
        (_, Domain::Natural, _) => Nuisance::random(&mut rng, &spec.style),
        (_, _, Some(p)) => Nuisance::from_levels(&p.levels(), spec.options, &mut rng),
        (_, _, None) => {
            let levels: Vec<usize> = (0..DIMENSIONS)
                .map(|_| rng.random_range(0..spec.options.max(1)))
                .collect();
            Nuisance::from_levels(&levels, spec.options, &mut rng)
        }
    };
    let alpha = coverage(class.glyph, &nuisance);
    let render_domain = if spec.domain == Domain::Sketch {
        Domain::Synthetic
    } else {
        spec.domain
    };
    let mut sample_nuisance = nuisance;
    if render_domain == Domain::Synthetic {
        let l = sample_nuisance.lighting;
        sample_nuisance.background = sample_nuisance.background.map(|c| (c * l).clamp(0.0, 1.0));
    }
    let layers = render::layers(
        render_domain,
        class.color,
        &sample_nuisance,
        &spec.style,
        sample_seed,
    );
    let pixels = render::composite(&alpha, &layers);
    Ok(ImageSample {
        pixels,
        alpha,
        class_id,
        domain: render_domain,
        spurious: Spurious::None,
        nuisance: sample_nuisance,
        sample_seed,
    })
}

fn marker_corner(seed: u64) -> (usize, usize) {
    match seed_hash(&[seed, 0x6d61_726b]) % 4 {
        0 => (0, 0),
        1 => (SIDE - 4, 0),
        2 => (0, SIDE - 4),
        _ => (SIDE - 4, SIDE - 4),
    }
}

/// Adds a spurious feature encoding class `c`: a 4×4 block in the class's
/// spurious colour at a seed-chosen corner, or that colour as the whole
/// background. Fully covered glyph pixels are never changed; partially
/// covered edge pixels are blended.
pub fn inject_spurious(mut sample: ImageSample, spurious: Spurious) -> ImageSample {
    match spurious {
        Spurious::None => {}
        Spurious::Marker(c) => {
            let col = spurious_color(c);
            let (x0, y0) = marker_corner(sample.sample_seed);
            for y in y0..y0 + 4 {
                for x in x0..x0 + 4 {
                    let p = y * SIDE + x;
                    if sample.alpha.get(p).copied().unwrap_or(0.0) < 1.0 {
                        sample.pixels[p * 3..p * 3 + 3].copy_from_slice(&col);
                    }
                }
            }
        }
        Spurious::Background(c) => {
            let col = spurious_color(c);
            for p in 0..PIXELS {
                let a = sample.alpha.get(p).copied().unwrap_or(0.0);
                for ch in 0..3 {
                    let i = p * 3 + ch;
                    sample.pixels[i] = a * sample.pixels[i] + (1.0 - a) * col[ch];
                }
            }
        }
    }
    sample.spurious = spurious;
    sample
}

pub fn apply_corruption(
    mut sample: ImageSample,
    kind: CorruptionKind,
    severity: u8,
) -> Result<ImageSample> {
    sample.pixels = corrupt(&sample.pixels, kind, severity, sample.sample_seed)?;
    Ok(sample)
}

pub fn render_sketch(mut sample: ImageSample) -> ImageSample {
    sample.pixels = sketch(&sample.pixels);
    sample.domain = Domain::Sketch;
    sample
}

/// The diversified prompts used for synthetic renders of one class.
pub fn class_prompts(spec: &DatasetSpec, class_id: usize) -> Result<Vec<PromptSpec>> {
    let class = spec
        .classes
        .get(class_id)
        .ok_or(ShapesError::ClassOutOfRange(class_id, spec.classes.len()))?;
    let array = build_covering_array(
        DIMENSIONS,
        spec.options,
        2,
        seed_hash(&[spec.split_seed, 0x7072_6f6d]),
    )?;
    let dims = prompts::banks::default_dimensions(spec.options);
    Ok(prompts::assemble_prompts(&class.prompt(), &dims, &array)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<ImageSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub class: usize,
    pub domain: Domain,
    pub spurious_tag: String,
    pub seed: u64,
}

/// Generates `per_class` samples for every class, class by class. Sample
/// seeds are `seed_hash([split_seed, class, index])`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.per_class == 0 || spec.classes.is_empty() {
        return Err(ShapesError::EmptySpec);
    }
    if spec.classes.len() > PALETTE.len() {
        return Err(ShapesError::TooManyClasses {
            got: spec.classes.len(),
            max: PALETTE.len(),
        });
    }
    let prompted = spec.domain != Domain::Natural && spec.diversity == Diversity::Diversified;
    let m = spec.classes.len();
    let mut samples = Vec::with_capacity(m * spec.per_class);
    for c in 0..m {
        let prompts = if prompted {
            class_prompts(spec, c)?
        } else {
            Vec::new()
        };
        for i in 0..spec.per_class {
            let seed = seed_hash(&[spec.split_seed, c as u64, i as u64]);
            let prompt = (!prompts.is_empty()).then(|| &prompts[i % prompts.len()]);
            let mut s = render_sample(spec, c, seed, prompt)?;
            s = inject_spurious(s, spec.spurious.for_label(c, m));
            if spec.domain == Domain::Sketch {
                s = render_sketch(s);
            }
            if let Some(cor) = spec.corruption {
                s = apply_corruption(s, cor.kind, cor.severity)?;
            }
            samples.push(s);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Rows of flattened pixels for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * IMAGE_LEN);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::new([idx.len(), IMAGE_LEN], data).expect("pixel rows")
    }

    /// All samples as one tensor.
    pub fn images(&self) -> Tensor {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Copy with every sample corrupted.
    pub fn corrupted(&self, kind: CorruptionKind, severity: u8) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| apply_corruption(s.clone(), kind, severity))
            .collect::<Result<Vec<_>>>()?;
        let mut spec = self.spec.clone();
        spec.corruption = Some(Corruption { kind, severity });
        Ok(Dataset { spec, samples })
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestRow {
                sample_id: i,
                class: s.class_id,
                domain: s.domain,
                spurious_tag: s.spurious.tag(),
                seed: s.sample_seed,
            })
            .collect()
    }

    /// Writes `manifest.csv` and `pixels.f32` (little-endian, samples in
    /// manifest order) into `dir`, plus one PNG per sample under `png/`
    /// when `png` is set.
    pub fn export(&self, dir: &Path, png: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("manifest.csv"))?;
        for row in self.manifest() {
            w.serialize(row)?;
        }
        w.flush()?;
        let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join("pixels.f32"))?);
        for s in &self.samples {
            for v in &s.pixels {
                blob.write_all(&v.to_le_bytes())?;
            }
        }
        blob.flush()?;
        if png {
            let pdir = dir.join("png");
            std::fs::create_dir_all(&pdir)?;
            for (i, s) in self.samples.iter().enumerate() {
                write_png(&pdir.join(format!("{i:05}_c{}.png", s.class_id)), &s.pixels)?;
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn read_pixel_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_png(path: &Path, pixels: &[f32]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, SIDE as u32, SIDE as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_image_data(&bytes)?;
    Ok(())
}
