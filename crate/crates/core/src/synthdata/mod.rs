//! Reproducible synthetic segmentation scenes: colored rectangles, disks
//! and triangles over a textured background.
//!
//! Each sample is generated from a 64-bit seed with ChaCha8; per-sample
//! seeds in a dataset come from [`mix_seed`].

pub(crate) mod format;

pub use format::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Class 0 is background.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Half-extent of a shape in pixels, `[min, max]`.
    pub size_range: [f32; 2],
    /// Per-instance color jitter amplitude, in `[0, 0.2]`.
    pub jitter: f32,
    pub noise_sigma: f32,
    /// Amplitude of the sinusoidal background texture.
    pub texture: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 4,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle],
            size_range: [3.0, 7.0],
            jitter: 0.15,
            noise_sigma: 0.08,
            texture: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.channels != 3 {
            return bad(format!("scenes are RGB, got {} channels", self.channels));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return bad(format!("num_classes must be in 2..=65535, got {}", self.num_classes));
        }
        if self.min_shapes > self.max_shapes {
            return bad(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_shapes > 0 && self.kinds.is_empty() {
            return bad("at least one shape kind is required".into());
        }
        let mut distinct = self.kinds.clone();
        distinct.sort_by_key(|k| *k as u8);
        distinct.dedup();
        if self.num_classes - 1 < distinct.len() {
            return bad(format!(
                "{} foreground classes cannot cover {} shape kinds",
                self.num_classes - 1,
                distinct.len()
            ));
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0, 0.2], got {}", self.jitter));
        }
        if !(self.noise_sigma >= 0.0) || !(self.texture >= 0.0) {
            return bad("noise_sigma and texture must be non-negative".into());
        }
        if !(self.size_range[0] > 0.0 && self.size_range[0] <= self.size_range[1]) {
            return bad(format!("invalid size_range {:?}", self.size_range));
        }
        Ok(())
    }

    /// Shape kind drawn for a foreground class.
    pub fn kind_for_class(&self, class: u16) -> ShapeKind {
        self.kinds[(class as usize - 1) % self.kinds.len()]
    }
}

/// Per-pixel class indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::shape(
                "label map",
                format!("{} entries for {height}x{width}", classes.len()),
            ));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Self {
        Self {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn max_class(&self) -> u16 {
        self.classes.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of all pixels carrying each class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &c in &s.labels.classes {
                counts[c as usize] += 1;
            }
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// SplitMix64 finalizer applied to `seed + (index + 1) * golden_gamma`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Base RGB color of a class. Class 0 has no fixed color (textured background).
pub fn class_color(class: u16) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 6] = [
        [0.80, 0.30, 0.30],
        [0.30, 0.75, 0.35],
        [0.30, 0.40, 0.85],
        [0.85, 0.80, 0.25],
        [0.75, 0.30, 0.80],
        [0.25, 0.80, 0.80],
    ];
    let i = (class as usize).saturating_sub(1);
    if i < PALETTE.len() {
        return PALETTE[i];
    }
    // beyond the palette: deterministic hashed colors
    let h = mix_seed(0xC010_0125, i as u64);
    let ch = |shift: u32| 0.2 + 0.65 * ((h >> shift) & 0xFF) as f32 / 255.0;
    [ch(0), ch(8), ch(16)]
}

struct Shape {
    kind: ShapeKind,
    class: u16,
    cx: f32,
    cy: f32,
    /// half-width / radius
    a: f32,
    /// half-height (rectangles)
    b: f32,
    angle: f32,
    color: [f32; 3],
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Disk => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Triangle => {
                let v: Vec<(f32, f32)> = (0..3)
                    .map(|k| {
                        let t = self.angle + k as f32 * 2.0 * PI / 3.0;
                        (self.cx + self.a * t.cos(), self.cy + self.a * t.sin())
                    })
                    .collect();
                let edge = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let d0 = edge(v[0], v[1]);
                let d1 = edge(v[1], v[2]);
                let d2 = edge(v[2], v[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

pub fn generate_sample(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let plane = h * w;

    // background: gray base plus one low-frequency sinusoid per channel
    let mut image = vec![0.0f32; c * plane];
    let base: f32 = rng.gen_range(0.42..0.58);
    for ch in 0..c {
        let fx: f32 = rng.gen_range(0.1..0.6);
        let fy: f32 = rng.gen_range(0.1..0.6);
        let phase: f32 = rng.gen_range(0.0..2.0 * PI);
        for y in 0..h {
            for x in 0..w {
                image[ch * plane + y * w + x] = base + spec.texture * (fx * x as f32 + fy * y as f32 + phase).sin();
            }
        }
    }

    let mut labels = vec![0u16; plane];
    let count = if spec.max_shapes == 0 {
        0
    } else {
        rng.gen_range(spec.min_shapes..=spec.max_shapes)
    };
    let [smin, smax] = spec.size_range;
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let class = rng.gen_range(1..spec.num_classes as u16);
            let kind = spec.kind_for_class(class);
            let a = rng.gen_range(smin..=smax);
            let b = if kind == ShapeKind::Rectangle {
                rng.gen_range(smin..=smax)
            } else {
                a
            };
            let cx = rng.gen_range(0.0..w as f32);
            let cy = rng.gen_range(0.0..h as f32);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let base = class_color(class);
            let mut color = [0.0; 3];
            for (k, v) in color.iter_mut().enumerate() {
                let j = if spec.jitter > 0.0 {
                    rng.gen_range(-spec.jitter..=spec.jitter)
                } else {
                    0.0
                };
                *v = base[k % 3] + j;
            }
            Shape {
                kind,
                class,
                cx,
                cy,
                a,
                b,
                angle,
                color,
            }
        })
        .collect();

    // back to front: later shapes overwrite earlier ones
    for shape in &shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    labels[y * w + x] = shape.class;
                    for ch in 0..c {
                        image[ch * plane + y * w + x] = shape.color[ch % 3];
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma).expect("sigma validated");
        for v in &mut image {
            *v += noise.sample(&mut rng);
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Sample {
        image: Tensor::new(vec![c, h, w], image)?,
        labels: LabelMap::new(h, w, labels)?,
    })
}

pub fn generate_dataset(seed: u64, spec: &SceneSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("dataset size must be positive"));
    }
    spec.validate()?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| generate_sample(mix_seed(seed, i as u64), spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: spec.height,
        width: spec.width,
        channels: spec.channels,
        num_classes: spec.num_classes,
        samples,
    })
}
