// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic shape scenes with analytically exact concept annotations.
//!
//! Each 32×32 RGB image holds one or two filled shapes on a flat background.
//! The class label is the kind of the dominant (largest) shape; a second,
//! smaller shape has the same kind but its own color. Every
//! concept's existence score and pixel mask is computed from the scene
//! description, so annotations carry no labeling noise.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const IMAGE_SHAPE: [usize; 3] = [3, CANVAS, CANVAS];

/// Concept vocabulary, in annotation order.
pub const VOCABULARY: [&str; 9] = [
    "circle",
    "square",
    "triangle",
    "red-object",
    "green-object",
    "blue-object",
    "large-object",
    "two-objects",
    "textured-background",
];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];

/// Index of the never-present concept.
pub const TEXTURED_BACKGROUND: usize = 8;
/// Side length at or above which a shape counts as large.
pub const LARGE_SIDE: usize = 26;

/// Background colors, indexed by `SceneSpec::background`. None of them is
/// close to a shape color.
const BACKGROUND_PALETTE: [[f32; 3]; 8] = [
    [0.05, 0.05, 0.05],
    [0.95, 0.95, 0.95],
    [0.95, 0.90, 0.15],
    [0.15, 0.90, 0.90],
    [0.90, 0.20, 0.90],
    [0.95, 0.60, 0.10],
    [0.50, 0.50, 0.50],
    [0.05, 0.45, 0.45],
];
const PIXEL_NOISE: f32 = 0.06;
const MAX_OVERLAP: f32 = 0.1;

pub fn vocabulary() -> Vec<String> {
    VOCABULARY.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether local pixel `(x, y)` of a `side`-wide bounding box is covered.
    fn covers(self, side: usize, x: usize, y: usize) -> bool {
        let s = side as f32;
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let c = s / 2.0;
                (fx - c) * (fx - c) + (fy - c) * (fy - c) <= c * c
            }
            ShapeKind::Triangle => (fx - s / 2.0).abs() <= fy / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn index(self) -> usize {
        self as usize
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.85, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    /// Bounding-box side length in pixels.
    pub side: usize,
    /// Top-left corner of the bounding box.
    pub x: usize,
    pub y: usize,
}

impl ShapeSpec {
    /// Pixels inside the shape, ignoring occlusion.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let mut m = vec![false; CANVAS * CANVAS];
        for dy in 0..self.side {
            for dx in 0..self.side {
                if self.kind.covers(self.side, dx, dy) {
                    m[(self.y + dy) * CANVAS + self.x + dx] = true;
                }
            }
        }
        m
    }
}

/// Scene description. `shapes[0]` is the dominant shape and is painted
/// first; later shapes are painted on top of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: u8,
    pub shapes: Vec<ShapeSpec>,
}

impl SceneSpec {
    pub fn label(&self) -> usize {
        self.shapes[0].kind.index()
    }

    /// Visible pixel mask of every shape after occlusion.
    pub fn visible_masks(&self) -> Vec<Vec<bool>> {
        let raw: Vec<Vec<bool>> = self.shapes.iter().map(ShapeSpec::pixel_mask).collect();
        (0..raw.len())
            .map(|i| {
                (0..CANVAS * CANVAS)
                    .map(|p| raw[i][p] && !raw[i + 1..].iter().any(|r| r[p]))
                    .collect()
            })
            .collect()
    }

    pub fn foreground(&self) -> Vec<bool> {
        let masks = self.visible_masks();
        (0..CANVAS * CANVAS)
            .map(|p| masks.iter().any(|m| m[p]))
            .collect()
    }

    /// Existence scores and raw full-resolution masks for every concept.
    pub fn concept_truth(&self) -> (Vec<f32>, Vec<Vec<f32>>) {
        let visible = self.visible_masks();
        let n = VOCABULARY.len();
        let mut scores = vec![0.0f32; n];
        let mut masks = vec![vec![0.0f32; CANVAS * CANVAS]; n];
        let mut mark = |concept: usize, shape_mask: &[bool], scores: &mut [f32]| {
            scores[concept] = 1.0;
            for (dst, &on) in masks[concept].iter_mut().zip(shape_mask) {
                if on {
                    *dst = 1.0;
                }
            }
        };
        for (shape, vis) in self.shapes.iter().zip(&visible) {
            mark(shape.kind.index(), vis, &mut scores);
            mark(3 + shape.color.index(), vis, &mut scores);
            if shape.side >= LARGE_SIDE {
                mark(6, vis, &mut scores);
            }
            if self.shapes.len() == 2 {
                mark(7, vis, &mut scores);
            }
        }
        (scores, masks)
    }

    pub fn render(&self, rng: &mut impl Rng) -> Tensor<f32> {
        let bg = BACKGROUND_PALETTE[self.background as usize % BACKGROUND_PALETTE.len()];
        let plane = CANVAS * CANVAS;
        let mut img: Vec<f32> = bg.iter().flat_map(|&v| core::iter::repeat_n(v, plane)).collect();
        for (shape, vis) in self.shapes.iter().zip(self.visible_masks()) {
            let rgb = shape.color.rgb();
            for p in (0..plane).filter(|&p| vis[p]) {
                for c in 0..3 {
                    img[c * plane + p] = rgb[c];
                }
            }
        }
        for v in img.iter_mut() {
            let noise: f32 = rng.random_range(-PIXEL_NOISE..=PIXEL_NOISE);
            *v = (*v + noise).clamp(0.0, 1.0);
        }
        Tensor::new(&IMAGE_SHAPE, img).expect("image shape")
    }
}

/// Existence scores plus masks at one mask resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptAnnotation {
    /// `S`, one score per concept in `[0, 1]`.
    pub scores: Vec<f32>,
    /// `M`, shape `[n, d_s]`.
    pub masks: Tensor<f32>,
}

impl ConceptAnnotation {
    /// Build an annotation, applying the fusion rule to every mask.
    pub fn fused(scores: Vec<f32>, masks: Tensor<f32>) -> Result<Self> {
        let s = masks.shape();
        if s.len() != 2 || s[0] != scores.len() {
            return Err(shape_err(
                "annotation",
                format!("{} scores vs masks {:?}", scores.len(), s),
            ));
        }
        if let Some(v) = scores.iter().chain(masks.data()).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("annotation value {v} outside [0, 1]")));
        }
        let d = s[1];
        let mut masks = masks;
        for (i, &si) in scores.iter().enumerate() {
            let fused = fuse_annotation(si, &masks.data()[i * d..(i + 1) * d]);
            masks.data_mut()[i * d..(i + 1) * d].copy_from_slice(&fused);
        }
        Ok(Self { scores, masks })
    }

    pub fn num_concepts(&self) -> usize {
        self.scores.len()
    }

    pub fn mask_len(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn mask(&self, concept: usize) -> &[f32] {
        let d = self.mask_len();
        &self.masks.data()[concept * d..(concept + 1) * d]
    }
}

/// Suppress the mask of an absent concept; keep it untouched otherwise.
pub fn fuse_annotation(existence: f32, raw_mask: &[f32]) -> Vec<f32> {
    if existence <= 0.0 {
        vec![0.0; raw_mask.len()]
    } else {
        raw_mask.to_vec()
    }
}

/// Area-average an `h×w` pixel mask onto a `grid×grid` cell mask.
pub fn downsample_mask(pixel_mask: &[f32], h: usize, w: usize, grid: usize) -> Result<Vec<f32>> {
    if pixel_mask.len() != h * w {
        return Err(shape_err("downsample_mask", format!("{} values for {h}x{w}", pixel_mask.len())));
    }
    if grid == 0 || !h.is_multiple_of(grid) || !w.is_multiple_of(grid) {
        return Err(shape_err(
            "downsample_mask",
            format!("grid {grid} does not divide {h}x{w}"),
        ));
    }
    let (bh, bw) = (h / grid, w / grid);
    let area = (bh * bw) as f32;
    let mut out = vec![0.0f32; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut acc = 0.0f32;
            for y in gy * bh..(gy + 1) * bh {
                acc += pixel_mask[y * w + gx * bw..y * w + (gx + 1) * bw].iter().sum::<f32>();
            }
            out[gy * grid + gx] = acc / area;
        }
    }
    Ok(out)
}

/// Binary foreground/background partition at one grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub foreground: Vec<bool>,
    pub background: Vec<bool>,
}

impl RegionMasks {
    /// A cell is foreground when any of its pixels is.
    pub fn from_pixels(fg: &[bool], grid: usize) -> Result<Self> {
        let px: Vec<f32> = fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let cells = downsample_mask(&px, CANVAS, CANVAS, grid)?;
        let foreground: Vec<bool> = cells.iter().map(|&c| c > 0.0).collect();
        let background = foreground.iter().map(|&f| !f).collect();
        Ok(Self {
            foreground,
            background,
        })
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub image: Tensor<f32>,
    pub label: usize,
    /// Generating scene; `None` for imported annotations.
    pub scene: Option<SceneSpec>,
    /// Pixel-level object mask used for the foreground/background split.
    pub foreground: Vec<bool>,
    /// Fused existence scores.
    pub scores: Vec<f32>,
    /// Fused full-resolution masks, `[n, 32·32]`.
    pub pixel_masks: Tensor<f32>,
}

impl Sample {
    /// Annotation at a `grid×grid` mask resolution.
    pub fn annotation(&self, grid: usize) -> Result<ConceptAnnotation> {
        let n = self.scores.len();
        let plane = CANVAS * CANVAS;
        let mut masks = Vec::with_capacity(n * grid * grid);
        for i in 0..n {
            let px = &self.pixel_masks.data()[i * plane..(i + 1) * plane];
            masks.extend(downsample_mask(px, CANVAS, CANVAS, grid)?);
        }
        ConceptAnnotation::fused(self.scores.clone(), Tensor::new(&[n, grid * grid], masks)?)
    }

    pub fn regions(&self, grid: usize) -> Result<RegionMasks> {
        RegionMasks::from_pixels(&self.foreground, grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Deterministic split: the first `train` fraction and the rest.
    pub fn split(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let cut = libm::round((self.len() as f64) * train_fraction) as usize;
        let cut = cut.min(self.len());
        ((0..cut).collect(), (cut..self.len()).collect())
    }

    /// Stack images `ids` into a `[B, 3, 32, 32]` batch.
    pub fn batch(&self, ids: &[usize]) -> Tensor<f32> {
        let items: Vec<&Tensor<f32>> = ids.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&items).expect("images share a shape")
    }
}

/// SplitMix64 finalizer, used to derive independent per-index seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_scene(rng: &mut impl Rng) -> SceneSpec {
    let kind = ShapeKind::ALL[rng.random_range(0..3)];
    let color = Color::ALL[rng.random_range(0..3)];
    let side = if rng.random_bool(0.5) {
        rng.random_range(20..=22)
    } else {
        rng.random_range(LARGE_SIDE..=28)
    };
    let dominant = ShapeSpec {
        kind,
        color,
        side,
        x: rng.random_range(0..=CANVAS - side),
        y: rng.random_range(0..=CANVAS - side),
    };
    let mut shapes = vec![dominant];
    if rng.random_bool(0.5) {
        let small_side = rng.random_range(15..=18);
        let dom_mask = dominant.pixel_mask();
        for _ in 0..64 {
            let cand = ShapeSpec {
                kind,
                color: Color::ALL[rng.random_range(0..3)],
                side: small_side,
                x: rng.random_range(0..=CANVAS - small_side),
                y: rng.random_range(0..=CANVAS - small_side),
            };
            let m = cand.pixel_mask();
            let area = m.iter().filter(|&&b| b).count();
            let overlap = m.iter().zip(&dom_mask).filter(|(&a, &b)| a && b).count();
            if (overlap as f32) <= MAX_OVERLAP * area as f32 {
                shapes.push(cand);
                break;
            }
        }
    }
    SceneSpec {
        background: rng.random_range(0..BACKGROUND_PALETTE.len() as u8),
        shapes,
    }
}

pub fn generate_sample(seed: u64, id: u32) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id as u64));
    let scene = sample_scene(&mut rng);
    let image = scene.render(&mut rng);
    let (scores, raw) = scene.concept_truth();
    let n = scores.len();
    let mut masks = Vec::with_capacity(n * CANVAS * CANVAS);
    for (s, m) in scores.iter().zip(&raw) {
        masks.extend(fuse_annotation(*s, m));
    }
    Sample {
        id,
        image,
        label: scene.label(),
        foreground: scene.foreground(),
        scene: Some(scene),
        scores,
        pixel_masks: Tensor::new(&[n, CANVAS * CANVAS], masks).expect("mask shape"),
    }
}

/// Generate `size` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(seed: u64, size: usize) -> Dataset {
    Dataset {
        vocabulary: vocabulary(),
        samples: (0..size as u32).map(|i| generate_sample(seed, i)).collect(),
    }
}
