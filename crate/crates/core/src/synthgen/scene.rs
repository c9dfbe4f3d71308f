use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::glyph::{render_glyph, GlyphLibrary, RenderedGlyph};
use crate::datamodel::{BBox, Image, LabelVector, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMode {
    /// `clamp(background + sum of sub-images, 0, 1)`.
    #[default]
    Additive,
    /// `1 - prod(1 - layer)` per channel, background included.
    Attenuation,
}

impl fmt::Display for CompositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositionMode::Additive => "additive",
            CompositionMode::Attenuation => "attenuation",
        })
    }
}

impl FromStr for CompositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(CompositionMode::Additive),
            "attenuation" => Ok(CompositionMode::Attenuation),
            other => Err(Error::Config(format!("unknown composition mode {other:?}"))),
        }
    }
}

/// A background canvas plus the sub-images placed on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub canvas: Image,
    pub items: Vec<RenderedGlyph>,
    pub mode: CompositionMode,
}

impl Scene {
    pub fn new(canvas: Image, mode: CompositionMode) -> Self {
        Self {
            canvas,
            items: Vec::new(),
            mode,
        }
    }

    /// Labels over the prohibited classes: set iff an item of that class
    /// was placed.
    pub fn labels(&self) -> LabelVector {
        LabelVector::from_classes(
            self.items
                .iter()
                .filter(|g| g.class_id < NUM_CLASSES)
                .map(|g| g.class_id),
        )
    }

    /// Boxes of every placed prohibited item, in placement order.
    pub fn bboxes(&self) -> Vec<BBox> {
        self.items
            .iter()
            .filter(|g| g.class_id < NUM_CLASSES)
            .map(|g| g.bbox)
            .collect()
    }
}

/// Composes the scene into a single image.
///
/// Per-pixel terms are combined in sorted order, so the result does not
/// depend on item order even under floating-point rounding.
pub fn compose(scene: &Scene) -> Image {
    let mut out = scene.canvas.clone();
    if scene.items.is_empty() {
        return out;
    }
    let mut terms: Vec<f32> = Vec::with_capacity(scene.items.len() + 1);
    let n = out.data().len();
    for i in 0..n {
        terms.clear();
        terms.push(scene.canvas.data()[i]);
        terms.extend(
            scene
                .items
                .iter()
                .map(|g| g.image.data()[i])
                .filter(|v| *v != 0.0),
        );
        let v = if terms.len() == 1 {
            terms[0]
        } else {
            terms.sort_by(f32::total_cmp);
            match scene.mode {
                CompositionMode::Additive => terms.iter().sum::<f32>(),
                CompositionMode::Attenuation => {
                    1.0 - terms.iter().map(|t| 1.0 - t).product::<f32>()
                }
            }
        };
        out.data_mut()[i] = v.clamp(0.0, 1.0);
    }
    out
}

/// Low-amplitude colored noise plus up to three soft blobs.
pub fn background<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image {
    let mut img = Image::zeros(height, width);
    for v in img.data_mut() {
        *v = rng.random_range(0.0..0.05f32);
    }
    let blobs = rng.random_range(0..=3usize);
    let scale = height.max(width) as f32;
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..height.max(1) as f32);
        let cx = rng.random_range(0.0..width.max(1) as f32);
        let sigma = rng.random_range(0.15..0.3f32) * scale;
        let amp = rng.random_range(0.04..0.12f32);
        let color: [f32; 3] = [
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
        ];
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in 0..height {
            for c in 0..width {
                let d2 = (r as f32 + 0.5 - cy).powi(2) + (c as f32 + 0.5 - cx).powi(2);
                let w = amp * (-d2 * inv).exp();
                for (ch, col) in color.iter().enumerate() {
                    let v = img.get(r, c, ch) + w * col;
                    img.set(r, c, ch, v);
                }
            }
        }
    }
    img
}

/// Draws a scene: 1-3 prohibited glyphs for positives (classes uniform,
/// with replacement) and 2-6 clutter glyphs for everyone.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    library: &GlyphLibrary,
    canvas: usize,
    positive: bool,
    mode: CompositionMode,
) -> Result<Scene> {
    let mut scene = Scene::new(background(rng, canvas, canvas), mode);
    if positive {
        let k = rng.random_range(1..=3usize);
        for _ in 0..k {
            let spec = &library.prohibited[rng.random_range(0..library.prohibited.len())];
            scene.items.push(render_glyph(spec, rng, canvas, canvas)?);
        }
    }
    let k = rng.random_range(2..=6usize);
    for _ in 0..k {
        let spec = &library.clutter[rng.random_range(0..library.clutter.len())];
        scene.items.push(render_glyph(spec, rng, canvas, canvas)?);
    }
    // Stacking order is random; additive composition ignores it anyway.
    for i in (1..scene.items.len()).rev() {
        let j = rng.random_range(0..=i);
        scene.items.swap(i, j);
    }
    Ok(scene)
}
