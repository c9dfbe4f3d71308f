//! Parametric glyph library: each class is a shape family with a material
//! color, rasterized onto a zero canvas at a sampled pose.

use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Image, NUM_CLASSES};
use crate::error::{bail, Result};

const PLACEMENT_RETRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeFamily {
    // prohibited
    AngularL,
    Blade,
    OpenWrench,
    JawPair,
    CrossBlades,
    // clutter
    Block,
    Disc,
    Ring,
    Wire,
    Wedge,
    Mesh,
}

impl ShapeFamily {
    pub const PROHIBITED: [ShapeFamily; 5] = [
        ShapeFamily::AngularL,
        ShapeFamily::Blade,
        ShapeFamily::OpenWrench,
        ShapeFamily::JawPair,
        ShapeFamily::CrossBlades,
    ];

    pub const CLUTTER: [ShapeFamily; 6] = [
        ShapeFamily::Block,
        ShapeFamily::Disc,
        ShapeFamily::Ring,
        ShapeFamily::Wire,
        ShapeFamily::Wedge,
        ShapeFamily::Mesh,
    ];

    pub fn is_prohibited(self) -> bool {
        Self::PROHIBITED.contains(&self)
    }

    /// Membership test in glyph-local coordinates, `u` along the glyph's
    /// long axis and `v` across it, both nominally in `[-1, 1]`.
    pub fn contains(self, u: f32, v: f32) -> bool {
        if u.abs() >= 1.0 || v.abs() >= 1.0 {
            return false;
        }
        match self {
            ShapeFamily::AngularL => {
                let barrel = v > -0.75 && v < -0.35;
                let shift = 0.25 * (v + 0.35);
                let grip = v >= -0.35 && v < 0.85 && u > 0.40 + shift && u < 0.78 + shift;
                let guard = v >= -0.35 && v < 0.0 && u > 0.05 && u < 0.40 && (u - 0.05 < 0.08 || v > -0.08);
                barrel || grip || guard
            }
            ShapeFamily::Blade => {
                let blade = u < 0.3 && v.abs() < 0.24 * (u + 1.0) / 1.3 && v > -0.06;
                let bolster = u >= 0.3 && u < 0.4 && v.abs() < 0.26;
                let handle = u >= 0.4 && v.abs() < 0.15;
                blade || bolster || handle
            }
            ShapeFamily::OpenWrench => {
                let handle = u > -0.45 && v.abs() < 0.12;
                let (du, dv) = (u + 0.68, v);
                let r = (du * du + dv * dv).sqrt();
                let head = r < 0.32 && !(du < 0.02 && dv.abs() < 0.13);
                handle || head
            }
            ShapeFamily::JawPair => {
                let arm = |u0: f32, v0: f32, u1: f32, v1: f32, half: f32| {
                    segment_distance(u, v, u0, v0, u1, v1) < half
                };
                let handles = arm(-0.15, 0.0, 0.95, 0.5, 0.09) || arm(-0.15, 0.0, 0.95, -0.5, 0.09);
                let jaws = u > -0.95 && u < -0.15 && v.abs() < 0.14 && !(u < -0.55 && v.abs() < 0.03);
                let pivot = (u + 0.15).powi(2) + v * v < 0.17 * 0.17;
                handles || jaws || pivot
            }
            ShapeFamily::CrossBlades => {
                let blades = segment_distance(u, v, -0.95, -0.3, 0.25, 0.2) < 0.06
                    || segment_distance(u, v, -0.95, 0.3, 0.25, -0.2) < 0.06;
                let loop_at = |cu: f32, cv: f32| {
                    let r = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt();
                    r > 0.13 && r < 0.24
                };
                blades || loop_at(0.55, 0.3) || loop_at(0.55, -0.3)
            }
            ShapeFamily::Block => true,
            ShapeFamily::Disc => u * u + v * v < 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                r2 < 1.0 && r2 > 0.36
            }
            ShapeFamily::Wire => (v - 0.35 * (3.0 * u).sin()).abs() < 0.07,
            ShapeFamily::Wedge => u.abs() < (v + 1.0) * 0.5,
            ShapeFamily::Mesh => {
                let gu = ((u + 1.0) * 3.0).fract();
                let gv = ((v + 1.0) * 3.0).fract();
                gu < 0.25 || gv < 0.25
            }
        }
    }
}

fn segment_distance(u: f32, v: f32, u0: f32, v0: f32, u1: f32, v1: f32) -> f32 {
    let (du, dv) = (u1 - u0, v1 - v0);
    let t = (((u - u0) * du + (v - v0) * dv) / (du * du + dv * dv)).clamp(0.0, 1.0);
    let (pu, pv) = (u0 + t * du - u, v0 + t * dv - v);
    (pu * pu + pv * pv).sqrt()
}

/// Sampler for one class: shape family, material color and pose ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    /// Index in the full class space; `< NUM_CLASSES` for prohibited items.
    pub class_id: usize,
    pub family: ShapeFamily,
    pub base_color: [f32; 3],
    /// Per-channel uniform jitter applied to `base_color`.
    pub color_jitter: f32,
    /// Side of the glyph's square frame, pixels.
    pub size_range: (f32, f32),
    /// Radians.
    pub rotation_range: (f32, f32),
    pub opacity_range: (f32, f32),
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.opacity_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            bail!(Config, "opacity range ({lo}, {hi}) must lie in (0, 1]");
        }
        if !(self.size_range.0 >= 1.0 && self.size_range.0 <= self.size_range.1) {
            bail!(Config, "invalid size range {:?}", self.size_range);
        }
        if self.rotation_range.0 > self.rotation_range.1 {
            bail!(Config, "invalid rotation range {:?}", self.rotation_range);
        }
        if (self.class_id < NUM_CLASSES) != self.family.is_prohibited() {
            bail!(
                Config,
                "class {} cannot use family {:?}",
                self.class_id,
                self.family
            );
        }
        Ok(())
    }

    pub fn is_prohibited(&self) -> bool {
        self.class_id < NUM_CLASSES
    }

    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R, height: usize, width: usize) -> Pose {
        let size = uniform(rng, self.size_range);
        // Up to a quarter of the frame may hang off the canvas.
        let slack = 0.25 * size;
        let left = uniform(rng, (-slack, width as f32 - size + slack));
        let top = uniform(rng, (-slack, height as f32 - size + slack));
        let rotation = uniform(rng, self.rotation_range);
        let opacity = uniform(rng, self.opacity_range);
        let j = self.color_jitter;
        let color = self
            .base_color
            .map(|c| (c + uniform(rng, (-j, j))).clamp(0.0, 1.0));
        Pose {
            left,
            top,
            size,
            rotation,
            opacity,
            color,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Concrete placement of one glyph instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub left: f32,
    pub top: f32,
    pub size: f32,
    pub rotation: f32,
    pub opacity: f32,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedGlyph {
    pub class_id: usize,
    pub image: Image,
    pub opacity: f32,
    /// Tight bounds of the nonzero support.
    pub bbox: BBox,
}

/// Rasterizes a glyph at a fixed pose. Returns `None` when no pixel of the
/// glyph lands on the canvas.
pub fn rasterize(
    family: ShapeFamily,
    class_id: usize,
    pose: &Pose,
    height: usize,
    width: usize,
) -> Option<RenderedGlyph> {
    let mut image = Image::zeros(height, width);
    let half = pose.size * 0.5;
    let (cx, cy) = (pose.left + half, pose.top + half);
    let (sin, cos) = pose.rotation.sin_cos();
    let value = pose.color.map(|c| c * pose.opacity);

    // Rotated frame fits inside a circle of radius half * sqrt(2).
    let reach = half * std::f32::consts::SQRT_2 + 1.0;
    let r0 = ((cy - reach).floor().max(0.0)) as usize;
    let r1 = ((cy + reach).ceil().max(0.0) as usize).min(height);
    let c0 = ((cx - reach).floor().max(0.0)) as usize;
    let c1 = ((cx + reach).ceil().max(0.0) as usize).min(width);

    let (mut x_min, mut y_min, mut x_max, mut y_max) = (usize::MAX, usize::MAX, 0, 0);
    for row in r0..r1 {
        for col in c0..c1 {
            let dx = col as f32 + 0.5 - cx;
            let dy = row as f32 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / half;
            let v = (-dx * sin + dy * cos) / half;
            if family.contains(u, v) && value.iter().any(|c| *c > 0.0) {
                for (ch, c) in value.iter().enumerate() {
                    image.set(row, col, ch, *c);
                }
                x_min = x_min.min(col);
                y_min = y_min.min(row);
                x_max = x_max.max(col + 1);
                y_max = y_max.max(row + 1);
            }
        }
    }
    if x_min == usize::MAX {
        return None;
    }
    let bbox = BBox::new(
        x_min as u32,
        y_min as u32,
        x_max as u32,
        y_max as u32,
        class_id,
    )
    .expect("nonempty support");
    Some(RenderedGlyph {
        class_id,
        image,
        opacity: pose.opacity,
        bbox,
    })
}

/// Samples a pose and rasterizes it, re-sampling when the glyph misses the
/// canvas entirely.
pub fn render_glyph<R: Rng + ?Sized>(
    spec: &GlyphSpec,
    rng: &mut R,
    height: usize,
    width: usize,
) -> Result<RenderedGlyph> {
    spec.validate()?;
    for _ in 0..PLACEMENT_RETRIES {
        let pose = spec.sample_pose(rng, height, width);
        if let Some(g) = rasterize(spec.family, spec.class_id, &pose, height, width) {
            return Ok(g);
        }
    }
    bail!(
        Data,
        "class {} glyph fell outside a {}x{} canvas {} times",
        spec.class_id,
        height,
        width,
        PLACEMENT_RETRIES
    )
}

/// The default set of five prohibited and six clutter classes, scaled to
/// the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphLibrary {
    pub prohibited: Vec<GlyphSpec>,
    pub clutter: Vec<GlyphSpec>,
}

impl GlyphLibrary {
    pub fn for_canvas(canvas: usize) -> Self {
        let s = canvas as f32;
        let full_turn = (0.0, 2.0 * PI);
        // Metallic items share a blue pseudo-color; organics are orange and
        // mixed materials green.
        const METAL: [f32; 3] = [0.20, 0.40, 0.85];
        const ORGANIC: [f32; 3] = [0.85, 0.55, 0.20];
        const MIXED: [f32; 3] = [0.30, 0.75, 0.35];

        let prohibited = ShapeFamily::PROHIBITED
            .iter()
            .enumerate()
            .map(|(c, family)| GlyphSpec {
                class_id: c,
                family: *family,
                base_color: METAL,
                color_jitter: 0.08,
                size_range: (0.30 * s, 0.48 * s),
                rotation_range: full_turn,
                opacity_range: (0.55, 0.9),
            })
            .collect();

        let clutter_colors = [ORGANIC, MIXED, METAL, METAL, ORGANIC, MIXED];
        let clutter = ShapeFamily::CLUTTER
            .iter()
            .zip(clutter_colors)
            .enumerate()
            .map(|(i, (family, color))| GlyphSpec {
                class_id: NUM_CLASSES + i,
                family: *family,
                base_color: color,
                color_jitter: 0.1,
                size_range: (0.15 * s, 0.5 * s),
                rotation_range: full_turn,
                opacity_range: (0.25, 0.75),
            })
            .collect();

        Self {
            prohibited,
            clutter,
        }
    }

    /// Total class count `C`, prohibited plus clutter.
    pub fn num_classes(&self) -> usize {
        self.prohibited.len() + self.clutter.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prohibited.len() != NUM_CLASSES {
            bail!(
                Config,
                "library needs {} prohibited specs, has {}",
                NUM_CLASSES,
                self.prohibited.len()
            );
        }
        if self.clutter.is_empty() {
            bail!(Config, "library needs at least one clutter spec");
        }
        let mut families = std::collections::HashSet::new();
        for (c, spec) in self.prohibited.iter().enumerate() {
            spec.validate()?;
            if spec.class_id != c {
                bail!(Config, "prohibited spec {} has class id {}", c, spec.class_id);
            }
            if !families.insert(spec.family) {
                bail!(Config, "family {:?} used by two prohibited classes", spec.family);
            }
        }
        for spec in &self.clutter {
            spec.validate()?;
        }
        Ok(())
    }
}
