//! Pointing-game localization from per-level class maps.

use serde::{Deserialize, Serialize};

use crate::datamodel::BBox;
use crate::head::Heatmap;

/// Bilinear resize with half-pixel centers (edges clamped).
pub fn upscale_bilinear(map: &Heatmap, height: usize, width: usize) -> Heatmap {
    let sy = map.height as f64 / height as f64;
    let sx = map.width as f64 / width as f64;
    let axis = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let (y0, y1, fy) = axis(r, sy, map.height);
        for c in 0..width {
            let (x0, x1, fx) = axis(c, sx, map.width);
            let top = map.get(y0, x0) as f64 * (1.0 - fx) + map.get(y0, x1) as f64 * fx;
            let bot = map.get(y1, x0) as f64 * (1.0 - fx) + map.get(y1, x1) as f64 * fx;
            data.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Heatmap {
        height,
        width,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Global argmax over already-upscaled maps; the first of equal values in
/// (level, row, col) order wins.
pub fn argmax(maps: &[Heatmap]) -> Option<Point> {
    let mut best: Option<(f32, Point)> = None;
    for (level, m) in maps.iter().enumerate() {
        for row in 0..m.height {
            for col in 0..m.width {
                let v = m.get(row, col);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, Point { level, row, col }));
                }
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointing {
    Hit(Point),
    Miss(Point),
    /// No box of the queried class.
    Excluded,
}

/// Upscales every level's map to `height x width`, takes the global peak,
/// and checks it against the boxes of `class`.
pub fn pointing_localize(
    cams: &[Heatmap],
    height: usize,
    width: usize,
    boxes: &[BBox],
    class: usize,
) -> Pointing {
    let targets: Vec<&BBox> = boxes.iter().filter(|b| b.class_id == class).collect();
    if targets.is_empty() {
        return Pointing::Excluded;
    }
    let up: Vec<Heatmap> = cams
        .iter()
        .map(|m| upscale_bilinear(m, height, width))
        .collect();
    let Some(p) = argmax(&up) else {
        return Pointing::Excluded;
    };
    if targets.iter().any(|b| b.contains(p.row, p.col)) {
        Pointing::Hit(p)
    } else {
        Pointing::Miss(p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointingTally {
    pub hits: usize,
    pub misses: usize,
    pub excluded: usize,
}

impl PointingTally {
    pub fn add(&mut self, p: Pointing) {
        match p {
            Pointing::Hit(_) => self.hits += 1,
            Pointing::Miss(_) => self.misses += 1,
            Pointing::Excluded => self.excluded += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.hits + self.misses;
        (n > 0).then(|| self.hits as f64 / n as f64)
    }
}
