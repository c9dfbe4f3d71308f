//! Small PNG plots drawn directly into an RGB buffer.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::datamodel::Image8;
use crate::error::{bail, Error, Result};
use crate::eval::pointing::upscale_bilinear;
use crate::head::Heatmap;

const SIZE: u32 = 320;
const MARGIN: u32 = 30;
const PALETTE: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [90, 90, 90],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        context: path.display().to_string(),
        source: e,
    })
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let (lo, hi) = (MARGIN, SIZE - MARGIN);
    for t in lo..=hi {
        for (x, y) in [(t, hi), (lo, t), (t, lo), (hi, t)] {
            img.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    img
}

/// Unit square to pixels, y up.
fn to_px(x: f64, y: f64) -> (i64, i64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    (
        MARGIN as i64 + (x.clamp(0.0, 1.0) * span).round() as i64,
        (SIZE - MARGIN) as i64 - (y.clamp(0.0, 1.0) * span).round() as i64,
    )
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn polyline(img: &mut RgbImage, pts: &[(f64, f64)], color: [u8; 3]) {
    for w in pts.windows(2) {
        line(img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), color);
    }
}

/// One curve per class: `(recall, precision)` points in rank order.
pub fn pr_curves(curves: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let mut img = canvas();
    for (i, c) in curves.iter().enumerate() {
        polyline(&mut img, c, PALETTE[i % PALETTE.len()]);
    }
    save(&img, path)
}

/// Gain (mAP difference) against log ratio, one series per entry.
pub fn gain_vs_ratio(series: &[Vec<(usize, f64)>], path: &Path) -> Result<()> {
    let all: Vec<&(usize, f64)> = series.iter().flatten().collect();
    if all.is_empty() {
        bail!(Data, "no points to plot");
    }
    let lx = |r: usize| (r.max(1) as f64).log10();
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(lx(p.0)), b.max(lx(p.0))));
    let (y0, y1) = all.iter().fold((0.0f64, 0.0f64), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let xs = if x1 > x0 { x1 - x0 } else { 1.0 };
    let ys = if y1 > y0 { y1 - y0 } else { 1.0 };
    let mut img = canvas();
    // zero line
    let zero = -y0 / ys;
    line(&mut img, to_px(0.0, zero), to_px(1.0, zero), [180, 180, 180]);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .iter()
            .map(|(r, g)| ((lx(*r) - x0) / xs, (g - y0) / ys))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        polyline(&mut img, &pts, color);
        for p in &pts {
            let (cx, cy) = to_px(p.0, p.1);
            for d in -2..=2 {
                line(&mut img, (cx - 2, cy + d), (cx + 2, cy + d), color);
            }
        }
    }
    save(&img, path)
}

/// Blends a min-max normalized class map over the image.
pub fn cam_overlay(image: &Image8, cam: &Heatmap, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let up = upscale_bilinear(cam, h, w);
    let lo = up.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = up.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        let t = (up.data[i] - lo) / span;
        let heat = [255.0 * t, 255.0 * (1.0 - (2.0 * t - 1.0).abs()), 255.0 * (1.0 - t)];
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (0.5 * px[c] as f32 + 0.5 * heat[c]).round().clamp(0.0, 255.0) as u8;
        }
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(out));
    }
    save(&img, path)
}
