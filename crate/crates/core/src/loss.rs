//! Class-balanced hierarchical loss.
//!
//! Each level contributes `w(l)^T E(y*, y(l))`, where `E` is the per-class
//! BCE vector and `w(l)` a binary gate. A positive class is always gated
//! in; a negative class is gated in at level `l` only if its prediction
//! exceeds `epsilon` there *and* it is gated in at every higher level. Once
//! a class is switched off at some level it stays off for all finer levels.
//!
//! Levels are indexed finest first (`0`) to top (`L - 1`), matching the
//! pyramid. All arithmetic runs in f64.

use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before the log.
pub const CLAMP: f64 = 1e-7;
pub const DEFAULT_EPSILON: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Plain,
    Balanced,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Plain => "plain",
            LossKind::Balanced => "balanced",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LossKind::Plain),
            "balanced" => Ok(LossKind::Balanced),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Per-level predictions of a mini-batch: `levels x batch x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredictions {
    levels: usize,
    batch: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LevelPredictions {
    pub fn new(levels: usize, batch: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != levels * batch * classes {
            bail!(
                Shape,
                "{} predictions for {} levels x {} samples x {} classes",
                data.len(),
                levels,
                batch,
                classes
            );
        }
        Ok(Self {
            levels,
            batch,
            classes,
            data,
        })
    }

    /// From per-level `batch x classes` rows.
    pub fn from_levels(levels: &[Vec<f32>], classes: usize) -> Result<Self> {
        let batch = levels.first().map_or(0, |l| l.len() / classes.max(1));
        let data = levels.iter().flatten().map(|v| *v as f64).collect();
        Self::new(levels.len(), batch, classes, data)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Level-major, then sample, then class.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, level: usize, sample: usize) -> &[f64] {
        let off = (level * self.batch + sample) * self.classes;
        &self.data[off..off + self.classes]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..self.clone()
        }
    }
}

/// Binary loss weights of one sample, `levels x classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateMask {
    levels: usize,
    classes: usize,
    on: Vec<bool>,
}

impl GateMask {
    pub fn all_on(levels: usize, classes: usize) -> Self {
        Self {
            levels,
            classes,
            on: vec![true; levels * classes],
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn get(&self, level: usize, class: usize) -> bool {
        self.on[level * self.classes + class]
    }

    pub fn level(&self, level: usize) -> &[bool] {
        &self.on[level * self.classes..(level + 1) * self.classes]
    }

    /// Number of active (level, class) pairs.
    pub fn active(&self) -> usize {
        self.on.iter().filter(|v| **v).count()
    }
}

/// Gates for one sample. `predictions[l]` is the level-`l` score vector,
/// finest level first.
pub fn compute_gates(y_star: &[u8], predictions: &[&[f64]], epsilon: f64) -> GateMask {
    let levels = predictions.len();
    let classes = y_star.len();
    let mut on = vec![false; levels * classes];
    for c in 0..classes {
        let mut above = true;
        for l in (0..levels).rev() {
            let local = y_star[c] == 1 || predictions[l][c] > epsilon;
            above = above && local;
            on[l * classes + c] = above;
        }
    }
    GateMask {
        levels,
        classes,
        on,
    }
}

/// Gates for every sample of a batch.
pub fn batch_gates(labels: &[&[u8]], predictions: &LevelPredictions, epsilon: f64) -> Vec<GateMask> {
    labels
        .iter()
        .enumerate()
        .map(|(n, y)| {
            let rows: Vec<&[f64]> = (0..predictions.levels()).map(|l| predictions.row(l, n)).collect();
            compute_gates(y, &rows, epsilon)
        })
        .collect()
}

/// Per-class BCE vector `E(y*, y)`.
pub fn loss_vector(y_star: &[u8], prediction: &[f64]) -> Vec<f64> {
    y_star
        .iter()
        .zip(prediction)
        .map(|(y, p)| bce(*y, *p))
        .collect()
}

fn bce(y: u8, p: f64) -> f64 {
    let p = p.clamp(CLAMP, 1.0 - CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn check(labels: &[&[u8]], predictions: &LevelPredictions, gates: &[GateMask]) -> Result<()> {
    if labels.len() != predictions.batch() || gates.len() != predictions.batch() {
        bail!(
            Shape,
            "{} label rows, {} gate masks, {} predicted samples",
            labels.len(),
            gates.len(),
            predictions.batch()
        );
    }
    if labels.iter().any(|y| y.len() != predictions.classes()) {
        bail!(Shape, "label width differs from {} classes", predictions.classes());
    }
    if gates.iter().any(|g| g.levels != predictions.levels() || g.classes != predictions.classes()) {
        bail!(Shape, "gate mask shape differs from predictions");
    }
    if predictions.batch() == 0 || predictions.levels() == 0 {
        bail!(Shape, "empty batch");
    }
    Ok(())
}

/// `(1/B) sum_n (1/L) sum_l w(l)^T E(y*, y(l))`.
pub fn chr_loss(labels: &[&[u8]], predictions: &LevelPredictions, gates: &[GateMask]) -> Result<f64> {
    check(labels, predictions, gates)?;
    let (b, l) = (predictions.batch(), predictions.levels());
    let mut total = 0.0;
    for (n, y) in labels.iter().enumerate() {
        let mut per_sample = 0.0;
        for lv in 0..l {
            let e = loss_vector(y, predictions.row(lv, n));
            per_sample += e
                .iter()
                .zip(gates[n].level(lv))
                .filter(|(_, on)| **on)
                .map(|(v, _)| v)
                .sum::<f64>();
        }
        total += per_sample / l as f64;
    }
    Ok(total / b as f64)
}

/// Ungated BCE over all levels.
pub fn plain_bce_loss(labels: &[&[u8]], predictions: &LevelPredictions) -> Result<f64> {
    let gates = vec![GateMask::all_on(predictions.levels(), predictions.classes()); predictions.batch()];
    chr_loss(labels, predictions, &gates)
}

/// Loss and its gradient with respect to the pre-sigmoid logits, gates held
/// fixed. The gradient has the same layout as `logits`.
pub fn loss_and_logit_grad(
    labels: &[&[u8]],
    logits: &LevelPredictions,
    gates: &[GateMask],
) -> Result<(f64, LevelPredictions)> {
    let probs = logits.map(sigmoid64);
    let loss = chr_loss(labels, &probs, gates)?;
    let (b, l, k) = (logits.batch(), logits.levels(), logits.classes());
    let scale = 1.0 / (b as f64 * l as f64);
    let mut grad = vec![0.0; logits.data.len()];
    for lv in 0..l {
        for n in 0..b {
            let off = (lv * b + n) * k;
            for c in 0..k {
                if !gates[n].get(lv, c) {
                    continue;
                }
                let p = probs.data[off + c];
                if p <= CLAMP || p >= 1.0 - CLAMP {
                    // clamped region is flat
                    continue;
                }
                grad[off + c] = scale * (p - labels[n][c] as f64);
            }
        }
    }
    Ok((loss, LevelPredictions::new(l, b, k, grad)?))
}

pub fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
