//! Backbone plus head, wired per variant.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneConfig};
use crate::datamodel::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::head::{ChrHead, HeadCache, HeadConfig, HeadOutput, DEFAULT_HEAD_WIDTH};
use crate::loss::LossKind;
use crate::nn::{Buffer, Param, Tensor};

/// Ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// One classifier on the top tap, plain BCE.
    #[serde(rename = "baseline")]
    Baseline,
    H,
    HR,
    CH,
    CHR,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::H,
        Variant::CH,
        Variant::HR,
        Variant::CHR,
    ];

    pub fn refine(self) -> bool {
        matches!(self, Variant::HR | Variant::CHR)
    }

    pub fn hierarchical(self) -> bool {
        self != Variant::Baseline
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Variant::CH | Variant::CHR => LossKind::Balanced,
            _ => LossKind::Plain,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::H => "H",
            Variant::HR => "HR",
            Variant::CH => "CH",
            Variant::CHR => "CHR",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "H" | "h" => Ok(Variant::H),
            "HR" | "hr" => Ok(Variant::HR),
            "CH" | "ch" => Ok(Variant::CH),
            "CHR" | "chr" => Ok(Variant::CHR),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (baseline, H, HR, CH, CHR)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CHR,
            backbone: BackboneConfig::default(),
            head_width: DEFAULT_HEAD_WIDTH,
        }
    }
}

impl ModelConfig {
    pub fn head_config(&self) -> HeadConfig {
        let taps = self.backbone.tap_channels();
        let tap_channels = if self.variant.hierarchical() {
            taps
        } else {
            vec![*taps.last().expect("validated")]
        };
        HeadConfig {
            tap_channels,
            width: self.head_width,
            refine: self.variant.refine(),
            classes: NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    backbone: BackboneCache,
    head: HeadCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub backbone: Backbone,
    pub head: ChrHead,
}

impl Model {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), &mut rng)?;
        let head = ChrHead::new(config.head_config(), &mut rng)?;
        Ok(Self {
            config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.head.levels()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        let mut b = self.backbone.buffers();
        b.extend(self.head.buffers());
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut b = self.backbone.buffers_mut();
        b.extend(self.head.buffers_mut());
        b
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn head_input(&self, mut pyramid: Vec<Tensor>) -> Vec<Tensor> {
        if self.config.variant.hierarchical() {
            pyramid
        } else {
            vec![pyramid.pop().expect("at least one tap")]
        }
    }

    pub fn forward(&self, images: &Tensor, train: bool, keep: bool) -> Result<(HeadOutput, Option<ModelCache>)> {
        let (pyramid, bc) = self.backbone.forward(images, train, keep)?;
        let (out, hc) = self.head.forward(&self.head_input(pyramid), train, keep)?;
        let cache = match (bc, hc) {
            (Some(backbone), Some(head)) => Some(ModelCache { backbone, head }),
            _ => None,
        };
        Ok((out, cache))
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running(&mut self, cache: &ModelCache) {
        self.backbone.update_running(&cache.backbone);
        self.head.update_running(&cache.head);
    }

    /// Accumulates parameter gradients from per-level logit gradients.
    pub fn backward(&mut self, cache: &ModelCache, dlogits: &[Vec<f32>]) {
        let head_grads = self.head.backward(&cache.head, dlogits);
        let taps = self.config.backbone.levels();
        let tap_grads = if self.config.variant.hierarchical() {
            head_grads
        } else {
            let mut g = vec![None; taps];
            g[taps - 1] = head_grads.into_iter().next().flatten();
            g
        };
        self.backbone.backward(&cache.backbone, tap_grads, false);
    }
}
