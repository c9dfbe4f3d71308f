//! Small convolutional feature extractor with `L` feature taps at halving
//! resolutions.
//!
//! Layout: a stride-2 stem, then `S` stages whose first block downsamples
//! by 2. Stage `s` therefore runs at stride `2^(s+2)`; with the default
//! 96x96 input and taps on stages 1..=3 the pyramid is 12x12, 6x6, 3x3.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, Record};
use crate::error::{bail, Result};
use crate::nn::{BlockCache, Buffer, ConvBnRelu, Param, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Square input side, pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Stage indices feeding the pyramid, finest first.
    pub taps: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            stem_channels: 16,
            stage_channels: vec![24, 32, 48, 64],
            blocks_per_stage: vec![1, 1, 1, 1],
            taps: vec![1, 2, 3],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage_channels.len();
        if s == 0 || self.blocks_per_stage.len() != s {
            bail!(
                Config,
                "{} stage widths but {} block counts",
                s,
                self.blocks_per_stage.len()
            );
        }
        if self.blocks_per_stage.iter().any(|b| *b == 0) || self.stem_channels == 0 {
            bail!(Config, "every stage needs at least one block");
        }
        if self.taps.len() < 2 || self.taps.len() > s {
            bail!(
                Config,
                "need between 2 and {} taps, got {}",
                s,
                self.taps.len()
            );
        }
        if self.taps.windows(2).any(|w| w[1] != w[0] + 1) || *self.taps.last().unwrap() >= s {
            bail!(
                Config,
                "taps {:?} must be consecutive stage indices below {}",
                self.taps,
                s
            );
        }
        let total_stride = 1usize << (s + 1);
        if self.input_size == 0 || self.input_size % total_stride != 0 {
            bail!(
                Config,
                "input size {} must be a positive multiple of {}",
                self.input_size,
                total_stride
            );
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.taps.len()
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_size >> (stage + 2)
    }

    /// `(side, channels)` of every tap, finest first.
    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        self.taps
            .iter()
            .map(|s| (self.stage_resolution(*s), self.stage_channels[*s]))
            .collect()
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps.iter().map(|s| self.stage_channels[*s]).collect()
    }

    /// Trainable parameter count: every 3x3 conv plus the scale and shift
    /// of its normalization.
    pub fn param_count(&self) -> usize {
        let block = |cin: usize, cout: usize| cin * cout * 9 + 2 * cout;
        let mut total = block(3, self.stem_channels);
        let mut cin = self.stem_channels;
        for (c, b) in self.stage_channels.iter().zip(&self.blocks_per_stage) {
            total += block(cin, *c) + (b - 1) * block(*c, *c);
            cin = *c;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBnRelu,
    stages: Vec<Vec<ConvBnRelu>>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    stem: BlockCache,
    stages: Vec<Vec<BlockCache>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvBnRelu::new("backbone/stem", 3, config.stem_channels, 3, 2, rng);
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for (s, (c, b)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let blocks = (0..*b)
                .map(|j| {
                    let name = format!("backbone/stage{s}/block{j}");
                    let (ci, stride) = if j == 0 { (cin, 2) } else { (*c, 1) };
                    ConvBnRelu::new(&name, ci, *c, 3, stride, rng)
                })
                .collect();
            stages.push(blocks);
            cin = *c;
        }
        Ok(Self {
            config,
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBnRelu> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBnRelu> {
        std::iter::once(&mut self.stem).chain(self.stages.iter_mut().flatten())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.blocks().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.blocks().flat_map(|b| b.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.blocks_mut().flat_map(|b| b.buffers_mut()).collect()
    }

    /// Copies weights and running statistics from `other`, which must have
    /// the same layout.
    pub fn copy_weights_from(&mut self, other: &Backbone) -> Result<()> {
        if self.params().len() != other.params().len()
            || self.buffers().len() != other.buffers().len()
        {
            bail!(Config, "backbone layouts differ");
        }
        for (d, s) in self.params_mut().into_iter().zip(other.params()) {
            if d.name != s.name || d.shape != s.shape {
                bail!(Config, "backbone tensor {} does not match {}", d.name, s.name);
            }
            d.value.clone_from(&s.value);
        }
        for (d, s) in self.buffers_mut().into_iter().zip(other.buffers()) {
            if d.name != s.name || d.shape != s.shape {
                bail!(Config, "backbone buffer {} does not match {}", d.name, s.name);
            }
            d.value.clone_from(&s.value);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.blocks().map(ConvBnRelu::param_count).sum()
    }

    /// Runs the batch and returns the pyramid, finest level first. The cache
    /// is only built when `keep` is set.
    pub fn forward(
        &self,
        images: &Tensor,
        train: bool,
        keep: bool,
    ) -> Result<(Vec<Tensor>, Option<BackboneCache>)> {
        let side = self.config.input_size;
        if images.c != 3 || images.h != side || images.w != side {
            bail!(
                Shape,
                "backbone expects Nx3x{}x{} input, got {:?}",
                side,
                side,
                images.shape()
            );
        }
        let (mut x, stem_cache) = self.stem.forward(images, train, keep)?;
        let mut taps = Vec::with_capacity(self.config.levels());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(&x, train, keep)?;
                caches.extend(c);
                x = y;
            }
            stage_caches.push(caches);
            if self.config.taps.contains(&s) {
                taps.push(x.clone());
            }
            if s == *self.config.taps.last().unwrap() {
                break;
            }
        }
        let cache = stem_cache.map(|stem| BackboneCache {
            stem,
            stages: stage_caches,
        });
        Ok((taps, cache))
    }

    pub fn update_running(&mut self, cache: &BackboneCache) {
        self.stem.update_running(&cache.stem);
        for (stage, caches) in self.stages.iter_mut().zip(&cache.stages) {
            for (block, c) in stage.iter_mut().zip(caches) {
                block.update_running(c);
            }
        }
    }

    /// Back-propagates tap gradients (finest first; `None` means zero).
    /// Returns the input gradient when `need_dx`.
    pub fn backward(
        &mut self,
        cache: &BackboneCache,
        mut tap_grads: Vec<Option<Tensor>>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let last = cache.stages.len() - 1;
        let mut grad: Option<Tensor> = None;
        for s in (0..=last).rev() {
            if let Some(l) = self.config.taps.iter().position(|t| *t == s) {
                if let Some(g) = tap_grads[l].take() {
                    grad = Some(match grad {
                        Some(mut acc) => {
                            acc.add_assign(&g);
                            acc
                        }
                        None => g,
                    });
                }
            }
            let Some(mut g) = grad.take() else { continue };
            for (block, c) in self.stages[s].iter_mut().zip(&cache.stages[s]).rev() {
                g = block
                    .backward(c, &g, true)
                    .expect("input gradient requested");
            }
            grad = Some(g);
        }
        let g = grad?;
        self.stem.backward(&cache.stem, &g, need_dx)
    }
}

/// Packs HWC images into an NCHW batch.
pub fn batch_from_images(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(Data, "empty batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            bail!(
                Shape,
                "image {} is {}x{}, batch is {}x{}",
                i,
                img.height(),
                img.width(),
                h,
                w
            );
        }
        let dst = t.item_mut(i);
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                dst[ch * h * w + p] = px[ch];
            }
        }
    }
    Ok(t)
}

/// Packs 8-bit records into an NCHW batch, dividing by 255.
pub fn batch_from_records(records: &[&Record]) -> Result<Tensor> {
    let Some(first) = records.first() else {
        bail!(Data, "empty batch");
    };
    let (h, w) = (first.image.height(), first.image.width());
    let mut t = Tensor::zeros(records.len(), 3, h, w);
    for (i, r) in records.iter().enumerate() {
        if r.image.height() != h || r.image.width() != w {
            bail!(
                Shape,
                "{} is {}x{}, batch is {}x{}",
                r.sample_id,
                r.image.height(),
                r.image.width(),
                h,
                w
            );
        }
        let dst = t.item_mut(i);
        for (p, px) in r.image.data().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                dst[ch * h * w + p] = px[ch] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}
