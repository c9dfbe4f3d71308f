//! Hierarchical refinement head.
//!
//! Starting from the top of the pyramid, each refined level is upsampled,
//! concatenated with the raw feature one level below, and projected by a
//! 1x1 conv block into the refined feature of that level. Every level then
//! feeds its own GAP + linear classifier, and the per-level probabilities
//! are averaged into the fused prediction.

use rand::Rng;

use crate::error::{bail, Result};
use crate::nn::{
    concat_channels, sigmoid, split_channels, upsample2, upsample2_backward, BlockCache, Buffer,
    ConvBnRelu, GapCache, GapLinear, Param, Tensor,
};

pub const DEFAULT_HEAD_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    /// Channels of the raw pyramid levels, finest first.
    pub tap_channels: Vec<usize>,
    /// Output channels of each refinement block.
    pub width: usize,
    pub refine: bool,
    pub classes: usize,
}

impl HeadConfig {
    pub fn levels(&self) -> usize {
        self.tap_channels.len()
    }

    /// Channels of each classifier's input.
    pub fn refined_channels(&self) -> Vec<usize> {
        let l = self.levels();
        (0..l)
            .map(|i| {
                if self.refine && i + 1 < l {
                    self.width
                } else {
                    self.tap_channels[i]
                }
            })
            .collect()
    }
}

/// `g(l)`: projects `[x(l) | up(x~(l+1))]` to the refined level-`l` feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementBlock {
    pub project: ConvBnRelu,
    pub lower_channels: usize,
    pub upper_channels: usize,
}

impl RefinementBlock {
    pub fn new<R: Rng + ?Sized>(level: usize, lower: usize, upper: usize, width: usize, rng: &mut R) -> Self {
        Self {
            project: ConvBnRelu::new(&format!("head/refine{level}"), lower + upper, width, 1, 1, rng),
            lower_channels: lower,
            upper_channels: upper,
        }
    }

    /// Sets the projection to `[I | 0]` with neutral normalization, so the
    /// block passes its lower input through unchanged (up to the norm's eps).
    pub fn set_identity(&mut self) {
        let conv = &mut self.project.conv;
        assert_eq!(conv.cout, self.lower_channels, "identity needs width == lower channels");
        conv.weight.value.fill(0.0);
        for c in 0..conv.cout {
            conv.weight.value[c * conv.cin + c] = 1.0;
        }
        let bn = &mut self.project.bn;
        bn.gamma.value.fill(1.0);
        bn.beta.value.fill(0.0);
        bn.running_mean.value.fill(0.0);
        bn.running_var.value.fill(1.0);
    }
}

/// `h(l)`: GAP, one linear map to class logits, sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelClassifier {
    pub linear: GapLinear,
}

impl LevelClassifier {
    pub fn weight_row(&self, class: usize) -> &[f32] {
        self.linear.row(class)
    }

    pub fn bias(&self, class: usize) -> f32 {
        self.linear.bias.value[class]
    }
}

/// Spatial class map at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Forward results for a batch of `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// Per level, `n x classes` pre-sigmoid logits.
    pub level_logits: Vec<Vec<f32>>,
    /// Per level, `n x classes` probabilities.
    pub level_scores: Vec<Vec<f32>>,
    /// `n x classes` mean of the per-level probabilities.
    pub fused: Vec<f32>,
    /// Refined pyramid, finest first.
    pub refined: Vec<Tensor>,
    /// Levels whose refinement block ran, in application order.
    pub applied_blocks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    blocks: Vec<Option<BlockCache>>,
    classifiers: Vec<GapCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChrHead {
    config: HeadConfig,
    /// `blocks[l]` refines level `l`; the top level has none.
    blocks: Vec<RefinementBlock>,
    classifiers: Vec<LevelClassifier>,
}

impl ChrHead {
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        if config.levels() == 0 || config.classes == 0 || config.width == 0 {
            bail!(Config, "head needs at least one level, class and channel");
        }
        let l = config.levels();
        let refined = config.refined_channels();
        let mut blocks = Vec::new();
        if config.refine {
            for i in 0..l.saturating_sub(1) {
                blocks.push(RefinementBlock::new(
                    i,
                    config.tap_channels[i],
                    refined[i + 1],
                    config.width,
                    rng,
                ));
            }
        }
        let classifiers = refined
            .iter()
            .enumerate()
            .map(|(i, d)| LevelClassifier {
                linear: GapLinear::new(&format!("head/classifier{i}"), *d, config.classes, rng),
            })
            .collect();
        Ok(Self {
            config,
            blocks,
            classifiers,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn blocks_mut(&mut self) -> &mut [RefinementBlock] {
        &mut self.blocks
    }

    pub fn classifier(&self, level: usize) -> &LevelClassifier {
        &self.classifiers[level]
    }

    pub fn classifier_mut(&mut self, level: usize) -> &mut LevelClassifier {
        &mut self.classifiers[level]
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.blocks.iter().flat_map(|b| b.project.params()).collect();
        for c in &self.classifiers {
            out.push(&c.linear.weight);
            out.push(&c.linear.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.project.params_mut())
            .collect();
        for c in &mut self.classifiers {
            out.push(&mut c.linear.weight);
            out.push(&mut c.linear.bias);
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer> {
        self.blocks.iter().flat_map(|b| b.project.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.project.buffers_mut())
            .collect()
    }

    fn check_pyramid(&self, pyramid: &[Tensor]) -> Result<()> {
        if pyramid.len() != self.levels() {
            bail!(
                Shape,
                "head has {} levels, pyramid has {}",
                self.levels(),
                pyramid.len()
            );
        }
        for (l, (t, c)) in pyramid.iter().zip(&self.config.tap_channels).enumerate() {
            if t.c != *c {
                bail!(Shape, "level {}: expected {} channels, got {}", l + 1, c, t.c);
            }
            if t.n != pyramid[0].n {
                bail!(Shape, "level {}: batch size {} differs", l + 1, t.n);
            }
            if self.config.refine && l + 1 < pyramid.len() {
                let up = &pyramid[l + 1];
                if t.h != 2 * up.h || t.w != 2 * up.w {
                    bail!(
                        Shape,
                        "level {}: {}x{} is not twice level {} ({}x{})",
                        l + 1,
                        t.h,
                        t.w,
                        l + 2,
                        up.h,
                        up.w
                    );
                }
            }
        }
        Ok(())
    }

    /// Refined pyramid: the top level is passed through, every lower level
    /// is `g(l)([x(l) | up(x~(l+1))])`, applied top-down.
    pub fn refine(
        &self,
        pyramid: &[Tensor],
        train: bool,
        keep: bool,
    ) -> Result<(Vec<Tensor>, Vec<usize>, Vec<Option<BlockCache>>)> {
        self.check_pyramid(pyramid)?;
        let l = pyramid.len();
        let mut refined: Vec<Option<Tensor>> = vec![None; l];
        let mut caches: Vec<Option<BlockCache>> = vec![None; l];
        let mut applied = Vec::new();
        refined[l - 1] = Some(pyramid[l - 1].clone());
        for i in (0..l - 1).rev() {
            if !self.config.refine {
                refined[i] = Some(pyramid[i].clone());
                continue;
            }
            let upper = upsample2(refined[i + 1].as_ref().expect("computed above"));
            let cat = concat_channels(&pyramid[i], &upper)?;
            let (y, cache) = self.blocks[i].project.forward(&cat, train, keep)?;
            refined[i] = Some(y);
            caches[i] = cache;
            applied.push(i);
        }
        Ok((refined.into_iter().map(Option::unwrap).collect(), applied, caches))
    }

    pub fn forward(&self, pyramid: &[Tensor], train: bool, keep: bool) -> Result<(HeadOutput, Option<HeadCache>)> {
        let (refined, applied, block_caches) = self.refine(pyramid, train, keep)?;
        let n = refined[0].n;
        let k = self.config.classes;
        let mut level_logits = Vec::with_capacity(refined.len());
        let mut level_scores = Vec::with_capacity(refined.len());
        let mut gap_caches = Vec::with_capacity(refined.len());
        for (x, cls) in refined.iter().zip(&self.classifiers) {
            let (logits, cache) = cls.linear.forward(x)?;
            level_scores.push(logits.iter().map(|z| sigmoid(*z)).collect::<Vec<f32>>());
            level_logits.push(logits);
            gap_caches.push(cache);
        }
        let fused = fuse(&level_scores, n * k);
        let cache = keep.then_some(HeadCache {
            blocks: block_caches,
            classifiers: gap_caches,
        });
        Ok((
            HeadOutput {
                level_logits,
                level_scores,
                fused,
                refined,
                applied_blocks: applied,
            },
            cache,
        ))
    }

    pub fn update_running(&mut self, cache: &HeadCache) {
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let Some(c) = c {
                block.project.update_running(c);
            }
        }
    }

    /// Back-propagates per-level logit gradients to the raw pyramid.
    pub fn backward(&mut self, cache: &HeadCache, dlogits: &[Vec<f32>]) -> Vec<Option<Tensor>> {
        let l = self.levels();
        let mut d_refined: Vec<Option<Tensor>> = self
            .classifiers
            .iter_mut()
            .zip(&cache.classifiers)
            .zip(dlogits)
            .map(|((cls, c), g)| Some(cls.linear.backward(c, g)))
            .collect();
        if !self.config.refine {
            return d_refined;
        }
        let mut d_taps: Vec<Option<Tensor>> = vec![None; l];
        // Finest first: by the time level i is reached, both of its
        // consumers (classifier i and block i-1) have contributed.
        for i in 0..l - 1 {
            let g = d_refined[i].take().expect("classifier gradient");
            let block = &mut self.blocks[i];
            let bc = cache.blocks[i].as_ref().expect("block cache");
            let d_cat = block.project.backward(bc, &g, true).expect("input gradient");
            let (d_lower, d_upper) = split_channels(&d_cat, block.lower_channels);
            d_taps[i] = Some(d_lower);
            let d_up = upsample2_backward(&d_upper);
            d_refined[i + 1]
                .as_mut()
                .expect("classifier gradient")
                .add_assign(&d_up);
        }
        d_taps[l - 1] = d_refined[l - 1].take();
        d_taps
    }

    /// Class activation map of sample `index` at `level`: the classifier's
    /// class row dotted with the refined feature at every position.
    pub fn cam(&self, refined: &Tensor, index: usize, level: usize, class: usize) -> Result<Heatmap> {
        if class >= self.config.classes {
            bail!(
                Data,
                "class {} out of range (0..{})",
                class,
                self.config.classes
            );
        }
        if level >= self.levels() {
            bail!(Data, "level {} out of range", level);
        }
        cam_from_row(refined, index, self.classifiers[level].weight_row(class))
    }
}

pub fn cam_from_row(features: &Tensor, index: usize, row: &[f32]) -> Result<Heatmap> {
    if features.c != row.len() {
        bail!(
            Shape,
            "feature has {} channels, classifier row {}",
            features.c,
            row.len()
        );
    }
    let hw = features.plane();
    let x = features.item(index);
    let mut acc = vec![0.0f64; hw];
    for (d, w) in row.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(&x[d * hw..(d + 1) * hw]) {
            *a += *w as f64 * *v as f64;
        }
    }
    Ok(Heatmap {
        height: features.h,
        width: features.w,
        data: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Elementwise mean over levels.
pub fn fuse(level_scores: &[Vec<f32>], len: usize) -> Vec<f32> {
    let l = level_scores.len() as f64;
    (0..len)
        .map(|j| (level_scores.iter().map(|s| s[j] as f64).sum::<f64>() / l) as f32)
        .collect()
}
