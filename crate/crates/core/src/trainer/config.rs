//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{bail, Error, Result};
use crate::head::DEFAULT_HEAD_WIDTH;
use crate::loss::{LossKind, DEFAULT_EPSILON};
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adaptive,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::Adaptive => "adaptive",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adaptive" | "adam" => Ok(OptimizerKind::Adaptive),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub epsilon: f64,
    /// Validate every this many epochs; 0 disables.
    pub eval_interval: usize,
    pub head_width: usize,
    pub backbone: BackboneConfig,
    /// Mini-batches per epoch; 0 means one pass over the training set.
    pub steps_per_epoch: usize,
    /// Stop (with a checkpoint) after this many epochs, leaving the rest
    /// to a resumed run. Not part of the hash.
    pub stop_after: Option<usize>,
    /// Checkpoint whose backbone weights seed the model.
    pub init_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CHR,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: OptimizerKind::SgdMomentum,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            eval_interval: 1,
            head_width: DEFAULT_HEAD_WIDTH,
            backbone: BackboneConfig::default(),
            steps_per_epoch: 0,
            stop_after: None,
            init_from: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn loss_kind(&self) -> LossKind {
        self.variant.loss_kind()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            backbone: self.backbone.clone(),
            head_width: self.head_width,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "loss.epsilon" | "epsilon" => self.epsilon = parse(key, v)?,
            "loss.kind" => {
                let kind: LossKind = v.parse()?;
                if kind != self.variant.loss_kind() {
                    bail!(
                        Config,
                        "loss.kind = {} contradicts variant {} (uses {})",
                        kind,
                        self.variant,
                        self.variant.loss_kind()
                    );
                }
            }
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "head.width" => self.head_width = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "stop_after" => self.stop_after = Some(parse(key, v)?),
            "init_from" => self.init_from = (!v.is_empty()).then(|| PathBuf::from(v)),
            "backbone.input_size" => self.backbone.input_size = parse(key, v)?,
            "backbone.stem_channels" => self.backbone.stem_channels = parse(key, v)?,
            "backbone.stage_channels" => self.backbone.stage_channels = parse_list(key, v)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = parse_list(key, v)?,
            "backbone.taps" => self.backbone.taps = parse_list(key, v)?,
            other => bail!(Config, "unknown key {other:?}"),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a
    /// comment. `loss.kind` is checked after the variant is known.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut deferred = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {:?}", i + 1, raw);
            };
            if k.trim() == "loss.kind" {
                deferred.push((i, k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        for (i, k, v) in deferred {
            cfg.set(&k, &v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bail!(Config, "lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be finite and nonnegative");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            bail!(Config, "loss.epsilon must lie in (0, 1)");
        }
        if self.head_width == 0 {
            bail!(Config, "head.width must be positive");
        }
        Ok(())
    }

    /// Canonical text; parses back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss.kind = {}", self.loss_kind());
        let _ = writeln!(s, "loss.epsilon = {}", self.epsilon);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "head.width = {}", self.head_width);
        let _ = writeln!(s, "steps_per_epoch = {}", self.steps_per_epoch);
        let _ = writeln!(s, "backbone.input_size = {}", self.backbone.input_size);
        let _ = writeln!(s, "backbone.stem_channels = {}", self.backbone.stem_channels);
        let _ = writeln!(s, "backbone.stage_channels = {}", join(&self.backbone.stage_channels));
        let _ = writeln!(s, "backbone.blocks_per_stage = {}", join(&self.backbone.blocks_per_stage));
        let _ = writeln!(s, "backbone.taps = {}", join(&self.backbone.taps));
        if let Some(p) = &self.init_from {
            let _ = writeln!(s, "init_from = {}", p.display());
        }
        if let Some(n) = self.stop_after {
            let _ = writeln!(s, "stop_after = {n}");
        }
        s
    }

    /// SHA-256 of the canonical text, without `stop_after` and
    /// `eval_interval` (neither changes the trained weights).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.stop_after = None;
        c.eval_interval = 0;
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
