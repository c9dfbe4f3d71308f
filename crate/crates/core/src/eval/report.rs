//! Scoring a model over a record set and assembling the JSON report.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::batch_from_records;
use crate::datamodel::{DatasetManifest, Record, CLASS_NAMES, NUM_CLASSES};
use crate::error::{bail, Result};
use crate::eval::ap::{average_precision, mean_defined, Ranked};
use crate::eval::pointing::{pointing_localize, PointingTally};
use crate::head::{cam_from_row, Heatmap};
use crate::model::Model;
use crate::trainer::{checkpoint, TrainConfig};

/// Eval-mode scores, one row of `NUM_CLASSES` per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub fused: Vec<[f32; NUM_CLASSES]>,
    /// `levels[l][i]`: level-`l` scores of record `i`.
    pub levels: Vec<Vec<[f32; NUM_CLASSES]>>,
}

fn rows(flat: &[f32]) -> impl Iterator<Item = [f32; NUM_CLASSES]> + '_ {
    flat.chunks_exact(NUM_CLASSES)
        .map(|c| c.try_into().expect("row width"))
}

pub fn score_records<R: Borrow<Record>>(model: &Model, records: &[R], batch: usize) -> Result<Scores> {
    let mut fused = Vec::with_capacity(records.len());
    let mut levels = vec![Vec::with_capacity(records.len()); model.levels()];
    for chunk in records.chunks(batch.max(1)) {
        let refs: Vec<&Record> = chunk.iter().map(|r| r.borrow()).collect();
        let (out, _) = model.forward(&batch_from_records(&refs)?, false, false)?;
        fused.extend(rows(&out.fused));
        for (dst, s) in levels.iter_mut().zip(&out.level_scores) {
            dst.extend(rows(s));
        }
    }
    Ok(Scores { fused, levels })
}

fn ranked<R: Borrow<Record>>(records: &[R], scores: &[[f32; NUM_CLASSES]], class: usize) -> Vec<Ranked> {
    records
        .iter()
        .zip(scores)
        .map(|(r, s)| (r.borrow(), s))
        .map(|(r, s)| Ranked {
            sample_id: r.sample_id.clone(),
            score: s[class] as f64,
            positive: r.labels.has(class),
        })
        .collect()
}

pub fn class_aps<R: Borrow<Record>>(records: &[R], scores: &[[f32; NUM_CLASSES]]) -> [Option<f64>; NUM_CLASSES] {
    std::array::from_fn(|c| average_precision(&ranked(records, scores, c)))
}

impl Scores {
    /// Fused mAP over the classes with at least one positive.
    pub fn map<R: Borrow<Record>>(&self, records: &[R]) -> Option<f64> {
        mean_defined(&class_aps(records, &self.fused))
    }

    pub fn ranked<R: Borrow<Record>>(&self, records: &[R], class: usize) -> Vec<Ranked> {
        ranked(records, &self.fused, class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointingEntry {
    pub hits: usize,
    pub misses: usize,
    pub excluded: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: usize,
    pub ap: BTreeMap<String, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub config_hash: String,
    pub samples: usize,
    pub positives: BTreeMap<String, usize>,
    pub ap: BTreeMap<String, Option<f64>>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    /// Absent when the records carry no boxes.
    pub pointing: Option<BTreeMap<String, PointingEntry>>,
    pub mean_pointing: Option<f64>,
    pub per_level: Vec<LevelEntry>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn by_class<T: Clone>(values: &[T]) -> BTreeMap<String, T> {
    CLASS_NAMES
        .iter()
        .zip(values)
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect()
}

/// Class maps of every record in `chunk`, indexed `[sample][class][level]`,
/// from the features each classifier actually sees.
fn chunk_cams<R: Borrow<Record>>(model: &Model, chunk: &[R]) -> Result<Vec<Vec<Vec<Heatmap>>>> {
    let refs: Vec<&Record> = chunk.iter().map(|r| r.borrow()).collect();
    let (out, _) = model.forward(&batch_from_records(&refs)?, false, false)?;
    let mut cams = Vec::with_capacity(chunk.len());
    for i in 0..chunk.len() {
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            let maps = out
                .refined
                .iter()
                .enumerate()
                .map(|(l, x)| cam_from_row(x, i, model.head.classifier(l).weight_row(c)))
                .collect::<Result<Vec<_>>>()?;
            per_class.push(maps);
        }
        cams.push(per_class);
    }
    Ok(cams)
}

pub fn pointing<R: Borrow<Record>>(model: &Model, records: &[R], batch: usize) -> Result<[PointingTally; NUM_CLASSES]> {
    let mut tallies = [PointingTally::default(); NUM_CLASSES];
    for chunk in records.chunks(batch.max(1)) {
        let cams = chunk_cams(model, chunk)?;
        for (r, per_class) in chunk.iter().zip(cams) {
            let r = r.borrow();
            let boxes = r.bboxes.as_deref().unwrap_or(&[]);
            for (c, maps) in per_class.iter().enumerate() {
                tallies[c].add(pointing_localize(
                    maps,
                    r.image.height(),
                    r.image.width(),
                    boxes,
                    c,
                ));
            }
        }
    }
    Ok(tallies)
}

pub fn evaluate_model<R: Borrow<Record>>(model: &Model, config_hash: &str, records: &[R]) -> Result<EvalReport> {
    if records.is_empty() {
        bail!(Data, "nothing to evaluate");
    }
    let scores = score_records(model, records, 64)?;
    let aps = class_aps(records, &scores.fused);
    let mut warnings = Vec::new();
    for (c, ap) in aps.iter().enumerate() {
        if ap.is_none() {
            let w = format!("{}: no positive sample, AP undefined and left out of mAP", CLASS_NAMES[c]);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let positives: Vec<usize> = (0..NUM_CLASSES)
        .map(|c| records.iter().filter(|r| (*r).borrow().labels.has(c)).count())
        .collect();
    let per_level = scores
        .levels
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let aps = class_aps(records, s);
            LevelEntry {
                level: l + 1,
                ap: by_class(&aps),
                map: mean_defined(&aps),
            }
        })
        .collect();
    let (pointing_section, mean_pointing) = if records.iter().any(|r| (*r).borrow().bboxes.is_some()) {
        let tallies = pointing(model, records, 64)?;
        let entries: Vec<PointingEntry> = tallies
            .iter()
            .map(|t| PointingEntry {
                hits: t.hits,
                misses: t.misses,
                excluded: t.excluded,
                accuracy: t.accuracy(),
            })
            .collect();
        let mean = mean_defined(&entries.iter().map(|e| e.accuracy).collect::<Vec<_>>());
        (Some(by_class(&entries)), mean)
    } else {
        (None, None)
    };
    Ok(EvalReport {
        variant: model.config().variant.to_string(),
        config_hash: config_hash.to_string(),
        samples: records.len(),
        positives: by_class(&positives),
        ap: by_class(&aps),
        map: mean_defined(&aps),
        pointing: pointing_section,
        mean_pointing,
        per_level,
        warnings,
    })
}

/// Loads a checkpoint and evaluates it on a manifest. With `expected`,
/// the checkpoint must have been trained under that config.
pub fn evaluate(
    checkpoint_path: &Path,
    manifest: &DatasetManifest,
    base_dir: &Path,
    expected: Option<&TrainConfig>,
) -> Result<EvalReport> {
    let ck = checkpoint::load(checkpoint_path)?;
    if let Some(cfg) = expected {
        if cfg.hash() != ck.config_hash {
            bail!(
                Config,
                "{} was trained under a different config",
                checkpoint_path.display()
            );
        }
    }
    let records = manifest.load_records(base_dir)?;
    let side = ck.config.backbone.input_size;
    if let Some(r) = records
        .iter()
        .find(|r| r.image.height() != side || r.image.width() != side)
    {
        bail!(
            Data,
            "{} is {}x{}, checkpoint expects {}x{}",
            r.sample_id,
            r.image.width(),
            r.image.height(),
            side,
            side
        );
    }
    evaluate_model(&ck.model, &ck.config_hash, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::datamodel::{BBox, Image8, LabelVector};
    use crate::model::{ModelConfig, Variant};

    fn model(variant: Variant) -> Model {
        Model::new(
            ModelConfig {
                variant,
                backbone: BackboneConfig {
                    input_size: 32,
                    stem_channels: 4,
                    stage_channels: vec![4, 6, 8, 8],
                    blocks_per_stage: vec![1, 1, 1, 1],
                    taps: vec![1, 2, 3],
                },
                head_width: 6,
            },
            3,
        )
        .unwrap()
    }

    fn records(n: usize, boxes: bool) -> Vec<Record> {
        (0..n)
            .map(|i| {
                let c = i % 6;
                let classes: Vec<usize> = if c < 5 { vec![c] } else { vec![] };
                Record {
                    sample_id: format!("s{i:03}"),
                    image: Image8::from_raw(32, 32, (0..32 * 32 * 3).map(|p| ((p * (i + 3)) % 256) as u8).collect()).unwrap(),
                    labels: LabelVector::from_classes(classes.iter().copied()),
                    bboxes: boxes.then(|| classes.iter().map(|c| BBox::new(4, 4, 20, 20, *c).unwrap()).collect()),
                }
            })
            .collect()
    }

    #[test]
    fn report_has_five_class_keys_and_consistent_means() {
        let m = model(Variant::CHR);
        let recs = records(14, true);
        let r = evaluate_model(&m, "h", &recs).unwrap();
        let keys: Vec<&str> = r.ap.keys().map(|s| s.as_str()).collect();
        let mut expected = CLASS_NAMES.to_vec();
        expected.sort();
        assert_eq!(keys, expected);
        let mean = r.ap.values().flatten().sum::<f64>() / 5.0;
        assert!((mean - r.map.unwrap()).abs() < 1e-12);
        let p = r.pointing.as_ref().unwrap();
        let accs: Vec<f64> = p.values().filter_map(|e| e.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - r.mean_pointing.unwrap()).abs() < 1e-12);
        for e in p.values() {
            // one box-bearing sample per class every six records
            assert!(e.hits + e.misses >= 2);
        }
        assert_eq!(r.per_level.len(), 3);
    }

    #[test]
    fn report_is_deterministic_and_omits_pointing_without_boxes() {
        let m = model(Variant::Baseline);
        let recs = records(12, false);
        let a = evaluate_model(&m, "h", &recs).unwrap().to_json().unwrap();
        let b = evaluate_model(&m, "h", &recs).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"pointing\": null"));
    }

    #[test]
    fn missing_class_is_warned() {
        let m = model(Variant::H);
        let recs = records(4, false);
        let r = evaluate_model(&m, "h", &recs).unwrap();
        assert_eq!(r.ap["scissors"], None);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn batched_scores_match_single() {
        let m = model(Variant::CHR);
        let recs = records(7, false);
        let a = score_records(&m, &recs, 3).unwrap();
        let b = score_records(&m, &recs, 1).unwrap();
        for (x, y) in a.fused.iter().zip(&b.fused) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-5);
            }
        }
    }
}
