//! Domain types shared by every other module: labels, boxes, images,
//! samples and the JSON-lines manifest format.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Prohibited classes in label-column order.
pub const CLASS_NAMES: [&str; 5] = ["gun", "knife", "wrench", "pliers", "scissors"];

/// Number of prohibited (observed) classes, `C'`.
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|n| *n == name)
}

/// Binary multi-label ground truth of length `C`.
///
/// Only the first `prohibited_count` entries are observed. The observation
/// mask is explicit so that "absent" (0) and "unknown" are never conflated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    values: Vec<u8>,
    observed: Vec<bool>,
    prohibited_count: usize,
}

impl LabelVector {
    pub fn new(values: Vec<u8>, prohibited_count: usize) -> Result<Self> {
        if prohibited_count == 0 || prohibited_count > values.len() {
            bail!(
                Data,
                "prohibited count {} must lie in [1, {}]",
                prohibited_count,
                values.len()
            );
        }
        if let Some(v) = values.iter().find(|v| **v > 1) {
            bail!(Data, "label entries must be 0 or 1, found {}", v);
        }
        let observed = (0..values.len()).map(|i| i < prohibited_count).collect();
        Ok(Self {
            values,
            observed,
            prohibited_count,
        })
    }

    /// A fully observed vector over the prohibited classes (`C = C'`).
    pub fn prohibited(values: &[u8]) -> Result<Self> {
        Self::new(values.to_vec(), values.len())
    }

    /// Label vector over [`CLASS_NAMES`] with the given classes present.
    pub fn from_classes(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut values = vec![0u8; NUM_CLASSES];
        for c in classes {
            values[c] = 1;
        }
        Self::new(values, NUM_CLASSES).expect("valid by construction")
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn prohibited_count(&self) -> usize {
        self.prohibited_count
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, class: usize) -> bool {
        self.observed.get(class).copied().unwrap_or(false)
    }

    /// The observed prefix `y*`.
    pub fn ground_truth(&self) -> &[u8] {
        &self.values[..self.prohibited_count]
    }

    pub fn has(&self, class: usize) -> bool {
        self.values.get(class) == Some(&1)
    }

    pub fn is_positive(&self) -> bool {
        self.ground_truth().iter().any(|v| *v == 1)
    }
}

/// Axis-aligned box in pixel coordinates, half-open: columns
/// `x_min..x_max`, rows `y_min..y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32, class_id: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            bail!(
                Data,
                "degenerate box [{}, {}, {}, {}]",
                x_min,
                y_min,
                x_max,
                y_max
            );
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        })
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x_max as usize > width || self.y_max as usize > height {
            bail!(
                Data,
                "box [{}, {}, {}, {}] exceeds image {}x{}",
                self.x_min,
                self.y_min,
                self.x_max,
                self.y_max,
                width,
                height
            );
        }
        Ok(())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.x_min as usize..self.x_max as usize).contains(&col)
            && (self.y_min as usize..self.y_max as usize).contains(&row)
    }

    pub fn area(&self) -> u32 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = serializer.serialize_tuple(5)?;
        t.serialize_element(&self.x_min)?;
        t.serialize_element(&self.y_min)?;
        t.serialize_element(&self.x_max)?;
        t.serialize_element(&self.y_max)?;
        t.serialize_element(&self.class_id)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct BoxVisitor;

        impl<'de> Visitor<'de> for BoxVisitor {
            type Value = BBox;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("[x_min, y_min, x_max, y_max, class_id]")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<BBox, A::Error> {
                let mut next = |i| {
                    seq.next_element::<u64>()?
                        .ok_or_else(|| de::Error::invalid_length(i, &self))
                };
                let (x0, y0, x1, y1, c) = (next(0)?, next(1)?, next(2)?, next(3)?, next(4)?);
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(6, &self));
                }
                BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32, c as usize)
                    .map_err(de::Error::custom)
            }
        }

        deserializer.deserialize_tuple(5, BoxVisitor)
    }
}

/// Float RGB image, row-major HWC, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            bail!(
                Shape,
                "{} values for a {}x{}x3 image",
                data.len(),
                height,
                width
            );
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    /// 8-bit quantization, round to nearest.
    pub fn quantize(&self) -> Image8 {
        Image8 {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.quantize().save_png(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Image8::load(path)?.to_float())
    }
}

/// Compact 8-bit RGB image used for storage and in-memory datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image8 {
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            bail!(
                Shape,
                "{} bytes for a {}x{}x3 image",
                data.len(),
                height,
                width
            );
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn to_float(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| *v as f32 / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            context: path.display().to_string(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_raw(h as usize, w as usize, rgb.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            context: path.display().to_string(),
            source,
        })
    }
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub image: Image,
    pub labels: LabelVector,
    pub bboxes: Option<Vec<BBox>>,
}

impl Sample {
    pub fn new(
        sample_id: impl Into<String>,
        image: Image,
        labels: LabelVector,
        bboxes: Option<Vec<BBox>>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if let Some(boxes) = &bboxes {
            for b in boxes {
                if !labels.has(b.class_id) || !labels.is_observed(b.class_id) {
                    bail!(
                        Data,
                        "{}: box for class {} whose label is not set",
                        sample_id,
                        b.class_id
                    );
                }
                b.check_within(image.width(), image.height())?;
            }
        }
        Ok(Self {
            sample_id,
            image,
            labels,
            bboxes,
        })
    }

    pub fn is_positive(&self) -> bool {
        is_positive(self)
    }
}

/// True iff any prohibited-class entry is set.
pub fn is_positive(sample: &Sample) -> bool {
    sample.labels.is_positive()
}

/// In-memory sample backed by an 8-bit image.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sample_id: String,
    pub image: Image8,
    pub labels: LabelVector,
    pub bboxes: Option<Vec<BBox>>,
}

impl Record {
    pub fn is_positive(&self) -> bool {
        self.labels.is_positive()
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            sample_id: self.sample_id.clone(),
            image: self.image.to_float(),
            labels: self.labels.clone(),
            bboxes: self.bboxes.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    /// Unsplit pool, as produced by generation or ingest.
    Pool,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Pool => "pool",
        })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: String,
    pub labels: Vec<u8>,
    pub bboxes: Option<Vec<BBox>>,
    pub split: SplitTag,
}

impl ManifestEntry {
    pub fn label_vector(&self) -> Result<LabelVector> {
        if self.labels.len() < NUM_CLASSES {
            bail!(
                Data,
                "{}: {} labels, expected at least {}",
                self.sample_id,
                self.labels.len(),
                NUM_CLASSES
            );
        }
        LabelVector::new(self.labels.clone(), NUM_CLASSES)
    }

    pub fn is_positive(&self) -> bool {
        self.labels.iter().take(NUM_CLASSES).any(|v| *v == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_tag: SplitTag,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, split_tag: SplitTag, seed: u64) -> Self {
        Self {
            entries,
            split_tag,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.is_positive()).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                bail!(Data, "duplicate sample_id {}", e.sample_id);
            }
            let labels = e.label_vector()?;
            for b in e.bboxes.iter().flatten() {
                if !labels.has(b.class_id) || b.class_id >= NUM_CLASSES {
                    bail!(
                        Data,
                        "{}: box for class {} whose label is not set",
                        e.sample_id,
                        b.class_id
                    );
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, seed: u64) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Data(format!("manifest line {}: {}", i + 1, err)))?;
            entries.push(e);
        }
        let split_tag = match entries.first() {
            Some(first) if entries.iter().all(|e| e.split == first.split) => first.split,
            _ => SplitTag::Pool,
        };
        let m = Self::new(entries, split_tag, seed);
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text, 0)
    }

    /// Resolves an entry's image path against the manifest directory.
    pub fn image_path(base_dir: &Path, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.image);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }

    /// Loads every image into memory. `base_dir` is the manifest's directory.
    pub fn load_records(&self, base_dir: &Path) -> Result<Vec<Record>> {
        self.entries
            .iter()
            .map(|e| {
                let path = Self::image_path(base_dir, e);
                if !path.exists() {
                    bail!(Data, "{}: image {} does not exist", e.sample_id, path.display());
                }
                Ok(Record {
                    sample_id: e.sample_id.clone(),
                    image: Image8::load(&path)?,
                    labels: e.label_vector()?,
                    bboxes: e.bboxes.clone(),
                })
            })
            .collect()
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
