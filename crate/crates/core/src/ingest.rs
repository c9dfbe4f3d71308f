//! Loads externally supplied label/box tables into the manifest format.
//!
//! Label table: `sample_id,gun,knife,wrench,pliers,scissors` with 0/1 cells.
//! Box table: `sample_id,x_min,y_min,x_max,y_max,class`.
//! Images are looked up as `<image_dir>/<sample_id>.<ext>`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use crate::datamodel::{BBox, DatasetManifest, ManifestEntry, SplitTag, CLASS_NAMES, NUM_CLASSES};
use crate::error::{bail, Error, Result};

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub image_dir: PathBuf,
    pub labels_csv: PathBuf,
    pub bboxes_csv: Option<PathBuf>,
    /// Class name to label column index.
    pub class_map: BTreeMap<String, usize>,
    pub extensions: Vec<String>,
}

impl IngestConfig {
    pub fn new(image_dir: impl Into<PathBuf>, labels_csv: impl Into<PathBuf>) -> Self {
        Self {
            image_dir: image_dir.into(),
            labels_csv: labels_csv.into(),
            bboxes_csv: None,
            class_map: default_class_map(),
            extensions: vec!["png".into(), "jpg".into(), "jpeg".into()],
        }
    }

    pub fn with_bboxes(mut self, path: impl Into<PathBuf>) -> Self {
        self.bboxes_csv = Some(path.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.class_map.keys().map(String::as_str).collect();
        names.sort_unstable();
        let mut expected = CLASS_NAMES.to_vec();
        expected.sort_unstable();
        if names != expected {
            bail!(
                Config,
                "class map must cover exactly {:?}, got {:?}",
                CLASS_NAMES,
                names
            );
        }
        let mut idx: Vec<usize> = self.class_map.values().copied().collect();
        idx.sort_unstable();
        if idx != (0..NUM_CLASSES).collect::<Vec<_>>() {
            bail!(Config, "class indices must be a permutation of 0..{}", NUM_CLASSES);
        }
        Ok(())
    }

    fn column_names(&self) -> Vec<&str> {
        let mut cols = vec![""; NUM_CLASSES];
        for (name, i) in &self.class_map {
            cols[*i] = name;
        }
        cols
    }
}

pub fn default_class_map() -> BTreeMap<String, usize> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), i))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    /// Sample ids whose image file was not found.
    pub skipped: Vec<String>,
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Data(format!("{}: line {}: {}", path.display(), line, err))
}

fn row_error(path: &Path, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: line {}: {}", path.display(), line, msg))
}

pub fn ingest(config: &IngestConfig) -> Result<IngestReport> {
    config.validate()?;
    let boxes = match &config.bboxes_csv {
        Some(path) => Some(read_bboxes(path, &config.class_map)?),
        None => None,
    };

    let path = &config.labels_csv;
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut expected = vec!["sample_id"];
    expected.extend(config.column_names());
    if headers.iter().collect::<Vec<_>>() != expected {
        bail!(
            Data,
            "{}: header {:?} does not match {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>(),
            expected
        );
    }

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(row_error(path, line, "empty sample_id"));
        }
        if !seen.insert(id.clone()) {
            return Err(row_error(path, line, format!("duplicate sample_id {id}")));
        }
        let labels = row
            .iter()
            .skip(1)
            .map(|cell| match cell {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(row_error(path, line, format!("label cell {other:?} is not 0/1"))),
            })
            .collect::<Result<Vec<u8>>>()?;

        let Some(image) = find_image(&config.image_dir, &id, &config.extensions) else {
            log::warn!("{}: no image under {}", id, config.image_dir.display());
            skipped.push(id);
            continue;
        };
        let bboxes = boxes
            .as_ref()
            .map(|b| b.get(&id).cloned().unwrap_or_default());
        if let Some(bs) = &bboxes {
            if let Some(b) = bs.iter().find(|b| labels[b.class_id] != 1) {
                return Err(row_error(
                    path,
                    line,
                    format!("{id} has a {} box but no such label", CLASS_NAMES[b.class_id]),
                ));
            }
        }
        entries.push(ManifestEntry {
            sample_id: id,
            image: image.to_string_lossy().into_owned(),
            labels,
            bboxes,
            split: SplitTag::Pool,
        });
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} rows with missing images", skipped.len());
    }
    Ok(IngestReport {
        manifest: DatasetManifest::new(entries, SplitTag::Pool, 0),
        skipped,
    })
}

fn find_image(dir: &Path, id: &str, extensions: &[String]) -> Option<PathBuf> {
    extensions
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn read_bboxes(path: &Path, class_map: &BTreeMap<String, usize>) -> Result<HashMap<String, Vec<BBox>>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["sample_id", "x_min", "y_min", "x_max", "y_max", "class"];
    if headers.iter().collect::<Vec<_>>() != expected {
        bail!(
            Data,
            "{}: header {:?} does not match {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>(),
            expected
        );
    }
    let mut out: HashMap<String, Vec<BBox>> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let coord = |i: usize| {
            row[i]
                .parse::<u32>()
                .map_err(|e| row_error(path, line, format!("column {}: {}", expected[i], e)))
        };
        let (x0, y0, x1, y1) = (coord(1)?, coord(2)?, coord(3)?, coord(4)?);
        let class = &row[5];
        let class_id = *class_map
            .get(class)
            .ok_or_else(|| row_error(path, line, format!("unknown class name {class:?}")))?;
        let b = BBox::new(x0, y0, x1, y1, class_id).map_err(|e| row_error(path, line, e))?;
        out.entry(row[0].to_string()).or_default().push(b);
    }
    Ok(out)
}

/// Writes a manifest back out as label and box tables that [`ingest`]
/// accepts.
pub fn export_csv(manifest: &DatasetManifest, labels_csv: &Path, bboxes_csv: &Path) -> Result<()> {
    let mut lw = csv::Writer::from_path(labels_csv).map_err(|e| csv_error(labels_csv, e))?;
    let mut header = vec!["sample_id"];
    header.extend(CLASS_NAMES);
    lw.write_record(&header).map_err(|e| csv_error(labels_csv, e))?;
    let mut bw = csv::Writer::from_path(bboxes_csv).map_err(|e| csv_error(bboxes_csv, e))?;
    bw.write_record(["sample_id", "x_min", "y_min", "x_max", "y_max", "class"])
        .map_err(|e| csv_error(bboxes_csv, e))?;
    for e in &manifest.entries {
        let mut row = vec![e.sample_id.clone()];
        row.extend(e.labels.iter().take(NUM_CLASSES).map(|v| v.to_string()));
        lw.write_record(&row).map_err(|err| csv_error(labels_csv, err))?;
        for b in e.bboxes.iter().flatten() {
            bw.write_record([
                e.sample_id.clone(),
                b.x_min.to_string(),
                b.y_min.to_string(),
                b.x_max.to_string(),
                b.y_max.to_string(),
                CLASS_NAMES[b.class_id].to_string(),
            ])
            .map_err(|err| csv_error(bboxes_csv, err))?;
        }
    }
    lw.flush().map_err(|e| Error::io(labels_csv, e))?;
    bw.flush().map_err(|e| Error::io(bboxes_csv, e))?;
    Ok(())
}
