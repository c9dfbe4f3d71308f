//! Variant x ratio x seed grid: one training run and one test evaluation
//! per cell, collected into a comparison table.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ensure_dir, Record};
use crate::error::{bail, Error, Result};
use crate::eval::evaluate_model;
use crate::model::Variant;
use crate::synthgen::{select_subset, SubsetSpec};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub ratios: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Positives drawn per subset.
    pub positives: usize,
    /// Everything but variant and seed.
    pub base: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub ratio: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("r{}/seed{}/{}", self.ratio, self.seed, self.variant)
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() {
            bail!(Config, "ablation needs at least one variant, ratio and seed");
        }
        if self.positives == 0 || self.ratios.contains(&0) {
            bail!(Config, "positives and ratios must be positive");
        }
        self.base.validate()
    }

    /// Run order: ratio, then seed, then variant.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &ratio in &self.ratios {
            for &seed in &self.seeds {
                for &variant in &self.variants {
                    out.push(Cell {
                        ratio,
                        seed,
                        variant,
                    });
                }
            }
        }
        out
    }

    pub fn config_for(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            variant: cell.variant,
            seed: cell.seed,
            ..self.base.clone()
        }
    }

    pub fn plan_text(&self) -> String {
        let mut s = String::new();
        let cells = self.cells();
        let _ = writeln!(
            s,
            "{} runs: {} positives per subset, {} epochs x {} steps",
            cells.len(),
            self.positives,
            self.base.epochs,
            if self.base.steps_per_epoch == 0 {
                "full-pass".to_string()
            } else {
                self.base.steps_per_epoch.to_string()
            }
        );
        for c in cells {
            let _ = writeln!(
                s,
                "  ratio {:>4}  seed {:>3}  {:<8}  ({} negatives)",
                c.ratio,
                c.seed,
                c.variant.to_string(),
                c.ratio * self.positives
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub ratio: usize,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub pointing: Option<f64>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub spread: f64,
    pub n: usize,
}

/// Mean and sample standard deviation.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let spread = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, spread, n })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<CellResult>,
}

impl AblationTable {
    fn values(&self, variant: Variant, ratio: usize, f: impl Fn(&CellResult) -> Option<f64>) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.variant == variant && r.ratio == ratio && !r.failed())
            .filter_map(f)
            .collect()
    }

    pub fn map_summary(&self, variant: Variant, ratio: usize) -> Option<Summary> {
        summarize(&self.values(variant, ratio, |r| r.map))
    }

    pub fn pointing_summary(&self, variant: Variant, ratio: usize) -> Option<Summary> {
        summarize(&self.values(variant, ratio, |r| r.pointing))
    }

    pub fn get(&self, variant: Variant, ratio: usize, seed: u64) -> Option<&CellResult> {
        self.results
            .iter()
            .find(|r| r.variant == variant && r.ratio == ratio && r.seed == seed)
    }

    /// Mean over seeds of `a - b` in mAP, using seeds where both succeeded.
    pub fn mean_gap(&self, a: Variant, b: Variant, ratio: usize) -> Option<f64> {
        let gaps: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.variant == a && r.ratio == ratio)
            .filter_map(|r| Some(r.map? - self.get(b, ratio, r.seed)?.map?))
            .collect();
        summarize(&gaps).map(|s| s.mean)
    }

    fn ratios(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.results.iter().map(|c| c.ratio).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    fn variants(&self) -> Vec<Variant> {
        Variant::ALL
            .into_iter()
            .filter(|v| self.results.iter().any(|c| c.variant == *v))
            .collect()
    }

    /// Rows are variants; for each ratio, mAP and pointing accuracy as
    /// mean ± spread over seeds (percent). Raw rows follow.
    pub fn to_markdown(&self) -> String {
        let ratios = self.ratios();
        let mut s = String::from("| variant |");
        for r in &ratios {
            let _ = write!(s, " mAP r={r} | pointing r={r} |");
        }
        s.push_str("\n|---|");
        for _ in &ratios {
            s.push_str("---|---|");
        }
        s.push('\n');
        let fmt = |x: Option<Summary>, failed: usize| match x {
            Some(v) if failed == 0 => format!("{:.2} ± {:.2}", 100.0 * v.mean, 100.0 * v.spread),
            Some(v) => format!("{:.2} ± {:.2} ({} failed)", 100.0 * v.mean, 100.0 * v.spread, failed),
            None if failed > 0 => "failed".to_string(),
            None => "n/a".to_string(),
        };
        for v in self.variants() {
            let _ = write!(s, "| {v} |");
            for r in &ratios {
                let failed = self
                    .results
                    .iter()
                    .filter(|c| c.variant == v && c.ratio == *r && c.failed())
                    .count();
                let _ = write!(
                    s,
                    " {} | {} |",
                    fmt(self.map_summary(v, *r), failed),
                    fmt(self.pointing_summary(v, *r), failed)
                );
            }
            s.push('\n');
        }
        s.push_str("\n| variant | ratio | seed | mAP | pointing | status |\n|---|---|---|---|---|---|\n");
        let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        for c in &self.results {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} |",
                c.variant,
                c.ratio,
                c.seed,
                pct(c.map),
                pct(c.pointing),
                c.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"))
            );
        }
        s
    }
}

/// Runs every cell of `spec` on subsets of `pool`, writing each run under
/// `out_dir/<cell>` and appending results to `out_dir/results.jsonl`.
/// A failing cell is recorded and the grid continues.
pub fn run_ablation<R: Borrow<Record>>(
    spec: &AblationSpec,
    pool: &[R],
    out_dir: &Path,
) -> Result<AblationTable> {
    spec.validate()?;
    ensure_dir(out_dir)?;
    let positive: Vec<bool> = pool.iter().map(|r| r.borrow().is_positive()).collect();
    let results_path = out_dir.join("results.jsonl");
    let mut results_file =
        std::fs::File::create(&results_path).map_err(|e| Error::io(&results_path, e))?;
    let mut table = AblationTable::default();
    for cell in spec.cells() {
        log::info!("ablation cell {}", cell.dir_name());
        let outcome = run_cell(spec, &cell, pool, &positive, out_dir);
        let result = match outcome {
            Ok((map, pointing)) => CellResult {
                variant: cell.variant,
                ratio: cell.ratio,
                seed: cell.seed,
                map,
                pointing,
                error: None,
            },
            Err(e) => {
                log::warn!("cell {} failed: {}", cell.dir_name(), e);
                CellResult {
                    variant: cell.variant,
                    ratio: cell.ratio,
                    seed: cell.seed,
                    map: None,
                    pointing: None,
                    error: Some(e.to_string()),
                }
            }
        };
        writeln!(results_file, "{}", serde_json::to_string(&result)?)
            .map_err(|e| Error::io(&results_path, e))?;
        table.results.push(result);
    }
    let md = out_dir.join("table.md");
    std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(table)
}

fn run_cell<R: Borrow<Record>>(
    spec: &AblationSpec,
    cell: &Cell,
    pool: &[R],
    positive: &[bool],
    out_dir: &Path,
) -> Result<(Option<f64>, Option<f64>)> {
    let idx = select_subset(positive, &SubsetSpec::new(cell.ratio, spec.positives, cell.seed))?;
    let train_set: Vec<&Record> = idx.train.iter().map(|i| pool[*i].borrow()).collect();
    let test_set: Vec<&Record> = idx.test.iter().map(|i| pool[*i].borrow()).collect();
    let config = spec.config_for(cell);
    let run = train(&config, &train_set, None, &out_dir.join(cell.dir_name()), false)?;
    let report = evaluate_model(&run.model, &config.hash(), &test_set)?;
    let path = out_dir.join(cell.dir_name()).join("report.json");
    std::fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok((report.map, report.mean_pointing))
}
