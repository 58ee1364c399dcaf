//! Study-level CSV input and the analysis report.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comparators::{Method, OrResult};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, MetaDataset, StudyRecord};
use crate::search::{exact_ci, ExactCi, SearchConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    study_id: String,
    n1: u64,
    y1: u64,
    n2: u64,
    y2: u64,
}

/// Reads `study_id,n1,y1,n2,y2` rows (any column order). Errors carry the
/// 1-based line number of the offending row.
pub fn read_studies<R: Read>(reader: R) -> Result<Vec<StudyRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                message: match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                },
            }
        })?;
        if !seen.insert(row.study_id.clone()) {
            log::warn!("duplicate study id {:?}", row.study_id);
        }
        out.push(StudyRecord::new(
            row.study_id,
            row.y1,
            row.n1,
            row.y2,
            row.n2,
        ));
    }
    Ok(out)
}

/// Reads and validates a dataset. Invalid records are reported by line.
pub fn load_dataset_from<R: Read>(reader: R) -> Result<MetaDataset> {
    validate_dataset(read_studies(reader)?).map_err(|e| match e {
        Error::InvalidStudy { index, id, reason } => Error::Parse {
            line: index + 2,
            message: format!("study {id}: {reason}"),
        },
        other => other,
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MetaDataset> {
    load_dataset_from(std::fs::File::open(path)?)
}

pub fn write_studies<'a, W: Write>(
    writer: W,
    studies: impl IntoIterator<Item = &'a StudyRecord>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in studies {
        w.serialize(Row {
            study_id: s.id.clone(),
            n1: s.n1,
            y1: s.y1,
            n2: s.n2,
            y2: s.y2,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub studies: usize,
    pub informative: usize,
    pub double_zero: usize,
    pub balanced: bool,
    pub events_treated: u64,
    pub events_control: u64,
}

impl DatasetSummary {
    pub fn of(data: &MetaDataset) -> Self {
        DatasetSummary {
            studies: data.k_tot(),
            informative: data.k(),
            double_zero: data.dz_studies().len(),
            balanced: data.is_balanced(),
            events_treated: data.studies().iter().map(|s| s.y1).sum(),
            events_control: data.studies().iter().map(|s| s.y2).sum(),
        }
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn odds(mu: f64) -> f64 {
    mu / (1.0 - mu)
}

/// Values rounded to two decimals for display.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rounded {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `mu / (1 - mu)` at the estimate and bounds; a relative risk on balanced
/// designs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedRatio {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSection {
    #[serde(flatten)]
    pub ci: ExactCi,
    pub rounded: Rounded,
    pub derived_ratio: DerivedRatio,
}

impl From<ExactCi> for ExactSection {
    fn from(ci: ExactCi) -> Self {
        ExactSection {
            rounded: Rounded {
                estimate: round2(ci.mu_hat),
                lower: round2(ci.lower),
                upper: round2(ci.upper),
            },
            derived_ratio: DerivedRatio {
                estimate: odds(ci.mu_hat),
                lower: odds(ci.lower),
                upper: odds(ci.upper),
            },
            ci,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparatorEntry {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<OrResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub mc_reps: usize,
    pub step: f64,
    pub alpha: f64,
    /// Wall-clock seconds; left out unless requested, since it would make
    /// otherwise identical runs differ.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub dataset: DatasetSummary,
    pub exact: ExactSection,
    pub comparators: Vec<ComparatorEntry>,
    pub provenance: Provenance,
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per method: the exact interval for `mu` first, then the
    /// odds-ratio comparators.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "scale", "estimate", "ci_lo", "ci_hi", "p_value"])?;
        let ci = &self.exact.ci;
        w.write_record([
            "exact".to_string(),
            "mu".into(),
            ci.mu_hat.to_string(),
            ci.lower.to_string(),
            ci.upper.to_string(),
            ci.p_null.to_string(),
        ])?;
        for c in &self.comparators {
            match &c.result {
                Some(r) => w.write_record([
                    c.method.name().to_string(),
                    "OR".into(),
                    r.or_hat.to_string(),
                    r.ci_lo.to_string(),
                    r.ci_hi.to_string(),
                    r.p_value.to_string(),
                ])?,
                None => w.write_record([c.method.name(), "OR", "", "", "", ""])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings for a full analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeConfig {
    pub search: SearchConfig,
    pub methods: Vec<Method>,
    pub record_time: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            search: SearchConfig::default(),
            methods: Method::ALL.to_vec(),
            record_time: false,
        }
    }
}

/// Exact interval plus the requested comparators. A comparator that cannot
/// be computed is recorded with its error instead of failing the analysis.
pub fn analyze(data: &MetaDataset, cfg: &AnalyzeConfig) -> Result<AnalysisReport> {
    let start = std::time::Instant::now();
    let ci = exact_ci(data, &cfg.search)?;
    let comparators = cfg
        .methods
        .iter()
        .map(|&m| match m.run(data, cfg.search.alpha) {
            Ok(r) => ComparatorEntry {
                method: m,
                result: Some(r),
                error: None,
            },
            Err(e) => {
                log::warn!("{m}: {e}");
                ComparatorEntry {
                    method: m,
                    result: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        dataset: DatasetSummary::of(data),
        exact: ci.into(),
        comparators,
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.search.mc.seed,
            mc_reps: cfg.search.mc.m,
            step: cfg.search.step,
            alpha: cfg.search.alpha,
            elapsed_seconds: cfg.record_time.then(|| start.elapsed().as_secs_f64()),
        },
    })
}
