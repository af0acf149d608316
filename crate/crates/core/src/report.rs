//! Versioned JSON reports for explanation and detection runs, and their SVG rendering.
//!
//! Reports are computed once and rendered later without recomputation. Rows
//! are processed in parallel; records are always ordered by input row.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellwise::{detect, Algorithm, DetectorParams, Snapshot, Status};
use crate::distributions::chi2_quantile;
use crate::error::{Error, Result};
use crate::estimation::{
    column_means, robust_standardize, sample_covariance, ColumnTransform, StandardizationPlan,
};
use crate::linmodel::LocationScatter;
use crate::shapley::{interaction_matrix_at, shapley_value};
use crate::svg;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the location and scatter come from.
#[derive(Debug, Clone)]
pub enum ModelSource {
    /// Externally supplied, in the transformed data scale.
    External(LocationScatter),
    /// Column means and sample covariance.
    Sample,
    /// Median/MAD standardization, then zero location and sample covariance.
    Standardize,
}

/// Data in the working scale together with the model used on it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub columns: Vec<String>,
    /// Input values after column transforms and standardization.
    pub data: DMatrix<f64>,
    /// Absent only for empty input with an estimated model.
    pub model: Option<LocationScatter>,
    pub transforms: Vec<ColumnTransform>,
    pub standardization: Option<StandardizationPlan>,
}

impl Prepared {
    /// Maps a working-scale row back to the input scale.
    pub fn to_original(&self, row: &[f64]) -> Vec<f64> {
        let unscaled = match &self.standardization {
            Some(plan) => plan.unstandardize_row(row),
            None => row.to_vec(),
        };
        unscaled
            .iter()
            .zip(&self.transforms)
            .map(|(&v, t)| t.inverse(v))
            .collect()
    }
}

/// Applies column transforms and resolves the model.
pub fn prepare(
    columns: Vec<String>,
    raw: &DMatrix<f64>,
    transforms: Vec<ColumnTransform>,
    source: ModelSource,
) -> Result<Prepared> {
    let (n, p) = raw.shape();
    if columns.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: columns.len(),
        });
    }
    if n == 0 {
        return Ok(Prepared {
            columns,
            data: raw.clone(),
            model: None,
            transforms: vec![ColumnTransform::None; p],
            standardization: None,
        });
    }
    let transforms = if transforms.is_empty() {
        vec![ColumnTransform::None; p]
    } else {
        transforms
    };
    if transforms.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: transforms.len(),
        });
    }
    let mut data = raw.clone();
    for j in 0..p {
        for i in 0..n {
            data[(i, j)] = transforms[j].forward(raw[(i, j)])?;
        }
    }

    let (data, model, standardization) = match source {
        ModelSource::External(model) => {
            if model.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    found: p,
                });
            }
            (data, Some(model), None)
        }
        ModelSource::Sample => {
            let model = LocationScatter::new(&column_means(&data), &sample_covariance(&data)?)?;
            (data, Some(model), None)
        }
        ModelSource::Standardize => {
            let (z, plan) = robust_standardize(&data)?;
            let model = LocationScatter::new(&vec![0.0; p], &sample_covariance(&z)?)?;
            (z, Some(model), Some(plan))
        }
    };
    Ok(Prepared {
        columns,
        data,
        model,
        transforms,
        standardization,
    })
}

fn row_of(data: &DMatrix<f64>, i: usize) -> Vec<f64> {
    data.row(i).iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub row: usize,
    pub md2: Option<f64>,
    pub phi: Option<Vec<f64>>,
    /// `phi` rescaled to sum to the unsquared distance.
    pub rescaled: Option<Vec<f64>>,
    pub interactions: Option<Vec<Vec<f64>>>,
    pub outlier: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub columns: Vec<String>,
    pub transforms: Vec<ColumnTransform>,
    pub standardization: Option<StandardizationPlan>,
    pub level: f64,
    /// Central chi-square quantile with `p` degrees of freedom.
    pub cutoff: Option<f64>,
    pub records: Vec<ExplainRecord>,
}

fn explain_row(x: &[f64], model: &LocationScatter, cutoff: f64, row: usize) -> ExplainRecord {
    let computed = shapley_value(x, model).and_then(|s| {
        let phi = interaction_matrix_at(x, model.mu(), model)?;
        Ok((s, phi))
    });
    match computed {
        Ok((s, phi)) => ExplainRecord {
            row,
            md2: Some(s.total),
            rescaled: Some(s.rescaled()),
            phi: Some(s.phi),
            interactions: Some(phi.to_rows()),
            outlier: Some(s.total > cutoff),
            error: None,
        },
        Err(e) => ExplainRecord {
            row,
            md2: None,
            phi: None,
            rescaled: None,
            interactions: None,
            outlier: None,
            error: Some(e.to_string()),
        },
    }
}

/// Shapley values and interaction indices of every row.
pub fn explain_report(prepared: &Prepared, level: f64) -> Result<ExplainReport> {
    let p = prepared.columns.len();
    let cutoff = if p > 0 {
        Some(chi2_quantile(p, level)?)
    } else {
        None
    };
    let records = match (&prepared.model, cutoff) {
        (Some(model), Some(c)) => (0..prepared.data.nrows())
            .into_par_iter()
            .map(|i| explain_row(&row_of(&prepared.data, i), model, c, i))
            .collect(),
        _ => Vec::new(),
    };
    Ok(ExplainReport {
        columns: prepared.columns.clone(),
        transforms: prepared.transforms.clone(),
        standardization: prepared.standardization.clone(),
        level,
        cutoff,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRecord {
    pub row: usize,
    /// Flagged cells (flag order for SCD, ascending for MOE).
    pub flagged: Vec<usize>,
    /// Imputed observation in the working scale.
    pub x_tilde: Vec<f64>,
    /// Imputed observation mapped back through standardization and transforms.
    pub x_tilde_original: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub shift: Vec<f64>,
    pub phi_final: Vec<f64>,
    /// Interaction indices against the reference of `phi_final`.
    pub interactions: Vec<Vec<f64>>,
    pub md2: f64,
    pub cutoff: f64,
    pub status: Option<Status>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<Snapshot>,
    pub error: Option<String>,
}

/// Flagged-cell counts per column and per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMap {
    pub per_column: Vec<usize>,
    pub per_row: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub columns: Vec<String>,
    pub transforms: Vec<ColumnTransform>,
    pub standardization: Option<StandardizationPlan>,
    pub algorithm: Algorithm,
    pub params: DetectorParams,
    pub records: Vec<DetectRecord>,
    pub cell_map: CellMap,
}

fn detect_row(
    prepared: &Prepared,
    model: &LocationScatter,
    algorithm: Algorithm,
    params: &DetectorParams,
    keep_history: bool,
    row: usize,
) -> DetectRecord {
    let x = row_of(&prepared.data, row);
    let computed = detect(algorithm, &x, model, params).and_then(|r| {
        let phi = interaction_matrix_at(&x, &r.phi_final.reference, model)?;
        Ok((r, phi))
    });
    match computed {
        Ok((r, phi)) => DetectRecord {
            row,
            x_tilde_original: prepared.to_original(&r.x_tilde),
            flagged: r.flagged,
            x_tilde: r.x_tilde,
            mu_tilde: r.mu_tilde,
            shift: r.shift,
            md2: r.phi_final.total,
            phi_final: r.phi_final.phi,
            interactions: phi.to_rows(),
            cutoff: r.cutoff.value,
            status: Some(r.status),
            history: if keep_history { r.history } else { Vec::new() },
            error: None,
        },
        Err(e) => DetectRecord {
            row,
            flagged: Vec::new(),
            x_tilde_original: prepared.to_original(&x),
            x_tilde: x,
            mu_tilde: Vec::new(),
            shift: Vec::new(),
            phi_final: Vec::new(),
            interactions: Vec::new(),
            md2: 0.0,
            cutoff: 0.0,
            status: None,
            history: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Runs a cellwise detector on every row.
pub fn detect_report(
    prepared: &Prepared,
    algorithm: Algorithm,
    params: &DetectorParams,
    keep_history: bool,
) -> Result<DetectReport> {
    params.validate()?;
    let records: Vec<DetectRecord> = match &prepared.model {
        Some(model) => (0..prepared.data.nrows())
            .into_par_iter()
            .map(|i| detect_row(prepared, model, algorithm, params, keep_history, i))
            .collect(),
        None => Vec::new(),
    };
    let mut per_column = vec![0; prepared.columns.len()];
    let per_row = records
        .iter()
        .map(|r| {
            for &j in &r.flagged {
                per_column[j] += 1;
            }
            r.flagged.len()
        })
        .collect();
    Ok(DetectReport {
        columns: prepared.columns.clone(),
        transforms: prepared.transforms.clone(),
        standardization: prepared.standardization.clone(),
        algorithm,
        params: *params,
        records,
        cell_map: CellMap {
            per_column,
            per_row,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportBody {
    Explain(ExplainReport),
    Detect(DetectReport),
}

/// Top-level report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    #[serde(flatten)]
    pub body: ReportBody,
}

impl ReportFile {
    pub fn new(body: ReportBody) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            body,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses a report; anything that is not a well-formed report of the
    /// current schema version is a schema mismatch.
    pub fn from_json(text: &str) -> Result<Self> {
        let mismatch = |found: String| Error::SchemaVersionMismatch {
            expected: SCHEMA_VERSION,
            found,
        };
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| mismatch(format!("unparseable document ({e})")))?;
        match value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(mismatch(v.to_string())),
            None => return Err(mismatch("none".into())),
        }
        serde_json::from_value(value).map_err(|e| mismatch(format!("malformed body ({e})")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingResults(path.display().to_string()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// SVG documents derived from a report, keyed by file name.
pub fn render(report: &ReportFile) -> Vec<(String, String)> {
    let mut out = Vec::new();
    match &report.body {
        ReportBody::Explain(r) => {
            let ok: Vec<&ExplainRecord> = r.records.iter().filter(|x| x.error.is_none()).collect();
            let labels: Vec<String> = ok.iter().map(|x| format!("{}", x.row)).collect();
            let values: Vec<Vec<f64>> = ok.iter().filter_map(|x| x.rescaled.clone()).collect();
            out.push((
                "contributions.svg".to_string(),
                svg::stacked_bars(
                    "Rescaled Shapley contributions",
                    &labels,
                    &r.columns,
                    &values,
                ),
            ));
            for rec in ok {
                if let Some(m) = &rec.interactions {
                    out.push((
                        format!("interactions_row{}.svg", rec.row),
                        svg::heatmap(
                            &format!("Interaction indices, row {}", rec.row),
                            &r.columns,
                            m,
                        ),
                    ));
                }
            }
        }
        ReportBody::Detect(r) => {
            let ok: Vec<&DetectRecord> = r.records.iter().filter(|x| x.error.is_none()).collect();
            let labels: Vec<String> = ok.iter().map(|x| format!("{}", x.row)).collect();
            let values: Vec<Vec<f64>> = ok.iter().map(|x| x.phi_final.clone()).collect();
            let flags: Vec<Vec<bool>> = ok
                .iter()
                .map(|x| {
                    let mut m = vec![false; r.columns.len()];
                    x.flagged.iter().for_each(|&j| m[j] = true);
                    m
                })
                .collect();
            out.push((
                "tiles.svg".to_string(),
                svg::tile_map(
                    &format!(
                        "{} Shapley values of flagged observations",
                        r.algorithm.name()
                    ),
                    &r.columns,
                    &labels,
                    &values,
                    &flags,
                ),
            ));
            for rec in ok {
                out.push((
                    format!("interactions_row{}.svg", rec.row),
                    svg::heatmap(
                        &format!("Interaction indices, row {}", rec.row),
                        &r.columns,
                        &rec.interactions,
                    ),
                ));
                if !rec.history.is_empty() {
                    let labels: Vec<String> = rec
                        .history
                        .iter()
                        .map(|s| s.iteration.to_string())
                        .collect();
                    let values: Vec<Vec<f64>> = rec.history.iter().map(|s| s.phi.clone()).collect();
                    out.push((
                        format!("history_row{}.svg", rec.row),
                        svg::stacked_bars(
                            &format!("Shapley values per iteration, row {}", rec.row),
                            &labels,
                            &r.columns,
                            &values,
                        ),
                    ));
                }
            }
        }
    }
    out
}

/// Writes the rendered SVG files into `dir` and returns their paths.
pub fn render_to_dir(report: &ReportFile, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    render(report)
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            Ok(path)
        })
        .collect()
}
