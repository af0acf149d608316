//! Model sourcing: robust column standardization, sample covariance, and
//! loading externally estimated location/scatter pairs from CSV files.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{check_finite, LocationScatter};

/// Normal-consistency factor for the median absolute deviation.
pub const MAD_CONSISTENCY: f64 = 1.4826;
/// Columns whose scaled MAD falls below this are rejected.
pub const MIN_MAD: f64 = 1e-12;

/// Median of a slice (average of the two central values for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scaled median absolute deviation.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_CONSISTENCY * median(&dev)
}

/// Per-column medians and scaled MADs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationPlan {
    pub medians: Vec<f64>,
    pub mads: Vec<f64>,
}

impl StandardizationPlan {
    pub fn standardize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.medians.iter().zip(&self.mads))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn unstandardize_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.medians.iter().zip(&self.mads))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn unstandardize(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.mads[j] + self.medians[j]
        })
    }
}

/// Centers each column at its median and scales it by its MAD.
pub fn robust_standardize(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, StandardizationPlan)> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientRows {
            rows: x.nrows(),
            cols: 1,
        });
    }
    check_finite(x.as_slice(), "data")?;
    let mut medians = Vec::with_capacity(x.ncols());
    let mut mads = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let values: Vec<f64> = col.iter().copied().collect();
        let s = mad(&values);
        if !(s >= MIN_MAD) {
            return Err(Error::DegenerateColumn(j));
        }
        medians.push(median(&values));
        mads.push(s);
    }
    let plan = StandardizationPlan { medians, mads };
    let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        (x[(i, j)] - plan.medians[j]) / plan.mads[j]
    });
    Ok((z, plan))
}

pub fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter().map(|c| c.sum() / n).collect()
}

/// Unbiased sample covariance (divisor `n - 1`). Requires `n > p`.
///
/// The result is returned as computed; a rank-deficient estimate is caught by
/// [`LocationScatter::new`] rather than inverted.
pub fn sample_covariance(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::InsufficientRows { rows: n, cols: p });
    }
    check_finite(x.as_slice(), "data")?;
    let means = column_means(x);
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for row in x.row_iter() {
        for j in 0..p {
            let dj = row[j] - means[j];
            for k in j..p {
                cov[(j, k)] += dj * (row[k] - means[k]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for j in 0..p {
        for k in j..p {
            let v = cov[(j, k)] / denom;
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    Ok(cov)
}

/// Per-column transform applied before estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColumnTransform {
    #[default]
    None,
    Log,
}

impl ColumnTransform {
    pub fn forward(self, v: f64) -> Result<f64> {
        match self {
            ColumnTransform::None => Ok(v),
            ColumnTransform::Log if v > 0.0 => Ok(v.ln()),
            ColumnTransform::Log => Err(Error::Parse(format!(
                "log transform needs positive values, got {v}"
            ))),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            ColumnTransform::None => v,
            ColumnTransform::Log => v.exp(),
        }
    }
}

/// Numeric table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    pub columns: Vec<String>,
    pub rows: DMatrix<f64>,
}

fn parse_number(field: &str, line: usize) -> Result<f64> {
    let t = field.trim();
    t.parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: cannot parse {t:?} as a number")))
}

/// Reads a CSV with a header row and numeric fields.
pub fn read_table<R: Read>(reader: R) -> Result<DataTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                found: record.len(),
            });
        }
        for field in record.iter() {
            let v = parse_number(field, i + 2)?;
            if !v.is_finite() {
                return Err(Error::NonFinite("data"));
            }
            values.push(v);
        }
        n += 1;
    }
    let p = columns.len();
    Ok(DataTable {
        columns,
        rows: DMatrix::from_row_slice(n, p, &values),
    })
}

pub fn read_table_file(path: &Path) -> Result<DataTable> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_table(file)
}

fn read_headerless<R: Read>(reader: R) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push(record.iter().map(str::to_string).collect());
    }
    Ok(out)
}

/// Reads a location vector stored as a single CSV column. A non-numeric first
/// line is treated as a header.
pub fn read_location<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut lines = read_headerless(reader)?;
    if let Some(first) = lines.first() {
        if first.len() == 1 && first[0].trim().parse::<f64>().is_err() {
            lines.remove(0);
        }
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, fields)| {
            if fields.len() != 1 {
                return Err(Error::Parse(format!(
                    "location line {}: expected one value, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            parse_number(&fields[0], i + 1)
        })
        .collect()
}

/// Reads a headerless square scatter matrix.
pub fn read_scatter<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let lines = read_headerless(reader)?;
    let p = lines.len();
    let mut values = Vec::with_capacity(p * p);
    for (i, fields) in lines.iter().enumerate() {
        if fields.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: fields.len(),
            });
        }
        for f in fields {
            values.push(parse_number(f, i + 1)?);
        }
    }
    Ok(DMatrix::from_row_slice(p, p, &values))
}

/// Builds a model from externally estimated location and scatter readers.
pub fn load_model_from<R1: Read, R2: Read>(mu: R1, sigma: R2) -> Result<LocationScatter> {
    let mu = read_location(mu)?;
    let sigma = read_scatter(sigma)?;
    LocationScatter::new(&mu, &sigma)
}

/// Builds a model from a location file (one value per line) and a scatter file (square CSV).
pub fn load_model(mu_path: &Path, sigma_path: &Path) -> Result<LocationScatter> {
    let open =
        |p: &Path| std::fs::File::open(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    load_model_from(open(mu_path)?, open(sigma_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standardize_small_column() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (z, plan) = robust_standardize(&x).unwrap();
        assert_eq!(plan.medians, vec![2.0]);
        assert_abs_diff_eq!(plan.mads[0], 1.4826, epsilon = 1e-12);
        assert_abs_diff_eq!(z[(0, 0)], -0.6745, epsilon = 1e-4);
        assert_eq!(z[(1, 0)], 0.0);
        assert_abs_diff_eq!(z[(2, 0)], 0.6745, epsilon = 1e-4);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        assert_eq!(robust_standardize(&x), Err(Error::DegenerateColumn(1)));
    }

    #[test]
    fn standardizing_twice_is_stable() {
        let x = DMatrix::from_row_slice(5, 1, &[-2.0, -0.5, 0.1, 0.7, 3.0]);
        let (z, _) = robust_standardize(&x).unwrap();
        let (z2, plan) = robust_standardize(&z).unwrap();
        assert_abs_diff_eq!(plan.medians[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.mads[0], 1.0, epsilon = 1e-12);
        assert!((z2 - z).amax() < 1e-12);
    }

    #[test]
    fn covariance_needs_more_rows_than_columns() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 5.0]);
        assert_eq!(
            sample_covariance(&x),
            Err(Error::InsufficientRows { rows: 2, cols: 2 })
        );
    }

    #[test]
    fn duplicated_column_is_not_inverted() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 4.0, 4.0, 3.0, 3.0]);
        let cov = sample_covariance(&x).unwrap();
        assert_abs_diff_eq!(cov[(0, 0)], cov[(0, 1)], epsilon = 1e-14);
        assert!(matches!(
            LocationScatter::new(&column_means(&x), &cov),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn parse_model_files() {
        let m = load_model_from("mu\n0\n0\n".as_bytes(), "1,0\n0,1\n".as_bytes()).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.omega()[(0, 0)], 1.0);
        let err = load_model_from("0\n0\n0\n".as_bytes(), "1,0\n0,1\n".as_bytes());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = load_model_from("0\nx\n".as_bytes(), "1,0\n0,1\n".as_bytes());
        assert!(matches!(err, Err(Error::Parse(_))));
        let err = load_model_from("0\n0\n".as_bytes(), "1,0\n0\n".as_bytes());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn parse_table() {
        let t = read_table("a,b\n1,2\n3,4.5\n".as_bytes()).unwrap();
        assert_eq!(t.columns, vec!["a", "b"]);
        assert_eq!(t.rows[(1, 1)], 4.5);
        let empty = read_table("a,b\n".as_bytes()).unwrap();
        assert_eq!(empty.rows.nrows(), 0);
        assert!(read_table("a,b\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn log_transform_roundtrip() {
        let t = ColumnTransform::Log;
        assert_abs_diff_eq!(t.inverse(t.forward(3.5).unwrap()), 3.5, epsilon = 1e-14);
        assert!(t.forward(-1.0).is_err());
    }
}
