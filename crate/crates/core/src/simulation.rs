//! Simulation harness for cellwise contamination.
//!
//! Clean data are drawn from `N(0, Σ)` with one of three correlation
//! families, then contaminated with either correlated shift outliers or
//! structured outliers placed along the least-variance direction of the
//! contaminated cells. Detected cells are scored against the injected mask.
//!
//! Every case draws from its own ChaCha generator seeded with a value derived
//! from `(master seed, case index, replication)`, so results do not depend on
//! execution order or thread count.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellwise::{detect, Algorithm, DetectorParams, Status};
use crate::error::{Error, Result};
use crate::linmodel::{cholesky_lower, submatrix, LocationScatter};

/// Rows per column in generated data sets.
pub const ROWS_PER_DIMENSION: usize = 20;
/// Off-diagonal correlation of the shift-outlier distribution.
pub const SHIFT_CORRELATION: f64 = 0.7;
/// Bound on the off-diagonals drawn for the low-correlation family.
pub const LOW_CORRELATION_BOUND: f64 = 0.3;
/// Smallest eigenvalue enforced on the low-correlation family.
pub const LOW_MIN_EIGENVALUE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovKind {
    /// Constant correlation 0.5.
    Mod,
    /// Correlation `(-0.9)^|j-k|`.
    Mix,
    /// Random, generally low correlations.
    Low,
}

impl CovKind {
    pub fn name(self) -> &'static str {
        match self {
            CovKind::Mod => "mod",
            CovKind::Mix => "mix",
            CovKind::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mod" => Some(CovKind::Mod),
            "mix" => Some(CovKind::Mix),
            "low" => Some(CovKind::Low),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Shift,
    Structured,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Shift => "shift",
            Scenario::Structured => "structured",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shift" => Some(Scenario::Shift),
            "structured" => Some(Scenario::Structured),
            _ => None,
        }
    }
}

/// One contamination scenario and replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationCase {
    pub p: usize,
    pub n: usize,
    pub cov_kind: CovKind,
    pub scenario: Scenario,
    /// Fraction of contaminated cells per outlying row (shift).
    pub eps1: f64,
    /// Fraction of outlying rows (shift).
    pub eps2: f64,
    /// Fraction of contaminated cells per column (structured).
    pub eps3: f64,
    pub gamma: f64,
    pub seed: u64,
    pub replication: usize,
}

/// Boolean `n × p` cell mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

/// Mask of injected outlying cells.
pub type GroundTruthMask = CellMask;

impl CellMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[i * self.cols + j] = value;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.cells[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_indices(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    pub fn column_count(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| self.get(i, j)).count()
    }
}

/// `ceil(total * fraction)` tolerant of representation error (`10 * 0.3` is 3).
pub fn fraction_count(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction) - 1e-9).ceil().max(0.0) as usize
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one `(case, replication)` pair.
pub fn derive_seed(master: u64, case_index: usize, replication: usize) -> u64 {
    mix64(mix64(mix64(master) ^ case_index as u64) ^ (replication as u64).rotate_left(32))
}

fn validate_fraction(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter { name, value })
    }
}

/// Unit-diagonal correlation matrix of the requested family.
pub fn make_covariance(kind: CovKind, p: usize, seed: u64) -> Result<DMatrix<f64>> {
    if p < 2 {
        return Err(Error::InvalidParameter {
            name: "p",
            value: p as f64,
        });
    }
    let sigma = match kind {
        CovKind::Mod => DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.5 }),
        CovKind::Mix => DMatrix::from_fn(p, p, |i, j| (-0.9_f64).powi(i.abs_diff(j) as i32)),
        CovKind::Low => low_correlation(p, seed)?,
    };
    cholesky_lower(&sigma)?;
    Ok(sigma)
}

/// Off-diagonals uniform in `[-0.3, 0.3]`, spectrum shifted and renormalized
/// until the smallest eigenvalue exceeds 0.05.
fn low_correlation(p: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = DMatrix::<f64>::identity(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let v = rng.random_range(-LOW_CORRELATION_BOUND..=LOW_CORRELATION_BOUND);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    for _ in 0..10 {
        let smallest = SymmetricEigen::new(r.clone()).eigenvalues.min();
        if smallest > LOW_MIN_EIGENVALUE {
            return Ok(r);
        }
        // (R + cI) / (1 + c) keeps a unit diagonal and lifts the spectrum.
        let c = (LOW_MIN_EIGENVALUE - smallest) / (1.0 - LOW_MIN_EIGENVALUE) + 1e-3;
        r = (r + DMatrix::<f64>::identity(p, p) * c) / (1.0 + c);
        for i in 0..p {
            r[(i, i)] = 1.0;
        }
    }
    let smallest = SymmetricEigen::new(r.clone()).eigenvalues.min();
    Err(Error::NotPositiveDefinite {
        index: 0,
        pivot: smallest,
    })
}

/// `n × p` draws from `N(mu, Σ)` through the model's Cholesky factor.
pub fn generate_clean<R: Rng + ?Sized>(
    n: usize,
    model: &LocationScatter,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = model.dim();
    let l = model.chol();
    let mu = model.mu();
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for j in 0..p {
            let mut s = mu[j];
            for k in 0..=j {
                s += l[(j, k)] * z[k];
            }
            x[(i, j)] = s;
        }
    }
    x
}

/// Replaces `ceil(p eps1)` random cells in `ceil(n eps2)` random rows with
/// draws from `N(gamma 1, Σ~)`, `Σ~` having unit diagonal and 0.7 off-diagonal.
pub fn inject_shift<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    eps1: f64,
    eps2: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, GroundTruthMask)> {
    validate_fraction("eps1", eps1)?;
    validate_fraction("eps2", eps2)?;
    if !gamma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "gamma",
            value: gamma,
        });
    }
    let (n, p) = x.shape();
    let rows = fraction_count(n, eps2).min(n);
    let r = fraction_count(p, eps1).clamp(1, p);
    let shift_cov = DMatrix::from_fn(r, r, |i, j| if i == j { 1.0 } else { SHIFT_CORRELATION });
    let l = cholesky_lower(&shift_cov)?;

    let mut out = x.clone();
    let mut mask = CellMask::new(n, p);
    let mut z = vec![0.0; r];
    for i in sample(rng, n, rows).into_vec() {
        let mut cells = sample(rng, p, r).into_vec();
        cells.sort_unstable();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (a, &j) in cells.iter().enumerate() {
            let mut v = gamma;
            for b in 0..=a {
                v += l[(a, b)] * z[b];
            }
            out[(i, j)] = v;
            mask.set(i, j, true);
        }
    }
    Ok((out, mask))
}

/// Direction of least variance of `Σ_K`, oriented so its first nonzero entry is positive.
fn least_variance_direction(sigma_k: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(sigma_k.clone());
    let idx = eig.eigenvalues.imin();
    let mut u: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
    if let Some(first) = u.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
    }
    u
}

/// Selects `ceil(n eps3)` random cells in every column; in each row the
/// selected subset `K` is replaced by `mu_K + gamma sqrt(k) u / md(u)`, `u`
/// being the least-variance eigenvector of `Σ_K`.
pub fn inject_structured<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    model: &LocationScatter,
    eps3: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, GroundTruthMask)> {
    validate_fraction("eps3", eps3)?;
    if !gamma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "gamma",
            value: gamma,
        });
    }
    let (n, p) = x.shape();
    if p != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: p,
        });
    }
    let per_column = fraction_count(n, eps3).min(n);
    let mut mask = CellMask::new(n, p);
    for j in 0..p {
        for i in sample(rng, n, per_column).into_vec() {
            mask.set(i, j, true);
        }
    }

    let mut out = x.clone();
    let mu = model.mu();
    for i in 0..n {
        let k = mask.row_indices(i);
        if k.is_empty() {
            continue;
        }
        let sigma_k = submatrix(model.sigma(), &k);
        let u = least_variance_direction(&sigma_k);
        let l = cholesky_lower(&sigma_k)?;
        let solved = crate::linmodel::cholesky_solve(&l, &u);
        let md_u: f64 = u
            .iter()
            .zip(&solved)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .sqrt();
        let scale = gamma * (k.len() as f64).sqrt() / md_u;
        for (a, &j) in k.iter().enumerate() {
            out[(i, j)] = mu[j] + scale * u[a];
        }
    }
    Ok((out, mask))
}

/// Cell-level confusion counts and derived scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            fscore: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Scores flagged cells against the ground truth.
pub fn evaluate(flagged: &CellMask, truth: &GroundTruthMask) -> Result<Metrics> {
    if flagged.rows != truth.rows || flagged.cols != truth.cols {
        return Err(Error::ShapeMismatch(format!(
            "flagged {}x{} vs truth {}x{}",
            flagged.rows, flagged.cols, truth.rows, truth.cols
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&f, &t) in flagged.cells.iter().zip(&truth.cells) {
        match (f, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_))
}

/// Outcome of one detector on one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub case: SimulationCase,
    pub detector: Algorithm,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    /// Observations whose detector run hit the iteration cap.
    pub capped: usize,
    pub error: Option<String>,
}

/// Cases skipped by a grid, matched on scenario, covariance family and gamma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub scenario: Scenario,
    pub cov_kind: CovKind,
    pub gamma: f64,
}

impl Exclusion {
    /// Structured cases with gamma = 2 under moderate or mixed correlation.
    pub fn low_gamma_correlated() -> Vec<Exclusion> {
        [CovKind::Mod, CovKind::Mix]
            .into_iter()
            .map(|cov_kind| Exclusion {
                scenario: Scenario::Structured,
                cov_kind,
                gamma: 2.0,
            })
            .collect()
    }

    fn matches(&self, case: &SimulationCase) -> bool {
        self.scenario == case.scenario
            && self.cov_kind == case.cov_kind
            && (self.gamma - case.gamma).abs() < 1e-12
    }
}

fn default_true() -> bool {
    true
}

/// Parameter grid of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub scenarios: Vec<Scenario>,
    pub cov_kinds: Vec<CovKind>,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub eps1: Vec<f64>,
    #[serde(default)]
    pub eps2: Vec<f64>,
    #[serde(default)]
    pub eps3: Vec<f64>,
    pub gammas: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub detectors: Vec<Algorithm>,
    #[serde(default)]
    pub params: DetectorParams,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

impl GridConfig {
    /// Full shift-outlier grid (720 combinations).
    pub fn shift_full(replications: usize, master_seed: u64) -> Self {
        Self {
            scenarios: vec![Scenario::Shift],
            cov_kinds: vec![CovKind::Mix, CovKind::Low, CovKind::Mod],
            dims: vec![5, 10, 20, 30, 40],
            eps1: vec![0.1, 0.2, 0.3, 0.4],
            eps2: vec![0.1, 0.2, 0.3, 0.4],
            eps3: Vec::new(),
            gammas: vec![1.0, 2.0, 3.0],
            replications,
            master_seed,
            detectors: vec![Algorithm::Scd, Algorithm::Moe],
            params: DetectorParams::default(),
            exclusions: Vec::new(),
            parallel: true,
        }
    }

    /// Full structured-outlier grid (300 combinations).
    pub fn structured_full(replications: usize, master_seed: u64) -> Self {
        Self {
            scenarios: vec![Scenario::Structured],
            eps1: Vec::new(),
            eps2: Vec::new(),
            eps3: vec![0.1, 0.2, 0.3, 0.4],
            gammas: vec![2.0, 3.0, 4.0, 5.0, 6.0],
            ..Self::shift_full(replications, master_seed)
        }
    }

    /// Reduced structured grid used for quick directional checks.
    pub fn structured_desk(master_seed: u64) -> Self {
        Self {
            cov_kinds: vec![CovKind::Mix],
            dims: vec![10, 20],
            eps3: vec![0.1, 0.2],
            gammas: vec![2.0, 4.0, 5.0, 6.0],
            replications: 10,
            ..Self::structured_full(10, master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidParameter {
                name: "replications",
                value: 0.0,
            });
        }
        for &p in &self.dims {
            if p < 2 {
                return Err(Error::InvalidParameter {
                    name: "p",
                    value: p as f64,
                });
            }
        }
        for &e in self.eps1.iter().chain(&self.eps2).chain(&self.eps3) {
            validate_fraction("eps", e)?;
        }
        for &g in &self.gammas {
            if !g.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "gamma",
                    value: g,
                });
            }
        }
        if self.scenarios.contains(&Scenario::Shift)
            && (self.eps1.is_empty() || self.eps2.is_empty())
        {
            return Err(Error::Parse(
                "shift scenario needs eps1 and eps2 values".into(),
            ));
        }
        if self.scenarios.contains(&Scenario::Structured) && self.eps3.is_empty() {
            return Err(Error::Parse("structured scenario needs eps3 values".into()));
        }
        Ok(())
    }

    /// Expands the grid into cases (replication 0, seed unset) in a fixed order.
    pub fn cases(&self) -> Vec<SimulationCase> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &cov_kind in &self.cov_kinds {
                for &p in &self.dims {
                    let fractions: Vec<(f64, f64, f64)> = match scenario {
                        Scenario::Shift => self
                            .eps1
                            .iter()
                            .flat_map(|&a| self.eps2.iter().map(move |&b| (a, b, 0.0)))
                            .collect(),
                        Scenario::Structured => self.eps3.iter().map(|&c| (0.0, 0.0, c)).collect(),
                    };
                    for (eps1, eps2, eps3) in fractions {
                        for &gamma in &self.gammas {
                            let case = SimulationCase {
                                p,
                                n: ROWS_PER_DIMENSION * p,
                                cov_kind,
                                scenario,
                                eps1,
                                eps2,
                                eps3,
                                gamma,
                                seed: 0,
                                replication: 0,
                            };
                            if !self.exclusions.iter().any(|e| e.matches(&case)) {
                                out.push(case);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Simulated, contaminated data set of one case.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub model: LocationScatter,
    pub data: DMatrix<f64>,
    pub truth: GroundTruthMask,
}

/// Generates and contaminates the data of one case from its seed.
pub fn simulate_case(case: &SimulationCase) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let sigma = make_covariance(case.cov_kind, case.p, rng.next_u64())?;
    let model = LocationScatter::new(&vec![0.0; case.p], &sigma)?;
    let clean = generate_clean(case.n, &model, &mut rng);
    let (data, truth) = match case.scenario {
        Scenario::Shift => inject_shift(&clean, case.eps1, case.eps2, case.gamma, &mut rng)?,
        Scenario::Structured => inject_structured(&clean, &model, case.eps3, case.gamma, &mut rng)?,
    };
    Ok(SimulatedData { model, data, truth })
}

/// Runs every requested detector on one case; the detectors use the generating model.
pub fn run_case(
    case: &SimulationCase,
    detectors: &[Algorithm],
    params: &DetectorParams,
) -> Vec<MetricRow> {
    let failed = |detector, msg: String| MetricRow {
        case: *case,
        detector,
        precision: 0.0,
        recall: 0.0,
        fscore: 0.0,
        capped: 0,
        error: Some(msg),
    };
    let sim = match simulate_case(case) {
        Ok(s) => s,
        Err(e) => {
            return detectors
                .iter()
                .map(|&d| failed(d, e.to_string()))
                .collect()
        }
    };
    let (n, p) = sim.data.shape();
    detectors
        .iter()
        .map(|&detector| {
            let mut flagged = CellMask::new(n, p);
            let mut capped = 0;
            for i in 0..n {
                let row: Vec<f64> = sim.data.row(i).iter().copied().collect();
                match detect(detector, &row, &sim.model, params) {
                    Ok(result) => {
                        if result.status != Status::Converged {
                            capped += 1;
                        }
                        for j in result.flagged {
                            flagged.set(i, j, true);
                        }
                    }
                    Err(e) => return failed(detector, format!("row {i}: {e}")),
                }
            }
            match evaluate(&flagged, &sim.truth) {
                Ok(m) => MetricRow {
                    case: *case,
                    detector,
                    precision: m.precision,
                    recall: m.recall,
                    fscore: m.fscore,
                    capped,
                    error: None,
                },
                Err(e) => failed(detector, e.to_string()),
            }
        })
        .collect()
}

/// Runs the grid: every case × replication × detector, ordered by case, then
/// replication, then detector.
pub fn run_grid(config: &GridConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    let jobs: Vec<SimulationCase> = config
        .cases()
        .into_iter()
        .enumerate()
        .flat_map(|(index, case)| {
            (0..config.replications).map(move |rep| SimulationCase {
                seed: derive_seed(config.master_seed, index, rep),
                replication: rep,
                ..case
            })
        })
        .collect();
    let run = |case: &SimulationCase| run_case(case, &config.detectors, &config.params);
    let nested: Vec<Vec<MetricRow>> = if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    Ok(nested.into_iter().flatten().collect())
}

/// Mean scores of a group of metric rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: Scenario,
    pub cov_kind: CovKind,
    pub detector: Algorithm,
    pub count: usize,
    pub failures: usize,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Means of precision, recall and F-score over rows without errors.
pub fn mean_scores<'a>(rows: impl IntoIterator<Item = &'a MetricRow>) -> Option<(f64, f64, f64)> {
    let (mut n, mut p, mut r, mut f) = (0usize, 0.0, 0.0, 0.0);
    for row in rows.into_iter().filter(|r| r.error.is_none()) {
        n += 1;
        p += row.precision;
        r += row.recall;
        f += row.fscore;
    }
    (n > 0).then(|| (p / n as f64, r / n as f64, f / n as f64))
}

/// Averages grouped by scenario, covariance family and detector.
pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(Scenario, CovKind, Algorithm), Vec<&MetricRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.case.scenario, row.case.cov_kind, row.detector))
            .or_default()
            .push(row);
    }
    groups
        .into_iter()
        .map(|((scenario, cov_kind, detector), group)| {
            let (precision, recall, fscore) =
                mean_scores(group.iter().copied()).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            Summary {
                scenario,
                cov_kind,
                detector,
                count: group.len(),
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                precision,
                recall,
                fscore,
            }
        })
        .collect()
}

/// Writes metric rows as CSV with a header.
pub fn write_rows_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "cov",
        "p",
        "n",
        "eps1",
        "eps2",
        "eps3",
        "gamma",
        "replication",
        "seed",
        "detector",
        "precision",
        "recall",
        "fscore",
        "capped",
        "error",
    ])?;
    for r in rows {
        let c = &r.case;
        w.write_record([
            c.scenario.name().to_string(),
            c.cov_kind.name().to_string(),
            c.p.to_string(),
            c.n.to_string(),
            c.eps1.to_string(),
            c.eps2.to_string(),
            c.eps3.to_string(),
            c.gamma.to_string(),
            c.replication.to_string(),
            c.seed.to_string(),
            r.detector.name().to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.fscore.to_string(),
            r.capped.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes grouped means as CSV with a header.
pub fn write_summary_csv<W: Write>(out: W, summary: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "cov",
        "detector",
        "count",
        "failures",
        "precision",
        "recall",
        "fscore",
    ])?;
    for s in summary {
        w.write_record([
            s.scenario.name().to_string(),
            s.cov_kind.name().to_string(),
            s.detector.name().to_string(),
            s.count.to_string(),
            s.failures.to_string(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.fscore.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::sample_covariance;
    use approx::assert_abs_diff_eq;

    #[test]
    fn moderate_and_mixed_families() {
        let m = make_covariance(CovKind::Mod, 3, 0).unwrap();
        assert_eq!(
            m,
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0])
        );
        let m = make_covariance(CovKind::Mix, 3, 0).unwrap();
        assert_abs_diff_eq!(m[(0, 1)], -0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(0, 2)], 0.81, epsilon = 1e-15);
        assert_eq!(m[(1, 1)], 1.0);
    }

    #[test]
    fn low_family_is_weakly_correlated() {
        let m = make_covariance(CovKind::Low, 10, 7).unwrap();
        for i in 0..10 {
            assert_eq!(m[(i, i)], 1.0);
            for j in 0..10 {
                if i != j {
                    assert!(m[(i, j)].abs() <= 0.5);
                    assert_eq!(m[(i, j)], m[(j, i)]);
                }
            }
        }
        assert!(SymmetricEigen::new(m.clone()).eigenvalues.min() > LOW_MIN_EIGENVALUE);
        assert_eq!(m, make_covariance(CovKind::Low, 10, 7).unwrap());
        // p = 40 needs the spectral repair
        let big = make_covariance(CovKind::Low, 40, 3).unwrap();
        assert!(SymmetricEigen::new(big).eigenvalues.min() > LOW_MIN_EIGENVALUE);
    }

    #[test]
    fn covariance_needs_two_dimensions() {
        assert!(make_covariance(CovKind::Mod, 1, 0).is_err());
    }

    #[test]
    fn clean_data_is_reproducible() {
        let sigma = make_covariance(CovKind::Mod, 4, 0).unwrap();
        let model = LocationScatter::new(&[0.0; 4], &sigma).unwrap();
        let a = generate_clean(50, &model, &mut ChaCha8Rng::seed_from_u64(11));
        let b = generate_clean(50, &model, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn clean_data_matches_covariance() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]);
        let model = LocationScatter::new(&[0.0; 2], &sigma).unwrap();
        let x = generate_clean(20_000, &model, &mut ChaCha8Rng::seed_from_u64(5));
        let s = sample_covariance(&x).unwrap();
        assert!((s - sigma).amax() < 0.05);
    }

    #[test]
    fn clean_distances_follow_chi_square() {
        let sigma = make_covariance(CovKind::Mod, 5, 0).unwrap();
        let model = LocationScatter::new(&[0.0; 5], &sigma).unwrap();
        let x = generate_clean(10_000, &model, &mut ChaCha8Rng::seed_from_u64(9));
        let mut d: Vec<f64> = x
            .row_iter()
            .map(|r| model.md2(&r.iter().copied().collect::<Vec<_>>()).unwrap())
            .collect();
        d.sort_by(f64::total_cmp);
        let q99 = d[(0.99 * d.len() as f64) as usize];
        assert!((13.0..=17.5).contains(&q99), "q99 = {q99}");
    }

    #[test]
    fn shift_counts() {
        let x = DMatrix::<f64>::zeros(200, 10);
        let (y, mask) = inject_shift(&x, 0.1, 0.1, 3.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(mask.count(), 20);
        let rows: usize = (0..200).filter(|&i| mask.row(i).iter().any(|&b| b)).count();
        assert_eq!(rows, 20);
        for i in 0..200 {
            for j in 0..10 {
                if !mask.get(i, j) {
                    assert_eq!(y[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn shift_fraction_upper_end() {
        let x = DMatrix::<f64>::zeros(100, 5);
        let (_, mask) = inject_shift(&x, 0.4, 0.4, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_abs_diff_eq!(mask.count() as f64 / 500.0, 0.16, epsilon = 1e-12);
    }

    #[test]
    fn shift_with_zero_gamma_is_centered() {
        let x = DMatrix::<f64>::zeros(2000, 5);
        let (y, mask) = inject_shift(&x, 0.4, 0.5, 0.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let vals: Vec<f64> = (0..2000)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|&(i, j)| mask.get(i, j))
            .map(|(i, j)| y[(i, j)])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.1);
        // two cells per row share the 0.7 correlation
        let pairs: Vec<(f64, f64)> = (0..2000)
            .map(|i| mask.row_indices(i))
            .enumerate()
            .filter(|(_, k)| k.len() == 2)
            .map(|(i, k)| (y[(i, k[0])], y[(i, k[1])]))
            .collect();
        let cov = pairs.iter().map(|(a, b)| a * b).sum::<f64>() / pairs.len() as f64;
        assert!((cov - 0.7).abs() < 0.1, "cov = {cov}");
    }

    #[test]
    fn fraction_counts_are_exact() {
        assert_eq!(fraction_count(10, 0.3), 3);
        assert_eq!(fraction_count(10, 0.1), 1);
        assert_eq!(fraction_count(5, 0.4), 2);
        assert_eq!(fraction_count(5, 0.1), 1);
        assert_eq!(fraction_count(200, 0.1), 20);
    }

    #[test]
    fn structured_singleton() {
        let sigma = make_covariance(CovKind::Mix, 10, 0).unwrap();
        let model = LocationScatter::new(&[0.0; 10], &sigma).unwrap();
        let x = DMatrix::<f64>::zeros(200, 10);
        let (y, mask) =
            inject_structured(&x, &model, 0.1, 3.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for j in 0..10 {
            assert_eq!(mask.column_count(j), 20);
        }
        for i in 0..200 {
            let k = mask.row_indices(i);
            if k.len() == 1 {
                assert_abs_diff_eq!(y[(i, k[0])], 3.0, epsilon = 1e-12);
            }
            if k.is_empty() {
                assert!(y.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn metrics_arithmetic() {
        let m = Metrics::from_counts(8, 2, 8);
        assert_abs_diff_eq!(m.precision, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(m.recall, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.fscore, 8.0 / 13.0, epsilon = 1e-15);
        let none = Metrics::from_counts(0, 0, 5);
        assert_eq!((none.precision, none.recall, none.fscore), (1.0, 0.0, 0.0));
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn evaluate_masks() {
        let mut truth = CellMask::new(3, 2);
        truth.set(0, 1, true);
        truth.set(2, 0, true);
        let m = evaluate(&truth, &truth).unwrap();
        assert_eq!((m.precision, m.recall, m.fscore), (1.0, 1.0, 1.0));
        let m = evaluate(&CellMask::new(3, 2), &truth).unwrap();
        assert_eq!((m.recall, m.fscore), (0.0, 0.0));
        assert!(matches!(
            evaluate(&CellMask::new(2, 2), &truth),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grid_counts_and_exclusions() {
        let mut cfg = GridConfig::structured_full(1, 0);
        assert_eq!(cfg.cases().len(), 300);
        assert_eq!(GridConfig::shift_full(1, 0).cases().len(), 720);
        cfg.exclusions = Exclusion::low_gamma_correlated();
        assert_eq!(cfg.cases().len(), 300 - 2 * 5 * 4);
    }

    #[test]
    fn small_grid_rows_and_determinism() {
        let cfg = GridConfig {
            dims: vec![5],
            eps3: vec![0.2],
            gammas: vec![4.0],
            replications: 2,
            ..GridConfig::structured_desk(99)
        };
        let rows = run_grid(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert_eq!(
            rows,
            run_grid(&GridConfig {
                parallel: false,
                ..cfg
            })
            .unwrap()
        );
        assert_ne!(rows[0].case.seed, rows[2].case.seed);
    }

    #[test]
    fn summary_means() {
        let case = SimulationCase {
            p: 5,
            n: 100,
            cov_kind: CovKind::Mix,
            scenario: Scenario::Structured,
            eps1: 0.0,
            eps2: 0.0,
            eps3: 0.1,
            gamma: 2.0,
            seed: 0,
            replication: 0,
        };
        let row = |precision, recall, error: Option<&str>| MetricRow {
            case,
            detector: Algorithm::Moe,
            precision,
            recall,
            fscore: harmonic_mean(precision, recall),
            capped: 0,
            error: error.map(str::to_string),
        };
        let rows = vec![
            row(1.0, 0.5, None),
            row(0.5, 0.5, None),
            row(0.0, 0.0, Some("x")),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].count, 3);
        assert_eq!(s[0].failures, 1);
        assert_abs_diff_eq!(s[0].precision, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s[0].recall, 0.5, epsilon = 1e-15);
    }
}
