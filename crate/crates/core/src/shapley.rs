//! Shapley decomposition of the squared Mahalanobis distance.
//!
//! The coalition game assigns to a set of variables `S` the squared distance
//! of the observation with all variables outside `S` reset to the center.
//! For this game the Shapley value has the closed form
//! `phi = (x - mu) ∘ omega (x - mu)` and the pairwise interaction index is
//! `2 (x_j - mu_j)(x_k - mu_k) omega_jk`. Exponential enumerations of the
//! defining sums are provided as oracles.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{check_subset, LocationScatter};

/// Largest dimension accepted by the enumeration oracles.
pub const ENUMERATION_LIMIT: usize = 20;

/// Per-variable contributions to a squared Mahalanobis distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyExplanation {
    pub phi: Vec<f64>,
    /// Squared distance being decomposed; equals the sum of `phi`.
    pub total: f64,
    /// Center the distance is measured from (`mu` or a reference point).
    pub reference: Vec<f64>,
    pub model_id: u64,
}

impl ShapleyExplanation {
    /// Contributions rescaled so that they sum to the unsquared distance `md`.
    ///
    /// Each entry is the proportional share `phi_j / md2` times `md`.
    pub fn rescaled(&self) -> Vec<f64> {
        if self.total <= 0.0 {
            return vec![0.0; self.phi.len()];
        }
        let md = self.total.sqrt();
        self.phi.iter().map(|v| v * md / self.total).collect()
    }
}

/// Symmetric matrix of pairwise Shapley interaction indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    pub phi: DMatrix<f64>,
}

impl InteractionMatrix {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.phi.row_iter().map(|r| r.sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.phi.sum()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.phi
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

fn deviation(x: &[f64], reference: &[f64]) -> Vec<f64> {
    x.iter().zip(reference).map(|(a, b)| a - b).collect()
}

/// Shapley value of `x` with respect to the model center.
pub fn shapley_value(x: &[f64], model: &LocationScatter) -> Result<ShapleyExplanation> {
    shapley_value_at(x, model.mu(), model)
}

/// Shapley value of `x` with respect to an arbitrary reference point, using the model's scatter.
pub fn shapley_value_at(
    x: &[f64],
    reference: &[f64],
    model: &LocationScatter,
) -> Result<ShapleyExplanation> {
    model.check_point(x, "x")?;
    model.check_point(reference, "reference")?;
    let d = deviation(x, reference);
    let od = model.omega_times(&d);
    let phi: Vec<f64> = d.iter().zip(&od).map(|(a, b)| a * b).collect();
    let total = phi.iter().sum();
    Ok(ShapleyExplanation {
        phi,
        total,
        reference: reference.to_vec(),
        model_id: model.id(),
    })
}

/// Pairwise interaction indices of `x` with respect to the model center.
pub fn interaction_matrix(x: &[f64], model: &LocationScatter) -> Result<InteractionMatrix> {
    interaction_matrix_at(x, model.mu(), model)
}

/// Pairwise interaction indices with respect to an arbitrary reference point.
///
/// Off-diagonal entries are `2 d_j d_k omega_jk`; the diagonal absorbs the
/// remainder so that every row sums to the corresponding Shapley coordinate.
pub fn interaction_matrix_at(
    x: &[f64],
    reference: &[f64],
    model: &LocationScatter,
) -> Result<InteractionMatrix> {
    model.check_point(x, "x")?;
    model.check_point(reference, "reference")?;
    let p = model.dim();
    let d = deviation(x, reference);
    let omega = model.omega();
    let mut phi = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        for k in (j + 1)..p {
            let v = 2.0 * d[j] * d[k] * omega[(j, k)];
            phi[(j, k)] = v;
            phi[(k, j)] = v;
        }
    }
    for j in 0..p {
        let off: f64 = (0..p)
            .filter(|&k| k != j)
            .map(|k| d[k] * omega[(j, k)])
            .sum();
        phi[(j, j)] = d[j] * d[j] * omega[(j, j)] - d[j] * off;
    }
    Ok(InteractionMatrix { phi })
}

/// Compensated (Kahan-Babuska) accumulator.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn guard_dim(p: usize) -> Result<()> {
    if p > ENUMERATION_LIMIT {
        Err(Error::DimensionTooLarge {
            dim: p,
            limit: ENUMERATION_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// Subsets of `pool` encoded by the bits of `mask`.
fn subset_from_mask(pool: &[usize], mask: u32) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(bit, _)| mask & (1 << bit) != 0)
        .map(|(_, &j)| j)
        .collect()
}

fn with(subset: &[usize], extra: &[usize]) -> Vec<usize> {
    let mut s = subset.to_vec();
    s.extend_from_slice(extra);
    s
}

/// Shapley coordinate `k` by enumerating every coalition not containing `k`.
///
/// Weighted marginal contributions `|S|!(p-|S|-1)!/p! * [v(S ∪ {k}) - v(S)]`.
/// Exponential in `p`; meant as an oracle for [`shapley_value`].
pub fn shapley_bruteforce(x: &[f64], model: &LocationScatter, k: usize) -> Result<f64> {
    let p = model.dim();
    guard_dim(p)?;
    check_subset(&[k], p)?;
    model.check_point(x, "x")?;
    let others: Vec<usize> = (0..p).filter(|&j| j != k).collect();
    let mut acc = CompensatedSum::default();
    for mask in 0..(1u32 << others.len()) {
        let s = subset_from_mask(&others, mask);
        let weight = 1.0 / (p as f64 * binomial(p - 1, s.len()));
        let gain = model.masked_md2(x, &with(&s, &[k]))? - model.masked_md2(x, &s)?;
        acc.add(weight * gain);
    }
    Ok(acc.value())
}

/// Pairwise interaction index `(j, k)` by enumerating every `T` disjoint from `{j, k}`.
pub fn interaction_bruteforce(
    x: &[f64],
    model: &LocationScatter,
    j: usize,
    k: usize,
) -> Result<f64> {
    let p = model.dim();
    guard_dim(p)?;
    check_subset(&[j, k], p)?;
    if j == k {
        return Err(Error::IndexOverlap(format!("j = k = {j}")));
    }
    model.check_point(x, "x")?;
    let others: Vec<usize> = (0..p).filter(|&i| i != j && i != k).collect();
    let mut acc = CompensatedSum::default();
    for mask in 0..(1u32 << others.len()) {
        let t = subset_from_mask(&others, mask);
        let weight = 1.0 / ((p - 1) as f64 * binomial(p - 2, t.len()));
        let delta = model.masked_md2(x, &with(&t, &[j, k]))?
            - model.masked_md2(x, &with(&t, &[j]))?
            - model.masked_md2(x, &with(&t, &[k]))?
            + model.masked_md2(x, &t)?;
        acc.add(weight * delta);
    }
    Ok(acc.value())
}

/// Third-order set-function derivative of the coalition game at `t`.
///
/// Alternating sum of `v(T ∪ L)` over the eight subsets `L` of `{j, k, l}`.
/// Vanishes identically for this game.
pub fn set_derivative3(
    x: &[f64],
    model: &LocationScatter,
    j: usize,
    k: usize,
    l: usize,
    t: &[usize],
) -> Result<f64> {
    let p = model.dim();
    let triple = [j, k, l];
    check_subset(&triple, p)?;
    check_subset(t, p)?;
    if j == k || j == l || k == l {
        return Err(Error::IndexOverlap(format!("{j}, {k}, {l} not distinct")));
    }
    if let Some(bad) = t.iter().find(|i| triple.contains(i)) {
        return Err(Error::IndexOverlap(format!(
            "{bad} is in both T and the triple"
        )));
    }
    model.check_point(x, "x")?;
    let mut acc = CompensatedSum::default();
    for mask in 0..8u32 {
        let extra = subset_from_mask(&triple, mask);
        let sign = if (3 - extra.len()).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        acc.add(sign * model.masked_md2(x, &with(t, &extra))?);
    }
    Ok(acc.value())
}
