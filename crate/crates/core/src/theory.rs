//! Monte-Carlo empirical Rademacher complexity of finite hypothesis samples.
//!
//! `R_S(F) = E_σ sup_{f∈F} (1/n) Σ_i σ_i f(x_i)` with `σ_i` uniform on `{−1, +1}`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Values of a finite set of scalar hypotheses on a fixed sample, `[hypotheses, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSample {
    values: Tensor,
}

impl HypothesisSample {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            bail!(Dimension, "hypothesis values must be [h, n], got {:?}", values.shape());
        }
        if !values.is_finite() {
            bail!(Contract, "hypothesis values must be finite");
        }
        Ok(Self { values })
    }

    pub fn num_hypotheses(&self) -> usize {
        self.values.rows()
    }

    pub fn num_samples(&self) -> usize {
        self.values.last_dim()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Every pairwise sum `f + g`, `f ∈ self`, `g ∈ other`.
    pub fn minkowski_sum(&self, other: &Self) -> Result<Self> {
        if self.num_samples() != other.num_samples() {
            bail!(
                Contract,
                "hypotheses over {} and {} samples",
                self.num_samples(),
                other.num_samples()
            );
        }
        let n = self.num_samples();
        let mut out = Vec::with_capacity(self.num_hypotheses() * other.num_hypotheses() * n);
        for i in 0..self.num_hypotheses() {
            for j in 0..other.num_hypotheses() {
                out.extend(self.values.row(i).iter().zip(other.values.row(j)).map(|(a, b)| a + b));
            }
        }
        Self::new(Tensor::new(
            alloc::vec![self.num_hypotheses() * other.num_hypotheses(), n],
            out,
        )?)
    }

    /// `sup_f (1/n) Σ σ_i f(x_i)` for one sign vector.
    pub fn sup_correlation(&self, sigma: &[f64]) -> f64 {
        let n = self.num_samples() as f64;
        (0..self.num_hypotheses())
            .map(|h| math::stable_sum(self.values.row(h).iter().zip(sigma).map(|(f, s)| f * s)) / n)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

fn estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = math::stable_sum(xs.iter().copied()) / n;
    let var = if xs.len() > 1 {
        math::stable_sum(xs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        stderr: math::sqrt(var / n),
        draws: xs.len(),
    }
}

/// Minimum number of sign draws accepted by the estimators.
pub const MIN_DRAWS: usize = 100;

/// Sign vector for draw `k`, independent of every other draw.
fn sigma(rng: &Rng, k: usize, n: usize) -> Vec<f64> {
    let mut r = rng.derive(k as u64);
    (0..n).map(|_| r.sign()).collect()
}

fn check_draws(h: &HypothesisSample, draws: usize) -> Result<()> {
    if h.num_hypotheses() == 0 || h.num_samples() == 0 {
        bail!(Contract, "empty hypothesis sample");
    }
    if draws < MIN_DRAWS {
        bail!(Contract, "need at least {MIN_DRAWS} sign draws, got {draws}");
    }
    Ok(())
}

/// Monte-Carlo estimate of the empirical Rademacher complexity.
pub fn empirical_rademacher(h: &HypothesisSample, draws: usize, rng: &Rng) -> Result<Estimate> {
    check_draws(h, draws)?;
    let n = h.num_samples();
    let per: Vec<f64> = (0..draws).map(|k| h.sup_correlation(&sigma(rng, k, n))).collect();
    Ok(estimate(&per))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubadditivityReport {
    /// `R(H1 ⊕ H2)`.
    pub r_combined: Estimate,
    pub r1: Estimate,
    pub r2: Estimate,
    /// `R(H1) + R(H2)`.
    pub r_sum: f64,
    /// Standard error of the per-draw difference `sup(H1) + sup(H2) − sup(H1 ⊕ H2)`.
    pub stderr: f64,
    /// `r_sum + 3·stderr − r_combined`; nonnegative up to rounding when the bound holds.
    pub margin: f64,
    /// Draws where `sup(H1 ⊕ H2)` exceeded `sup(H1) + sup(H2)` beyond rounding.
    pub draw_violations: usize,
    pub draws: usize,
    pub holds: bool,
}

/// Estimate both sides of `R(H1 ⊕ H2) ≤ R(H1) + R(H2)` on shared sign draws.
///
/// Both the per-draw comparison and the final margin allow a rounding slack
/// of `1e-12` times the magnitude of the terms, since the combined class is
/// evaluated from the summed values rather than from the two sups. For a
/// pairwise-sum class the two sides agree exactly in real arithmetic.
pub fn subadditivity_check(
    h1: &HypothesisSample,
    h2: &HypothesisSample,
    draws: usize,
    rng: &Rng,
) -> Result<SubadditivityReport> {
    check_draws(h1, draws)?;
    check_draws(h2, draws)?;
    let combined = h1.minkowski_sum(h2)?;
    let n = h1.num_samples();
    let (mut left, mut s1, mut s2, mut diff) = (
        Vec::with_capacity(draws),
        Vec::with_capacity(draws),
        Vec::with_capacity(draws),
        Vec::with_capacity(draws),
    );
    let mut draw_violations = 0;
    for k in 0..draws {
        let s = sigma(rng, k, n);
        let (l, a, b) = (combined.sup_correlation(&s), h1.sup_correlation(&s), h2.sup_correlation(&s));
        let slack = 1e-12 * (1.0 + a.abs() + b.abs());
        if l > a + b + slack {
            draw_violations += 1;
        }
        left.push(l);
        s1.push(a);
        s2.push(b);
        diff.push(a + b - l);
    }
    let (r_combined, r1, r2) = (estimate(&left), estimate(&s1), estimate(&s2));
    let stderr = estimate(&diff).stderr;
    let r_sum = r1.mean + r2.mean;
    let margin = r_sum + 3.0 * stderr - r_combined.mean;
    Ok(SubadditivityReport {
        r_combined,
        r1,
        r2,
        r_sum,
        stderr,
        margin,
        draw_violations,
        draws,
        holds: draw_violations == 0 && margin >= -1e-12 * (1.0 + r_sum.abs()),
    })
}
