//! Influence functions of the linear and robust matching estimators.
//!
//! With products `p_d`, mean `y = z_lin/D`, and one reweighting step
//! (`K = 1`), an ε-mass contamination at `x0` moves the estimates by
//!
//! ```text
//! IF_lin(x0)    = D·(x0 − y)
//! IF_robust(x0) = D·w0·(x0 − z_rob/D) / Σ w_d,   w0 = 1/|x0 − y|
//! ```
//!
//! where `w_d = 1/|p_d − y|` are the clean weights. The linear estimator's
//! sensitivity grows without bound in `x0`; the robust one damps outliers by
//! `w0`. [`numeric_if`] evaluates the contaminated estimators directly (with
//! weights frozen at their clean values) and divides out ε, converging to the
//! analytic forms as ε → 0.

use crate::pattern::ProductVector;
use crate::{Error, Result};

/// Clean-state quantities the influence formulas are evaluated at.
#[derive(Debug, Clone)]
pub struct EstimatorSnapshot {
    p: Vec<f64>,
    z_lpm: f64,
    z_nrpm: f64,
    weights: Vec<f64>,
}

impl EstimatorSnapshot {
    /// Build from products; fails if any product sits exactly on the mean,
    /// which would make its weight infinite.
    pub fn new(pv: &ProductVector) -> Result<Self> {
        let p = pv.values().to_vec();
        let d = p.len() as f64;
        let z_lpm: f64 = p.iter().sum();
        let y = z_lpm / d;
        let mut weights = Vec::with_capacity(p.len());
        for &pd in &p {
            let r = (pd - y).abs();
            if r == 0.0 {
                return Err(Error::Numeric(format!(
                    "product {pd} equals the mean {y}; weight undefined"
                )));
            }
            weights.push(1.0 / r);
        }
        let wsum: f64 = weights.iter().sum();
        let wp: f64 = weights.iter().zip(&p).map(|(w, pd)| w * pd).sum();
        let z_nrpm = d * wp / wsum;
        Ok(EstimatorSnapshot { p, z_lpm, z_nrpm, weights })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn z_lpm(&self) -> f64 {
        self.z_lpm
    }

    /// One-step robust estimate the formulas are anchored at.
    pub fn z_nrpm(&self) -> f64 {
        self.z_nrpm
    }

    /// Mean of the products, `z_lpm / D`.
    pub fn mean(&self) -> f64 {
        self.z_lpm / self.p.len() as f64
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest clean residual `max_d |p_d − mean|`.
    pub fn max_residual(&self) -> f64 {
        let y = self.mean();
        self.p.iter().map(|&pd| (pd - y).abs()).fold(0.0, f64::max)
    }
}

/// Which estimator a numeric contamination probe evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Lpm,
    Nrpm,
}

/// Influence of contamination at `x0` on the linear estimator: `D·(x0 − y)`.
pub fn if_lpm(snap: &EstimatorSnapshot, x0: f64) -> f64 {
    snap.dim() as f64 * (x0 - snap.mean())
}

/// Influence of contamination at `x0` on the one-step robust estimator:
/// `D·w0·(x0 − z_rob/D)/Σ w_d` with `w0 = 1/|x0 − y|`.
pub fn if_nrpm(snap: &EstimatorSnapshot, x0: f64) -> Result<f64> {
    let d = snap.dim() as f64;
    let y = snap.mean();
    let r0 = (x0 - y).abs();
    if r0 == 0.0 {
        return Err(Error::Numeric(format!(
            "x0 = {x0} equals the mean; contamination weight undefined"
        )));
    }
    let w0 = 1.0 / r0;
    let wsum: f64 = snap.weights.iter().sum();
    Ok(d * w0 * (x0 - snap.z_nrpm / d) / wsum)
}

/// Difference quotient `D·(T(F_ε) − T(F))/ε` of the contaminated estimator,
/// with weights frozen at their clean values. For the linear estimator the
/// quotient is exact for every ε; for the robust one it converges at rate ε.
pub fn numeric_if(
    kind: EstimatorKind,
    snap: &EstimatorSnapshot,
    x0: f64,
    contamination: f64,
) -> Result<f64> {
    if !(contamination > 0.0 && contamination <= 1e-3) {
        return Err(Error::Validation(format!(
            "contamination must lie in (0, 1e-3], got {contamination}"
        )));
    }
    let eps = contamination;
    let d = snap.dim() as f64;
    match kind {
        EstimatorKind::Lpm => {
            let y = snap.mean();
            let y_eps = (1.0 - eps) * y + eps * x0;
            Ok(d * (y_eps - y) / eps)
        }
        EstimatorKind::Nrpm => {
            let y = snap.mean();
            let r0 = (x0 - y).abs();
            if r0 == 0.0 {
                return Err(Error::Numeric(format!(
                    "x0 = {x0} equals the mean; contamination weight undefined"
                )));
            }
            let w0 = 1.0 / r0;
            let wsum: f64 = snap.weights.iter().sum();
            let wp: f64 = snap.weights.iter().zip(&snap.p).map(|(w, pd)| w * pd).sum();
            let z = wp / wsum;
            let z_eps = ((1.0 - eps) * wp + eps * w0 * x0) / ((1.0 - eps) * wsum + eps * w0);
            Ok(d * (z_eps - z) / eps)
        }
    }
}

/// Exploration variant of [`numeric_if`] for the robust estimator that
/// recomputes every weight from the contaminated mean instead of freezing
/// them. Not used by any accuracy guarantee.
pub fn numeric_if_recomputed(snap: &EstimatorSnapshot, x0: f64, contamination: f64) -> Result<f64> {
    if !(contamination > 0.0 && contamination <= 1e-3) {
        return Err(Error::Validation(format!(
            "contamination must lie in (0, 1e-3], got {contamination}"
        )));
    }
    let eps = contamination;
    let d = snap.dim() as f64;
    let y = snap.mean();
    let y_eps = (1.0 - eps) * y + eps * x0;
    let weight = |v: f64, anchor: f64| -> Result<f64> {
        let r = (v - anchor).abs();
        if r == 0.0 {
            return Err(Error::Numeric(format!("value {v} equals the anchor {anchor}")));
        }
        Ok(1.0 / r)
    };
    let mut wsum = 0.0;
    let mut wp = 0.0;
    for &pd in &snap.p {
        let w = weight(pd, y_eps)?;
        wsum += w;
        wp += w * pd;
    }
    let w0 = weight(x0, y_eps)?;
    let z_eps = ((1.0 - eps) * wp + eps * w0 * x0) / ((1.0 - eps) * wsum + eps * w0);
    let z = snap.z_nrpm / d;
    Ok(d * (z_eps - z) / eps)
}
