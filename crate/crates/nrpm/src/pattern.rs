//! Pattern matching over product vectors.
//!
//! A linear unit's output `z = Σ a_d·x_d` is the minimizer of the quadratic
//! objective `Σ (z/D − a_d·x_d)²`. Writing `p_d = a_d·x_d`, the robust
//! alternative minimizes the absolute-deviation objective
//!
//! ```text
//! L(z) = Σ_d |z/D − p_d|
//! ```
//!
//! whose exact minimizer is `D·median{p_d}`. [`irls_step`] performs one
//! Newton step on the quadratic localized upper bound of `L`, which is the
//! reweighted mean `z⁺ = D·(Σ w_d p_d)/(Σ w_d)` with `w_d = 1/(|p_d − z/D| + eps)`,
//! and each step cannot increase `L`. [`nrpm_forward`] unrolls `K` such steps
//! from the linear output, and [`hybrid_forward`] mixes the two endpoints
//! with a per-layer weight λ.

use crate::tensor::sigmoid;
use crate::{Error, Result};

/// The per-unit products `p_d = a_d·x_d` a matching unit aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductVector {
    p: Vec<f64>,
}

impl ProductVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Validation("product vector must have D >= 1".into()));
        }
        if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite product {bad}")));
        }
        Ok(ProductVector { p })
    }

    pub fn from_factors(a: &[f64], x: &[f64]) -> Result<Self> {
        if a.len() != x.len() {
            return Err(Error::Dim(format!(
                "factor lengths disagree: {} vs {}",
                a.len(),
                x.len()
            )));
        }
        ProductVector::new(a.iter().zip(x).map(|(&ai, &xi)| ai * xi).collect())
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        false // guaranteed D >= 1 at construction
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }
}

/// How a layer stores its mixing weight λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaParam {
    /// Plug-in hyperparameter, clamped to [0,1].
    Fixed(f64),
    /// Unconstrained parameter β with λ = sigmoid(β); β = 0 gives λ = 0.5.
    Learnable(f64),
}

impl LambdaParam {
    /// Effective mixing value, always in [0,1].
    pub fn value(&self) -> f64 {
        match *self {
            LambdaParam::Fixed(l) => l.clamp(0.0, 1.0),
            LambdaParam::Learnable(beta) => sigmoid(beta),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, LambdaParam::Learnable(_))
    }
}

/// Configuration of one unrolled robust matching unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrpmConfig {
    /// Number of unrolled reweighting iterations; 0 collapses to the linear output.
    pub k: usize,
    /// Stabilizer added to the residual magnitude inside the weights.
    pub eps: f64,
    pub lambda: LambdaParam,
}

impl NrpmConfig {
    pub const DEFAULT_EPS: f64 = 1e-3;

    pub fn new(k: usize, eps: f64, lambda: LambdaParam) -> Result<Self> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(NrpmConfig { k, eps, lambda })
    }

    pub fn fixed(k: usize, lambda: f64) -> Self {
        NrpmConfig { k, eps: Self::DEFAULT_EPS, lambda: LambdaParam::Fixed(lambda) }
    }

    pub fn learnable(k: usize) -> Self {
        NrpmConfig { k, eps: Self::DEFAULT_EPS, lambda: LambdaParam::Learnable(0.0) }
    }
}

/// Linear pattern matching: `Σ p_d`, the least-squares optimum.
pub fn lpm(pv: &ProductVector) -> f64 {
    pv.p.iter().sum()
}

/// Absolute-deviation objective `Σ_d |z/D − p_d|`, exact (no stabilizer).
pub fn lad_loss(pv: &ProductVector, z: f64) -> f64 {
    let d = pv.len() as f64;
    pv.p.iter().map(|&pd| (z / d - pd).abs()).sum()
}

/// Quadratic localized upper bound of the absolute-deviation objective:
/// `U(z,z0) = Σ_d w_d (p_d − z/D)² + L(z0)/2` with `w_d = 1/(2|p_d − z0/D|)`.
/// Touches the objective at `z = z0` and dominates it elsewhere.
pub fn upper_bound(pv: &ProductVector, z: f64, z0: f64) -> Result<f64> {
    let d = pv.len() as f64;
    let mut quad = 0.0;
    for &pd in &pv.p {
        let r0 = (pd - z0 / d).abs();
        if r0 == 0.0 {
            return Err(Error::Numeric(format!(
                "zero residual at p_d = {pd}: upper bound weights undefined"
            )));
        }
        let w = 1.0 / (2.0 * r0);
        let r = pd - z / d;
        quad += w * r * r;
    }
    Ok(quad + 0.5 * lad_loss(pv, z0))
}

/// One Newton step on the localized upper bound at `z_k`: the reweighted mean
/// `D·(Σ w_d p_d)/(Σ w_d)` with `w_d = 1/(|p_d − z_k/D| + eps)`.
pub fn irls_step(pv: &ProductVector, z_k: f64, eps: f64) -> Result<f64> {
    if eps < 0.0 {
        return Err(Error::Validation(format!("eps must be >= 0, got {eps}")));
    }
    let d = pv.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for &pd in &pv.p {
        let r = (pd - z_k / d).abs();
        if eps == 0.0 && r == 0.0 {
            return Err(Error::Numeric(format!(
                "zero residual at p_d = {pd} with eps = 0"
            )));
        }
        let w = 1.0 / (r + eps);
        num += w * pd;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Numeric("all reweighting weights vanished".into()));
    }
    Ok(d * num / den)
}

/// Unrolled robust estimate: `K` reweighting steps from the linear output.
/// `K = 0` returns the linear output exactly.
pub fn nrpm_forward(pv: &ProductVector, cfg: &NrpmConfig) -> Result<f64> {
    let mut z = lpm(pv);
    for _ in 0..cfg.k {
        z = irls_step(pv, z, cfg.eps)?;
    }
    Ok(z)
}

/// Mix of the linear and robust estimates: `λ·z_lin + (1−λ)·z_robust`.
pub fn hybrid_forward(pv: &ProductVector, cfg: &NrpmConfig) -> Result<f64> {
    let lambda = cfg.lambda.value();
    let z_lin = lpm(pv);
    let z_rob = nrpm_forward(pv, cfg)?;
    Ok(lambda * z_lin + (1.0 - lambda) * z_rob)
}

/// Sort-based median oracle; averages the middle pair for even lengths.
/// The exact minimizer of the absolute-deviation objective is `D·median`.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
