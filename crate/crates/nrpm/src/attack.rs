//! White-box L∞ attacks: fast gradient sign and projected gradient descent.
//!
//! Gradients are taken through the model exactly as it evaluates — including
//! the full unrolled reweighting when a layer mixes robustly — so the attacks
//! stay adaptive rather than fighting an obfuscated surrogate. Every returned
//! example satisfies `‖x′ − x‖∞ ≤ ε` and `x′ ∈ [0,1]` elementwise; attacks
//! never mutate the model or the clean inputs.

use crate::layers::{Model, TrainableSet};
use crate::tensor::{sign, Tape, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// Attack family, budget, and iteration schedule. The norm is L∞ and the
/// clip range [0,1] (pixel units, matching budgets like 0.1 or 8/255).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Budget ε in input units.
    pub epsilon: f64,
    /// Iteration count (1 for FGSM).
    pub steps: usize,
    /// Per-step magnitude (ε itself for FGSM).
    pub step_size: f64,
    /// Start PGD from a uniform point inside the ball.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            seed: 0,
        }
    }

    /// Evaluation-strength PGD: 20 steps of 2.5·ε/20 with random start.
    pub fn pgd20(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            steps: 20,
            step_size: 2.5 * epsilon / 20.0,
            random_start: true,
            seed: 0,
        }
    }

    /// Training-strength PGD: 7 steps of 2/255 with random start.
    pub fn pgd7(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Pgd,
            epsilon,
            steps: 7,
            step_size: 2.0 / 255.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Validation(format!("negative budget {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Validation("attack needs at least one step".into()));
        }
        if self.step_size < 0.0 {
            return Err(Error::Validation(format!("negative step size {}", self.step_size)));
        }
        Ok(())
    }
}

/// ∇ₓ of the mean cross-entropy at `x`, through the model as evaluated.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xi = tape.leaf(&x.clone().requires_grad(true));
    let art = model.forward_from(&mut tape, xi, TrainableSet::None)?;
    let loss = tape.softmax_cross_entropy(art.logits, labels)?;
    tape.backward(loss)?;
    let grad = tape.grad(xi).expect("input gradient").to_vec();
    let per_sample = grad.len() / x.shape[0];
    for (b, chunk) in grad.chunks(per_sample).enumerate() {
        if chunk.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input gradient at batch index {b}")));
        }
    }
    Ok(grad)
}

/// Mean cross-entropy of the model on `(x, labels)`, no gradients.
pub fn batch_loss(model: &Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xi = tape.constant(x);
    let art = model.forward_from(&mut tape, xi, TrainableSet::None)?;
    let loss = tape.softmax_cross_entropy(art.logits, labels)?;
    Ok(tape.data(loss)[0])
}

/// Single signed-gradient step: `clip(x + ε·sign(∇ₓ loss), 0, 1)`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    let grad = input_gradient(model, x, labels)?;
    let data: Vec<f64> = x
        .data
        .iter()
        .zip(&grad)
        .map(|(&xv, &g)| (xv + spec.epsilon * sign(g)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Iterated signed-gradient steps, each projected onto the ε-ball around `x`
/// and the [0,1] box. `start` warm-starts the iteration (it is projected
/// first); otherwise a seeded uniform start inside the ball is used when
/// `spec.random_start` is set.
pub fn pgd_with_start(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    start: Option<&Tensor>,
) -> Result<Tensor> {
    spec.validate()?;
    let project = |adv: &mut [f64]| {
        for (a, &xv) in adv.iter_mut().zip(&x.data) {
            let lo = xv - spec.epsilon;
            let hi = xv + spec.epsilon;
            *a = a.max(lo).min(hi).clamp(0.0, 1.0);
        }
    };
    let mut adv = match start {
        Some(s) => {
            if s.shape != x.shape {
                return Err(Error::Dim(format!(
                    "start shape {:?} does not match input {:?}",
                    s.shape, x.shape
                )));
            }
            let mut a = s.data.clone();
            project(&mut a);
            a
        }
        None if spec.random_start => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut a: Vec<f64> = x
                .data
                .iter()
                .map(|&xv| xv + rng.gen_range(-spec.epsilon..=spec.epsilon))
                .collect();
            project(&mut a);
            a
        }
        None => x.data.clone(),
    };
    for _ in 0..spec.steps {
        let adv_t = Tensor::new(x.shape.clone(), adv)?;
        let grad = input_gradient(model, &adv_t, labels)?;
        adv = adv_t.data;
        for (a, &g) in adv.iter_mut().zip(&grad) {
            *a += spec.step_size * sign(g);
        }
        project(&mut adv);
    }
    Tensor::new(x.shape.clone(), adv)
}

pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    pgd_with_start(model, x, labels, spec, None)
}

/// Run the spec's attack on one batch.
pub fn attack_batch(model: &Model, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, spec),
        AttackKind::Pgd => pgd(model, x, labels, spec),
    }
}

/// Fraction of samples still classified correctly after the attack.
/// A zero budget evaluates natural accuracy.
pub fn robust_accuracy(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    batch_size: usize,
) -> Result<f64> {
    let n = images.shape[0];
    if n == 0 || labels.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    if labels.len() != n {
        return Err(Error::Validation(format!("{} labels for {n} images", labels.len())));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let per_sample: usize = images.shape[1..].iter().product();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let bsz = end - start;
        let mut shape = images.shape.clone();
        shape[0] = bsz;
        let batch = Tensor::new(
            shape,
            images.data[start * per_sample..end * per_sample].to_vec(),
        )?;
        let batch_labels = &labels[start..end];
        let preds = if spec.epsilon == 0.0 {
            model.predict(&batch)?
        } else {
            let batch_spec = spec.with_seed(spec.seed.wrapping_add(start as u64));
            let adv = attack_batch(model, &batch, batch_labels, &batch_spec)?;
            model.predict(&adv)?
        };
        correct += preds.iter().zip(batch_labels).filter(|(p, l)| p == l).count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}
