//! Robustness reprogramming of a pretrained model, three ways:
//!
//! 1. install fixed per-layer λ values on the frozen model (zero cost — the
//!    parameter bytes are hash-verified unchanged),
//! 2. fine-tune only the mixing parameters β with everything else frozen,
//! 3. fine-tune everything, mixing parameters included.
//!
//! Training is plain SGD with optional weight decay (never applied to β),
//! optionally on adversarial batches generated against the current parameters
//! at every step. Runs are deterministic: one seed fixes batching, attack
//! noise, and therefore the whole log.

use crate::attack::{attack_batch, robust_accuracy, AttackSpec};
use crate::data::{subset_and_batch, Batch, Dataset};
use crate::layers::{build_model, Layer, Model, ModelSpec, ParamKind, TrainableSet};
use crate::pattern::LambdaParam;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};
use std::path::Path;

/// Optimization settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Adversarial fine-tuning when set: each batch is attacked against the
    /// current parameters before the gradient step.
    pub attack: Option<AttackSpec>,
}

impl TrainHyper {
    pub fn new(epochs: usize, lr: f64, weight_decay: f64, seed: u64) -> Self {
        TrainHyper { epochs, lr, weight_decay, batch_size: 128, seed, attack: None }
    }

    pub fn with_attack(mut self, attack: AttackSpec) -> Self {
        self.attack = Some(attack);
        self
    }
}

/// Per-epoch accuracy logging hook: held-out data plus the attack to measure
/// robust accuracy with.
#[derive(Debug, Clone)]
pub struct EvalHook {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub attack: AttackSpec,
    pub batch_size: usize,
}

/// One epoch of a [`TrainLog`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub natural_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub lambdas: Vec<f64>,
}

/// Deterministic record of a training run.
///
/// CSV column order: `epoch,loss,natural_acc,robust_acc,lambda_0..lambda_k`;
/// accuracy cells are empty when no evaluation hook was installed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn final_lambdas(&self) -> Option<&[f64]> {
        self.epochs.last().map(|e| e.lambdas.as_slice())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let layer_count = self.epochs.first().map_or(0, |e| e.lambdas.len());
        let mut out = String::from("epoch,loss,natural_acc,robust_acc");
        for i in 0..layer_count {
            out.push_str(&format!(",lambda_{i}"));
        }
        out.push('\n');
        for e in &self.epochs {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{},{}",
                e.epoch,
                e.loss,
                fmt_opt(e.natural_acc),
                fmt_opt(e.robust_acc)
            ));
            for l in &e.lambdas {
                out.push_str(&format!(",{l:.4}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// One optimizer step on one batch: attack it against the current parameters
/// (when a spec is given), take gradients of the mean cross-entropy, and
/// apply SGD to the paradigm's trainable set. Returns the training loss.
pub fn adversarial_finetune_step(
    model: &mut Model,
    batch: &Batch,
    attack: Option<&AttackSpec>,
    trainable: TrainableSet,
    lr: f64,
    weight_decay: f64,
) -> Result<f64> {
    let x = match attack {
        Some(spec) => attack_batch(model, &batch.images, &batch.labels, spec)?,
        None => batch.images.clone(),
    };
    let mut tape = Tape::new();
    let xi = tape.constant(&x);
    let art = model.forward_from(&mut tape, xi, trainable)?;
    let loss_node = tape.softmax_cross_entropy(art.logits, &batch.labels)?;
    let loss = tape.data(loss_node)[0];
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    tape.backward(loss_node)?;
    for pn in &art.params {
        let Some(grad) = tape.grad(pn.node) else { continue };
        let grad = grad.to_vec();
        match (&mut model.layers[pn.layer], pn.kind) {
            (Layer::Dense(d), ParamKind::Weight) => {
                sgd_update(&mut d.weight.data, &grad, lr, weight_decay)
            }
            (Layer::Dense(d), ParamKind::Bias) => {
                sgd_update(&mut d.bias.data, &grad, lr, weight_decay)
            }
            (Layer::Conv(c), ParamKind::Weight) => {
                sgd_update(&mut c.kernel.data, &grad, lr, weight_decay)
            }
            (Layer::Conv(c), ParamKind::Bias) => {
                sgd_update(&mut c.bias.data, &grad, lr, weight_decay)
            }
            (Layer::Dense(d), ParamKind::Beta) => step_beta(&mut d.cfg, grad[0], lr),
            (Layer::Conv(c), ParamKind::Beta) => step_beta(&mut c.cfg, grad[0], lr),
            _ => unreachable!("parameter node on a parameterless layer"),
        }
    }
    Ok(loss)
}

fn sgd_update(params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    for (p, &g) in params.iter_mut().zip(grad) {
        *p -= lr * (g + weight_decay * *p);
    }
}

fn step_beta(cfg: &mut Option<crate::pattern::NrpmConfig>, grad: f64, lr: f64) {
    if let Some(c) = cfg {
        if let LambdaParam::Learnable(beta) = c.lambda {
            c.lambda = LambdaParam::Learnable(beta - lr * grad);
        }
    }
}

fn train(
    model: &mut Model,
    data: &Dataset,
    trainable: TrainableSet,
    hyper: &TrainHyper,
    eval: Option<&EvalHook>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    for epoch in 0..hyper.epochs {
        let batches = subset_and_batch(
            data,
            data.len(),
            hyper.batch_size,
            hyper.seed.wrapping_add(epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let attack = hyper
                .attack
                .map(|a| a.with_seed(hyper.seed ^ ((epoch as u64) << 32) ^ bi as u64));
            let loss = adversarial_finetune_step(
                model,
                batch,
                attack.as_ref(),
                trainable,
                hyper.lr,
                hyper.weight_decay,
            )
            .map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            loss_sum += loss;
        }
        let (natural_acc, robust_acc) = match eval {
            Some(hook) => {
                let nat = robust_accuracy(
                    model,
                    &hook.images,
                    &hook.labels,
                    &AttackSpec::fgsm(0.0),
                    hook.batch_size,
                )?;
                let rob = robust_accuracy(
                    model,
                    &hook.images,
                    &hook.labels,
                    &hook.attack,
                    hook.batch_size,
                )?;
                (Some(nat), Some(rob))
            }
            None => (None, None),
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / batches.len().max(1) as f64,
            natural_acc,
            robust_acc,
            lambdas: model.lambdas(),
        });
    }
    Ok(log)
}

/// Train a plain model from scratch (every λ fixed at 1, so layers take the
/// affine path). Returns the model and its log; persisting the checkpoint is
/// the pipeline's job.
pub fn pretrain(
    spec: &ModelSpec,
    data: &Dataset,
    hyper: &TrainHyper,
    eval: Option<&EvalHook>,
) -> Result<(Model, TrainLog)> {
    let mut plain_spec = spec.clone();
    for mix in plain_spec.mixes.iter_mut().flatten() {
        mix.lambda = LambdaParam::Fixed(1.0);
    }
    let mut model = build_model(&plain_spec, hyper.seed)?;
    let log = train(&mut model, data, TrainableSet::All, hyper, eval)?;
    Ok((model, log))
}

/// Paradigm 1: an evaluation view with fixed λ values installed per layer.
/// No parameter is modified; the hash check makes that a contract, not a
/// convention.
pub fn reprogram_p1(model: &Model, lambdas: &[f64], k: usize, eps: f64) -> Result<Model> {
    let mut view = model.clone();
    view.set_fixed_lambdas(lambdas, k, eps)?;
    if view.param_hash() != model.param_hash() {
        return Err(Error::Training("λ install must not touch parameters".into()));
    }
    Ok(view)
}

/// Paradigm 2: fine-tune only the mixing parameters (β, initialized to 0 so
/// λ starts at 0.5); weights and biases stay bit-identical, enforced by hash.
pub fn reprogram_p2(
    model: &Model,
    data: &Dataset,
    k: usize,
    eps: f64,
    hyper: &TrainHyper,
    eval: Option<&EvalHook>,
) -> Result<(Model, TrainLog)> {
    let mut tuned = model.clone();
    tuned.make_mixes_learnable(k, eps)?;
    let frozen_hash = tuned.param_hash();
    let log = train(&mut tuned, data, TrainableSet::MixingOnly, hyper, eval)?;
    if tuned.param_hash() != frozen_hash {
        return Err(Error::Training(
            "frozen parameters changed during mixing-only fine-tuning".into(),
        ));
    }
    Ok((tuned, log))
}

/// Paradigm 3: fine-tune everything — weights, biases, and the mixing
/// parameters (β initialized to 0).
pub fn reprogram_p3(
    model: &Model,
    data: &Dataset,
    k: usize,
    eps: f64,
    hyper: &TrainHyper,
    eval: Option<&EvalHook>,
) -> Result<(Model, TrainLog)> {
    let mut tuned = model.clone();
    tuned.make_mixes_learnable(k, eps)?;
    let log = train(&mut tuned, data, TrainableSet::All, hyper, eval)?;
    Ok((tuned, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;
    use crate::layers::{Arch, ParamKind};

    fn toy_data(seed: u64) -> Dataset {
        SyntheticTask::TwoGaussians { dim: 8, samples: 160, noise: 0.12, seed }
            .generate()
            .unwrap()
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec::mlp(&[8, 6, 2]).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialized_model_unchanged() {
        let data = toy_data(1);
        let hyper = TrainHyper::new(0, 0.1, 0.0, 5);
        let (model, log) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        assert!(log.epochs.is_empty());
        let fresh = build_model(&toy_spec(), 5).unwrap();
        assert_eq!(model.param_hash(), fresh.param_hash());
    }

    #[test]
    fn pretraining_is_seed_reproducible_and_learns() {
        let data = toy_data(2);
        let hyper = TrainHyper { batch_size: 32, ..TrainHyper::new(8, 0.5, 0.0, 7) };
        let (m1, l1) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let (m2, l2) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        assert_eq!(m1.param_hash(), m2.param_hash());
        assert_eq!(l1.final_loss().unwrap().to_bits(), l2.final_loss().unwrap().to_bits());
        // separable blobs: near-perfect accuracy
        let flat = crate::data::flatten_images(&data.images).unwrap();
        let acc = robust_accuracy(&m1, &flat, &data.labels, &AttackSpec::fgsm(0.0), 64).unwrap();
        assert!(acc >= 0.95, "underfit: {acc}");
        assert!(l1.final_loss().unwrap() < l1.epochs[0].loss);
    }

    #[test]
    fn p1_view_keeps_parameter_bytes() {
        let data = toy_data(3);
        let hyper = TrainHyper { batch_size: 32, ..TrainHyper::new(3, 0.5, 0.0, 9) };
        let (model, _) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let before = model.param_hash();
        let view = reprogram_p1(&model, &[0.5, 0.7], 1, 1e-3).unwrap();
        assert_eq!(view.param_hash(), before);
        assert_eq!(view.lambdas(), vec![0.5, 0.7]);
        assert_eq!(model.lambdas(), vec![1.0, 1.0]);
        assert!(matches!(reprogram_p1(&model, &[1.5, 0.0], 1, 1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn p1_at_lambda_one_reproduces_pretrained_predictions() {
        let data = toy_data(4);
        let hyper = TrainHyper { batch_size: 32, ..TrainHyper::new(3, 0.5, 0.0, 11) };
        let (model, _) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let view = reprogram_p1(&model, &[1.0, 1.0], 3, 1e-3).unwrap();
        let flat = crate::data::flatten_images(&data.images).unwrap();
        assert_eq!(model.predict(&flat).unwrap(), view.predict(&flat).unwrap());
    }

    #[test]
    fn p2_trains_only_mixing_parameters() {
        let data = toy_data(5);
        let hyper = TrainHyper { batch_size: 32, ..TrainHyper::new(2, 0.5, 0.0, 13) };
        let (model, _) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let weight_hash = model.param_hash();
        let ft = TrainHyper { batch_size: 32, ..TrainHyper::new(2, 0.5, 5e-4, 13) }
            .with_attack(AttackSpec::fgsm(0.1));
        let (tuned, log) = reprogram_p2(&model, &data, 1, 1e-3, &ft, None).unwrap();
        assert_eq!(tuned.param_hash(), weight_hash);
        // β moved: λ no longer exactly 0.5, and stays inside (0,1)
        let lambdas = log.final_lambdas().unwrap();
        assert!(lambdas.iter().any(|&l| (l - 0.5).abs() > 1e-6));
        assert!(lambdas.iter().all(|&l| l > 0.0 && l < 1.0));
    }

    #[test]
    fn p2_gradients_never_reach_frozen_tensors() {
        let data = toy_data(6);
        let (model, _) =
            pretrain(&toy_spec(), &data, &TrainHyper::new(1, 0.5, 0.0, 17), None).unwrap();
        let mut tuned = model.clone();
        tuned.make_mixes_learnable(1, 1e-3).unwrap();
        let batches = subset_and_batch(&data, 32, 32, 0).unwrap();
        let mut tape = Tape::new();
        let xi = tape.constant(&batches[0].images);
        let art = tuned.forward_from(&mut tape, xi, TrainableSet::MixingOnly).unwrap();
        let loss = tape.softmax_cross_entropy(art.logits, &batches[0].labels).unwrap();
        tape.backward(loss).unwrap();
        for pn in &art.params {
            match pn.kind {
                ParamKind::Beta => assert!(tape.grad(pn.node).is_some()),
                _ => assert!(tape.grad(pn.node).is_none(), "frozen tensor received gradient"),
            }
        }
    }

    #[test]
    fn p3_zero_epochs_is_identity_apart_from_mixing_slots() {
        let data = toy_data(7);
        let (model, _) =
            pretrain(&toy_spec(), &data, &TrainHyper::new(1, 0.5, 0.0, 19), None).unwrap();
        let ft = TrainHyper::new(0, 0.01, 0.0, 19);
        let (tuned, log) = reprogram_p3(&model, &data, 1, 1e-3, &ft, None).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(tuned.param_hash(), model.param_hash());
    }

    #[test]
    fn zero_budget_attack_step_equals_clean_step() {
        let data = toy_data(8);
        let (model, _) =
            pretrain(&toy_spec(), &data, &TrainHyper::new(1, 0.5, 0.0, 23), None).unwrap();
        let batches = subset_and_batch(&data, 64, 32, 1).unwrap();
        let mut a = model.clone();
        let mut b = model.clone();
        let la = adversarial_finetune_step(
            &mut a,
            &batches[0],
            Some(&AttackSpec::fgsm(0.0)),
            TrainableSet::All,
            0.1,
            0.0,
        )
        .unwrap();
        let lb = adversarial_finetune_step(&mut b, &batches[0], None, TrainableSet::All, 0.1, 0.0)
            .unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn single_steps_mostly_descend_training_loss() {
        let data = toy_data(9);
        let hyper = TrainHyper { batch_size: 32, ..TrainHyper::new(2, 0.5, 0.0, 29) };
        let (model, _) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let batches = subset_and_batch(&data, 160, 16, 3).unwrap();
        let mut descended = 0;
        let mut total = 0;
        for batch in batches.iter().take(100) {
            let mut m = model.clone();
            m.make_mixes_learnable(1, 1e-3).unwrap();
            let before = crate::attack::batch_loss(&m, &batch.images, &batch.labels).unwrap();
            adversarial_finetune_step(&mut m, batch, None, TrainableSet::All, 0.01, 0.0).unwrap();
            let after = crate::attack::batch_loss(&m, &batch.images, &batch.labels).unwrap();
            total += 1;
            if after <= before {
                descended += 1;
            }
        }
        assert!(descended * 10 >= total * 9, "descent on {descended}/{total} batches");
    }

    #[test]
    fn train_log_csv_has_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(10);
        let eval = EvalHook {
            images: crate::data::flatten_images(&data.images).unwrap(),
            labels: data.labels.clone(),
            attack: AttackSpec::fgsm(0.1),
            batch_size: 64,
        };
        let hyper = TrainHyper { batch_size: 64, ..TrainHyper::new(2, 0.5, 0.0, 31) };
        let (model, _) = pretrain(&toy_spec(), &data, &hyper, None).unwrap();
        let (_, log) = reprogram_p2(&model, &data, 1, 1e-3, &hyper, Some(&eval)).unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,natural_acc,robust_acc,lambda_0,lambda_1");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn named_arch_pretrain_smoke() {
        let spec = ModelSpec::plain(Arch::Mlp1);
        let model = build_model(&spec, 0).unwrap();
        assert_eq!(model.parametric_layer_count(), 1);
    }
}
