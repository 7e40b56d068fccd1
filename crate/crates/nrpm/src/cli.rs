//! Batch pipeline behind the `nrpm` binary.
//!
//! Subcommands: `synth-data`, `pretrain`, `sweep-lambda`, `reprogram`,
//! `attack-eval`, `influence`, `embedding-diff`. Each run resolves its
//! configuration (TOML file plus command-line overrides), executes one stage,
//! writes CSV/checkpoint outputs into `--out`, and drops a manifest next to
//! them recording the resolved configuration and content hashes. Stages that
//! consume a checkpoint verify it against the manifest of the stage that
//! produced it. Numeric results go to files only; stderr carries progress.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 runtime/numeric errors.

use crate::attack::{robust_accuracy, AttackKind, AttackSpec};
use crate::data::{
    load_idx, subset_and_batch, synth_digits, write_idx, Dataset, ExperimentReport, ReportRow,
};
use crate::influence::{if_lpm, if_nrpm, numeric_if, EstimatorKind, EstimatorSnapshot};
use crate::layers::{Arch, Model, ModelSpec};
use crate::pattern::ProductVector;
use crate::reprogram::{pretrain, reprogram_p1, reprogram_p2, reprogram_p3, TrainHyper};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

// ── configuration ───────────────────────────────────────────────────────

fn default_lambda_grid() -> Vec<f64> {
    (0..=10).rev().map(|i| i as f64 / 10.0).collect()
}

fn default_eps_grid() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic" (built-in digit corpus) or "idx" (paths below).
    pub source: String,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_samples: 8000,
            test_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
    /// Unrolled reweighting iterations installed by evaluation views.
    pub k: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: "mlp2".into(), k: 1, eps: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, lr: 0.5, weight_decay: 5e-4, batch_size: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr_p2: f64,
    pub lr_p3: f64,
    pub epochs_p3: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// FGSM budget used to build adversarial fine-tuning batches.
    pub train_epsilon: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            lr_p2: 0.5,
            lr_p3: 0.01,
            epochs_p3: 15,
            weight_decay: 5e-4,
            batch_size: 128,
            train_epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// "fgsm" or "pgd".
    pub kind: String,
    /// PGD iteration count (evaluation default 20; training uses 7).
    pub steps: usize,
    pub epsilon_grid: Vec<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { kind: "fgsm".into(), steps: 20, epsilon_grid: default_eps_grid() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { lambda_grid: default_lambda_grid() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub dimension: usize,
    pub x0_min: f64,
    pub x0_max: f64,
    pub x0_points: usize,
    pub contamination: f64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig { dimension: 9, x0_min: -10.0, x0_max: 10.0, x0_points: 201, contamination: 1e-6 }
    }
}

/// Fully resolved run configuration; the manifest embeds it verbatim.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
    pub influence: InfluenceConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    fn attack_spec(&self, epsilon: f64, seed: u64) -> Result<AttackSpec> {
        match self.attack.kind.as_str() {
            "fgsm" => Ok(AttackSpec::fgsm(epsilon).with_seed(seed)),
            "pgd" => Ok(AttackSpec {
                kind: AttackKind::Pgd,
                epsilon,
                steps: self.attack.steps,
                step_size: 2.5 * epsilon / self.attack.steps as f64,
                random_start: true,
                seed,
            }),
            other => Err(Error::Config(format!("unknown attack kind: {other}"))),
        }
    }
}

// ── command line ────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(name = "nrpm", about = "Robust pattern matching experiment pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic digit corpus as IDX files.
    SynthData {
        #[command(flatten)]
        common: CommonArgs,
        /// Total images in the train split (test split uses the config size).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the plain model and save its checkpoint.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate fixed-λ views of the pretrained checkpoint over λ × ε.
    SweepLambda {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated λ grid override, e.g. "1.0,0.8,0.5".
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// Comma-separated ε grid override.
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
        /// Unrolled iteration count override.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fine-tune the pretrained checkpoint under a reprogramming paradigm.
    Reprogram {
        #[command(flatten)]
        common: CommonArgs,
        /// "p2" (mixing parameters only) or "p3" (everything).
        #[arg(long)]
        paradigm: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Robust-accuracy grid for a checkpoint under the configured attack.
    AttackEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate (default: the pretrained one).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        eps_grid: Option<Vec<f64>>,
    },
    /// Influence-function curves over an x₀ grid, analytic vs numeric.
    Influence {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Per-layer embedding differences between clean and attacked inputs for
    /// the plain (λ=1) and robust (λ=0) views of the pretrained checkpoint.
    EmbeddingDiff {
        #[command(flatten)]
        common: CommonArgs,
        /// Attack budget (default 0.3).
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
}

// ── manifests ───────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    command: String,
    seed: u64,
    outputs: Vec<String>,
    checkpoint_hash: Option<String>,
    data_fingerprint: String,
    config: RunConfig,
}

fn write_manifest(out: &Path, m: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(m)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join(format!("manifest-{}.toml", m.command)), text)?;
    Ok(())
}

fn read_manifest(out: &Path, command: &str) -> Result<Manifest> {
    let path = out.join(format!("manifest-{command}.toml"));
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!(
            "missing {} manifest at {} — run `nrpm {command}` first",
            command,
            path.display()
        ))
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("bad manifest: {e}")))
}

fn fingerprint(ds: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for v in &ds.images.data {
        hasher.update(v.to_le_bytes());
    }
    for &l in &ds.labels {
        hasher.update([l as u8]);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ── data plumbing ───────────────────────────────────────────────────────

fn load_split(cfg: &RunConfig, train: bool) -> Result<Dataset> {
    match cfg.data.source.as_str() {
        "synthetic" => {
            let n = if train { cfg.data.train_samples } else { cfg.data.test_samples };
            // disjoint deterministic streams for the two splits
            synth_digits(n, cfg.seed.wrapping_mul(2).wrapping_add(u64::from(!train)))
        }
        "idx" => {
            let (images, labels) = if train {
                (cfg.data.train_images.as_ref(), cfg.data.train_labels.as_ref())
            } else {
                (cfg.data.test_images.as_ref(), cfg.data.test_labels.as_ref())
            };
            let (Some(images), Some(labels)) = (images, labels) else {
                return Err(Error::Config("dataset not found: idx paths missing".into()));
            };
            if !images.exists() || !labels.exists() {
                return Err(Error::Config(format!(
                    "dataset not found: {} / {}",
                    images.display(),
                    labels.display()
                )));
            }
            let full = load_idx(images, labels)?;
            let want = if train { cfg.data.train_samples } else { cfg.data.test_samples };
            if want >= full.len() {
                return Ok(full);
            }
            let batches = subset_and_batch(&full, want, want, cfg.seed)?;
            let b = batches.into_iter().next().expect("one batch");
            Ok(Dataset { images: b.images, labels: b.labels, class_count: full.class_count })
        }
        other => Err(Error::Config(format!("unknown data source: {other}"))),
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn eval_accuracy(
    cfg: &RunConfig,
    model: &Model,
    test: &Dataset,
    epsilon: f64,
) -> Result<f64> {
    let spec = cfg.attack_spec(epsilon, cfg.seed)?;
    robust_accuracy(model, &test.images, &test.labels, &spec, cfg.train.batch_size)
}

fn load_pretrained(out: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(out, "pretrain")?;
    let path = out.join("pretrained.ckpt");
    if !path.exists() {
        return Err(Error::Config(format!("missing checkpoint {}", path.display())));
    }
    let model = Model::load(&path)?;
    if let Some(expected) = &manifest.checkpoint_hash {
        if &model.param_hash() != expected {
            return Err(Error::Config(
                "checkpoint does not match the pretrain manifest hash".into(),
            ));
        }
    }
    Ok((model, manifest))
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_synth_data(common: &CommonArgs, samples: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(n) = samples {
        cfg.data.train_samples = n;
    }
    let train = synth_digits(cfg.data.train_samples, cfg.seed.wrapping_mul(2))?;
    let test = synth_digits(cfg.data.test_samples, cfg.seed.wrapping_mul(2).wrapping_add(1))?;
    let paths = [
        ("train-images.idx", "train-labels.idx", &train),
        ("test-images.idx", "test-labels.idx", &test),
    ];
    let mut outputs = Vec::new();
    for (ip, lp, ds) in paths {
        write_idx(ds, &common.out.join(ip), &common.out.join(lp))?;
        outputs.push(ip.to_string());
        outputs.push(lp.to_string());
    }
    eprintln!(
        "wrote {} train / {} test images to {}",
        train.len(),
        test.len(),
        common.out.display()
    );
    write_manifest(
        &common.out,
        &Manifest {
            command: "synth-data".into(),
            seed: cfg.seed,
            outputs,
            checkpoint_hash: None,
            data_fingerprint: fingerprint(&train),
            config: cfg,
        },
    )
}

fn cmd_pretrain(common: &CommonArgs, epochs: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let train = load_split(&cfg, true)?;
    let arch = Arch::from_name(&cfg.model.arch)?;
    let spec = ModelSpec::plain(arch);
    let hyper = TrainHyper {
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        batch_size: cfg.train.batch_size,
        seed: cfg.seed,
        attack: None,
    };
    eprintln!("pretraining {} on {} samples for {} epochs", cfg.model.arch, train.len(), hyper.epochs);
    let (model, log) = pretrain(&spec, &train, &hyper, None)?;
    let ckpt = common.out.join("pretrained.ckpt");
    model.save(&ckpt)?;
    log.write_csv(&common.out.join("pretrain_log.csv"))?;
    write_manifest(
        &common.out,
        &Manifest {
            command: "pretrain".into(),
            seed: cfg.seed,
            outputs: vec!["pretrained.ckpt".into(), "pretrain_log.csv".into()],
            checkpoint_hash: Some(model.param_hash()),
            data_fingerprint: fingerprint(&train),
            config: cfg,
        },
    )?;
    eprintln!("checkpoint saved to {}", ckpt.display());
    Ok(())
}

fn cmd_sweep_lambda(
    common: &CommonArgs,
    lambda_grid: Option<Vec<f64>>,
    eps_grid: Option<Vec<f64>>,
    k: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(grid) = lambda_grid {
        cfg.sweep.lambda_grid = grid;
    }
    if let Some(grid) = eps_grid {
        cfg.attack.epsilon_grid = grid;
    }
    if let Some(k) = k {
        cfg.model.k = k;
    }
    let (model, _) = load_pretrained(&common.out)?;
    let test = load_split(&cfg, false)?;
    let mut report = ExperimentReport::new();
    // the frozen pretrained model is the reference row
    let normal_nat = eval_accuracy(&cfg, &model, &test, 0.0)?;
    for &eps in &cfg.attack.epsilon_grid {
        report.push(ReportRow {
            method: "normal-train".into(),
            lambda: 1.0,
            epsilon: eps,
            natural_acc: normal_nat,
            robust_acc: eval_accuracy(&cfg, &model, &test, eps)?,
            attack: cfg.attack.kind.clone(),
            seed: cfg.seed,
        });
    }
    for &lambda in &cfg.sweep.lambda_grid {
        let lambdas = vec![lambda; model.parametric_layer_count()];
        let view = reprogram_p1(&model, &lambdas, cfg.model.k, cfg.model.eps)?;
        let natural = eval_accuracy(&cfg, &view, &test, 0.0)?;
        eprintln!("λ = {lambda:.2}: natural {natural:.4}");
        for &eps in &cfg.attack.epsilon_grid {
            report.push(ReportRow {
                method: "p1".into(),
                lambda,
                epsilon: eps,
                natural_acc: natural,
                robust_acc: eval_accuracy(&cfg, &view, &test, eps)?,
                attack: cfg.attack.kind.clone(),
                seed: cfg.seed,
            });
        }
    }
    report.write_csv(&common.out.join("sweep_lambda.csv"))?;
    write_manifest(
        &common.out,
        &Manifest {
            command: "sweep-lambda".into(),
            seed: cfg.seed,
            outputs: vec!["sweep_lambda.csv".into()],
            checkpoint_hash: Some(model.param_hash()),
            data_fingerprint: fingerprint(&test),
            config: cfg,
        },
    )
}

fn cmd_reprogram(
    common: &CommonArgs,
    paradigm: &str,
    epochs: Option<usize>,
    k: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(k) = k {
        cfg.model.k = k;
    }
    let (model, _) = load_pretrained(&common.out)?;
    let train = load_split(&cfg, true)?;
    let test = load_split(&cfg, false)?;
    let attack = cfg.attack_spec(cfg.finetune.train_epsilon, cfg.seed)?;
    let before_hash = model.param_hash();

    let (tuned, log, name) = match paradigm {
        "p2" => {
            let hyper = TrainHyper {
                epochs: epochs.unwrap_or(cfg.finetune.epochs),
                lr: cfg.finetune.lr_p2,
                weight_decay: 0.0,
                batch_size: cfg.finetune.batch_size,
                seed: cfg.seed,
                attack: Some(attack),
            };
            let (m, log) = reprogram_p2(&model, &train, cfg.model.k, cfg.model.eps, &hyper, None)?;
            assert_eq!(m.param_hash(), before_hash, "paradigm 2 froze nothing");
            eprintln!("p2 weight hash unchanged: {}", &before_hash[..16]);
            (m, log, "p2")
        }
        "p3" => {
            let hyper = TrainHyper {
                epochs: epochs.unwrap_or(cfg.finetune.epochs_p3),
                lr: cfg.finetune.lr_p3,
                weight_decay: cfg.finetune.weight_decay,
                batch_size: cfg.finetune.batch_size,
                seed: cfg.seed,
                attack: Some(attack),
            };
            let (m, log) = reprogram_p3(&model, &train, cfg.model.k, cfg.model.eps, &hyper, None)?;
            (m, log, "p3")
        }
        other => return Err(Error::Config(format!("unknown paradigm: {other} (use p2 or p3)"))),
    };

    let lambdas = tuned.lambdas();
    eprintln!("learned λ per layer: {lambdas:?}");
    let natural = eval_accuracy(&cfg, &tuned, &test, 0.0)?;
    let mut report = ExperimentReport::new();
    let mean_lambda = lambdas.iter().sum::<f64>() / lambdas.len().max(1) as f64;
    for &eps in &cfg.attack.epsilon_grid {
        report.push(ReportRow {
            method: name.into(),
            lambda: mean_lambda,
            epsilon: eps,
            natural_acc: natural,
            robust_acc: eval_accuracy(&cfg, &tuned, &test, eps)?,
            attack: cfg.attack.kind.clone(),
            seed: cfg.seed,
        });
    }
    if name == "p3" {
        // context line: compare against the best fixed-λ view at the
        // mid-grid budget
        let mid_eps = cfg.attack.epsilon_grid.get(2).copied().unwrap_or(0.1);
        let mut best_p1 = 0.0f64;
        for &lambda in &cfg.sweep.lambda_grid {
            let view = reprogram_p1(
                &model,
                &vec![lambda; model.parametric_layer_count()],
                cfg.model.k,
                cfg.model.eps,
            )?;
            best_p1 = best_p1.max(eval_accuracy(&cfg, &view, &test, mid_eps)?);
        }
        let p3_rob = eval_accuracy(&cfg, &tuned, &test, mid_eps)?;
        eprintln!("p3 robust@{mid_eps}: {p3_rob:.4} vs best p1 {best_p1:.4}");
    }

    let ckpt_name = format!("reprogrammed_{name}.ckpt");
    tuned.save(&common.out.join(&ckpt_name))?;
    log.write_csv(&common.out.join(format!("reprogram_{name}_log.csv")))?;
    report.write_csv(&common.out.join(format!("reprogram_{name}.csv")))?;
    write_manifest(
        &common.out,
        &Manifest {
            command: format!("reprogram-{name}"),
            seed: cfg.seed,
            outputs: vec![
                ckpt_name,
                format!("reprogram_{name}_log.csv"),
                format!("reprogram_{name}.csv"),
            ],
            checkpoint_hash: Some(tuned.param_hash()),
            data_fingerprint: fingerprint(&train),
            config: cfg,
        },
    )
}

fn cmd_attack_eval(
    common: &CommonArgs,
    checkpoint: Option<PathBuf>,
    eps_grid: Option<Vec<f64>>,
) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(grid) = eps_grid {
        cfg.attack.epsilon_grid = grid;
    }
    let model = match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("missing checkpoint {}", path.display())));
            }
            Model::load(&path)?
        }
        None => load_pretrained(&common.out)?.0,
    };
    let test = load_split(&cfg, false)?;
    let natural = eval_accuracy(&cfg, &model, &test, 0.0)?;
    let mean_lambda = {
        let l = model.lambdas();
        l.iter().sum::<f64>() / l.len().max(1) as f64
    };
    let mut report = ExperimentReport::new();
    for &eps in &cfg.attack.epsilon_grid {
        let robust = eval_accuracy(&cfg, &model, &test, eps)?;
        eprintln!("ε = {eps:.3}: robust {robust:.4}");
        report.push(ReportRow {
            method: "attack-eval".into(),
            lambda: mean_lambda,
            epsilon: eps,
            natural_acc: natural,
            robust_acc: robust,
            attack: cfg.attack.kind.clone(),
            seed: cfg.seed,
        });
    }
    report.write_csv(&common.out.join("attack_eval.csv"))?;
    write_manifest(
        &common.out,
        &Manifest {
            command: "attack-eval".into(),
            seed: cfg.seed,
            outputs: vec!["attack_eval.csv".into()],
            checkpoint_hash: Some(model.param_hash()),
            data_fingerprint: fingerprint(&test),
            config: cfg,
        },
    )
}

fn cmd_influence(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let icfg = &cfg.influence;
    if icfg.x0_points < 2 {
        return Err(Error::Config("x0_points must be at least 2".into()));
    }
    // a reproducible snapshot with well-separated products
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let products: Vec<f64> = (0..icfg.dimension).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let snap = EstimatorSnapshot::new(&ProductVector::new(products)?)?;
    let mut out = String::from("x0,if_lpm,if_nrpm,numeric_lpm,numeric_nrpm\n");
    for i in 0..icfg.x0_points {
        let x0 = icfg.x0_min
            + (icfg.x0_max - icfg.x0_min) * i as f64 / (icfg.x0_points - 1) as f64;
        if (x0 - snap.mean()).abs() < 1e-9 {
            continue; // the contamination weight is undefined on the mean
        }
        let row = format!(
            "{x0:.6},{:.10},{:.10},{:.10},{:.10}\n",
            if_lpm(&snap, x0),
            if_nrpm(&snap, x0)?,
            numeric_if(EstimatorKind::Lpm, &snap, x0, icfg.contamination)?,
            numeric_if(EstimatorKind::Nrpm, &snap, x0, icfg.contamination)?,
        );
        out.push_str(&row);
    }
    std::fs::write(common.out.join("influence.csv"), out)?;
    eprintln!("influence curves for D = {} written", icfg.dimension);
    write_manifest(
        &common.out,
        &Manifest {
            command: "influence".into(),
            seed: cfg.seed,
            outputs: vec!["influence.csv".into()],
            checkpoint_hash: None,
            data_fingerprint: String::new(),
            config: cfg,
        },
    )
}

fn norms(diff: &[f64]) -> (f64, f64, f64) {
    let l1: f64 = diff.iter().map(|v| v.abs()).sum();
    let l2: f64 = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let linf: f64 = diff.iter().fold(0.0, |m, v| m.max(v.abs()));
    (l1, l2, linf)
}

fn cmd_embedding_diff(common: &CommonArgs, epsilon: Option<f64>, k: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(k) = k {
        cfg.model.k = k;
    }
    let eps = epsilon.unwrap_or(0.3);
    let (model, _) = load_pretrained(&common.out)?;
    let test = load_split(&cfg, false)?;
    let n = test.len().min(256);
    let sample = test.gather(&(0..n).collect::<Vec<_>>())?;
    let layer_count = model.parametric_layer_count();
    let views = [
        ("lpm", reprogram_p1(&model, &vec![1.0; layer_count], cfg.model.k, cfg.model.eps)?),
        ("nrpm", reprogram_p1(&model, &vec![0.0; layer_count], cfg.model.k, cfg.model.eps)?),
    ];
    let mut out = String::from("view,layer,l1,l2,linf\n");
    for (name, view) in &views {
        let attack = cfg.attack_spec(eps, cfg.seed)?;
        let adv = crate::attack::attack_batch(view, &sample.images, &sample.labels, &attack)?;
        // input-level difference row, then one row per traced layer
        let dx: Vec<f64> =
            adv.data.iter().zip(&sample.images.data).map(|(a, b)| a - b).collect();
        let (l1, l2, linf) = norms(&dx);
        let scale = 1.0 / n as f64;
        out.push_str(&format!(
            "{name},x,{:.4},{:.4},{:.4}\n",
            l1 * scale,
            l2 * scale,
            linf
        ));
        let clean_trace = view.embedding_trace(&sample.images)?;
        let adv_trace = view.embedding_trace(&adv)?;
        for (li, (c, a)) in clean_trace.iter().zip(&adv_trace).enumerate() {
            let diff: Vec<f64> = a.data.iter().zip(&c.data).map(|(x, y)| x - y).collect();
            let (l1, l2, linf) = norms(&diff);
            out.push_str(&format!(
                "{name},z{},{:.4},{:.4},{:.4}\n",
                li + 1,
                l1 * scale,
                l2 * scale,
                linf
            ));
        }
    }
    std::fs::write(common.out.join("embedding_diff.csv"), out)?;
    eprintln!("embedding differences at ε = {eps} over {n} samples written");
    write_manifest(
        &common.out,
        &Manifest {
            command: "embedding-diff".into(),
            seed: cfg.seed,
            outputs: vec!["embedding_diff.csv".into()],
            checkpoint_hash: Some(model.param_hash()),
            data_fingerprint: fingerprint(&sample),
            config: cfg,
        },
    )
}

/// Run a parsed command; the binary maps the error to an exit code.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData { common, samples } => cmd_synth_data(common, *samples),
        Command::Pretrain { common, epochs } => cmd_pretrain(common, *epochs),
        Command::SweepLambda { common, lambda_grid, eps_grid, k } => {
            cmd_sweep_lambda(common, lambda_grid.clone(), eps_grid.clone(), *k)
        }
        Command::Reprogram { common, paradigm, epochs, k } => {
            cmd_reprogram(common, paradigm, *epochs, *k)
        }
        Command::AttackEval { common, checkpoint, eps_grid } => {
            cmd_attack_eval(common, checkpoint.clone(), eps_grid.clone())
        }
        Command::Influence { common } => cmd_influence(common),
        Command::EmbeddingDiff { common, epsilon, k } => {
            cmd_embedding_diff(common, *epsilon, *k)
        }
    }
}

/// Exit code for a failed run: 2 for usage/configuration problems, 3 for
/// runtime/numeric ones.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Dim(_) | Error::Numeric(_) | Error::Training(_) => 3,
    }
}
