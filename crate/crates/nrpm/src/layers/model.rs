//! Model assemblies, seeded initialization, activation traces, checkpoints.
//!
//! # Checkpoint format (version 1)
//!
//! Little-endian binary, stable across runs:
//!
//! ```text
//! magic   8 bytes  "NRPMCKPT"
//! version u32      1
//! arch    u32 len + UTF-8 name
//! layers  u32 count, then per layer:
//!   tag u8: 0 dense | 1 conv | 2 relu | 3 maxpool2 | 4 flatten
//!   dense: u32 d_in, u32 d_out, mix, weight f64×(d_in·d_out), bias f64×d_out
//!   conv:  u32 c_out,c_in,kh,kw,stride,padding, mix, kernel f64s, bias f64s
//!   mix:   u8 0 absent | 1 present; then u32 k, f64 eps,
//!          u8 mode (0 fixed λ | 1 learnable β), f64 value
//! ```
//!
//! Parameter arrays are raw IEEE-754 bits, so save/load round-trips exactly.

use super::{HybridConvLayer, HybridDenseLayer};
use crate::pattern::{LambdaParam, NrpmConfig};
use crate::tensor::{NodeId, Tape, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"NRPMCKPT";
const CKPT_VERSION: u32 = 1;

/// Named architectures; `Mlp` carries explicit widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Mlp1,
    Mlp2,
    Mlp3,
    LenetSmall,
    Mlp(Vec<usize>),
}

impl Arch {
    pub fn from_name(name: &str) -> Result<Arch> {
        match name {
            "mlp1" => Ok(Arch::Mlp1),
            "mlp2" => Ok(Arch::Mlp2),
            "mlp3" => Ok(Arch::Mlp3),
            "lenet-small" => Ok(Arch::LenetSmall),
            other => Err(Error::Config(format!("unknown architecture name: {other}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Arch::Mlp1 => "mlp1".into(),
            Arch::Mlp2 => "mlp2".into(),
            Arch::Mlp3 => "mlp3".into(),
            Arch::LenetSmall => "lenet-small".into(),
            Arch::Mlp(w) => format!(
                "mlp-custom-{}",
                w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
            ),
        }
    }

    pub fn mlp_widths(&self) -> Option<Vec<usize>> {
        match self {
            Arch::Mlp1 => Some(vec![784, 10]),
            Arch::Mlp2 => Some(vec![784, 64, 10]),
            Arch::Mlp3 => Some(vec![784, 256, 64, 10]),
            Arch::Mlp(w) => Some(w.clone()),
            Arch::LenetSmall => None,
        }
    }

    /// Number of layers that carry parameters (and a mixing slot).
    pub fn parametric_layer_count(&self) -> usize {
        match self {
            Arch::LenetSmall => 4,
            other => other.mlp_widths().expect("mlp arch").len() - 1,
        }
    }
}

/// Architecture plus the per-layer mixing configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// One entry per parametric layer; `None` opts that layer out.
    pub mixes: Vec<Option<NrpmConfig>>,
}

impl ModelSpec {
    /// Spec with every layer mixing at a fixed λ = 1 (plain behavior, hybrid
    /// machinery installed).
    pub fn plain(arch: Arch) -> Self {
        let n = arch.parametric_layer_count();
        ModelSpec { arch, mixes: vec![Some(NrpmConfig::fixed(1, 1.0)); n] }
    }

    pub fn with_shared(arch: Arch, cfg: NrpmConfig) -> Self {
        let n = arch.parametric_layer_count();
        ModelSpec { arch, mixes: vec![Some(cfg); n] }
    }

    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least two widths".into()));
        }
        Ok(ModelSpec::plain(Arch::Mlp(widths.to_vec())))
    }
}

/// One stage of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(HybridDenseLayer),
    Conv(HybridConvLayer),
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
        }
    }
}

/// Which parameter family a registered node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Beta,
}

/// A parameter registered on a tape during one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamNode {
    /// Index into `Model::layers`.
    pub layer: usize,
    pub kind: ParamKind,
    pub node: NodeId,
}

/// Which parameters receive gradients during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    None,
    MixingOnly,
    All,
}

/// Everything a forward pass leaves behind for the caller.
pub struct ForwardArtifacts {
    pub logits: NodeId,
    pub params: Vec<ParamNode>,
    /// Post-mixing, post-bias, pre-activation output of each parametric layer.
    pub trace: Vec<NodeId>,
}

/// A stack of layers with an architecture tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub arch: Arch,
}

/// Deterministically initialize a model: uniform `±1/√fan_in` for weights and
/// biases, parameters drawn in layer order from a seeded stream.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let want = spec.arch.parametric_layer_count();
    if spec.mixes.len() != want {
        return Err(Error::Config(format!(
            "{} mixing entries for {want} parametric layers",
            spec.mixes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    let mut layers = Vec::new();
    match &spec.arch {
        Arch::LenetSmall => {
            let mk_conv = |c_in: usize, c_out: usize, k: usize, cfg: Option<NrpmConfig>,
                               uniform: &mut dyn FnMut(usize, f64) -> Vec<f64>|
             -> Result<HybridConvLayer> {
                let fan_in = c_in * k * k;
                let bound = 1.0 / (fan_in as f64).sqrt();
                HybridConvLayer::new(
                    Tensor::new(vec![c_out, c_in, k, k], uniform(c_out * c_in * k * k, bound))?,
                    Tensor::new(vec![c_out], uniform(c_out, bound))?,
                    1,
                    0,
                    cfg,
                )
            };
            layers.push(Layer::Conv(mk_conv(1, 4, 5, spec.mixes[0], &mut uniform)?));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Conv(mk_conv(4, 8, 5, spec.mixes[1], &mut uniform)?));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            layers.push(Layer::Flatten);
            for (i, (d_in, d_out)) in [(128usize, 32usize), (32, 10)].into_iter().enumerate() {
                let bound = 1.0 / (d_in as f64).sqrt();
                layers.push(Layer::Dense(HybridDenseLayer::new(
                    Tensor::new(vec![d_in, d_out], uniform(d_in * d_out, bound))?,
                    Tensor::new(vec![d_out], uniform(d_out, bound))?,
                    spec.mixes[2 + i],
                )?));
            }
        }
        mlp => {
            let widths = mlp.mlp_widths().expect("mlp arch");
            layers.push(Layer::Flatten);
            for i in 0..widths.len() - 1 {
                let (d_in, d_out) = (widths[i], widths[i + 1]);
                let bound = 1.0 / (d_in as f64).sqrt();
                layers.push(Layer::Dense(HybridDenseLayer::new(
                    Tensor::new(vec![d_in, d_out], uniform(d_in * d_out, bound))?,
                    Tensor::new(vec![d_out], uniform(d_out, bound))?,
                    spec.mixes[i],
                )?));
                if i + 2 < widths.len() {
                    layers.push(Layer::Relu);
                }
            }
        }
    }
    Ok(Model { layers, arch: spec.arch.clone() })
}

impl Model {
    pub fn parametric_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Dense(_) | Layer::Conv(_)))
            .count()
    }

    /// Total weight and bias scalar count (mixing parameters excluded).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weight.numel() + d.bias.numel(),
                Layer::Conv(c) => c.kernel.numel() + c.bias.numel(),
                _ => 0,
            })
            .sum()
    }

    /// SHA-256 over all weight/bias bits in layer order. Mixing parameters
    /// (λ/β) are deliberately excluded: installing or tuning them must not
    /// change this hash, which is how the freeze contracts are verified.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for l in &self.layers {
            let tensors: [&Tensor; 2] = match l {
                Layer::Dense(d) => [&d.weight, &d.bias],
                Layer::Conv(c) => [&c.kernel, &c.bias],
                _ => continue,
            };
            for t in tensors {
                for v in &t.data {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Mixing configuration of each parametric layer, in order.
    pub fn mixes(&self) -> Vec<Option<NrpmConfig>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.cfg),
                Layer::Conv(c) => Some(c.cfg),
                _ => None,
            })
            .collect()
    }

    /// Effective λ of each parametric layer (1 for opted-out layers).
    pub fn lambdas(&self) -> Vec<f64> {
        self.mixes()
            .iter()
            .map(|m| m.map(|c| c.lambda.value()).unwrap_or(1.0))
            .collect()
    }

    fn for_each_mix(&mut self, mut f: impl FnMut(usize, &mut Option<NrpmConfig>)) {
        let mut idx = 0;
        for l in &mut self.layers {
            let cfg = match l {
                Layer::Dense(d) => &mut d.cfg,
                Layer::Conv(c) => &mut c.cfg,
                _ => continue,
            };
            f(idx, cfg);
            idx += 1;
        }
    }

    /// Install fixed per-layer λ values (and iteration count) for evaluation.
    pub fn set_fixed_lambdas(&mut self, lambdas: &[f64], k: usize, eps: f64) -> Result<()> {
        if lambdas.len() != self.parametric_layer_count() {
            return Err(Error::Config(format!(
                "{} λ values for {} layers",
                lambdas.len(),
                self.parametric_layer_count()
            )));
        }
        if let Some(&bad) = lambdas.iter().find(|&&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::Config(format!("λ = {bad} outside [0,1]")));
        }
        let mut result = Ok(());
        self.for_each_mix(|i, cfg| {
            match NrpmConfig::new(k, eps, LambdaParam::Fixed(lambdas[i])) {
                Ok(c) => *cfg = Some(c),
                Err(e) => result = Err(e),
            }
        });
        result
    }

    pub fn set_shared_lambda(&mut self, lambda: f64, k: usize, eps: f64) -> Result<()> {
        let lambdas = vec![lambda; self.parametric_layer_count()];
        self.set_fixed_lambdas(&lambdas, k, eps)
    }

    /// Convert every mixing slot to a learnable β = 0 (λ = 0.5).
    pub fn make_mixes_learnable(&mut self, k: usize, eps: f64) -> Result<()> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
        self.for_each_mix(|_, cfg| {
            *cfg = Some(NrpmConfig { k, eps, lambda: LambdaParam::Learnable(0.0) });
        });
        Ok(())
    }

    /// Forward from an already-registered input node, collecting parameter
    /// nodes and the per-layer activation trace.
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        x: NodeId,
        trainable: TrainableSet,
    ) -> Result<ForwardArtifacts> {
        let train_params = trainable == TrainableSet::All;
        let train_mix = trainable != TrainableSet::None;
        let mut cur = x;
        let mut params = Vec::new();
        let mut trace = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    let w = tape.leaf(&d.weight.clone().requires_grad(train_params));
                    let b = tape.leaf(&d.bias.clone().requires_grad(train_params));
                    params.push(ParamNode { layer: li, kind: ParamKind::Weight, node: w });
                    params.push(ParamNode { layer: li, kind: ParamKind::Bias, node: b });
                    let (out, beta) = d.forward_on_tape(tape, cur, w, b, train_mix)?;
                    if let Some(bn) = beta {
                        params.push(ParamNode { layer: li, kind: ParamKind::Beta, node: bn });
                    }
                    trace.push(out);
                    cur = out;
                }
                Layer::Conv(c) => {
                    let w = tape.leaf(&c.kernel.clone().requires_grad(train_params));
                    let b = tape.leaf(&c.bias.clone().requires_grad(train_params));
                    params.push(ParamNode { layer: li, kind: ParamKind::Weight, node: w });
                    params.push(ParamNode { layer: li, kind: ParamKind::Bias, node: b });
                    let (out, beta) = c.forward_on_tape(tape, cur, w, b, train_mix)?;
                    if let Some(bn) = beta {
                        params.push(ParamNode { layer: li, kind: ParamKind::Beta, node: bn });
                    }
                    trace.push(out);
                    cur = out;
                }
                Layer::Relu => cur = tape.relu(cur),
                Layer::MaxPool2 => cur = tape.maxpool2(cur)?,
                Layer::Flatten => {
                    let shape = tape.shape(cur).to_vec();
                    if shape.len() > 2 {
                        let b = shape[0];
                        let rest: usize = shape[1..].iter().product();
                        cur = tape.reshape(cur, vec![b, rest])?;
                    }
                }
            }
        }
        Ok(ForwardArtifacts { logits: cur, params, trace })
    }

    /// Evaluation forward pass; no gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let art = self.forward_from(&mut tape, xi, TrainableSet::None)?;
        Ok(tape.value(art.logits))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }

    /// Ordered per-layer activations (post-mixing, post-bias, pre-activation)
    /// for diagnostic comparison between clean and perturbed inputs.
    pub fn embedding_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let art = self.forward_from(&mut tape, xi, TrainableSet::None)?;
        Ok(art.trace.into_iter().map(|id| tape.value(id)).collect())
    }

    // ── checkpoints ─────────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let name = self.arch.name();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    buf.push(0);
                    buf.extend_from_slice(&(d.d_in() as u32).to_le_bytes());
                    buf.extend_from_slice(&(d.d_out() as u32).to_le_bytes());
                    write_mix(&mut buf, &d.cfg);
                    write_f64s(&mut buf, &d.weight.data);
                    write_f64s(&mut buf, &d.bias.data);
                }
                Layer::Conv(c) => {
                    buf.push(1);
                    for v in [
                        c.kernel.shape[0],
                        c.kernel.shape[1],
                        c.kernel.shape[2],
                        c.kernel.shape[3],
                        c.stride,
                        c.padding,
                    ] {
                        buf.extend_from_slice(&(v as u32).to_le_bytes());
                    }
                    write_mix(&mut buf, &c.cfg);
                    write_f64s(&mut buf, &c.kernel.data);
                    write_f64s(&mut buf, &c.bias.data);
                }
                Layer::Relu => buf.push(2),
                Layer::MaxPool2 => buf.push(3),
                Layer::Flatten => buf.push(4),
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic: expected {CKPT_MAGIC:?}, got {magic:?}"
            )));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
            )));
        }
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("arch name is not UTF-8".into()))?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            match r.u8()? {
                0 => {
                    let d_in = r.u32()? as usize;
                    let d_out = r.u32()? as usize;
                    let cfg = read_mix(&mut r)?;
                    let weight = Tensor::new(vec![d_in, d_out], r.f64s(d_in * d_out)?)?;
                    let bias = Tensor::new(vec![d_out], r.f64s(d_out)?)?;
                    layers.push(Layer::Dense(HybridDenseLayer::new(weight, bias, cfg)?));
                }
                1 => {
                    let c_out = r.u32()? as usize;
                    let c_in = r.u32()? as usize;
                    let kh = r.u32()? as usize;
                    let kw = r.u32()? as usize;
                    let stride = r.u32()? as usize;
                    let padding = r.u32()? as usize;
                    let cfg = read_mix(&mut r)?;
                    let kernel =
                        Tensor::new(vec![c_out, c_in, kh, kw], r.f64s(c_out * c_in * kh * kw)?)?;
                    let bias = Tensor::new(vec![c_out], r.f64s(c_out)?)?;
                    layers.push(Layer::Conv(HybridConvLayer::new(kernel, bias, stride, padding, cfg)?));
                }
                2 => layers.push(Layer::Relu),
                3 => layers.push(Layer::MaxPool2),
                4 => layers.push(Layer::Flatten),
                tag => return Err(Error::Format(format!("unknown layer tag {tag}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        let arch = match name.as_str() {
            "mlp1" => Arch::Mlp1,
            "mlp2" => Arch::Mlp2,
            "mlp3" => Arch::Mlp3,
            "lenet-small" => Arch::LenetSmall,
            _ => {
                let widths: Vec<usize> = layers
                    .iter()
                    .filter_map(|l| match l {
                        Layer::Dense(d) => Some(d.d_in()),
                        _ => None,
                    })
                    .chain(layers.iter().rev().find_map(|l| match l {
                        Layer::Dense(d) => Some(d.d_out()),
                        _ => None,
                    }))
                    .collect();
                Arch::Mlp(widths)
            }
        };
        Ok(Model { layers, arch })
    }
}

fn write_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_mix(buf: &mut Vec<u8>, cfg: &Option<NrpmConfig>) {
    match cfg {
        None => buf.push(0),
        Some(c) => {
            buf.push(1);
            buf.extend_from_slice(&(c.k as u32).to_le_bytes());
            buf.extend_from_slice(&c.eps.to_le_bytes());
            match c.lambda {
                LambdaParam::Fixed(l) => {
                    buf.push(0);
                    buf.extend_from_slice(&l.to_le_bytes());
                }
                LambdaParam::Learnable(b) => {
                    buf.push(1);
                    buf.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn read_mix(r: &mut Reader) -> Result<Option<NrpmConfig>> {
    match r.u8()? {
        0 => Ok(None),
        1 => {
            let k = r.u32()? as usize;
            let eps = r.f64()?;
            let lambda = match r.u8()? {
                0 => LambdaParam::Fixed(r.f64()?),
                1 => LambdaParam::Learnable(r.f64()?),
                tag => return Err(Error::Format(format!("unknown mix mode {tag}"))),
            };
            Ok(Some(NrpmConfig { k, eps, lambda }))
        }
        tag => Err(Error::Format(format!("unknown mix presence tag {tag}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff_gradient, max_rel_err};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let spec = ModelSpec::plain(Arch::Mlp2);
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn mlp3_parameter_count() {
        // 784·256+256 + 256·64+64 + 64·10+10
        let model = build_model(&ModelSpec::plain(Arch::Mlp3), 1).unwrap();
        let expect = 784 * 256 + 256 + 256 * 64 + 64 + 64 * 10 + 10;
        assert_eq!(expect, 218_058);
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn lenet_small_layer_list() {
        let model = build_model(&ModelSpec::plain(Arch::LenetSmall), 1).unwrap();
        let kinds: Vec<&str> = model.layers.iter().map(|l| l.kind_name()).collect();
        assert_eq!(
            kinds,
            ["conv", "relu", "maxpool2", "conv", "relu", "maxpool2", "flatten", "dense", "dense"]
        );
        match &model.layers[0] {
            Layer::Conv(c) => assert_eq!(c.kernel.shape, vec![4, 1, 5, 5]),
            _ => unreachable!(),
        }
        match &model.layers[7] {
            Layer::Dense(d) => assert_eq!((d.d_in(), d.d_out()), (128, 32)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_architecture_name_is_config_error() {
        assert!(matches!(Arch::from_name("resnet18"), Err(Error::Config(_))));
    }

    #[test]
    fn trace_length_and_determinism() {
        let model = build_model(&ModelSpec::plain(Arch::Mlp2), 3).unwrap();
        let x = Tensor::new(vec![2, 784], vec![0.5; 2 * 784]).unwrap();
        let t1 = model.embedding_trace(&x).unwrap();
        let t2 = model.embedding_trace(&x).unwrap();
        assert_eq!(t1.len(), 2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn lenet_shapes_flow_through() {
        let model = build_model(&ModelSpec::plain(Arch::LenetSmall), 5).unwrap();
        let x = Tensor::new(vec![2, 1, 28, 28], vec![0.1; 2 * 784]).unwrap();
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape, vec![2, 10]);
        let trace = model.embedding_trace(&x).unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(trace[0].shape, vec![2, 4, 24, 24]);
        assert_eq!(trace[1].shape, vec![2, 8, 8, 8]);
        assert_eq!(trace[2].shape, vec![2, 32]);
        assert_eq!(trace[3].shape, vec![2, 10]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = build_model(&ModelSpec::plain(Arch::Mlp2), 11).unwrap();
        model.make_mixes_learnable(2, 1e-3).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.param_hash(), loaded.param_hash());
    }

    #[test]
    fn checkpoint_bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model(&ModelSpec::plain(Arch::Mlp1), 2).unwrap();
        model.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Format(_))));
        bytes[0] ^= 0xff;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn installing_lambdas_preserves_parameter_hash() {
        let mut model = build_model(&ModelSpec::plain(Arch::Mlp2), 9).unwrap();
        let before = model.param_hash();
        model.set_fixed_lambdas(&[0.6, 0.4], 1, 1e-3).unwrap();
        assert_eq!(model.param_hash(), before);
        assert_eq!(model.lambdas(), vec![0.6, 0.4]);
        assert!(matches!(
            model.set_fixed_lambdas(&[1.2, 0.0], 1, 1e-3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // 6-4-3 hybrid MLP: every weight, bias, and β checked against
        // central differences away from reweighting kinks
        let spec = ModelSpec::mlp(&[6, 4, 3]).unwrap();
        let mut model = build_model(&spec, 13).unwrap();
        model.make_mixes_learnable(1, 1e-3).unwrap();
        let mut rng = StdRng::seed_from_u64(14);
        let x = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let labels = vec![0usize, 2, 1];

        let loss_for = |m: &Model| -> f64 {
            let mut tape = Tape::new();
            let xi = tape.constant(&x);
            let art = m.forward_from(&mut tape, xi, TrainableSet::None).unwrap();
            let loss = tape.softmax_cross_entropy(art.logits, &labels).unwrap();
            tape.data(loss)[0]
        };

        let mut tape = Tape::new();
        let xi = tape.constant(&x);
        let art = model.forward_from(&mut tape, xi, TrainableSet::All).unwrap();
        let loss = tape.softmax_cross_entropy(art.logits, &labels).unwrap();
        tape.backward(loss).unwrap();

        for pn in &art.params {
            let analytic = tape.grad(pn.node).expect("trainable param grad").to_vec();
            let layer_idx = pn.layer;
            let current: Vec<f64> = match (&model.layers[layer_idx], pn.kind) {
                (Layer::Dense(d), ParamKind::Weight) => d.weight.data.clone(),
                (Layer::Dense(d), ParamKind::Bias) => d.bias.data.clone(),
                (Layer::Dense(d), ParamKind::Beta) => match d.cfg.unwrap().lambda {
                    LambdaParam::Learnable(b) => vec![b],
                    _ => unreachable!(),
                },
                _ => unreachable!("mlp has only dense layers"),
            };
            let numeric = central_diff_gradient(
                |vals| {
                    let mut probe = model.clone();
                    match (&mut probe.layers[layer_idx], pn.kind) {
                        (Layer::Dense(d), ParamKind::Weight) => d.weight.data = vals.to_vec(),
                        (Layer::Dense(d), ParamKind::Bias) => d.bias.data = vals.to_vec(),
                        (Layer::Dense(d), ParamKind::Beta) => {
                            let cfg = d.cfg.as_mut().unwrap();
                            cfg.lambda = LambdaParam::Learnable(vals[0]);
                        }
                        _ => unreachable!(),
                    }
                    loss_for(&probe)
                },
                &current,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-3, "layer {layer_idx} {:?}: rel err {err}", pn.kind);
        }
    }
}
