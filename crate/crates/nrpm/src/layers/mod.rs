//! Hybrid neural layers built on the robust matching unit.
//!
//! A dense unit's products are `p_d = x_d·W_{d,o}`; a convolution unit's are
//! the elementwise products of an unfolded input column with the flattened
//! kernel row. Both layers run the same unrolled reweighting over their
//! product axis, mix the linear and robust aggregates with the layer's λ, and
//! add the bias after mixing so the product count and median semantics stay
//! clean. At a fixed λ = 1 the layers take the plain affine/convolution path.

mod model;

pub use model::{
    build_model, Arch, ForwardArtifacts, Layer, Model, ModelSpec, ParamKind, ParamNode,
    TrainableSet,
};

use crate::pattern::{hybrid_forward, LambdaParam, NrpmConfig, ProductVector};
use crate::tensor::{conv_out_extent, NodeId, Tape, Tensor};
use crate::{Error, Result};

/// Fully connected layer with one mixing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridDenseLayer {
    /// `[D_in, D_out]`
    pub weight: Tensor,
    /// `[D_out]`
    pub bias: Tensor,
    /// `None` opts the layer out of robust matching entirely.
    pub cfg: Option<NrpmConfig>,
}

/// Convolution layer (cross-correlation) with one mixing parameter.
/// Robust matching runs per output pixel per output channel over the
/// `C_in·kh·kw` products of each receptive field.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridConvLayer {
    /// `[C_out, C_in, kh, kw]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub cfg: Option<NrpmConfig>,
}

/// Unrolled reweighting over `axis` of a products node, followed by the
/// λ-mix. Returns the mixed value (keeping the reduced axis as extent 1) and
/// the β node when the mixing parameter is learnable.
pub(crate) fn nrpm_mix_on_tape(
    tape: &mut Tape,
    products: NodeId,
    axis: usize,
    cfg: &NrpmConfig,
    train_mix: bool,
) -> Result<(NodeId, Option<NodeId>)> {
    let z_lpm = tape.sum_axis(products, axis, true)?;
    let mut z = z_lpm;
    for _ in 0..cfg.k {
        z = tape.irls_step_axis(products, z, axis, cfg.eps)?;
    }
    match cfg.lambda {
        LambdaParam::Fixed(l) => {
            let l = l.clamp(0.0, 1.0);
            let a = tape.mul_scalar(z_lpm, l);
            let b = tape.mul_scalar(z, 1.0 - l);
            Ok((tape.add(a, b)?, None))
        }
        LambdaParam::Learnable(beta) => {
            let beta_node = tape.leaf_scalar(beta, train_mix);
            let lambda = tape.sigmoid(beta_node);
            let neg = tape.neg(lambda);
            let one_minus = tape.add_scalar(neg, 1.0);
            let a = tape.mul(lambda, z_lpm)?;
            let b = tape.mul(one_minus, z)?;
            Ok((tape.add(a, b)?, Some(beta_node)))
        }
    }
}

fn takes_fast_path(cfg: &Option<NrpmConfig>) -> bool {
    match cfg {
        None => true,
        // λ fixed at 1 leaves only the linear branch, which the affine path
        // reproduces exactly; any other λ (or a learnable one) runs the unroll
        Some(c) => matches!(c.lambda, LambdaParam::Fixed(l) if l >= 1.0),
    }
}

impl HybridDenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, cfg: Option<NrpmConfig>) -> Result<Self> {
        if weight.shape.len() != 2 {
            return Err(Error::Dim(format!(
                "dense weight wants [D_in,D_out], got {:?}",
                weight.shape
            )));
        }
        if bias.shape != [weight.shape[1]] {
            return Err(Error::Dim(format!(
                "dense bias {:?} does not match weight {:?}",
                bias.shape, weight.shape
            )));
        }
        Ok(HybridDenseLayer { weight, bias, cfg })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    /// Forward on a tape. `weight_node`/`bias_node` are the registered
    /// parameter leaves; `train_mix` controls gradients into β.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        weight_node: NodeId,
        bias_node: NodeId,
        train_mix: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in() {
            return Err(Error::Dim(format!(
                "dense layer wants [B,{}], got {shape:?}",
                self.d_in()
            )));
        }
        let batch = shape[0];
        if takes_fast_path(&self.cfg) {
            let z = tape.matmul(x, weight_node)?;
            let out = tape.add(z, bias_node)?;
            return Ok((out, None));
        }
        let cfg = self.cfg.as_ref().expect("fast path handles None");
        let xs = tape.reshape(x, vec![batch, self.d_in(), 1])?;
        let products = tape.mul(xs, weight_node)?; // [B, D_in, D_out]
        let (mixed, beta) = nrpm_mix_on_tape(tape, products, 1, cfg, train_mix)?;
        let z = tape.reshape(mixed, vec![batch, self.d_out()])?;
        let out = tape.add(z, bias_node)?;
        Ok((out, beta))
    }

    /// Per-scalar reference: every (batch, unit) output evaluated through the
    /// scalar hybrid, bias added after mixing. The vectorized path must match
    /// this to 1e-10.
    pub fn forward_reference(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d_in, d_out) = (x.shape[0], self.d_in(), self.d_out());
        if x.shape.len() != 2 || x.shape[1] != d_in {
            return Err(Error::Dim(format!("reference wants [B,{d_in}], got {:?}", x.shape)));
        }
        let mut out = vec![0.0; b * d_out];
        for bi in 0..b {
            for o in 0..d_out {
                let products: Vec<f64> = (0..d_in)
                    .map(|di| x.data[bi * d_in + di] * self.weight.data[di * d_out + o])
                    .collect();
                let pv = ProductVector::new(products)?;
                let z = match &self.cfg {
                    Some(cfg) => hybrid_forward(&pv, cfg)?,
                    None => crate::pattern::lpm(&pv),
                };
                out[bi * d_out + o] = z + self.bias.data[o];
            }
        }
        Tensor::new(vec![b, d_out], out)
    }
}

impl HybridConvLayer {
    pub fn new(
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        cfg: Option<NrpmConfig>,
    ) -> Result<Self> {
        if kernel.shape.len() != 4 {
            return Err(Error::Dim(format!(
                "conv kernel wants [C_out,C_in,kh,kw], got {:?}",
                kernel.shape
            )));
        }
        if bias.shape != [kernel.shape[0]] {
            return Err(Error::Dim(format!(
                "conv bias {:?} does not match kernel {:?}",
                bias.shape, kernel.shape
            )));
        }
        if stride == 0 {
            return Err(Error::Validation("stride must be positive".into()));
        }
        Ok(HybridConvLayer { kernel, bias, stride, padding, cfg })
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape[1]
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.shape[1] * self.kernel.shape[2] * self.kernel.shape[3]
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_out_extent(h, self.kernel.shape[2], self.stride, self.padding)?,
            conv_out_extent(w, self.kernel.shape[3], self.stride, self.padding)?,
        ))
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: NodeId,
        kernel_node: NodeId,
        bias_node: NodeId,
        train_mix: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in() {
            return Err(Error::Dim(format!(
                "conv layer wants [B,{},H,W], got {shape:?}",
                self.c_in()
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let (kh, kw) = (self.kernel.shape[2], self.kernel.shape[3]);
        let (out_h, out_w) = self.out_spatial(h, w)?;
        let l = out_h * out_w;
        let n = self.patch_len();
        let cols = tape.unfold(x, (kh, kw), self.stride, self.padding)?; // [B,N,L]
        let krow = tape.reshape(kernel_node, vec![self.c_out(), n])?;
        let bias_col = tape.reshape(bias_node, vec![self.c_out(), 1])?;
        if takes_fast_path(&self.cfg) {
            let z = tape.batch_matmul(krow, cols)?; // [B,C_out,L]
            let z = tape.add(z, bias_col)?;
            let out = tape.reshape(z, vec![b, self.c_out(), out_h, out_w])?;
            return Ok((out, None));
        }
        let cfg = self.cfg.as_ref().expect("fast path handles None");
        let cols4 = tape.reshape(cols, vec![b, 1, n, l])?;
        let kern4 = tape.reshape(krow, vec![self.c_out(), n, 1])?;
        let products = tape.mul(cols4, kern4)?; // [B,C_out,N,L]
        let (mixed, beta) = nrpm_mix_on_tape(tape, products, 2, cfg, train_mix)?;
        let z = tape.reshape(mixed, vec![b, self.c_out(), l])?;
        let z = tape.add(z, bias_col)?;
        let out = tape.reshape(z, vec![b, self.c_out(), out_h, out_w])?;
        Ok((out, beta))
    }

    /// Per-scalar reference over unfolded columns; see
    /// [`HybridDenseLayer::forward_reference`].
    pub fn forward_reference(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
        let (kh, kw) = (self.kernel.shape[2], self.kernel.shape[3]);
        let (out_h, out_w) = self.out_spatial(h, w)?;
        let l = out_h * out_w;
        let n = self.patch_len();
        let (cols, _, _) = crate::tensor::unfold_data(
            &x.data, b, self.c_in(), h, w, kh, kw, self.stride, self.padding,
        )?;
        let mut out = vec![0.0; b * self.c_out() * l];
        for bi in 0..b {
            for co in 0..self.c_out() {
                for li in 0..l {
                    let products: Vec<f64> = (0..n)
                        .map(|ni| cols[(bi * n + ni) * l + li] * self.kernel.data[co * n + ni])
                        .collect();
                    let pv = ProductVector::new(products)?;
                    let z = match &self.cfg {
                        Some(cfg) => hybrid_forward(&pv, cfg)?,
                        None => crate::pattern::lpm(&pv),
                    };
                    out[(bi * self.c_out() + co) * l + li] = z + self.bias.data[co];
                }
            }
        }
        Tensor::new(vec![b, self.c_out(), out_h, out_w], out)
    }
}
