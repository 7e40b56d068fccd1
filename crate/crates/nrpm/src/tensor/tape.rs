//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and the recipe
//! for its adjoint. `backward` walks the nodes in reverse recorded order and
//! accumulates (sums, never overwrites) into the gradient slot of every node
//! that leads to a `requires_grad` leaf. A tape lives for one forward/backward
//! pass; optimizer steps start from a fresh tape.

use super::{
    axis_blocks, fold_data, map_binary, maxpool2_data, reduce_to_shape,
    sigmoid, sign, unfold_data, Tensor,
};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    BatchMatmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    AbsEps { a: usize },
    RecipEps { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Reshape { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    SumAll { a: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Unfold { a: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: usize },
    MaxPool2 { a: usize, argmax: Vec<usize> },
    IrlsStepAxis { products: usize, z: usize, axis: usize, eps: f64 },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records primitive operations and replays adjoints in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { shape, data, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Register a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Register a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn leaf_scalar(&mut self, v: f64, requires_grad: bool) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf, requires_grad)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), grad: None, requires_grad: false }
    }

    /// Gradient accumulated at `id` by the last `backward`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── primitives ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_data(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// `a: [m,k]` against a batch `b: [B,k,n]`, sharing `a` across the batch.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 3 || sa[1] != sb[1] {
            return Err(Error::Dim(format!("batch_matmul shapes {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (bsz, n) = (sb[0], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for bi in 0..bsz {
            let bb = &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n];
            matmul_into(&self.nodes[a.0].data, bb, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(vec![bsz, m, n], out, Op::BatchMatmul { a: a.0, b: b.0 }, rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<NodeId> {
        let (shape, data) = map_binary(
            &self.nodes[a.0].shape,
            &self.nodes[a.0].data,
            &self.nodes[b.0].shape,
            &self.nodes[b.0].data,
            f,
        )?;
        let rg = self.requires(a.0) || self.requires(b.0);
        Ok(self.push(shape, data, op(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a.0);
        self.push(shape, data, op, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    /// |x| with subgradient sign(x), zero at x = 0.
    pub fn abs_eps(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::AbsEps { a: a.0 })
    }

    /// 1/(x + eps). With `eps = 0` every entry must be nonzero.
    pub fn reciprocal_eps(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if eps < 0.0 {
            return Err(Error::Validation(format!("reciprocal_eps wants eps >= 0, got {eps}")));
        }
        if eps == 0.0 && self.nodes[a.0].data.iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric(
                "reciprocal of zero with eps = 0".to_string(),
            ));
        }
        Ok(self.unary(a, |x| 1.0 / (x + eps), Op::RecipEps { a: a.0 }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::MulScalar { a: a.0, c })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.nodes[a.0].shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.requires(a.0);
        Ok(self.push(shape, data, Op::Reshape { a: a.0 }, rg))
    }

    fn reduce_axis(
        &mut self,
        a: NodeId,
        axis: usize,
        keepdim: bool,
        mean: bool,
    ) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, extent, inner) = axis_blocks(&shape, axis)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..extent {
                let base = (o * extent + d) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (i, slot) in dst.iter_mut().enumerate() {
                    *slot += src[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / extent as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let rg = self.requires(a.0);
        let op = if mean { Op::MeanAxis { a: a.0, axis } } else { Op::SumAxis { a: a.0, axis } };
        Ok(self.push(out_shape, out, op, rg))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        self.reduce_axis(a, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize, keepdim: bool) -> Result<NodeId> {
        self.reduce_axis(a, axis, keepdim, true)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a.0);
        self.push(vec![1], vec![total], Op::SumAll { a: a.0 }, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits: [B,C]`, computed with the log-sum-exp shift for stability.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dim(format!("cross-entropy wants [B,C] logits, got {shape:?}")));
        }
        let (bsz, classes) = (shape[0], shape[1]);
        if labels.len() != bsz {
            return Err(Error::Validation(format!(
                "{} labels for batch of {bsz}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; bsz * classes];
        let mut total = 0.0;
        for b in 0..bsz {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            total += lse - row[labels[b]];
            for (c, &v) in row.iter().enumerate() {
                probs[b * classes + c] = (v - lse).exp();
            }
        }
        let loss = total / bsz as f64;
        let rg = self.requires(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// im2col on a `[B,C,H,W]` node; see [`unfold_data`].
    pub fn unfold(
        &mut self,
        a: NodeId,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::Dim(format!("unfold wants [B,C,H,W], got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (kh, kw) = kernel;
        let (cols, out_h, out_w) =
            unfold_data(&self.nodes[a.0].data, b, c, h, w, kh, kw, stride, padding)?;
        let rg = self.requires(a.0);
        Ok(self.push(
            vec![b, c * kh * kw, out_h * out_w],
            cols,
            Op::Unfold { a: a.0, c, h, w, kh, kw, stride, padding },
            rg,
        ))
    }

    /// 2×2 stride-2 max-pool on a `[B,C,H,W]` node.
    pub fn maxpool2(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 4 {
            return Err(Error::Dim(format!("maxpool2 wants [B,C,H,W], got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (out, argmax) = maxpool2_data(&self.nodes[a.0].data, b, c, h, w)?;
        let rg = self.requires(a.0);
        Ok(self.push(
            vec![b, c, h / 2, w / 2],
            out,
            Op::MaxPool2 { a: a.0, argmax },
            rg,
        ))
    }

    /// One reweighting step over `axis` of a products tensor, fused into a
    /// single pass: with group residuals `r_d = p_d − z/D` and weights
    /// `w_d = 1/(|r_d| + eps)`, produces `D·(Σ w_d p_d)/(Σ w_d)` per group.
    /// `z` must carry extent 1 on `axis` (a keepdim reduction of `products`).
    /// Numerically identical to composing sub/abs/reciprocal/mul/sums/div,
    /// but touches the large tensor once forward and once backward; the
    /// adjoint differentiates through the weights.
    pub fn irls_step_axis(
        &mut self,
        products: NodeId,
        z: NodeId,
        axis: usize,
        eps: f64,
    ) -> Result<NodeId> {
        if eps < 0.0 {
            return Err(Error::Validation(format!("irls step wants eps >= 0, got {eps}")));
        }
        let p_shape = self.nodes[products.0].shape.clone();
        let (outer, extent, inner) = axis_blocks(&p_shape, axis)?;
        let mut z_shape = p_shape.clone();
        z_shape[axis] = 1;
        if self.nodes[z.0].shape != z_shape {
            return Err(Error::Dim(format!(
                "irls step wants z shaped {z_shape:?}, got {:?}",
                self.nodes[z.0].shape
            )));
        }
        let d_f = extent as f64;
        let p = &self.nodes[products.0].data;
        let zv = &self.nodes[z.0].data;
        let mut out = vec![0.0; outer * inner];
        let mut num = vec![0.0; inner];
        let mut den = vec![0.0; inner];
        let mut zero_residual = false;
        for o in 0..outer {
            num.fill(0.0);
            den.fill(0.0);
            let zrow = &zv[o * inner..(o + 1) * inner];
            for d in 0..extent {
                let row = &p[(o * extent + d) * inner..(o * extent + d + 1) * inner];
                for i in 0..inner {
                    let r = (row[i] - zrow[i] / d_f).abs();
                    zero_residual |= eps == 0.0 && r == 0.0;
                    let w = 1.0 / (r + eps);
                    num[i] += w * row[i];
                    den[i] += w;
                }
            }
            let orow = &mut out[o * inner..(o + 1) * inner];
            for i in 0..inner {
                orow[i] = d_f * num[i] / den[i];
            }
        }
        if zero_residual {
            return Err(Error::Numeric("zero residual with eps = 0".into()));
        }
        let rg = self.requires(products.0) || self.requires(z.0);
        Ok(self.push(
            z_shape,
            out,
            Op::IrlsStepAxis { products: products.0, z: z.0, axis, eps },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate adjoints of a scalar `loss` into every reachable node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Validation(format!(
                "backward wants a scalar root, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.step_back(i)?;
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, contrib: Vec<f64>) {
        debug_assert_eq!(contrib.len(), self.nodes[id].data.len());
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => self.nodes[id].grad = Some(contrib),
        }
    }

    /// Adjoint contributions of both operands of an elementwise binary op,
    /// accumulated directly into operand-shaped buffers in one pass.
    fn binary_adjoints(
        &self,
        out: usize,
        a: usize,
        b: usize,
        fa: impl Fn(f64, f64, f64) -> f64,
        fb: impl Fn(f64, f64, f64) -> f64,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let g = self.nodes[out].grad.as_ref().expect("output grad present");
        let out_shape = &self.nodes[out].shape;
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let mut acc_a =
            if na.requires_grad { Some(vec![0.0; na.data.len()]) } else { None };
        let mut acc_b =
            if nb.requires_grad { Some(vec![0.0; nb.data.len()]) } else { None };
        if na.shape == nb.shape {
            for (j, &gg) in g.iter().enumerate() {
                let (av, bv) = (na.data[j], nb.data[j]);
                if let Some(acc) = &mut acc_a {
                    acc[j] += gg * fa(gg, av, bv);
                }
                if let Some(acc) = &mut acc_b {
                    acc[j] += gg * fb(gg, av, bv);
                }
            }
            return (acc_a, acc_b);
        }
        let sa = super::strides_in(&na.shape, out_shape);
        let sb = super::strides_in(&nb.shape, out_shape);
        let rank = out_shape.len();
        let inner = out_shape[rank - 1];
        let (sa_l, sb_l) = (sa[rank - 1], sb[rank - 1]);
        let mut pos = 0usize;
        super::for_each_inner_run(out_shape, &sa, &sb, |oa, ob| {
            let grun = &g[pos..pos + inner];
            // innermost stride per operand is 1 (contiguous run) or 0
            // (single slot); accumulate runs rather than single elements
            if let Some(acc) = &mut acc_a {
                match (sa_l, sb_l) {
                    (1, 1) => {
                        for (j, &gg) in grun.iter().enumerate() {
                            acc[oa + j] += gg * fa(gg, na.data[oa + j], nb.data[ob + j]);
                        }
                    }
                    (1, 0) => {
                        let bv = nb.data[ob];
                        for (j, &gg) in grun.iter().enumerate() {
                            acc[oa + j] += gg * fa(gg, na.data[oa + j], bv);
                        }
                    }
                    (0, 1) => {
                        let av = na.data[oa];
                        let mut s = 0.0;
                        for (j, &gg) in grun.iter().enumerate() {
                            s += gg * fa(gg, av, nb.data[ob + j]);
                        }
                        acc[oa] += s;
                    }
                    _ => {
                        let (av, bv) = (na.data[oa], nb.data[ob]);
                        let mut s = 0.0;
                        for &gg in grun {
                            s += gg * fa(gg, av, bv);
                        }
                        acc[oa] += s;
                    }
                }
            }
            if let Some(acc) = &mut acc_b {
                match (sa_l, sb_l) {
                    (1, 1) => {
                        for (j, &gg) in grun.iter().enumerate() {
                            acc[ob + j] += gg * fb(gg, na.data[oa + j], nb.data[ob + j]);
                        }
                    }
                    (0, 1) => {
                        let av = na.data[oa];
                        for (j, &gg) in grun.iter().enumerate() {
                            acc[ob + j] += gg * fb(gg, av, nb.data[ob + j]);
                        }
                    }
                    (1, 0) => {
                        let bv = nb.data[ob];
                        let mut s = 0.0;
                        for (j, &gg) in grun.iter().enumerate() {
                            s += gg * fb(gg, na.data[oa + j], bv);
                        }
                        acc[ob] += s;
                    }
                    _ => {
                        let (av, bv) = (na.data[oa], nb.data[ob]);
                        let mut s = 0.0;
                        for &gg in grun {
                            s += gg * fb(gg, av, bv);
                        }
                        acc[ob] += s;
                    }
                }
            }
            pos += inner;
        });
        (acc_a, acc_b)
    }

    fn unary_adjoint(&self, out: usize, a: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let g = self.nodes[out].grad.as_ref().expect("output grad present");
        self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[out].data.iter())
            .zip(g)
            .map(|((&x, &y), &gg)| gg * f(x, y))
            .collect()
    }

    fn step_back(&mut self, i: usize) -> Result<()> {
        // borrow dance: compute contributions first, then accumulate
        let contrib = match &self.nodes[i].op {
            Op::Leaf => Contrib::None,
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                let mut pair = Vec::new();
                if self.requires(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    let bd = &self.nodes[b].data;
                    for ii in 0..m {
                        for jj in 0..n {
                            let gij = g[ii * n + jj];
                            for pp in 0..k {
                                da[ii * k + pp] += gij * bd[pp * n + jj];
                            }
                        }
                    }
                    pair.push((a, da));
                }
                if self.requires(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    let ad = &self.nodes[a].data;
                    for ii in 0..m {
                        for pp in 0..k {
                            let aip = ad[ii * k + pp];
                            for jj in 0..n {
                                db[pp * n + jj] += aip * g[ii * n + jj];
                            }
                        }
                    }
                    pair.push((b, db));
                }
                match pair.len() {
                    0 => Contrib::None,
                    1 => {
                        let (id, v) = pair.pop().unwrap();
                        Contrib::One(id, v)
                    }
                    _ => {
                        let (id2, v2) = pair.pop().unwrap();
                        let (id1, v1) = pair.pop().unwrap();
                        Contrib::Two(id1, v1, id2, v2)
                    }
                }
            }
            Op::BatchMatmul { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let (bsz, n) = (self.nodes[b].shape[0], self.nodes[b].shape[2]);
                let mut pair = Vec::new();
                if self.requires(a) {
                    let mut da = vec![0.0; m * k];
                    let bd = &self.nodes[b].data;
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        for ii in 0..m {
                            for jj in 0..n {
                                let gij = gb[ii * n + jj];
                                for pp in 0..k {
                                    da[ii * k + pp] += gij * bb[pp * n + jj];
                                }
                            }
                        }
                    }
                    pair.push((a, da));
                }
                if self.requires(b) {
                    let mut db = vec![0.0; bsz * k * n];
                    let ad = &self.nodes[a].data;
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        for ii in 0..m {
                            for pp in 0..k {
                                let aip = ad[ii * k + pp];
                                for jj in 0..n {
                                    dbb[pp * n + jj] += aip * gb[ii * n + jj];
                                }
                            }
                        }
                    }
                    pair.push((b, db));
                }
                match pair.len() {
                    0 => Contrib::None,
                    1 => {
                        let (id, v) = pair.pop().unwrap();
                        Contrib::One(id, v)
                    }
                    _ => {
                        let (id2, v2) = pair.pop().unwrap();
                        let (id1, v1) = pair.pop().unwrap();
                        Contrib::Two(id1, v1, id2, v2)
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let out_shape = &self.nodes[i].shape;
                let ga = self
                    .requires(a)
                    .then(|| reduce_to_shape(g, out_shape, &self.nodes[a].shape));
                let gb = self
                    .requires(b)
                    .then(|| reduce_to_shape(g, out_shape, &self.nodes[b].shape));
                two(a, ga, b, gb)
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let out_shape = &self.nodes[i].shape;
                let ga = self
                    .requires(a)
                    .then(|| reduce_to_shape(g, out_shape, &self.nodes[a].shape));
                let gb = self.requires(b).then(|| {
                    let mut v = reduce_to_shape(g, out_shape, &self.nodes[b].shape);
                    for x in &mut v {
                        *x = -*x;
                    }
                    v
                });
                two(a, ga, b, gb)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let (ga, gb) = self.binary_adjoints(i, a, b, |_, _, y| y, |_, x, _| x);
                two(a, ga, b, gb)
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let (ga, gb) =
                    self.binary_adjoints(i, a, b, |_, _, y| 1.0 / y, |_, x, y| -x / (y * y));
                two(a, ga, b, gb)
            }
            Op::Neg { a } => Contrib::One(*a, self.unary_adjoint(i, *a, |_, _| -1.0)),
            Op::AbsEps { a } => Contrib::One(*a, self.unary_adjoint(i, *a, |x, _| sign(x))),
            Op::RecipEps { a } => {
                Contrib::One(*a, self.unary_adjoint(i, *a, |_, y| -(y * y)))
            }
            Op::Sigmoid { a } => {
                Contrib::One(*a, self.unary_adjoint(i, *a, |_, y| y * (1.0 - y)))
            }
            Op::Relu { a } => {
                Contrib::One(*a, self.unary_adjoint(i, *a, |x, _| if x > 0.0 { 1.0 } else { 0.0 }))
            }
            Op::AddScalar { a } => Contrib::One(*a, self.unary_adjoint(i, *a, |_, _| 1.0)),
            Op::MulScalar { a, c } => {
                let c = *c;
                Contrib::One(*a, self.unary_adjoint(i, *a, move |_, _| c))
            }
            Op::Reshape { a } => {
                Contrib::One(*a, self.nodes[i].grad.as_ref().unwrap().clone())
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let mean = matches!(self.nodes[i].op, Op::MeanAxis { .. });
                let g = self.nodes[i].grad.as_ref().unwrap();
                let shape = &self.nodes[a].shape;
                let (outer, extent, inner) = axis_blocks(shape, axis)?;
                let scale = if mean { 1.0 / extent as f64 } else { 1.0 };
                let mut da = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for d in 0..extent {
                        let base = (o * extent + d) * inner;
                        for (ii, &gv) in grow.iter().enumerate() {
                            da[base + ii] = gv * scale;
                        }
                    }
                }
                Contrib::One(a, da)
            }
            Op::SumAll { a } => {
                let g = self.nodes[i].grad.as_ref().unwrap()[0];
                Contrib::One(*a, vec![g; self.nodes[*a].data.len()])
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let g = self.nodes[i].grad.as_ref().unwrap()[0];
                let bsz = labels.len();
                let classes = probs.len() / bsz;
                let mut dl = probs.clone();
                for (b, &lab) in labels.iter().enumerate() {
                    dl[b * classes + lab] -= 1.0;
                }
                let scale = g / bsz as f64;
                for v in &mut dl {
                    *v *= scale;
                }
                Contrib::One(logits, dl)
            }
            Op::Unfold { a, c, h, w, kh, kw, stride, padding } => {
                let (a, c, h, w, kh, kw, stride, padding) =
                    (*a, *c, *h, *w, *kh, *kw, *stride, *padding);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let b = self.nodes[a].shape[0];
                let da = fold_data(g, b, c, h, w, kh, kw, stride, padding)?;
                Contrib::One(a, da)
            }
            Op::MaxPool2 { a, argmax, .. } => {
                let a = *a;
                let g = self.nodes[i].grad.as_ref().unwrap();
                let mut da = vec![0.0; self.nodes[a].data.len()];
                for (slot, &src) in argmax.iter().enumerate() {
                    da[src] += g[slot];
                }
                Contrib::One(a, da)
            }
            Op::IrlsStepAxis { products, z, axis, eps } => {
                let (products, z, axis, eps) = (*products, *z, *axis, *eps);
                let g = self.nodes[i].grad.as_ref().unwrap();
                let p_shape = &self.nodes[products].shape;
                let (outer, extent, inner) = axis_blocks(p_shape, axis)?;
                let d_f = extent as f64;
                let p = &self.nodes[products].data;
                let zv = &self.nodes[z].data;
                let want_p = self.requires(products);
                let want_z = self.requires(z);
                let mut dp = if want_p { vec![0.0; p.len()] } else { Vec::new() };
                let mut dz = if want_z { vec![0.0; zv.len()] } else { Vec::new() };
                let mut num = vec![0.0; inner];
                let mut den = vec![0.0; inner];
                for o in 0..outer {
                    num.fill(0.0);
                    den.fill(0.0);
                    let zrow = &zv[o * inner..(o + 1) * inner];
                    for d in 0..extent {
                        let row = &p[(o * extent + d) * inner..(o * extent + d + 1) * inner];
                        for idx in 0..inner {
                            let w = 1.0 / ((row[idx] - zrow[idx] / d_f).abs() + eps);
                            num[idx] += w * row[idx];
                            den[idx] += w;
                        }
                    }
                    let grow = &g[o * inner..(o + 1) * inner];
                    for d in 0..extent {
                        let base = (o * extent + d) * inner;
                        let row = &p[base..base + inner];
                        for idx in 0..inner {
                            let r = row[idx] - zrow[idx] / d_f;
                            let w = 1.0 / (r.abs() + eps);
                            let s = sign(r);
                            let m = num[idx] / den[idx];
                            let through = s * w * w * (row[idx] - m);
                            if want_p {
                                dp[base + idx] +=
                                    grow[idx] * d_f * (w - through) / den[idx];
                            }
                            if want_z {
                                dz[o * inner + idx] += grow[idx] * through / den[idx];
                            }
                        }
                    }
                }
                two(products, want_p.then_some(dp), z, want_z.then_some(dz))
            }
        };
        match contrib {
            Contrib::None => {}
            Contrib::One(id, v) => self.accum(id, v),
            Contrib::Two(id1, v1, id2, v2) => {
                self.accum(id1, v1);
                self.accum(id2, v2);
            }
        }
        Ok(())
    }
}

enum Contrib {
    None,
    One(usize, Vec<f64>),
    Two(usize, Vec<f64>, usize, Vec<f64>),
}

fn two(a: usize, ga: Option<Vec<f64>>, b: usize, gb: Option<Vec<f64>>) -> Contrib {
    match (ga, gb) {
        (Some(x), Some(y)) => Contrib::Two(a, x, b, y),
        (Some(x), None) => Contrib::One(a, x),
        (None, Some(y)) => Contrib::One(b, y),
        (None, None) => Contrib::None,
    }
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_diff_gradient, max_rel_err, rel_err};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap().requires_grad(true)
    }

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        t(shape, &data)
    }

    /// FD-check `build` (a scalar function of one input tensor) at `x`.
    fn fd_check(x: &Tensor, tol: f64, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x);
        let loss = build(&mut tape, leaf);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(leaf).expect("leaf gradient").to_vec();
        let numeric = central_diff_gradient(
            |vals| {
                let mut tp = Tape::new();
                let probe = Tensor::from_slice(&x.shape, vals).unwrap();
                let id = tp.leaf(&probe);
                let out = build(&mut tp, id);
                tp.data(out)[0]
            },
            &x.data,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(i2, v).unwrap();
        assert_eq!(tape.data(out), &[3.0, 4.0]);
        let row = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let out = tape.matmul(row, v).unwrap();
        assert_eq!(tape.data(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_scalar(1.0, false);
        let a = tape.reshape(a, vec![1, 1]).unwrap();
        let b = tape.constant(&t(&[2, 2], &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 1]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        // grad wrt a of sum(a·b)
        let mut tape = Tape::new();
        let ia = tape.leaf(&a);
        let ib = tape.constant(&b);
        let mm = tape.matmul(ia, ib).unwrap();
        let loss = tape.sum_all(mm);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(ia).unwrap().to_vec();
        let numeric = central_diff_gradient(
            |vals| {
                let mut tp = Tape::new();
                let pa = tp.leaf(&Tensor::from_slice(&[3, 3], vals).unwrap());
                let pb = tp.constant(&b);
                let mm = tp.matmul(pa, pb).unwrap();
                let s = tp.sum_all(mm);
                tp.data(s)[0]
            },
            &a.data,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[-2.0]));
        let y = tape.abs_eps(x);
        assert_eq!(tape.data(y), &[2.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf_scalar(0.0, false);
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(s), &[0.5]);

        let mut tape = Tape::new();
        let x = tape.leaf_scalar(0.0, false);
        let r = tape.reciprocal_eps(x, 1e-3).unwrap();
        assert_eq!(tape.data(r), &[1000.0]);
    }

    #[test]
    fn reciprocal_zero_without_eps_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 0.0, 2.0]));
        assert!(matches!(tape.reciprocal_eps(x, 0.0), Err(Error::Numeric(_))));
        // nonzero data passes
        let y = tape.leaf(&t(&[2], &[1.0, -2.0]));
        assert!(tape.reciprocal_eps(y, 0.0).is_ok());
    }

    #[test]
    fn reductions_and_their_adjoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 100.0]));
        let s = tape.sum_all(x);
        assert_eq!(tape.data(s), &[103.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[2.0, 4.0]));
        let m = tape.mean_axis(x, 0, false).unwrap();
        assert_eq!(tape.data(m), &[3.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum_axis(x, 1, true).unwrap();
        assert_eq!(tape.shape(s), &[2, 1]);
        assert_eq!(tape.data(s), &[6.0, 15.0]);
        assert!(matches!(tape.sum_axis(x, 2, false), Err(Error::Dim(_))));
    }

    #[test]
    fn cross_entropy_examples_and_stability() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[1000.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = tape.data(loss)[0];
        assert!(v.is_finite() && v.abs() < 1e-9, "overflow leak: {v}");

        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let logits = rand_tensor(&mut rng, &[4, 3]);
        let labels = vec![0usize, 2, 1, 1];
        let mut tape = Tape::new();
        let l = tape.leaf(&logits);
        let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(l).unwrap().to_vec();
        let numeric = central_diff_gradient(
            |vals| {
                let mut tp = Tape::new();
                let id = tp.leaf(&Tensor::from_slice(&[4, 3], vals).unwrap());
                let out = tp.softmax_cross_entropy(id, &labels).unwrap();
                tp.data(out)[0]
            },
            &logits.data,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &numeric) <= 1e-5);
    }

    #[test]
    fn every_primitive_passes_fd_at_random_points() {
        let mut rng = StdRng::seed_from_u64(12);
        for trial in 0..20 {
            let x = rand_tensor(&mut rng, &[2, 3]);
            // keep clear of kinks for abs/relu and of poles for div
            if x.data.iter().any(|v| v.abs() < 1e-2) {
                continue;
            }
            let other = {
                let mut o = rand_tensor(&mut rng, &[2, 3]);
                for v in &mut o.data {
                    if v.abs() < 0.2 {
                        *v += 0.5_f64.copysign(*v + 0.1);
                    }
                }
                o.requires_grad = false;
                o
            };
            let row = {
                let mut r = rand_tensor(&mut rng, &[3]);
                for v in &mut r.data {
                    if v.abs() < 0.2 {
                        *v += 0.7;
                    }
                }
                r.requires_grad = false;
                r
            };
            fd_check(&x, 1e-4, |tp, id| {
                let o = tp.constant(&other);
                let s = tp.add(id, o).unwrap();
                tp.sum_all(s)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let o = tp.constant(&other);
                let s = tp.sub(id, o).unwrap();
                tp.sum_all(s)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let o = tp.constant(&other);
                let s = tp.mul(id, o).unwrap();
                tp.sum_all(s)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let o = tp.constant(&other);
                let s = tp.div(id, o).unwrap();
                tp.sum_all(s)
            });
            // broadcast along the leading axis
            fd_check(&x, 1e-4, |tp, id| {
                let o = tp.constant(&row);
                let s = tp.mul(id, o).unwrap();
                tp.sum_all(s)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let n = tp.neg(id);
                tp.sum_all(n)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let a = tp.abs_eps(id);
                tp.sum_all(a)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let a = tp.abs_eps(id);
                let r = tp.reciprocal_eps(a, 1e-3).unwrap();
                tp.sum_all(r)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let s = tp.sigmoid(id);
                tp.sum_all(s)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let r = tp.relu(id);
                tp.sum_all(r)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let m = tp.mean_axis(id, 1, true).unwrap();
                let w = tp.mul_scalar(m, 1.5);
                let w = tp.add_scalar(w, 0.25);
                tp.sum_all(w)
            });
            fd_check(&x, 1e-4, |tp, id| {
                let r = tp.reshape(id, vec![3, 2]).unwrap();
                let s = tp.sum_axis(r, 0, false).unwrap();
                let sq = tp.mul(s, s).unwrap();
                tp.sum_all(sq)
            });
            let _ = trial;
        }
    }

    #[test]
    fn unfold_maxpool_batchmatmul_gradients() {
        let mut rng = StdRng::seed_from_u64(21);
        let img = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        fd_check(&img, 1e-4, |tp, id| {
            let u = tp.unfold(id, (2, 2), 1, 1).unwrap();
            let sq = tp.mul(u, u).unwrap();
            tp.sum_all(sq)
        });
        // keep clear of pooling ties: all entries distinct with margin
        let mut pool = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        for (i, v) in pool.data.iter_mut().enumerate() {
            *v += i as f64 * 0.05;
        }
        fd_check(&pool, 1e-4, |tp, id| {
            let p = tp.maxpool2(id).unwrap();
            let sq = tp.mul(p, p).unwrap();
            tp.sum_all(sq)
        });
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[4, 3, 2]);
        fd_check(&a, 1e-4, |tp, id| {
            let bb = tp.constant(&b);
            let mm = tp.batch_matmul(id, bb).unwrap();
            tp.sum_all(mm)
        });
        fd_check(&b, 1e-4, |tp, id| {
            let aa = tp.constant(&a);
            let mm = tp.batch_matmul(aa, id).unwrap();
            let sq = tp.mul(mm, mm).unwrap();
            tp.sum_all(sq)
        });
    }

    #[test]
    fn unfold_adjoint_counts_pixel_appearances() {
        // overlapping 2x2 patches at stride 1: interior pixels appear 4 times
        let x = t(&[1, 1, 3, 3], &[0.0; 9]);
        let mut tape = Tape::new();
        let id = tape.leaf(&x);
        let u = tape.unfold(id, (2, 2), 1, 0).unwrap();
        let s = tape.sum_all(u);
        tape.backward(s).unwrap();
        let g = tape.grad(id).unwrap();
        assert_eq!(g, &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_shared_uses() {
        // y = x·x + x  → dy/dx = 2x + 1, exercised through two uses of x
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn broadcast_gradient_shape_equals_leaf_shape() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t(&[4, 3], &(0..12).map(|i| 0.1 * i as f64 + 0.2).collect::<Vec<_>>()));
        let prod = tape.mul(a, b).unwrap();
        assert_eq!(tape.shape(prod), &[2, 4, 3]);
        let s = tape.sum_all(prod);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().len(), 6);
        assert_eq!(tape.grad(b).unwrap().len(), 12);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Validation(_))));
    }

    #[test]
    fn forward_backward_bit_determinism() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(99);
            let x = rand_tensor(&mut rng, &[4, 5]);
            let w = rand_tensor(&mut rng, &[5, 3]);
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let wi = tape.leaf(&w);
            let mm = tape.matmul(xi, wi).unwrap();
            let act = tape.sigmoid(mm);
            let loss = tape.softmax_cross_entropy(act, &[0, 1, 2, 0]).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.data(loss).to_vec(),
                tape.grad(xi).unwrap().to_vec(),
                tape.grad(wi).unwrap().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rel_err_floor_behaves() {
        assert!(rel_err(0.0, 0.0) == 0.0);
        assert!(rel_err(2.0, 2.0 + 1e-7) < 1e-6);
    }
}

#[cfg(test)]
mod irls_step_tests {
    use super::*;
    use crate::check::{central_diff_gradient, max_rel_err};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// the same step spelled out in primitives, for equivalence checks
    fn unfused_step(tape: &mut Tape, products: NodeId, z: NodeId, axis: usize, eps: f64) -> NodeId {
        let d_f = tape.shape(products)[axis] as f64;
        let anchor = tape.mul_scalar(z, 1.0 / d_f);
        let r = tape.sub(products, anchor).unwrap();
        let r_abs = tape.abs_eps(r);
        let w = tape.reciprocal_eps(r_abs, eps).unwrap();
        let wp = tape.mul(w, products).unwrap();
        let num = tape.sum_axis(wp, axis, true).unwrap();
        let den = tape.sum_axis(w, axis, true).unwrap();
        let ratio = tape.div(num, den).unwrap();
        tape.mul_scalar(ratio, d_f)
    }

    #[test]
    fn fused_step_matches_unfused_composition() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let (b, d, o) = (3, 7, 4);
            let p = Tensor::new(
                vec![b, d, o],
                (0..b * d * o).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap()
            .requires_grad(true);
            let eps = 1e-3;

            let run = |fused: bool| -> (Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let pi = tape.leaf(&p);
                let z0 = tape.sum_axis(pi, 1, true).unwrap();
                let z1 = if fused {
                    tape.irls_step_axis(pi, z0, 1, eps).unwrap()
                } else {
                    unfused_step(&mut tape, pi, z0, 1, eps)
                };
                let z2 = if fused {
                    tape.irls_step_axis(pi, z1, 1, eps).unwrap()
                } else {
                    unfused_step(&mut tape, pi, z1, 1, eps)
                };
                let sq = tape.mul(z2, z2).unwrap();
                let loss = tape.sum_all(sq);
                tape.backward(loss).unwrap();
                (tape.data(z2).to_vec(), tape.grad(pi).unwrap().to_vec())
            };
            let (vf, gf) = run(true);
            let (vu, gu) = run(false);
            for (a, b) in vf.iter().zip(&vu) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "forward {a} vs {b}");
            }
            assert!(max_rel_err(&gf, &gu) <= 1e-9, "gradient divergence");
        }
    }

    #[test]
    fn fused_step_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..10 {
            let (b, d, o) = (2, 5, 3);
            let data: Vec<f64> = (0..b * d * o).map(|_| rng.gen_range(0.5..2.5)).collect();
            let p = Tensor::new(vec![b, d, o], data).unwrap().requires_grad(true);
            let mut tape = Tape::new();
            let pi = tape.leaf(&p);
            let z0 = tape.sum_axis(pi, 1, true).unwrap();
            let z1 = tape.irls_step_axis(pi, z0, 1, 1e-3).unwrap();
            let sq = tape.mul(z1, z1).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(pi).unwrap().to_vec();
            let numeric = central_diff_gradient(
                |vals| {
                    let mut tp = Tape::new();
                    let probe = Tensor::from_slice(&p.shape, vals).unwrap();
                    let id = tp.leaf(&probe);
                    let z0 = tp.sum_axis(id, 1, true).unwrap();
                    let z1 = tp.irls_step_axis(id, z0, 1, 1e-3).unwrap();
                    let sq = tp.mul(z1, z1).unwrap();
                    let s = tp.sum_all(sq);
                    tp.data(s)[0]
                },
                &p.data,
                1e-6,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-4, "fused adjoint rel err {err}");
        }
    }

    #[test]
    fn fused_step_matches_scalar_reference() {
        use crate::pattern::{irls_step, ProductVector};
        let mut rng = StdRng::seed_from_u64(35);
        let p: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = Tensor::new(vec![1, 9, 1], p.clone()).unwrap();
        let mut tape = Tape::new();
        let pi = tape.constant(&t);
        let z0 = tape.sum_axis(pi, 1, true).unwrap();
        let z1 = tape.irls_step_axis(pi, z0, 1, 1e-3).unwrap();
        let pv = ProductVector::new(p.clone()).unwrap();
        let want = irls_step(&pv, p.iter().sum(), 1e-3).unwrap();
        assert_eq!(tape.data(z1)[0].to_bits(), want.to_bits());
    }

    #[test]
    fn fused_step_zero_residual_without_eps_errors() {
        let t = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        let zt = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(); // anchor 1.0 hits p_0
        let mut tape = Tape::new();
        let pi = tape.constant(&t);
        let zi = tape.constant(&zt);
        assert!(matches!(
            tape.irls_step_axis(pi, zi, 1, 0.0),
            Err(Error::Numeric(_))
        ));
    }
}
