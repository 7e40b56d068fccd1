//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; [`Tape`] records primitive
//! operations on registered tensors and replays their adjoints in reverse to
//! accumulate gradients into every `requires_grad` leaf. Everything runs in
//! f64 on a single thread, so identical seeds and inputs give bit-identical
//! forward and backward results.

mod tape;

pub use tape::{NodeId, Tape};

use crate::{Error, Result};

/// Dense n-dimensional array of f64 values in row-major order, with an
/// optional gradient accumulator of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Accumulate (sum) a gradient contribution; never overwrites.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Row-major argmax per row of a `[rows, cols]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 2 {
            return Err(Error::Dim(format!("argmax_rows wants 2-d, got {:?}", self.shape)));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Broadcast two shapes with trailing-dimension alignment. Each trailing pair
/// of extents must be equal or one of them 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ea != eb && ea != 1 && eb != 1 {
            return Err(Error::Dim(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = ea.max(eb);
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes the shape broadcasts over.
pub(crate) fn strides_in(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Iterate the outer block structure of a broadcast: calls `body(oa, ob,
/// block_index)` once per run of the innermost output axis, with `oa`/`ob`
/// the operand offsets at the start of the run.
#[inline]
fn for_each_inner_run(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut body: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let blocks: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..blocks {
        body(oa, ob);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
}

/// Apply `f` elementwise over two broadcast-aligned operands.
pub(crate) fn map_binary(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a_shape == b_shape {
        let out = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((a_shape.to_vec(), out));
    }
    let out_shape = broadcast_shapes(a_shape, b_shape)?;
    let numel: usize = out_shape.iter().product();
    let sa = strides_in(a_shape, &out_shape);
    let sb = strides_in(b_shape, &out_shape);
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (sa_l, sb_l) = (sa[rank - 1], sb[rank - 1]);
    let mut out = vec![0.0; numel];
    let mut pos = 0usize;
    // the innermost stride is 1 (contiguous) or 0 (broadcast); each of the
    // four combinations gets a branch-free inner loop
    for_each_inner_run(&out_shape, &sa, &sb, |oa, ob| {
        let dst = &mut out[pos..pos + inner];
        match (sa_l, sb_l) {
            (1, 1) => {
                for (slot, (&av, &bv)) in dst.iter_mut().zip(a[oa..oa + inner].iter().zip(&b[ob..ob + inner])) {
                    *slot = f(av, bv);
                }
            }
            (1, 0) => {
                let bv = b[ob];
                for (slot, &av) in dst.iter_mut().zip(&a[oa..oa + inner]) {
                    *slot = f(av, bv);
                }
            }
            (0, 1) => {
                let av = a[oa];
                for (slot, &bv) in dst.iter_mut().zip(&b[ob..ob + inner]) {
                    *slot = f(av, bv);
                }
            }
            _ => {
                let v = f(a[oa], b[ob]);
                dst.fill(v);
            }
        }
        pos += inner;
    });
    Ok((out_shape, out))
}

/// Sum `grad` (laid out as `from_shape`) down to `to_shape`, the adjoint of
/// broadcasting. The result has exactly the leaf's shape.
pub(crate) fn reduce_to_shape(grad: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let strides = strides_in(to_shape, from_shape);
    let numel: usize = to_shape.iter().product();
    let rank = from_shape.len();
    let inner = from_shape[rank - 1];
    let s_l = strides[rank - 1];
    let mut out = vec![0.0; numel];
    let mut pos = 0usize;
    for_each_inner_run(from_shape, &strides, &strides, |off, _| {
        let src = &grad[pos..pos + inner];
        if s_l == 1 {
            for (slot, &g) in out[off..off + inner].iter_mut().zip(src) {
                *slot += g;
            }
        } else {
            out[off] += src.iter().sum::<f64>();
        }
        pos += inner;
    });
    out
}

/// Decompose `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dim(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Output spatial size of a convolution/unfold along one dimension.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Dim(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// im2col: `[B,C,H,W] -> [B, C·kh·kw, L]` where column ℓ holds the zero-padded
/// receptive field of output location ℓ and `L = out_h·out_w`.
pub fn unfold_data(
    input: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let out_h = conv_out_extent(h, kh, stride, padding)?;
    let out_w = conv_out_extent(w, kw, stride, padding)?;
    let l = out_h * out_w;
    let n = c * kh * kw;
    let mut out = vec![0.0; b * n * l];
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..out_h {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        for oj in 0..out_w {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            let v = if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w
                            {
                                input[((bi * c + ci) * h + ii as usize) * w + jj as usize]
                            } else {
                                0.0
                            };
                            out[(bi * n + row) * l + oi * out_w + oj] = v;
                        }
                    }
                }
            }
        }
    }
    Ok((out, out_h, out_w))
}

/// Scatter-add columns back to image layout; the adjoint of [`unfold_data`]
/// and its exact inverse for non-overlapping, unpadded patches.
#[allow(clippy::too_many_arguments)]
pub fn fold_data(
    cols: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<Vec<f64>> {
    let out_h = conv_out_extent(h, kh, stride, padding)?;
    let out_w = conv_out_extent(w, kw, stride, padding)?;
    let l = out_h * out_w;
    let n = c * kh * kw;
    let mut out = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    for oi in 0..out_h {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        for oj in 0..out_w {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                out[((bi * c + ci) * h + ii as usize) * w + jj as usize] +=
                                    cols[(bi * n + row) * l + oi * out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 2×2 max-pool with stride 2; returns pooled values and flat argmax indices.
pub(crate) fn maxpool2_data(
    input: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim(format!("2x2 max-pool wants even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = vec![0usize; b * c * oh * ow];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best_idx = base + (2 * oi) * w + 2 * oj;
                let mut best = input[best_idx];
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = base + (2 * oi + di) * w + 2 * oj + dj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[bc * oh * ow + oi * ow + oj] = best;
                arg[bc * oh * ow + oi * ow + oj] = best_idx;
            }
        }
    }
    Ok((out, arg))
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with sign(0) = 0, the subgradient convention used throughout.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3, 1], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shapes(&[2, 3, 1], &[3, 5]).unwrap(), vec![2, 3, 5]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn binary_map_broadcasts_and_reduces_back() {
        let (shape, out) =
            map_binary(&[2, 1], &[1.0, 2.0], &[3], &[10.0, 20.0, 30.0], |a, b| a + b).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(out, vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        // adjoint of the [3] operand sums over the first axis
        let g = reduce_to_shape(&[1.0; 6], &[2, 3], &[3]);
        assert_eq!(g, vec![2.0, 2.0, 2.0]);
        let g = reduce_to_shape(&[1.0; 6], &[2, 3], &[2, 1]);
        assert_eq!(g, vec![3.0, 3.0]);
    }

    #[test]
    fn unfold_single_patch() {
        // 1x1x2x2 input, 2x2 kernel, stride 1, pad 0 -> one column [1,2,3,4]
        let (cols, oh, ow) =
            unfold_data(&[1.0, 2.0, 3.0, 4.0], 1, 1, 2, 2, 2, 2, 1, 0).unwrap();
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(cols, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_1x1_kernel_is_identity_layout() {
        let input: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64).collect();
        let (cols, oh, ow) = unfold_data(&input, 2, 3, 2, 2, 1, 1, 1, 0).unwrap();
        assert_eq!((oh, ow), (2, 2));
        // N = C, L = H*W: columns equal the flattened pixels
        assert_eq!(cols, input);
    }

    #[test]
    fn fold_inverts_nonoverlapping_unfold() {
        let input: Vec<f64> = (0..1 * 2 * 4 * 4).map(|i| (i as f64).sin()).collect();
        let (cols, _, _) = unfold_data(&input, 1, 2, 4, 4, 2, 2, 2, 0).unwrap();
        let back = fold_data(&cols, 1, 2, 4, 4, 2, 2, 2, 0).unwrap();
        assert_eq!(back, input);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let err = unfold_data(&[0.0; 4], 1, 1, 2, 2, 5, 5, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn tensor_shape_mismatch_errors() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }
}
