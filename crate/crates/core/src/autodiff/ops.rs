//! Forward kernels for every tape primitive.

use rand::Rng;

use super::{Op, Tape, Var};
use crate::error::{bail, Result};
use crate::tensor::numel;

/// `c = a·b + beta·c` with arbitrary strides on the operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided m×k, k×n and m×n
    // regions; the output is contiguous row-major and does not alias inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one strided lane, written into `out`.
fn softmax_lane(x: &[f64], out: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..len {
        max = max.max(x[base + j * stride]);
    }
    let mut sum = 0.0;
    for j in 0..len {
        let e = (x[base + j * stride] - max).exp();
        out[base + j * stride] = e;
        sum += e;
    }
    for j in 0..len {
        out[base + j * stride] /= sum;
    }
}

pub(crate) fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for r in 0..logits.len() / cols {
        softmax_lane(logits, &mut out, r * cols, cols, 1);
    }
    out
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds the input into a `[C·k·k, Ho·Wo]` column matrix.
    pub(crate) fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let p = ho * wo;
        let mut cols = vec![0.0; self.patch_len() * p];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            dst[oy * wo + ox] =
                                x[(c * self.height + iy as usize) * self.width + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvSpec::im2col`]: scatters columns back onto the input.
    pub(crate) fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let p = ho * wo;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            dx[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    (out_shape, src_strides)
}

/// Gathers `x` (shape `shape`) into the permuted layout.
pub(crate) fn permute_data(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let (out_shape, src_strides) = permuted_strides(shape, perm);
    let total = x.len();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(x[src]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'a> Tape<'a> {
    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        self.push(op, vec![x.0], shape, value)
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s
    /// shape, in which case it is broadcast over the leading dimensions.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, broadcast) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape == nb.shape {
                let v = na.value.iter().zip(nb.value.iter()).map(|(x, y)| x + y).collect();
                (na.shape.clone(), v, false)
            } else if nb.shape.len() <= na.shape.len()
                && na.shape[na.shape.len() - nb.shape.len()..] == nb.shape[..]
            {
                let period = nb.value.len();
                let v = na
                    .value
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + nb.value[i % period])
                    .collect();
                (na.shape.clone(), v, true)
            } else {
                bail!(Shape, "add: cannot broadcast {:?} onto {:?}", nb.shape, na.shape);
            }
        };
        Ok(self.push(Op::Add { broadcast }, vec![a.0, b.0], shape, value))
    }

    fn same_shape_binary(
        &self,
        name: &str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                bail!(Shape, "{name}: shapes {:?} and {:?} differ", na.shape, nb.shape);
            }
            let v = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            (na.shape.clone(), v)
        };
        Ok(self.push(op, vec![a.0, b.0], shape, value))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(c), |v| c * v)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, sigmoid_scalar)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Op::Gelu, gelu_scalar)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| v.max(0.0))
    }

    /// Matrix product over the last two axes. `a` is `[.., m, k]`; `b` is
    /// either a shared `[k, n]` matrix or `[.., k, n]` with the same leading
    /// dimensions as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value, op) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (ra, rb) = (na.shape.len(), nb.shape.len());
            if ra < 2 || rb < 2 {
                bail!(Shape, "matmul needs rank ≥ 2 operands, got {:?} and {:?}", na.shape, nb.shape);
            }
            let (m, k) = (na.shape[ra - 2], na.shape[ra - 1]);
            let (k2, n) = (nb.shape[rb - 2], nb.shape[rb - 1]);
            let lead_a = &na.shape[..ra - 2];
            let shared_rhs = rb == 2;
            if k != k2 || (!shared_rhs && lead_a != &nb.shape[..rb - 2]) {
                bail!(Shape, "matmul: incompatible shapes {:?} and {:?}", na.shape, nb.shape);
            }
            let batch = numel(lead_a);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let a_blk = &na.value[bi * m * k..(bi + 1) * m * k];
                let b_blk = if shared_rhs { &nb.value[..] } else { &nb.value[bi * k * n..(bi + 1) * k * n] };
                gemm(
                    m,
                    k,
                    n,
                    a_blk,
                    (k as isize, 1),
                    b_blk,
                    (n as isize, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    0.0,
                );
            }
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            (shape, out, Op::MatMul { batch, m, k, n, shared_rhs })
        };
        Ok(self.push(op, vec![a.0, b.0], shape, value))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let mut seen = vec![false; n.shape.len()];
            if perm.len() != n.shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
                bail!(Shape, "permute: {perm:?} is not a permutation of the axes of {:?}", n.shape);
            }
            let (out_shape, _) = permuted_strides(&n.shape, perm);
            (out_shape, permute_data(&n.value, &n.shape, perm))
        };
        Ok(self.push(Op::Permute(perm.to_vec()), vec![x.0], shape, value))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            bail!(Shape, "transpose needs rank ≥ 2");
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if numel(shape) != n.value.len() || shape.contains(&0) {
                bail!(Shape, "cannot reshape {:?} into {shape:?}", n.shape);
            }
            n.value.to_vec()
        };
        Ok(self.push(Op::Reshape, vec![x.0], shape.to_vec(), value))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let (shape, value, sizes) = {
            let nodes = self.nodes.borrow();
            let Some(first) = xs.first() else {
                bail!(Shape, "concat of zero tensors");
            };
            let base = &nodes[first.0].shape;
            if axis >= base.len() {
                bail!(Shape, "concat axis {axis} out of range for {base:?}");
            }
            let mut sizes = Vec::with_capacity(xs.len());
            for v in xs {
                let s = &nodes[v.0].shape;
                if s.len() != base.len()
                    || s.iter().zip(base).enumerate().any(|(d, (a, b))| d != axis && a != b)
                {
                    bail!(Shape, "concat: {s:?} incompatible with {base:?} along axis {axis}");
                }
                sizes.push(s[axis]);
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total: usize = sizes.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &sz) in xs.iter().zip(&sizes) {
                    let val = &nodes[v.0].value;
                    out.extend_from_slice(&val[o * sz * inner..(o + 1) * sz * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (shape, out, sizes)
        };
        Ok(self.push(
            Op::Concat { axis, sizes },
            xs.iter().map(|v| v.0).collect(),
            shape,
            value,
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if axis >= n.shape.len() {
                bail!(Shape, "softmax axis {axis} invalid for shape {:?}", n.shape);
            }
            let len = n.shape[axis];
            let inner: usize = n.shape[axis + 1..].iter().product();
            let outer: usize = n.shape[..axis].iter().product();
            let mut out = vec![0.0; n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    softmax_lane(&n.value, &mut out, o * len * inner + i, len, inner);
                }
            }
            (n.shape.clone(), out)
        };
        Ok(self.push(Op::Softmax { axis }, vec![x.0], shape, value))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (shape, value, mean, rstd) = {
            let nodes = self.nodes.borrow();
            let (nx, ng, nb) = (&nodes[x.0], &nodes[gain.0], &nodes[bias.0]);
            let d = *nx.shape.last().unwrap_or(&1);
            if ng.shape != [d] || nb.shape != [d] {
                bail!(Shape, "layer_norm: gain {:?}/bias {:?} do not match last dim of {:?}", ng.shape, nb.shape, nx.shape);
            }
            let rows = nx.value.len() / d;
            let mut out = vec![0.0; nx.value.len()];
            let mut mean = Vec::with_capacity(rows);
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &nx.value[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = (row[j] - mu) * rs * ng.value[j] + nb.value[j];
                }
                mean.push(mu);
                rstd.push(rs);
            }
            (nx.shape.clone(), out, mean, rstd)
        };
        Ok(self.push(
            Op::LayerNorm { mean, rstd },
            vec![x.0, gain.0, bias.0],
            shape,
            value,
        ))
    }

    /// Row lookup: `table` is `[V, D]`, result is `[ids.len(), D]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[table.0];
            if n.shape.len() != 2 {
                bail!(Shape, "embedding table must be rank 2, got {:?}", n.shape);
            }
            if ids.is_empty() {
                bail!(Shape, "embedding lookup with no ids");
            }
            let (v, d) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    bail!(Range, "id {id} outside table of {v} rows");
                }
                out.extend_from_slice(&n.value[id * d..(id + 1) * d]);
            }
            (vec![ids.len(), d], out)
        };
        Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table.0], shape, value))
    }

    /// Summed cross-entropy of `[n, V]` logits against class targets, with
    /// the target distribution `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            bail!(Config, "label smoothing {smoothing} outside [0,1)");
        }
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.0];
            let v = *n.shape.last().unwrap_or(&1);
            let rows = n.value.len() / v;
            if rows != targets.len() {
                bail!(Shape, "cross_entropy: {} targets for logits {:?}", targets.len(), n.shape);
            }
            let probs = softmax_rows(&n.value, v);
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    bail!(Range, "target {t} outside vocabulary of {v}");
                }
                let row = &n.value[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                let nll = lse - row[t];
                let uniform = if smoothing > 0.0 {
                    lse - row.iter().sum::<f64>() / v as f64
                } else {
                    0.0
                };
                loss += (1.0 - smoothing) * nll + smoothing * uniform;
            }
            (loss, probs)
        };
        Ok(self.push(
            Op::CrossEntropy { targets: targets.to_vec(), smoothing, probs },
            vec![logits.0],
            vec![],
            vec![value],
        ))
    }

    /// Summed cross-entropy `-Σ q·log softmax(logits)` against soft targets.
    pub fn soft_cross_entropy(&self, logits: Var, target: &[f64]) -> Result<Var> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.0];
            if n.value.len() != target.len() {
                bail!(Shape, "soft_cross_entropy: {} target values for logits {:?}", target.len(), n.shape);
            }
            let v = *n.shape.last().unwrap_or(&1);
            let probs = softmax_rows(&n.value, v);
            let mut loss = 0.0;
            for r in 0..n.value.len() / v {
                let row = &n.value[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for j in 0..v {
                    let q = target[r * v + j];
                    if q != 0.0 {
                        loss -= q * (row[j] - lse);
                    }
                }
            }
            (loss, probs)
        };
        Ok(self.push(
            Op::SoftCrossEntropy { target: target.to_vec(), probs },
            vec![logits.0],
            vec![],
            vec![value],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                bail!(Shape, "mse: shapes {:?} and {:?} differ", na.shape, nb.shape);
            }
            na.value.iter().zip(nb.value.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                / na.value.len() as f64
        };
        Ok(self.push(Op::Mse, vec![a.0, b.0], vec![], vec![value]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_value(x, |v| v.iter().sum::<f64>());
        self.push(Op::Sum, vec![x.0], vec![], vec![s])
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.with_value(x, |v| v.iter().sum::<f64>() / v.len() as f64);
        self.push(Op::Mean, vec![x.0], vec![], vec![s])
    }

    /// Convolution of a `[C, H, W]` input with `[O, C, k, k]` weights and an
    /// `[O]` bias.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (spec, value) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.0], &nodes[weight.0], &nodes[bias.0]);
            if nx.shape.len() != 3 || nw.shape.len() != 4 || nw.shape[2] != nw.shape[3] {
                bail!(Shape, "conv2d: input {:?} / weight {:?} not [C,H,W] / [O,C,k,k]", nx.shape, nw.shape);
            }
            if nw.shape[1] != nx.shape[0] || nb.shape != [nw.shape[0]] {
                bail!(Shape, "conv2d: channels of input {:?}, weight {:?}, bias {:?} disagree", nx.shape, nw.shape, nb.shape);
            }
            if stride == 0 || nx.shape[1] + 2 * padding < nw.shape[2] || nx.shape[2] + 2 * padding < nw.shape[2] {
                bail!(Shape, "conv2d: kernel {} does not fit input {:?} with padding {padding}", nw.shape[2], nx.shape);
            }
            let spec = ConvSpec {
                in_channels: nx.shape[0],
                out_channels: nw.shape[0],
                height: nx.shape[1],
                width: nx.shape[2],
                kernel: nw.shape[2],
                stride,
                padding,
            };
            let cols = spec.im2col(&nx.value);
            let p = spec.out_height() * spec.out_width();
            let kk = spec.patch_len();
            let mut out = vec![0.0; spec.out_channels * p];
            for o in 0..spec.out_channels {
                out[o * p..(o + 1) * p].fill(nb.value[o]);
            }
            gemm(spec.out_channels, kk, p, &nw.value, (kk as isize, 1), &cols, (p as isize, 1), &mut out, 1.0);
            (spec, out)
        };
        let shape = vec![spec.out_channels, spec.out_height(), spec.out_width()];
        Ok(self.push(Op::Conv2d(spec), vec![x.0, weight.0, bias.0], shape, value))
    }

    /// Inverted dropout with an explicit seed. Identity when `rate == 0`.
    pub fn dropout_seeded(&self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {rate} outside [0,1)");
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mut rng = crate::rng::rng(seed);
        let keep = 1.0 / (1.0 - rate);
        let (shape, mask, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let mask: Vec<f64> = (0..n.value.len())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let value = n.value.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (n.shape.clone(), mask, value)
        };
        Ok(self.push(Op::Dropout { mask }, vec![x.0], shape, value))
    }

    /// Dropout that is active only on training tapes; the seed is derived
    /// from the tape seed and the ordinal of this call.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        match self.next_dropout_seed() {
            Some(seed) if rate > 0.0 => self.dropout_seeded(x, rate, seed),
            _ => Ok(x),
        }
    }
}
