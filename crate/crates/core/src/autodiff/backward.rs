//! Vector-Jacobian products for each primitive.

use super::ops::{gelu_grad, gemm, invert_perm, permute_data};
use super::{Node, Op};

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

pub(super) fn sweep(nodes: &[Node<'_>], root: usize) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[root] = Some(vec![1.0]);
    for i in (0..=root).rev() {
        let node = &nodes[i];
        if !node.requires_grad || node.inputs.is_empty() {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        for (slot, contribution) in input_grads(nodes, node, &g) {
            if nodes[slot].requires_grad {
                accumulate(&mut grads[slot], contribution);
            }
        }
        grads[i] = Some(g);
    }
    grads
}

fn wants(nodes: &[Node<'_>], i: usize) -> bool {
    nodes[i].requires_grad
}

fn input_grads(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let ins = &node.inputs;
    let mut out = Vec::with_capacity(ins.len());
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::Add { broadcast } => {
            out.push((ins[0], g.to_vec()));
            if wants(nodes, ins[1]) {
                if *broadcast {
                    let period = nodes[ins[1]].value.len();
                    let mut gb = vec![0.0; period];
                    for (k, v) in g.iter().enumerate() {
                        gb[k % period] += v;
                    }
                    out.push((ins[1], gb));
                } else {
                    out.push((ins[1], g.to_vec()));
                }
            }
        }
        Op::Sub => {
            out.push((ins[0], g.to_vec()));
            out.push((ins[1], g.iter().map(|v| -v).collect()));
        }
        Op::Mul => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            if wants(nodes, ins[0]) {
                out.push((ins[0], g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()));
            }
            if wants(nodes, ins[1]) {
                out.push((ins[1], g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()));
            }
        }
        Op::Scale(c) => out.push((ins[0], g.iter().map(|v| c * v).collect())),
        Op::Sigmoid => {
            let y = &node.value;
            out.push((ins[0], g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect()));
        }
        Op::Gelu => {
            let x = &nodes[ins[0]].value;
            out.push((ins[0], g.iter().zip(x.iter()).map(|(g, &x)| g * gelu_grad(x)).collect()));
        }
        Op::Relu => {
            let x = &nodes[ins[0]].value;
            out.push((
                ins[0],
                g.iter().zip(x.iter()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ));
        }
        &Op::MatMul { batch, m, k, n, shared_rhs } => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            if wants(nodes, ins[0]) {
                // dA = dY · Bᵀ
                let mut da = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    let b_blk = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        b_blk,
                        (1, n as isize),
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        0.0,
                    );
                }
                out.push((ins[0], da));
            }
            if wants(nodes, ins[1]) {
                // dB = Aᵀ · dY, summed over the batch when B is shared
                let blocks = if shared_rhs { 1 } else { batch };
                let mut db = vec![0.0; blocks * k * n];
                for bi in 0..batch {
                    let dst = if shared_rhs { 0 } else { bi };
                    gemm(
                        k,
                        m,
                        n,
                        &a[bi * m * k..(bi + 1) * m * k],
                        (1, k as isize),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n as isize, 1),
                        &mut db[dst * k * n..(dst + 1) * k * n],
                        if shared_rhs && bi > 0 { 1.0 } else { 0.0 },
                    );
                }
                out.push((ins[1], db));
            }
        }
        Op::Permute(perm) => {
            let inv = invert_perm(perm);
            out.push((ins[0], permute_data(g, &node.shape, &inv)));
        }
        Op::Reshape => out.push((ins[0], g.to_vec())),
        Op::Concat { axis, sizes } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&inp, &sz) in ins.iter().zip(sizes) {
                if wants(nodes, inp) {
                    let mut gi = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    out.push((inp, gi));
                }
                offset += sz;
            }
        }
        Op::Softmax { axis } => {
            let y = &node.value;
            let len = node.shape[*axis];
            let inner: usize = node.shape[axis + 1..].iter().product();
            let outer: usize = node.shape[..*axis].iter().product();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        dx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            out.push((ins[0], dx));
        }
        Op::LayerNorm { mean, rstd, .. } => {
            let x = &nodes[ins[0]].value;
            let gain = &nodes[ins[1]].value;
            let d = gain.len();
            let rows = x.len() / d;
            let mut dx = vec![0.0; x.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let (mu, rs) = (mean[r], rstd[r]);
                for j in 0..d {
                    xhat[j] = (x[r * d + j] - mu) * rs;
                    let gy = g[r * d + j];
                    dgain[j] += gy * xhat[j];
                    dbias[j] += gy;
                    dxhat[j] = gy * gain[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            out.push((ins[0], dx));
            out.push((ins[1], dgain));
            out.push((ins[2], dbias));
        }
        Op::Embedding { ids } => {
            let table = &nodes[ins[0]];
            let d = table.shape[1];
            let mut dt = vec![0.0; table.value.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[r * d + j];
                }
            }
            out.push((ins[0], dt));
        }
        Op::CrossEntropy { targets, smoothing, probs } => {
            let v = probs.len() / targets.len();
            let mut dx = probs.clone();
            let floor = smoothing / v as f64;
            for (r, &t) in targets.iter().enumerate() {
                let row = &mut dx[r * v..(r + 1) * v];
                if *smoothing > 0.0 {
                    for p in row.iter_mut() {
                        *p -= floor;
                    }
                }
                row[t] -= 1.0 - smoothing;
                for p in row.iter_mut() {
                    *p *= g[0];
                }
            }
            out.push((ins[0], dx));
        }
        Op::SoftCrossEntropy { target, probs } => {
            let v = *nodes[ins[0]].shape.last().unwrap_or(&1);
            let mut dx = vec![0.0; probs.len()];
            for r in 0..probs.len() / v {
                let mass: f64 = target[r * v..(r + 1) * v].iter().sum();
                for j in 0..v {
                    let p = r * v + j;
                    dx[p] = g[0] * (mass * probs[p] - target[p]);
                }
            }
            out.push((ins[0], dx));
        }
        Op::Mse => {
            let (a, b) = (&nodes[ins[0]].value, &nodes[ins[1]].value);
            let c = 2.0 * g[0] / a.len() as f64;
            let da: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| c * (x - y)).collect();
            if wants(nodes, ins[1]) {
                out.push((ins[1], da.iter().map(|v| -v).collect()));
            }
            out.push((ins[0], da));
        }
        Op::Sum => out.push((ins[0], vec![g[0]; nodes[ins[0]].value.len()])),
        Op::Mean => {
            let n = nodes[ins[0]].value.len();
            out.push((ins[0], vec![g[0] / n as f64; n]));
        }
        Op::Conv2d(spec) => {
            let x = &nodes[ins[0]].value;
            let w = &nodes[ins[1]].value;
            let p = spec.out_height() * spec.out_width();
            let kk = spec.in_channels * spec.kernel * spec.kernel;
            let o = spec.out_channels;
            if wants(nodes, ins[1]) {
                let cols = spec.im2col(x);
                let mut dw = vec![0.0; o * kk];
                // dW = dY · colsᵀ
                gemm(o, p, kk, g, (p as isize, 1), &cols, (1, p as isize), &mut dw, 0.0);
                out.push((ins[1], dw));
            }
            if wants(nodes, ins[0]) {
                let mut dcols = vec![0.0; kk * p];
                // dcols = Wᵀ · dY
                gemm(kk, o, p, w, (1, kk as isize), g, (p as isize, 1), &mut dcols, 0.0);
                let mut dx = vec![0.0; x.len()];
                spec.col2im(&dcols, &mut dx);
                out.push((ins[0], dx));
            }
            if wants(nodes, ins[2]) {
                let db = (0..o).map(|c| g[c * p..(c + 1) * p].iter().sum()).collect();
                out.push((ins[2], db));
            }
        }
        Op::Dropout { mask } => {
            out.push((ins[0], g.iter().zip(mask).map(|(g, m)| g * m).collect()));
        }
    }
    out
}
