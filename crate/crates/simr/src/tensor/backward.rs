//! Reverse sweep over the tape: one vector-Jacobian product per op kind.

use super::shape::{axis_split, broadcast_strides, strides_of, zip_offsets};
use super::{Graph, Node, NodeId, Op, Scalar};
use crate::error::{Error, Result};

impl<S: Scalar> Graph<S> {
    /// Propagate d(loss)/d(node) from a rank-0 `loss` node down to every
    /// `needs_grad` node, adding into their persistent `grad` buffers.
    /// Repeated calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Contract(format!("backward: node {loss} does not exist")));
        }
        if !self.nodes[loss].shape.is_empty() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![S::one()]);
        // Ids are already topologically ordered, so a single reverse walk sees
        // every node only after all of its consumers.
        for i in (0..=loss).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            {
                let node = &mut self.nodes[i];
                let store = node
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); node.value.len()]);
                for (d, s) in store.iter_mut().zip(&g) {
                    *d += *s;
                }
            }
            vjp(&self.nodes, i, &g, &mut adj);
        }
        Ok(())
    }
}

fn slot<'a, S: Scalar>(
    adj: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    id: NodeId,
) -> &'a mut Vec<S> {
    adj[id].get_or_insert_with(|| vec![S::zero(); nodes[id].value.len()])
}

/// Accumulate `scale * g` (laid out on `out_shape`) into `acc` (laid out on
/// `in_shape`), sum-reducing over broadcast axes. The reverse of broadcasting.
fn bcast_acc<S: Scalar>(out_shape: &[usize], in_shape: &[usize], g: &[S], acc: &mut [S], scale: S) {
    let so = strides_of(out_shape);
    let si = broadcast_strides(in_shape, out_shape);
    zip_offsets(out_shape, [&so, &si], |[o, i]| acc[i] += scale * g[o]);
}

fn vjp<S: Scalar>(nodes: &[Node<S>], i: NodeId, g: &[S], adj: &mut [Option<Vec<S>>]) {
    let want = |id: NodeId| nodes[id].needs_grad;
    let osh = &nodes[i].shape;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if want(*a) {
                bcast_acc(osh, &nodes[*a].shape, g, slot(adj, nodes, *a), S::one());
            }
            if want(*b) {
                bcast_acc(osh, &nodes[*b].shape, g, slot(adj, nodes, *b), S::one());
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                bcast_acc(osh, &nodes[*a].shape, g, slot(adj, nodes, *a), S::one());
            }
            if want(*b) {
                bcast_acc(osh, &nodes[*b].shape, g, slot(adj, nodes, *b), -S::one());
            }
        }
        Op::Mul(a, b) => {
            let so = strides_of(osh);
            let sa = broadcast_strides(&nodes[*a].shape, osh);
            let sb = broadcast_strides(&nodes[*b].shape, osh);
            if want(*a) {
                let bv = &nodes[*b].value;
                let acc = slot(adj, nodes, *a);
                zip_offsets(osh, [&so, &sa, &sb], |[o, ia, ib]| {
                    acc[ia] += g[o] * bv[ib];
                });
            }
            if want(*b) {
                let av = &nodes[*a].value;
                let acc = slot(adj, nodes, *b);
                zip_offsets(osh, [&so, &sa, &sb], |[o, ia, ib]| {
                    acc[ib] += g[o] * av[ia];
                });
            }
        }
        Op::ScalarMul(a, c) => {
            if want(*a) {
                let cs = S::from_f64(*c);
                let acc = slot(adj, nodes, *a);
                for (d, &s) in acc.iter_mut().zip(g) {
                    *d += cs * s;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let m = nodes[*b].shape[1];
            matmul_vjp(nodes, *a, *b, g, adj, n, k, m, 0, 0, 0);
        }
        Op::Bmm(a, b) => {
            let ash = &nodes[*a].shape;
            let nd = ash.len();
            let (n, k) = (ash[nd - 2], ash[nd - 1]);
            let m = nodes[*b].shape[nd - 1];
            let batch: usize = ash[..nd - 2].iter().product();
            for t in 0..batch {
                matmul_vjp(nodes, *a, *b, g, adj, n, k, m, t * n * k, t * k * m, t * n * m);
            }
        }
        Op::Permute(a, perm) => {
            if want(*a) {
                let in_str = strides_of(&nodes[*a].shape);
                let walk: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
                let so = strides_of(osh);
                let acc = slot(adj, nodes, *a);
                zip_offsets(osh, [&so, &walk], |[o, i]| acc[i] += g[o]);
            }
        }
        Op::Reshape(a) => {
            if want(*a) {
                let acc = slot(adj, nodes, *a);
                for (d, &s) in acc.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::BroadcastTo(a) => {
            if want(*a) {
                bcast_acc(osh, &nodes[*a].shape, g, slot(adj, nodes, *a), S::one());
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, total_axis, inner) = axis_split(osh, *axis);
            let mut at = 0usize;
            for &p in parts {
                let alen = nodes[p].shape[*axis];
                if want(p) {
                    let acc = slot(adj, nodes, p);
                    for o in 0..outer {
                        let src_base = o * total_axis * inner + at * inner;
                        let dst = &mut acc[o * alen * inner..(o + 1) * alen * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[src_base..src_base + alen * inner]) {
                            *d += s;
                        }
                    }
                }
                at += alen;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            if want(*input) {
                let (outer, alen, inner) = axis_split(&nodes[*input].shape, *axis);
                let acc = slot(adj, nodes, *input);
                for o in 0..outer {
                    let dst_base = o * alen * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (j, &s) in src.iter().enumerate() {
                        acc[dst_base + j] += s;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if want(*a) {
                let yv = &nodes[i].value;
                let acc = slot(adj, nodes, *a);
                for j in 0..g.len() {
                    acc[j] += g[j] * yv[j];
                }
            }
        }
        Op::Log(a) => {
            if want(*a) {
                let xv = &nodes[*a].value;
                let acc = slot(adj, nodes, *a);
                for j in 0..g.len() {
                    acc[j] += g[j] / xv[j];
                }
            }
        }
        Op::Relu(a) => {
            if want(*a) {
                let xv = &nodes[*a].value;
                let acc = slot(adj, nodes, *a);
                for j in 0..g.len() {
                    if xv[j] > S::zero() {
                        acc[j] += g[j];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if want(*a) {
                let c = S::from_f64(0.797_884_560_802_865_4);
                let three_a = S::from_f64(3.0 * 0.044715);
                let aa = S::from_f64(0.044715);
                let half = S::from_f64(0.5);
                let xv = &nodes[*a].value;
                let acc = slot(adj, nodes, *a);
                for j in 0..g.len() {
                    let x = xv[j];
                    let u = c * (x + aa * x * x * x);
                    let t = u.tanh();
                    let du = c * (S::one() + three_a * x * x);
                    let d = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
                    acc[j] += g[j] * d;
                }
            }
        }
        Op::Softmax(a, axis) => {
            if want(*a) {
                let (outer, alen, inner) = axis_split(osh, *axis);
                let yv = &nodes[i].value;
                let acc = slot(adj, nodes, *a);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * alen * inner + ii;
                        let mut dot = S::zero();
                        for j in 0..alen {
                            let p = base + j * inner;
                            dot += g[p] * yv[p];
                        }
                        for j in 0..alen {
                            let p = base + j * inner;
                            acc[p] += yv[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a, axis) => {
            if want(*a) {
                let (outer, alen, inner) = axis_split(osh, *axis);
                let yv = &nodes[i].value;
                let acc = slot(adj, nodes, *a);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * alen * inner + ii;
                        let mut gsum = S::zero();
                        for j in 0..alen {
                            gsum += g[base + j * inner];
                        }
                        for j in 0..alen {
                            let p = base + j * inner;
                            acc[p] += g[p] - yv[p].exp() * gsum;
                        }
                    }
                }
            }
        }
        Op::L2Normalize(a, axis) => {
            if want(*a) {
                let (outer, alen, inner) = axis_split(osh, *axis);
                let xv = &nodes[*a].value;
                let yv = &nodes[i].value;
                let acc = slot(adj, nodes, *a);
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * alen * inner + ii;
                        let mut sq = S::zero();
                        for j in 0..alen {
                            let x = xv[base + j * inner];
                            sq += x * x;
                        }
                        let norm = sq.sqrt();
                        if norm == S::zero() {
                            continue; // forward pinned the lane to zero
                        }
                        let mut dot = S::zero();
                        for j in 0..alen {
                            let p = base + j * inner;
                            dot += g[p] * yv[p];
                        }
                        for j in 0..alen {
                            let p = base + j * inner;
                            acc[p] += (g[p] - yv[p] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::Sum(a, axis) => {
            if want(*a) {
                reduce_vjp(nodes, *a, *axis, g, adj, None);
            }
        }
        Op::Mean(a, axis) => {
            if want(*a) {
                let scale = match axis {
                    None => S::one() / S::from_f64(nodes[*a].value.len() as f64),
                    Some(ax) => S::one() / S::from_f64(nodes[*a].shape[*ax] as f64),
                };
                reduce_vjp(nodes, *a, *axis, g, adj, Some(scale));
            }
        }
        Op::LayerNorm { input, gamma, beta } => {
            layer_norm_vjp(nodes, i, *input, *gamma, *beta, g, adj);
        }
        Op::Gather { table, indices } => {
            if want(*table) {
                let d = nodes[*table].shape[1];
                let acc = slot(adj, nodes, *table);
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        acc[ix * d + j] += g[r * d + j];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_vjp<S: Scalar>(
    nodes: &[Node<S>],
    a: NodeId,
    b: NodeId,
    g: &[S],
    adj: &mut [Option<Vec<S>>],
    n: usize,
    k: usize,
    m: usize,
    a_off: usize,
    b_off: usize,
    g_off: usize,
) {
    // dA = G B^T, dB = A^T G
    if nodes[a].needs_grad {
        let bv = &nodes[b].value;
        let acc = slot(adj, nodes, a);
        for i in 0..n {
            let grow = &g[g_off + i * m..g_off + (i + 1) * m];
            for l in 0..k {
                let brow = &bv[b_off + l * m..b_off + (l + 1) * m];
                let mut acc_il = S::zero();
                for j in 0..m {
                    acc_il += grow[j] * brow[j];
                }
                acc[a_off + i * k + l] += acc_il;
            }
        }
    }
    if nodes[b].needs_grad {
        let av = &nodes[a].value;
        let acc = slot(adj, nodes, b);
        for i in 0..n {
            let grow = &g[g_off + i * m..g_off + (i + 1) * m];
            for l in 0..k {
                let x = av[a_off + i * k + l];
                let brow = &mut acc[b_off + l * m..b_off + (l + 1) * m];
                for j in 0..m {
                    brow[j] += x * grow[j];
                }
            }
        }
    }
}

fn reduce_vjp<S: Scalar>(
    nodes: &[Node<S>],
    a: NodeId,
    axis: Option<usize>,
    g: &[S],
    adj: &mut [Option<Vec<S>>],
    scale: Option<S>,
) {
    let scale = scale.unwrap_or_else(S::one);
    let acc = slot(adj, nodes, a);
    match axis {
        None => {
            let s = scale * g[0];
            for d in acc.iter_mut() {
                *d += s;
            }
        }
        Some(ax) => {
            let (outer, alen, inner) = axis_split(&nodes[a].shape, ax);
            for o in 0..outer {
                let grow = &g[o * inner..(o + 1) * inner];
                for j in 0..alen {
                    let base = o * alen * inner + j * inner;
                    for ii in 0..inner {
                        acc[base + ii] += scale * grow[ii];
                    }
                }
            }
        }
    }
}

fn layer_norm_vjp<S: Scalar>(
    nodes: &[Node<S>],
    out: NodeId,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    g: &[S],
    adj: &mut [Option<Vec<S>>],
) {
    let d = *nodes[x].shape.last().unwrap();
    let rows = nodes[x].value.len() / d;
    let eps = S::from_f64(1e-5);
    let invd = S::one() / S::from_f64(d as f64);
    let xv = &nodes[x].value;
    let gv = &nodes[gamma].value;
    let _ = out;
    // per-row recompute of mu / var / xhat keeps the tape free of aux buffers
    let mut xhat = vec![S::zero(); d];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mut mu = S::zero();
        for &v in row {
            mu += v;
        }
        mu = mu * invd;
        let mut var = S::zero();
        for &v in row {
            let c = v - mu;
            var += c * c;
        }
        var = var * invd;
        let inv_std = S::one() / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mu) * inv_std;
        }
        if nodes[gamma].needs_grad {
            let acc = slot(adj, nodes, gamma);
            for j in 0..d {
                acc[j] += grow[j] * xhat[j];
            }
        }
        if nodes[beta].needs_grad {
            let acc = slot(adj, nodes, beta);
            for j in 0..d {
                acc[j] += grow[j];
            }
        }
        if nodes[x].needs_grad {
            let mut m1 = S::zero();
            let mut m2 = S::zero();
            for j in 0..d {
                let dxhat = grow[j] * gv[j];
                m1 += dxhat;
                m2 += dxhat * xhat[j];
            }
            m1 = m1 * invd;
            m2 = m2 * invd;
            let acc = slot(adj, nodes, x);
            for j in 0..d {
                let dxhat = grow[j] * gv[j];
                acc[r * d + j] += inv_std * (dxhat - m1 - xhat[j] * m2);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Graph;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[3], vec![1.0, -2.0, 5.0], true).unwrap();
        let loss = g.sum(x, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[], vec![2.0], true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2], vec![3.0, 4.0], true).unwrap();
        let loss = g.sum(x, None).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let b = g.leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_matmul_is_identity_map() {
        let mut g: Graph<f64> = Graph::new();
        let eye = g.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let a = g.leaf(&[2, 2], vec![9.0, -3.0, 0.5, 2.0], false).unwrap();
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[4], vec![0.0; 4], false).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
