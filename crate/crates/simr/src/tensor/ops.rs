//! Forward op builders. Each computes the output buffer eagerly, then records
//! the op on the tape; the matching gradient rules live in `backward.rs`.

use super::shape::{axis_split, broadcast_shapes, broadcast_strides, num_elems, strides_of, zip_offsets};
use super::{Graph, NodeId, Op, Scalar};
use crate::error::{Error, Result};

/// out[i,j] += sum_l a[i,l] * b[l,j], row-major, ikj loop order.
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for l in 0..k {
            let x = a[i * k + l];
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += x * brow[j];
            }
        }
    }
}

fn gelu_val<S: Scalar>(x: S) -> S {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

impl<S: Scalar> Graph<S> {
    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let bsh = self.nodes[b].shape.clone();
        let osh = broadcast_shapes(name, &ash, &bsh)?;
        let so = strides_of(&osh);
        let sa = broadcast_strides(&ash, &osh);
        let sb = broadcast_strides(&bsh, &osh);
        let mut out = vec![S::zero(); num_elems(&osh)];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            zip_offsets(&osh, [&so, &sa, &sb], |[o, ia, ib]| {
                out[o] = f(av[ia], bv[ib]);
            });
        }
        let ng = self.any_needs_grad(&[a, b]);
        self.push(op, osh, out, ng)
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.nodes[a].value.iter().map(|&x| x * cs).collect();
        let sh = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        self.push(Op::ScalarMul(a, c), sh, out, ng)
    }

    /// 2-d matrix product (n,k)x(k,m) -> (n,m).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let bsh = self.nodes[b].shape.clone();
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("incompatible shapes {ash:?} x {bsh:?}"),
            });
        }
        let (n, k, m) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![S::zero(); n * m];
        matmul_acc(&self.nodes[a].value, &self.nodes[b].value, &mut out, n, k, m);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::MatMul(a, b), vec![n, m], out, ng)
    }

    /// Batched matmul: (..., n, k) x (..., k, m) -> (..., n, m) with identical
    /// leading dims (broadcast the operands explicitly first if needed).
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let bsh = self.nodes[b].shape.clone();
        let ok = ash.len() >= 2
            && ash.len() == bsh.len()
            && ash[..ash.len() - 2] == bsh[..bsh.len() - 2]
            && ash[ash.len() - 1] == bsh[bsh.len() - 2];
        if !ok {
            return Err(Error::Shape {
                op: "bmm",
                detail: format!("incompatible shapes {ash:?} x {bsh:?}"),
            });
        }
        let nd = ash.len();
        let (n, k, m) = (ash[nd - 2], ash[nd - 1], bsh[nd - 1]);
        let batch: usize = ash[..nd - 2].iter().product();
        let mut osh = ash[..nd - 2].to_vec();
        osh.push(n);
        osh.push(m);
        let mut out = vec![S::zero(); batch * n * m];
        {
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for t in 0..batch {
                matmul_acc(
                    &av[t * n * k..(t + 1) * n * k],
                    &bv[t * k * m..(t + 1) * k * m],
                    &mut out[t * n * m..(t + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let ng = self.any_needs_grad(&[a, b]);
        self.push(Op::Bmm(a, b), osh, out, ng)
    }

    /// Reorder axes; `perm[d]` is the input axis that becomes output axis `d`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let mut seen = vec![false; ash.len()];
        let valid = perm.len() == ash.len()
            && perm.iter().all(|&p| {
                if p >= ash.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                detail: format!("perm {perm:?} is not a permutation of axes of {ash:?}"),
            });
        }
        let osh: Vec<usize> = perm.iter().map(|&p| ash[p]).collect();
        let in_str = strides_of(&ash);
        let walk: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
        let so = strides_of(&osh);
        let mut out = vec![S::zero(); num_elems(&osh)];
        {
            let av = &self.nodes[a].value;
            zip_offsets(&osh, [&so, &walk], |[o, i]| out[o] = av[i]);
        }
        let ng = self.nodes[a].needs_grad;
        self.push(Op::Permute(a, perm.to_vec()), osh, out, ng)
    }

    /// 2-d transpose, shorthand for permute([1, 0]).
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("expected 2-d input, got {:?}", self.nodes[a].shape),
            });
        }
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        if num_elems(&ash) != num_elems(new_shape) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot reshape {ash:?} to {new_shape:?}"),
            });
        }
        let out = self.nodes[a].value.clone();
        let ng = self.nodes[a].needs_grad;
        self.push(Op::Reshape(a), new_shape.to_vec(), out, ng)
    }

    /// Materialize a broadcast of `a` to `target` (numpy rules; `a` may not
    /// have more dims than `target`). Backward sum-reduces over the new axes.
    pub fn broadcast_to(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let joint = broadcast_shapes("broadcast_to", &ash, target)?;
        if joint != target {
            return Err(Error::Shape {
                op: "broadcast_to",
                detail: format!("{ash:?} does not broadcast to {target:?}"),
            });
        }
        let so = strides_of(target);
        let sa = broadcast_strides(&ash, target);
        let mut out = vec![S::zero(); num_elems(target)];
        {
            let av = &self.nodes[a].value;
            zip_offsets(target, [&so, &sa], |[o, i]| out[o] = av[i]);
        }
        let ng = self.nodes[a].needs_grad;
        self.push(Op::BroadcastTo(a), target.to_vec(), out, ng)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0]].shape.clone();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let sh = &self.nodes[p].shape;
            let compatible = sh.len() == first.len()
                && sh
                    .iter()
                    .enumerate()
                    .all(|(d, &x)| d == axis || x == first[d]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("mismatched part {sh:?} vs {first:?} along axis {axis}"),
                });
            }
            total_axis += sh[axis];
        }
        let mut osh = first.clone();
        osh[axis] = total_axis;
        let (outer, _, inner) = axis_split(&osh, axis);
        let mut out = vec![S::zero(); num_elems(&osh)];
        let mut at = 0usize;
        for &p in parts {
            let alen = self.nodes[p].shape[axis];
            let pv = &self.nodes[p].value;
            for o in 0..outer {
                let src = &pv[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = o * total_axis * inner + at * inner;
                out[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
            at += alen;
        }
        let ng = self.any_needs_grad(parts);
        self.push(Op::Concat(parts.to_vec(), axis), osh, out, ng)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        if axis >= ash.len() || len == 0 || start + len > ash[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("range {start}..{} invalid for axis {axis} of {ash:?}", start + len),
            });
        }
        let (outer, alen, inner) = axis_split(&ash, axis);
        let mut osh = ash.clone();
        osh[axis] = len;
        let mut out = vec![S::zero(); num_elems(&osh)];
        {
            let av = &self.nodes[a].value;
            for o in 0..outer {
                let src_base = o * alen * inner + start * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&av[src_base..src_base + len * inner]);
            }
        }
        let ng = self.nodes[a].needs_grad;
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
            osh,
            out,
            ng,
        )
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op) -> Result<NodeId> {
        let out: Vec<S> = self.nodes[a].value.iter().map(|&x| f(x)).collect();
        let sh = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        self.push(op, sh, out, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Natural log; rejects non-positive inputs.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.nodes[a].value.iter().find(|v| **v <= S::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, gelu_val, Op::Gelu(a))
    }

    fn check_axis(&self, name: &'static str, a: NodeId, axis: usize) -> Result<()> {
        let nd = self.nodes[a].shape.len();
        if axis >= nd {
            return Err(Error::Shape {
                op: name,
                detail: format!("axis {axis} out of range for {:?}", self.nodes[a].shape),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("softmax", a, axis)?;
        let ash = self.nodes[a].shape.clone();
        let (outer, alen, inner) = axis_split(&ash, axis);
        let mut out = vec![S::zero(); num_elems(&ash)];
        {
            let av = &self.nodes[a].value;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * alen * inner + i;
                    let mut m = av[base];
                    for j in 1..alen {
                        m = m.max(av[base + j * inner]);
                    }
                    let mut z = S::zero();
                    for j in 0..alen {
                        let e = (av[base + j * inner] - m).exp();
                        out[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..alen {
                        out[base + j * inner] = out[base + j * inner] / z;
                    }
                }
            }
        }
        let ng = self.nodes[a].needs_grad;
        self.push(Op::Softmax(a, axis), ash, out, ng)
    }

    /// log(softmax) along `axis`, fused for stability: x - max - log(sum exp).
    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("log_softmax", a, axis)?;
        let ash = self.nodes[a].shape.clone();
        let (outer, alen, inner) = axis_split(&ash, axis);
        let mut out = vec![S::zero(); num_elems(&ash)];
        {
            let av = &self.nodes[a].value;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * alen * inner + i;
                    let mut m = av[base];
                    for j in 1..alen {
                        m = m.max(av[base + j * inner]);
                    }
                    let mut z = S::zero();
                    for j in 0..alen {
                        z += (av[base + j * inner] - m).exp();
                    }
                    let lz = z.ln();
                    for j in 0..alen {
                        out[base + j * inner] = av[base + j * inner] - m - lz;
                    }
                }
            }
        }
        let ng = self.nodes[a].needs_grad;
        self.push(Op::LogSoftmax(a, axis), ash, out, ng)
    }

    /// Scale each lane along `axis` to unit L2 norm; zero lanes stay zero
    /// (counted via `zero_norm_events`).
    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("l2_normalize", a, axis)?;
        let ash = self.nodes[a].shape.clone();
        let (outer, alen, inner) = axis_split(&ash, axis);
        let mut out = vec![S::zero(); num_elems(&ash)];
        let mut zero_lanes = 0usize;
        {
            let av = &self.nodes[a].value;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * alen * inner + i;
                    let mut sq = S::zero();
                    for j in 0..alen {
                        let x = av[base + j * inner];
                        sq += x * x;
                    }
                    let norm = sq.sqrt();
                    if norm == S::zero() {
                        zero_lanes += 1;
                        continue; // lane already zeroed
                    }
                    for j in 0..alen {
                        out[base + j * inner] = av[base + j * inner] / norm;
                    }
                }
            }
        }
        self.zero_norm_bump(zero_lanes);
        let ng = self.nodes[a].needs_grad;
        self.push(Op::L2Normalize(a, axis), ash, out, ng)
    }

    fn zero_norm_bump(&mut self, n: usize) {
        for _ in 0..n {
            self.note_zero_norm();
        }
    }

    /// Sum over one axis (removing it) or over everything (rank-0 output).
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(a, axis, false)
    }

    /// Arithmetic mean over one axis or over everything.
    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: NodeId, axis: Option<usize>, mean: bool) -> Result<NodeId> {
        let ash = self.nodes[a].shape.clone();
        let (osh, out) = match axis {
            None => {
                let mut acc = S::zero();
                for &x in &self.nodes[a].value {
                    acc += x;
                }
                if mean {
                    acc = acc / S::from_f64(self.nodes[a].value.len() as f64);
                }
                (Vec::new(), vec![acc])
            }
            Some(ax) => {
                self.check_axis(if mean { "mean" } else { "sum" }, a, ax)?;
                let (outer, alen, inner) = axis_split(&ash, ax);
                let mut osh = ash.clone();
                osh.remove(ax);
                let mut out = vec![S::zero(); outer * inner];
                let av = &self.nodes[a].value;
                for o in 0..outer {
                    for j in 0..alen {
                        let base = o * alen * inner + j * inner;
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for i in 0..inner {
                            dst[i] += av[base + i];
                        }
                    }
                }
                if mean {
                    let inv = S::one() / S::from_f64(alen as f64);
                    for v in &mut out {
                        *v = *v * inv;
                    }
                }
                (osh, out)
            }
        };
        let ng = self.nodes[a].needs_grad;
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        self.push(op, osh, out, ng)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// `gamma` and `beta` must be 1-d of the last-axis length. eps = 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xsh = self.nodes[x].shape.clone();
        let d = *xsh.last().ok_or(Error::Shape {
            op: "layer_norm",
            detail: "input must have at least 1 dim".into(),
        })?;
        if self.nodes[gamma].shape != [d] || self.nodes[beta].shape != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} must be [{d}] for input {xsh:?}",
                    self.nodes[gamma].shape, self.nodes[beta].shape
                ),
            });
        }
        let rows = num_elems(&xsh) / d;
        let eps = S::from_f64(1e-5);
        let invd = S::one() / S::from_f64(d as f64);
        let mut out = vec![S::zero(); num_elems(&xsh)];
        {
            let xv = &self.nodes[x].value;
            let gv = &self.nodes[gamma].value;
            let bv = &self.nodes[beta].value;
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
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
                let dst = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = gv[j] * ((row[j] - mu) * inv_std) + bv[j];
                }
            }
        }
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        self.push(Op::LayerNorm { input: x, gamma, beta }, xsh, out, ng)
    }

    /// Embedding lookup: rows of a (V, D) table selected by `indices`,
    /// producing shape `idx_shape + [D]`. Backward scatter-adds into the table.
    pub fn gather(&mut self, table: NodeId, indices: &[usize], idx_shape: &[usize]) -> Result<NodeId> {
        let tsh = self.nodes[table].shape.clone();
        if tsh.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("table must be 2-d, got {tsh:?}"),
            });
        }
        if num_elems(idx_shape) != indices.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("idx_shape {idx_shape:?} wants {} ids, got {}", num_elems(idx_shape), indices.len()),
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let mut osh = idx_shape.to_vec();
        osh.push(d);
        let mut out = vec![S::zero(); indices.len() * d];
        {
            let tv = &self.nodes[table].value;
            for (i, &ix) in indices.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&tv[ix * d..(ix + 1) * d]);
            }
        }
        let ng = self.nodes[table].needs_grad;
        self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            osh,
            out,
            ng,
        )
    }
}
