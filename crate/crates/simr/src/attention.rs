//! Building blocks shared by the encoders and the cross-attention aligner:
//! linear layers, scaled dot-product multi-head attention, and the post-LN
//! transformer block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

/// Additive logit for masked-out attention keys. Finite on purpose: -inf
/// arithmetic breeds NaNs, while exp(-1e9 - max) underflows to exactly 0.
pub const MASKED_LOGIT: f64 = -1e9;

/// y = x W + b over the last axis. x: (..., Din), W: (Din, Dout), b: (Dout).
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xsh = g.shape(x).to_vec();
    let din = *xsh.last().ok_or(Error::Shape {
        op: "linear",
        detail: "input must have at least 1 dim".into(),
    })?;
    let rows: usize = xsh[..xsh.len() - 1].iter().product();
    let x2 = g.reshape(x, &[rows, din])?;
    let y2 = g.matmul(x2, w)?;
    let dout = g.shape(w)[1];
    let mut osh = xsh;
    *osh.last_mut().unwrap() = dout;
    let y = g.reshape(y2, &osh)?;
    g.add(y, b)
}

/// Linear layer bound by name: parameters `{name}.w` and `{name}.b`.
pub fn linear_named<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = bound.id(&format!("{name}.w"))?;
    let b = bound.id(&format!("{name}.b"))?;
    linear(g, x, w, b)
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero bias.
pub fn init_linear<S: Scalar>(
    ps: &mut ParamSet<S>,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (din as f64).sqrt();
    ps.init_uniform(&format!("{name}.w"), &[din, dout], bound, rng)?;
    ps.init_zeros(&format!("{name}.b"), &[dout])
}

pub fn init_layer_norm<S: Scalar>(ps: &mut ParamSet<S>, name: &str, d: usize) -> Result<()> {
    ps.init_ones(&format!("{name}.g"), &[d])?;
    ps.init_zeros(&format!("{name}.b"), &[d])
}

pub fn layer_norm_named<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = bound.id(&format!("{name}.g"))?;
    let beta = bound.id(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub struct AttnOut {
    /// (N, Sq, D) after the output projection.
    pub out: NodeId,
    /// (N, heads, Sq, Sk) softmax weights, kept for grounding.
    pub attn: NodeId,
}

/// Scaled dot-product attention over already-projected q/k/v, plus the output
/// projection. q: (N, Sq, D), k/v: (N, Sk, D). `mask` is an additive logit
/// tensor broadcastable to (N, heads, Sq, Sk).
pub fn attention_core<S: Scalar>(
    g: &mut Graph<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<NodeId>,
    heads: usize,
    wo: NodeId,
    bo: NodeId,
) -> Result<AttnOut> {
    let qsh = g.shape(q).to_vec();
    let ksh = g.shape(k).to_vec();
    if qsh.len() != 3 || ksh.len() != 3 || qsh[0] != ksh[0] || qsh[2] != ksh[2] {
        return Err(Error::Shape {
            op: "attention",
            detail: format!("q {qsh:?} incompatible with k {ksh:?}"),
        });
    }
    let (n, sq, d) = (qsh[0], qsh[1], qsh[2]);
    let sk = ksh[1];
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by head count {heads}"
        )));
    }
    let hd = d / heads;
    let split = |g: &mut Graph<S>, x: NodeId, s: usize| -> Result<NodeId> {
        let r = g.reshape(x, &[n, s, heads, hd])?;
        g.permute(r, &[0, 2, 1, 3]) // (N, H, S, hd)
    };
    let qh = split(g, q, sq)?;
    let kh = {
        let r = g.reshape(k, &[n, sk, heads, hd])?;
        g.permute(r, &[0, 2, 3, 1])? // (N, H, hd, Sk)
    };
    let vh = split(g, v, sk)?;
    let raw = g.bmm(qh, kh)?;
    let mut logits = g.scalar_mul(raw, 1.0 / (hd as f64).sqrt())?;
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let attn = g.softmax(logits, 3)?;
    let ctx = g.bmm(attn, vh)?; // (N, H, Sq, hd)
    let merged = g.permute(ctx, &[0, 2, 1, 3])?;
    let flat = g.reshape(merged, &[n, sq, d])?;
    let out = linear(g, flat, wo, bo)?;
    Ok(AttnOut { out, attn })
}

/// Parameters for one self-attention block under `prefix`:
/// `.q/.k/.v/.o` projections, `.ln1/.ln2` norms, `.ffn1/.ffn2` feedforward.
pub fn init_transformer_block<S: Scalar>(
    ps: &mut ParamSet<S>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{prefix}.{proj}"), d, d, rng)?;
    }
    init_layer_norm(ps, &format!("{prefix}.ln1"), d)?;
    init_linear(ps, &format!("{prefix}.ffn1"), d, d_ff, rng)?;
    init_linear(ps, &format!("{prefix}.ffn2"), d_ff, d, rng)?;
    init_layer_norm(ps, &format!("{prefix}.ln2"), d)
}

/// Post-LN self-attention block: h = LN(x + Att(x)); out = LN(h + FFN(h)).
pub fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    mask: Option<NodeId>,
    heads: usize,
) -> Result<NodeId> {
    let q = linear_named(g, bound, &format!("{prefix}.q"), x)?;
    let k = linear_named(g, bound, &format!("{prefix}.k"), x)?;
    let v = linear_named(g, bound, &format!("{prefix}.v"), x)?;
    let wo = bound.id(&format!("{prefix}.o.w"))?;
    let bo = bound.id(&format!("{prefix}.o.b"))?;
    let att = attention_core(g, q, k, v, mask, heads, wo, bo)?;
    let xa = g.add(x, att.out)?;
    let h = layer_norm_named(g, bound, &format!("{prefix}.ln1"), xa)?;
    let f1 = linear_named(g, bound, &format!("{prefix}.ffn1"), h)?;
    let f1act = g.gelu(f1)?;
    let f2 = linear_named(g, bound, &format!("{prefix}.ffn2"), f1act)?;
    let hf = g.add(h, f2)?;
    layer_norm_named(g, bound, &format!("{prefix}.ln2"), hf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_sum_to_one_and_identical_keys_uniform() {
        let mut g: Graph<f64> = Graph::new();
        // 1 batch, 1 query, 3 identical keys, D=4, 2 heads
        let q = g.constant(&[1, 1, 4], vec![0.3, -0.2, 0.9, 0.5]).unwrap();
        let key_row = [0.1, 0.7, -0.4, 0.2];
        let kv: Vec<f64> = key_row.iter().cycle().take(12).copied().collect();
        let k = g.constant(&[1, 3, 4], kv.clone()).unwrap();
        let v = g.constant(&[1, 3, 4], kv).unwrap();
        let wo = g
            .constant(&[4, 4], {
                let mut eye = vec![0.0; 16];
                for i in 0..4 {
                    eye[i * 4 + i] = 1.0;
                }
                eye
            })
            .unwrap();
        let bo = g.constant(&[4], vec![0.0; 4]).unwrap();
        let att = attention_core(&mut g, q, k, v, None, 2, wo, bo).unwrap();
        let w = g.value(att.attn);
        assert_eq!(g.shape(att.attn), &[1, 2, 1, 3]);
        for head in 0..2 {
            let row = &w[head * 3..(head + 1) * 3];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-9, "identical keys must attend uniformly");
            }
        }
    }

    #[test]
    fn masked_key_gets_zero_weight() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.constant(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let k = g.constant(&[1, 2, 2], vec![5.0, 0.0, 0.1, 0.2]).unwrap();
        let v = g.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let wo = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bo = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        // mask out the first (otherwise dominant) key
        let mask = g.constant(&[1, 1, 1, 2], vec![MASKED_LOGIT, 0.0]).unwrap();
        let att = attention_core(&mut g, q, k, v, Some(mask), 1, wo, bo).unwrap();
        let w = g.value(att.attn);
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 1.0).abs() < 1e-12);
        // context is exactly the surviving value row
        assert!((g.value(att.out)[0] - 3.0).abs() < 1e-12);
        assert!((g.value(att.out)[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn block_gradients_flow_to_all_params() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_transformer_block(&mut ps, "blk", 4, 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = ps.bind(&mut g).unwrap();
        let x = g
            .constant(&[2, 3, 4], (0..24).map(|i| (i as f64) * 0.1 - 1.0).collect())
            .unwrap();
        let y = transformer_block(&mut g, &bound, "blk", x, None, 2).unwrap();
        let y2 = g.mul(y, y).unwrap();
        let loss = g.mean(y2, None).unwrap();
        g.backward(loss).unwrap();
        for (name, &id) in bound.iter() {
            let grad = g.grad(id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(grad.iter().any(|&v| v != 0.0), "all-zero grad for {name}");
        }
    }
}
