//! Cross-attention alignment. A global feature from one side queries the
//! other side's tokens; the attended result passes through a feedforward
//! block to become a per-pair similarity representation (D floats for every
//! (query, candidate) pair), which a small head collapses to one logit.
//! One parameter set serves both directions.

use crate::attention::{attention_core, init_layer_norm, init_linear, layer_norm_named, linear_named, MASKED_LOGIT};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvChoice {
    /// Single pooled token per item: K_len = 1.
    Global,
    /// The local tokens: K_len = L (or masked M).
    Local,
    /// Local tokens with the global token appended last: K_len = L + 1.
    Both,
}

impl KvChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(KvChoice::Global),
            "local" => Ok(KvChoice::Local),
            "both" => Ok(KvChoice::Both),
            other => Err(Error::Config(format!(
                "unknown kv choice `{other}` (expected global, local or both)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KvChoice::Global => "global",
            KvChoice::Local => "local",
            KvChoice::Both => "both",
        }
    }

    pub fn k_len(self, l: usize) -> usize {
        match self {
            KvChoice::Global => 1,
            KvChoice::Local => l,
            KvChoice::Both => l + 1,
        }
    }

    /// Whether the attention map covers the local tokens (needed for grounding).
    pub fn has_local(self) -> bool {
        !matches!(self, KvChoice::Global)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimrVariant {
    /// cosine(SR_i2t[i][t], SR_t2i[t][i])
    CosProjProj,
    /// cosine(SR_i2t[i][t], y_global[t]) + cosine(SR_t2i[t][i], x_global[i])
    CosProjOrig,
    /// Linear(SR) -> one logit
    Linear,
    /// MLP(SR): D -> D/2 -> 1 with GELU
    Mlp,
}

impl SimrVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cos_proj_proj" => Ok(SimrVariant::CosProjProj),
            "cos_proj_orig" => Ok(SimrVariant::CosProjOrig),
            "linear" => Ok(SimrVariant::Linear),
            "mlp" => Ok(SimrVariant::Mlp),
            other => Err(Error::Config(format!(
                "unknown similarity variant `{other}` (expected cos_proj_proj, cos_proj_orig, linear or mlp)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SimrVariant::CosProjProj => "cos_proj_proj",
            SimrVariant::CosProjOrig => "cos_proj_orig",
            SimrVariant::Linear => "linear",
            SimrVariant::Mlp => "mlp",
        }
    }

    pub fn uses_learned_head(self) -> bool {
        matches!(self, SimrVariant::Linear | SimrVariant::Mlp)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignSpec {
    pub heads: usize,
    pub kv: KvChoice,
    pub variant: SimrVariant,
}

/// Shared-direction alignment parameters: q/k/v/o projections, the SR
/// feedforward block, and the similarity head the variant needs.
pub fn init_alignment<S: Scalar>(
    ps: &mut ParamSet<S>,
    d: usize,
    d_ff: usize,
    variant: SimrVariant,
    rng: &mut impl Rng,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("align.{proj}"), d, d, rng)?;
    }
    init_layer_norm(ps, "align.ln1", d)?;
    init_linear(ps, "align.ffn1", d, d_ff, rng)?;
    init_linear(ps, "align.ffn2", d_ff, d, rng)?;
    init_layer_norm(ps, "align.ln2", d)?;
    match variant {
        SimrVariant::Linear => init_linear(ps, "align.head", d, 1, rng)?,
        SimrVariant::Mlp => {
            let h = (d / 2).max(1);
            init_linear(ps, "align.mlp1", d, h, rng)?;
            init_linear(ps, "align.mlp2", h, 1, rng)?;
        }
        SimrVariant::CosProjProj | SimrVariant::CosProjOrig => {}
    }
    Ok(())
}

pub struct DirectionOut {
    /// (A, B, D) similarity representation for every (query, candidate) pair.
    pub sr: NodeId,
    /// (A, B, heads, K_len) attention weights over the key tokens.
    pub attn: NodeId,
}

/// One alignment direction. Each of the A global query vectors is projected,
/// repeated across the B candidates, and attends over that candidate's
/// key/value token set; a residual feedforward block turns the attended
/// vector into the pair's similarity representation.
///
/// `kv_mask` marks valid local tokens ((B, Lk), row-major); None = all valid.
pub fn cross_attend<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    spec: &AlignSpec,
    q_global: NodeId,
    kv_local: NodeId,
    kv_global: NodeId,
    kv_mask: Option<&[bool]>,
) -> Result<DirectionOut> {
    let a = g.shape(q_global)[0];
    let lsh = g.shape(kv_local).to_vec();
    if lsh.len() != 3 {
        return Err(Error::Shape {
            op: "cross_attend",
            detail: format!("kv_local must be (B, L, D), got {lsh:?}"),
        });
    }
    let (b, lk, d) = (lsh[0], lsh[1], lsh[2]);
    let n = a * b;

    // assemble the key/value token set for the chosen granularity
    let (toks, mask_vec): (NodeId, Option<Vec<bool>>) = match spec.kv {
        KvChoice::Global => {
            let t = g.reshape(kv_global, &[b, 1, d])?;
            (t, None)
        }
        KvChoice::Local => (kv_local, kv_mask.map(<[bool]>::to_vec)),
        KvChoice::Both => {
            let gt = g.reshape(kv_global, &[b, 1, d])?;
            let t = g.concat(&[kv_local, gt], 1)?;
            let m = kv_mask.map(|mk| {
                let mut out = Vec::with_capacity(b * (lk + 1));
                for row in mk.chunks(lk) {
                    out.extend_from_slice(row);
                    out.push(true); // the appended global token is always valid
                }
                out
            });
            (t, m)
        }
    };
    let k_len = spec.kv.k_len(lk);

    // project once per item, then repeat across pairs
    let q_proj = linear_named(g, bound, "align.q", q_global)?; // (A, D)
    let k_proj = linear_named(g, bound, "align.k", toks)?; // (B, K, D)
    let v_proj = linear_named(g, bound, "align.v", toks)?;

    let q1 = g.reshape(q_proj, &[a, 1, d])?;
    let qb = g.broadcast_to(q1, &[a, b, d])?;
    let q_pairs = g.reshape(qb, &[n, 1, d])?;

    let expand = |g: &mut Graph<S>, x: NodeId| -> Result<NodeId> {
        let x1 = g.reshape(x, &[1, b, k_len, d])?;
        let xb = g.broadcast_to(x1, &[a, b, k_len, d])?;
        g.reshape(xb, &[n, k_len, d])
    };
    let k_pairs = expand(g, k_proj)?;
    let v_pairs = expand(g, v_proj)?;

    let mask_node = match &mask_vec {
        None => None,
        Some(mv) => {
            let mut add = Vec::with_capacity(n * k_len);
            for _ in 0..a {
                for row in mv.chunks(k_len) {
                    for &ok in row {
                        add.push(if ok { S::zero() } else { S::from_f64(MASKED_LOGIT) });
                    }
                }
            }
            Some(g.constant(&[n, 1, 1, k_len], add)?)
        }
    };

    let wo = bound.id("align.o.w")?;
    let bo = bound.id("align.o.b")?;
    let att = attention_core(g, q_pairs, k_pairs, v_pairs, mask_node, spec.heads, wo, bo)?;

    // residual feedforward block over the attended pair vector; the residual
    // base is the projected query
    let h_in = g.add(q_pairs, att.out)?;
    let h = layer_norm_named(g, bound, "align.ln1", h_in)?;
    let f1 = linear_named(g, bound, "align.ffn1", h)?;
    let f1a = g.gelu(f1)?;
    let f2 = linear_named(g, bound, "align.ffn2", f1a)?;
    let sr_in = g.add(h, f2)?;
    let sr_flat = layer_norm_named(g, bound, "align.ln2", sr_in)?;

    let sr = g.reshape(sr_flat, &[a, b, d])?;
    let attn = g.reshape(att.attn, &[a, b, spec.heads, k_len])?;
    Ok(DirectionOut { sr, attn })
}

/// Collapse (A, B, D) similarity representations to an (A, B) logit matrix
/// with the learned head. Cosine variants score via `cosine_scores` instead.
pub fn project_similarity<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    sr: NodeId,
    variant: SimrVariant,
) -> Result<NodeId> {
    let sh = g.shape(sr).to_vec();
    if sh.len() != 3 {
        return Err(Error::Shape {
            op: "project_similarity",
            detail: format!("expected (A, B, D), got {sh:?}"),
        });
    }
    let (a, b) = (sh[0], sh[1]);
    let logits = match variant {
        SimrVariant::Linear => linear_named(g, bound, "align.head", sr)?,
        SimrVariant::Mlp => {
            let h = linear_named(g, bound, "align.mlp1", sr)?;
            let ha = g.gelu(h)?;
            linear_named(g, bound, "align.mlp2", ha)?
        }
        SimrVariant::CosProjProj | SimrVariant::CosProjOrig => {
            return Err(Error::Contract(format!(
                "variant {} has no learned head; use cosine_scores",
                variant.as_str()
            )))
        }
    };
    g.reshape(logits, &[a, b])
}

/// Similarity matrices for the two cosine variants. Both are symmetric in
/// the pair, so S_i2t is exactly the transpose of S_t2i.
pub fn cosine_scores<S: Scalar>(
    g: &mut Graph<S>,
    sr_t2i: NodeId,  // (T, I, D)
    sr_i2t: NodeId,  // (I, T, D)
    x_global: NodeId, // (I, D)
    y_global: NodeId, // (T, D)
    variant: SimrVariant,
) -> Result<(NodeId, NodeId)> {
    let sr_i2t_t = g.permute(sr_i2t, &[1, 0, 2])?; // (T, I, D)
    let s_t2i = match variant {
        SimrVariant::CosProjProj => {
            let na = g.l2_normalize(sr_t2i, 2)?;
            let nb = g.l2_normalize(sr_i2t_t, 2)?;
            let prod = g.mul(na, nb)?;
            g.sum(prod, Some(2))?
        }
        SimrVariant::CosProjOrig => {
            let t = g.shape(y_global)[0];
            let i = g.shape(x_global)[0];
            let d = g.shape(x_global)[1];
            // cos(SR_i2t[i][t], y_global[t])
            let nb = g.l2_normalize(sr_i2t_t, 2)?;
            let ny = g.l2_normalize(y_global, 1)?;
            let ny3 = g.reshape(ny, &[t, 1, d])?;
            let p1 = g.mul(nb, ny3)?;
            let c1 = g.sum(p1, Some(2))?;
            // cos(SR_t2i[t][i], x_global[i])
            let na = g.l2_normalize(sr_t2i, 2)?;
            let nx = g.l2_normalize(x_global, 1)?;
            let nx3 = g.reshape(nx, &[1, i, d])?;
            let p2 = g.mul(na, nx3)?;
            let c2 = g.sum(p2, Some(2))?;
            g.add(c1, c2)?
        }
        SimrVariant::Linear | SimrVariant::Mlp => {
            return Err(Error::Contract(format!(
                "variant {} scores via project_similarity, not cosine",
                variant.as_str()
            )))
        }
    };
    let s_i2t = g.permute(s_t2i, &[1, 0])?;
    Ok((s_t2i, s_i2t))
}

pub struct AlignmentOutput {
    pub s_t2i: NodeId,    // (T, I)
    pub s_i2t: NodeId,    // (I, T)
    pub sr_t2i: NodeId,   // (T, I, D)
    pub sr_i2t: NodeId,   // (I, T, D)
    pub attn_t2i: NodeId, // (T, I, heads, K_len over image tokens)
    pub attn_i2t: NodeId, // (I, T, heads, K_len over text tokens)
}

/// Run both alignment directions with the shared parameters and produce the
/// similarity matrices for the configured variant. `text_mask` is the (T, M)
/// validity mask for the text tokens; image tokens are always all valid.
pub fn align_and_score<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    spec: &AlignSpec,
    x_local: NodeId,  // (I, L, D)
    x_global: NodeId, // (I, D)
    y_local: NodeId,  // (T, M, D)
    y_global: NodeId, // (T, D)
    text_mask: &[bool],
) -> Result<AlignmentOutput> {
    let t2i = cross_attend(g, bound, spec, y_global, x_local, x_global, None)?;
    let i2t = cross_attend(g, bound, spec, x_global, y_local, y_global, Some(text_mask))?;
    let (s_t2i, s_i2t) = if spec.variant.uses_learned_head() {
        (
            project_similarity(g, bound, t2i.sr, spec.variant)?,
            project_similarity(g, bound, i2t.sr, spec.variant)?,
        )
    } else {
        cosine_scores(g, t2i.sr, i2t.sr, x_global, y_global, spec.variant)?
    };
    Ok(AlignmentOutput {
        s_t2i,
        s_i2t,
        sr_t2i: t2i.sr,
        sr_i2t: i2t.sr,
        attn_t2i: t2i.attn,
        attn_i2t: i2t.attn,
    })
}
