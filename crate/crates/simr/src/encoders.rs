//! Toy stand-ins for the image and text encoders. They keep the real
//! interface — per-item local token features plus a pooled global feature,
//! both of width D — at desk scale: a linear patch/token embedding, learned
//! positional embeddings, a couple of self-attention blocks, and a final
//! projection.

use rand::Rng;

use crate::attention::{init_linear, init_transformer_block, linear_named, transformer_block, MASKED_LOGIT};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, NodeId, Scalar};

/// One image as a flat list of raw patch feature vectors.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    /// L*P floats, row-major over (patch, feature).
    pub patches: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    /// Raw features per patch.
    pub p: usize,
}

impl PatchGrid {
    pub fn new(patches: Vec<f32>, rows: usize, cols: usize, p: usize) -> Result<Self> {
        if rows * cols == 0 || p == 0 {
            return Err(Error::Input("patch grid dims must be positive".into()));
        }
        if patches.len() != rows * cols * p {
            return Err(Error::Shape {
                op: "patch_grid",
                detail: format!(
                    "{rows}x{cols} grid with {p} features wants {} floats, got {}",
                    rows * cols * p,
                    patches.len()
                ),
            });
        }
        if let Some(bad) = patches.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite patch value {bad}")));
        }
        Ok(PatchGrid {
            patches,
            rows,
            cols,
            p,
        })
    }

    pub fn l(&self) -> usize {
        self.rows * self.cols
    }
}

/// One report sentence as fixed-length token ids plus a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    /// Length M; pad positions hold the pad id (0).
    pub ids: Vec<usize>,
    /// Length M; true where the token is real.
    pub mask: Vec<bool>,
}

impl TokenSeq {
    /// Pad (with id 0) or truncate to length `m`.
    pub fn from_ids(ids: &[usize], m: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("token sequence must have at least one token".into()));
        }
        let keep = ids.len().min(m);
        let mut out = vec![0usize; m];
        let mut mask = vec![false; m];
        out[..keep].copy_from_slice(&ids[..keep]);
        for f in mask.iter_mut().take(keep) {
            *f = true;
        }
        Ok(TokenSeq { ids: out, mask })
    }

    pub fn len_unpadded(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Flatten a batch of grids, checking that all share L and P.
pub fn batch_grids(grids: &[PatchGrid]) -> Result<(Vec<f32>, usize, usize)> {
    let first = grids.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
    let (l, p) = (first.l(), first.p);
    let mut flat = Vec::with_capacity(grids.len() * l * p);
    for g in grids {
        if g.l() != l || g.p != p {
            return Err(Error::Shape {
                op: "batch_grids",
                detail: format!("grid {}x{} ({} feats) differs from first {l} patches ({p} feats)", g.rows, g.cols, g.p),
            });
        }
        flat.extend_from_slice(&g.patches);
    }
    Ok((flat, l, p))
}

/// Flatten a batch of token sequences into (ids, mask); all must be length M.
pub fn batch_tokens(seqs: &[TokenSeq]) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    let first = seqs.first().ok_or_else(|| Error::Input("empty text batch".into()))?;
    let m = first.ids.len();
    let mut ids = Vec::with_capacity(seqs.len() * m);
    let mut mask = Vec::with_capacity(seqs.len() * m);
    for s in seqs {
        if s.ids.len() != m || s.mask.len() != m {
            return Err(Error::Shape {
                op: "batch_tokens",
                detail: format!("sequence length {} differs from first {m}", s.ids.len()),
            });
        }
        ids.extend_from_slice(&s.ids);
        mask.extend_from_slice(&s.mask);
    }
    Ok((ids, mask, m))
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
}

pub fn init_image_encoder<S: Scalar>(
    ps: &mut ParamSet<S>,
    cfg: &EncoderConfig,
    p_raw: usize,
    l: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(ps, "img.patch", p_raw, cfg.d, rng)?;
    ps.init_uniform("img.pos", &[l, cfg.d], 1.0 / (cfg.d as f64).sqrt(), rng)?;
    for b in 0..cfg.n_blocks {
        init_transformer_block(ps, &format!("img.blk{b}"), cfg.d, cfg.d_ff, rng)?;
    }
    init_linear(ps, "img.out", cfg.d, cfg.d, rng)
}

pub fn init_text_encoder<S: Scalar>(
    ps: &mut ParamSet<S>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    ps.init_uniform("txt.emb", &[vocab_size, cfg.d], 1.0 / (cfg.d as f64).sqrt(), rng)?;
    ps.init_uniform("txt.pos", &[m, cfg.d], 1.0 / (cfg.d as f64).sqrt(), rng)?;
    for b in 0..cfg.n_blocks {
        init_transformer_block(ps, &format!("txt.blk{b}"), cfg.d, cfg.d_ff, rng)?;
    }
    init_linear(ps, "txt.out", cfg.d, cfg.d, rng)
}

/// Encode a flat (I, L, P) image batch into local (I, L, D) and global (I, D)
/// features; the global feature is the mean over the L local features.
pub fn encode_images<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    cfg: &EncoderConfig,
    data: &[S],
    i_count: usize,
    l: usize,
    p_raw: usize,
) -> Result<(NodeId, NodeId)> {
    if data.len() != i_count * l * p_raw {
        return Err(Error::Shape {
            op: "encode_images",
            detail: format!(
                "batch of {i_count} images with {l} patches x {p_raw} feats wants {} floats, got {}",
                i_count * l * p_raw,
                data.len()
            ),
        });
    }
    let x = g.constant(&[i_count, l, p_raw], data.to_vec())?;
    let mut e = linear_named(g, bound, "img.patch", x)?;
    let pos = bound.id("img.pos")?;
    e = g.add(e, pos)?;
    for b in 0..cfg.n_blocks {
        e = transformer_block(g, bound, &format!("img.blk{b}"), e, None, cfg.heads)?;
    }
    let local = linear_named(g, bound, "img.out", e)?;
    let global = g.mean(local, Some(1))?;
    Ok((local, global))
}

/// Encode a flat (T, M) token batch into local (T, M, D) and global (T, D)
/// features. Pad keys are masked out of attention, pad rows of the local
/// output are zeroed, and the global feature is the mean over non-pad
/// positions only — so outputs never depend on ids beneath the mask.
pub fn encode_texts<S: Scalar>(
    g: &mut Graph<S>,
    bound: &Bound,
    cfg: &EncoderConfig,
    tokens: &[usize],
    mask: &[bool],
    t_count: usize,
    m: usize,
) -> Result<(NodeId, NodeId)> {
    if tokens.len() != t_count * m || mask.len() != t_count * m {
        return Err(Error::Shape {
            op: "encode_texts",
            detail: format!(
                "batch of {t_count} sequences of length {m} wants {} ids, got {} (mask {})",
                t_count * m,
                tokens.len(),
                mask.len()
            ),
        });
    }
    let mut counts = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let n = mask[t * m..(t + 1) * m].iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::Input(format!("sequence {t} is all padding")));
        }
        counts.push(n);
    }
    let emb = bound.id("txt.emb")?;
    let mut e = g.gather(emb, tokens, &[t_count, m])?;
    let pos = bound.id("txt.pos")?;
    e = g.add(e, pos)?;
    // additive key mask, (T, 1, 1, M)
    let add_mask: Vec<S> = mask
        .iter()
        .map(|&b| if b { S::zero() } else { S::from_f64(MASKED_LOGIT) })
        .collect();
    let mask_node = g.constant(&[t_count, 1, 1, m], add_mask)?;
    for b in 0..cfg.n_blocks {
        e = transformer_block(g, bound, &format!("txt.blk{b}"), e, Some(mask_node), cfg.heads)?;
    }
    let raw = linear_named(g, bound, "txt.out", e)?;
    // zero pad rows, then divide each sum by its own non-pad count
    let keepf: Vec<S> = mask
        .iter()
        .map(|&b| if b { S::one() } else { S::zero() })
        .collect();
    let keep = g.constant(&[t_count, m, 1], keepf)?;
    let local = g.mul(raw, keep)?;
    let summed = g.sum(local, Some(1))?;
    let inv: Vec<S> = counts
        .iter()
        .map(|&c| S::one() / S::from_f64(c as f64))
        .collect();
    let inv_node = g.constant(&[t_count, 1], inv)?;
    let global = g.mul(summed, inv_node)?;
    Ok((local, global))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d: 8,
            heads: 2,
            n_blocks: 2,
            d_ff: 16,
        }
    }

    fn image_params(p_raw: usize, l: usize, seed: u64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_image_encoder(&mut ps, &cfg(), p_raw, l, &mut rng).unwrap();
        ps
    }

    fn text_params(vocab: usize, m: usize, seed: u64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_text_encoder(&mut ps, &cfg(), vocab, m, &mut rng).unwrap();
        ps
    }

    #[test]
    fn single_patch_global_equals_local() {
        let ps = image_params(3, 1, 1);
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let (local, global) =
            encode_images(&mut g, &b, &cfg(), &[0.5, -0.2, 1.0], 1, 1, 3).unwrap();
        assert_eq!(g.shape(local), &[1, 1, 8]);
        assert_eq!(g.shape(global), &[1, 8]);
        for j in 0..8 {
            assert!((g.value(local)[j] - g.value(global)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_get_identical_rows() {
        let ps = image_params(4, 4, 2);
        let one: Vec<f64> = (0..16).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let two: Vec<f64> = one.iter().chain(one.iter()).copied().collect();
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let (local, global) = encode_images(&mut g, &b, &cfg(), &two, 2, 4, 4).unwrap();
        let lv = g.value(local);
        let gv = g.value(global);
        assert_eq!(&lv[..32], &lv[32..]);
        assert_eq!(&gv[..8], &gv[8..]);
    }

    #[test]
    fn zeroed_final_projection_zeroes_outputs() {
        let mut ps = image_params(3, 2, 3);
        let out_w = ps.get_mut("img.out.w").unwrap();
        out_w.data.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let data: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (local, global) = encode_images(&mut g, &b, &cfg(), &data, 1, 2, 3).unwrap();
        assert!(g.value(local).iter().all(|&v| v == 0.0));
        assert!(g.value(global).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_pad_sequence_rejected() {
        let ps = text_params(10, 4, 4);
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let err = encode_texts(&mut g, &b, &cfg(), &[0, 0, 0, 0], &[false; 4], 1, 4).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn single_token_global_equals_its_local_row() {
        let ps = text_params(10, 4, 5);
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let mask = [true, false, false, false];
        let (local, global) = encode_texts(&mut g, &b, &cfg(), &[7, 0, 0, 0], &mask, 1, 4).unwrap();
        let lv = g.value(local);
        let gv = g.value(global);
        for j in 0..8 {
            assert!((lv[j] - gv[j]).abs() < 1e-12);
        }
        // pad rows are zeroed
        assert!(lv[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pad_tail_content_does_not_matter() {
        let ps = text_params(12, 5, 6);
        let mask = [true, true, true, false, false];
        let run = |tail: [usize; 2]| {
            let mut g = Graph::new();
            let b = ps.bind_frozen(&mut g).unwrap();
            let ids = [3, 9, 1, tail[0], tail[1]];
            let (local, global) = encode_texts(&mut g, &b, &cfg(), &ids, &mask, 1, 5).unwrap();
            (g.value(local).to_vec(), g.value(global).to_vec())
        };
        let (l1, g1) = run([0, 0]);
        let (l2, g2) = run([11, 4]);
        assert_eq!(l1, l2, "local features must ignore ids under the pad mask");
        assert_eq!(g1, g2);
    }

    #[test]
    fn masked_mean_matches_unpadded_recompute() {
        // same sentence encoded with and without trailing padding
        let ps = text_params(12, 6, 7);
        let mut g = Graph::new();
        let b = ps.bind_frozen(&mut g).unwrap();
        let mask6 = [true, true, true, true, false, false];
        let (_, g_padded) =
            encode_texts(&mut g, &b, &cfg(), &[2, 5, 8, 1, 0, 0], &mask6, 1, 6).unwrap();
        let padded = g.value(g_padded).to_vec();

        // rebuild positional table truncated to 4 so the unpadded run sees
        // identical per-position offsets
        let mut ps4: ParamSet<f64> = ParamSet::new();
        for (name, p) in ps.iter() {
            if name == "txt.pos" {
                ps4.insert(name, &[4, 8], p.data[..32].to_vec()).unwrap();
            } else {
                ps4.insert(name, &p.shape, p.data.clone()).unwrap();
            }
        }
        let mut g2 = Graph::new();
        let b2 = ps4.bind_frozen(&mut g2).unwrap();
        let (_, g_tight) =
            encode_texts(&mut g2, &b2, &cfg(), &[2, 5, 8, 1], &[true; 4], 1, 4).unwrap();
        let tight = g2.value(g_tight).to_vec();
        for (a, b) in padded.iter().zip(&tight) {
            assert!((a - b).abs() < 1e-9, "padded {a} vs unpadded {b}");
        }
    }

    #[test]
    fn gradient_reaches_every_encoder_parameter() {
        let ps = text_params(10, 4, 8);
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let mask = [true, true, true, false, true, true, false, false];
        let (local, global) =
            encode_texts(&mut g, &b, &cfg(), &[1, 2, 3, 0, 4, 5, 0, 0], &mask, 2, 4).unwrap();
        let l2 = g.mul(local, local).unwrap();
        let s1 = g.sum(l2, None).unwrap();
        let g2 = g.mul(global, global).unwrap();
        let s2 = g.sum(g2, None).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        for (name, &id) in b.iter() {
            let grad = g.grad(id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(grad.iter().any(|&v| v != 0.0), "all-zero grad for {name}");
        }
    }

    #[test]
    fn inconsistent_grids_rejected() {
        let a = PatchGrid::new(vec![0.0; 6], 2, 1, 3).unwrap();
        let b = PatchGrid::new(vec![0.0; 9], 3, 1, 3).unwrap();
        assert!(matches!(
            batch_grids(&[a, b]),
            Err(Error::Shape { op: "batch_grids", .. })
        ));
    }

    #[test]
    fn token_seq_pads_and_truncates() {
        let s = TokenSeq::from_ids(&[5, 6], 4).unwrap();
        assert_eq!(s.ids, vec![5, 6, 0, 0]);
        assert_eq!(s.mask, vec![true, true, false, false]);
        let t = TokenSeq::from_ids(&[1, 2, 3, 4, 5], 3).unwrap();
        assert_eq!(t.ids, vec![1, 2, 3]);
        assert_eq!(t.len_unpadded(), 3);
    }
}
