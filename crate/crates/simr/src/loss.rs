//! Bidirectional InfoNCE. Each direction owns a square similarity matrix
//! with matched pairs on the diagonal and pays two cross-entropy terms on
//! it: one against the row softmax and one against the column softmax, so a
//! uniform matrix of size n costs 2 log n per direction. The total is the
//! sum over both directions' matrices.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_t2i: NodeId,
    pub l_i2t: NodeId,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub l_t2i: f64,
    pub l_i2t: f64,
    pub total: f64,
    pub batch_size: usize,
}

fn square_size<S: Scalar>(g: &Graph<S>, s: NodeId) -> Result<usize> {
    let sh = g.shape(s);
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::Contract(format!(
            "paired contrastive loss needs a square similarity matrix, got {sh:?}"
        )));
    }
    Ok(sh[0])
}

/// mean_i of [-log rowsoftmax(S)[i,i] - log colsoftmax(S)[i,i]].
pub fn infonce_dir<S: Scalar>(g: &mut Graph<S>, s: NodeId) -> Result<NodeId> {
    let n = square_size(g, s)?;
    let mut eye = vec![S::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = S::one();
    }
    let eye = g.constant(&[n, n], eye)?;
    let mut terms = Vec::with_capacity(2);
    for axis in [1usize, 0] {
        let logp = g.log_softmax(s, axis)?;
        let diag = g.mul(logp, eye)?;
        let tot = g.sum(diag, None)?;
        terms.push(g.scalar_mul(tot, -1.0 / n as f64)?);
    }
    g.add(terms[0], terms[1])
}

/// Both directions plus their sum. `s_t2i` has texts on rows, `s_i2t`
/// images on rows; they must agree on the batch size.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, s_t2i: NodeId, s_i2t: NodeId) -> Result<LossNodes> {
    let n_t = square_size(g, s_t2i)?;
    let n_i = square_size(g, s_i2t)?;
    if n_t != n_i {
        return Err(Error::Contract(format!(
            "directions disagree on batch size: {n_t} vs {n_i}"
        )));
    }
    let l_t2i = infonce_dir(g, s_t2i)?;
    let l_i2t = infonce_dir(g, s_i2t)?;
    let total = g.add(l_t2i, l_i2t)?;
    Ok(LossNodes { l_t2i, l_i2t, total })
}

impl LossNodes {
    pub fn read<S: Scalar>(&self, g: &Graph<S>, batch_size: usize) -> LossBreakdown {
        LossBreakdown {
            l_t2i: g.scalar_value(self.l_t2i).to_f64(),
            l_i2t: g.scalar_value(self.l_i2t).to_f64(),
            total: g.scalar_value(self.total).to_f64(),
            batch_size,
        }
    }
}
