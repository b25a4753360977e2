//! Row-major shape and stride arithmetic shared by the op implementations.

use crate::error::{Error, Result};

pub fn num_elems(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides. A rank-0 (scalar) shape yields an empty vector.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Numpy trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::Shape {
                op,
                detail: format!("cannot broadcast {a:?} with {b:?}"),
            });
        }
    }
    Ok(out)
}

/// Strides for reading `shape` as if it were broadcast to `target`:
/// size-1 dims and missing leading dims get stride 0.
///
/// Caller must have validated that the broadcast is legal.
pub fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let real = strides_of(shape);
    let lead = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..shape.len() {
        out[lead + i] = if shape[i] == 1 { 0 } else { real[i] };
    }
    out
}

/// Visit every position of `shape` in row-major order, handing `f` the linear
/// offsets induced by each of the `N` stride vectors. Zero strides express
/// broadcasting, permuted strides express transposition. The multi-index is
/// advanced by carry so there is no per-element div/mod.
pub fn zip_offsets<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let total = num_elems(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = [0usize; N];
    for step in 0..total {
        f(off);
        if step + 1 == total {
            break;
        }
        for d in (0..nd).rev() {
            idx[d] += 1;
            for k in 0..N {
                off[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            for k in 0..N {
                off[k] -= shape[d] * strides[k][d];
            }
        }
    }
}

/// Split a shape at `axis` into (outer, axis_len, inner) extents so axis-wise
/// ops can walk `outer*inner` independent lanes.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, alen, inner)
}
