//! Operator set: elementwise arithmetic, matmul, conv2d, attention,
//! reductions, and shape manipulation. Every op has a hand-derived
//! backward that the gradcheck suite validates against finite differences.

mod attention;
mod conv;
mod elementwise;
mod matmul;
mod reduce;
mod shape_ops;

pub use attention::scaled_dot_attention;
pub use shape_ops::{concat, stack};

use crate::error::{Result, TensorError};

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for from_right in 0..rank {
        let da = dim_from_right(a, from_right);
        let db = dim_from_right(b, from_right);
        out[rank - 1 - from_right] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::NotBroadcastable {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], offset_from_right: usize) -> usize {
    if offset_from_right < shape.len() {
        shape[shape.len() - 1 - offset_from_right]
    } else {
        1
    }
}

/// Broadcast-aware strides: stride 0 on broadcast axes, shape right-aligned
/// and padded to `rank`.
pub(crate) fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let native = strides(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { native[i] };
    }
    out
}

/// Walk every coordinate of `out_shape`, yielding flat indices into the two
/// broadcast inputs. `f(out_idx, a_idx, b_idx)`.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let mut coords = vec![0usize; rank];
    let mut ai = 0usize;
    let mut bi = 0usize;
    for i in 0..numel {
        f(i, ai, bi);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

