//! Shape manipulation: reshape, transpose, concat, slice, stack, and the
//! patchify rearrangements used by the latent codec.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{grad_target, record, unified_tape, Buffer, Elem, Tensor};

impl Tensor {
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.len() {
            return Err(TensorError::InvalidShape {
                what: format!(
                    "reshape {:?} -> {:?} changes element count",
                    self.shape(),
                    new_shape
                ),
            });
        }
        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(new_shape.to_vec(), self.to_vec())?);
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        for (g, y) in ga.iter_mut().zip(gy) {
                            *g += y;
                        }
                    });
                }
            })
        })
    }

    /// Swap the last two axes (rank >= 2).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(TensorError::InvalidShape {
                what: format!("transpose_last2 needs rank >= 2, got {:?}", self.shape()),
            });
        }
        let shape = self.shape();
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.to_vec();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);

        let src = self.data();
        let mut data = vec![0.0; self.len()];
        for o in 0..outer {
            let base = o * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(out_shape, data)?);
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        for o in 0..outer {
                            let base = o * r * c;
                            for i in 0..r {
                                for j in 0..c {
                                    ga[base + i * c + j] += gy[base + j * r + i];
                                }
                            }
                        }
                    });
                }
            })
        })
    }

    /// Contiguous slice `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_axis",
                index: axis,
                len: self.rank(),
            });
        }
        let shape = self.shape();
        if start >= end || end > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_axis",
                index: end,
                len: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let span = end - start;

        let src = self.data();
        let mut data = vec![0.0; outer * span * inner];
        for o in 0..outer {
            let s = (o * axis_len + start) * inner;
            let d = o * span * inner;
            data[d..d + span * inner].copy_from_slice(&src[s..s + span * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = span;

        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(out_shape, data)?);
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        for o in 0..outer {
                            let d = (o * axis_len + start) * inner;
                            let s = o * span * inner;
                            for i in 0..span * inner {
                                ga[d + i] += gy[s + i];
                            }
                        }
                    });
                }
            })
        })
    }

    /// `[C,H,W] -> [C*p*p, H/p, W/p]`: each p×p patch becomes depth.
    pub fn space_to_depth(&self, p: usize) -> Result<Tensor> {
        let (c, h, w) = rank3_dims(self, "space_to_depth")?;
        if h % p != 0 || w % p != 0 {
            return Err(TensorError::InvalidShape {
                what: format!("space_to_depth: {:?} not divisible by patch {p}", self.shape()),
            });
        }
        let (oh, ow) = (h / p, w / p);
        let out_shape = vec![c * p * p, oh, ow];
        permutation_op(self, out_shape, move |oidx| {
            // out[(c*p*p) index, oh, ow] -> input flat index
            let oc = oidx / (oh * ow);
            let rem = oidx % (oh * ow);
            let (oi, oj) = (rem / ow, rem % ow);
            let ci = oc / (p * p);
            let pij = oc % (p * p);
            let (pi, pj) = (pij / p, pij % p);
            (ci * h + oi * p + pi) * w + oj * p + pj
        })
    }

    /// Inverse of [`Tensor::space_to_depth`].
    pub fn depth_to_space(&self, p: usize) -> Result<Tensor> {
        let (cpp, oh, ow) = rank3_dims(self, "depth_to_space")?;
        if cpp % (p * p) != 0 {
            return Err(TensorError::InvalidShape {
                what: format!(
                    "depth_to_space: channel dim {cpp} not divisible by patch² {}",
                    p * p
                ),
            });
        }
        let c = cpp / (p * p);
        let (h, w) = (oh * p, ow * p);
        let out_shape = vec![c, h, w];
        permutation_op(self, out_shape, move |oidx| {
            let ci = oidx / (h * w);
            let rem = oidx % (h * w);
            let (i, j) = (rem / w, rem % w);
            let (oi, pi) = (i / p, i % p);
            let (oj, pj) = (j / p, j % p);
            ((ci * p * p + pi * p + pj) * oh + oi) * ow + oj
        })
    }
}

fn rank3_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(TensorError::InvalidShape {
            what: format!("{op} expects rank 3, got {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Element permutation: out[i] = x[map(i)]. Backward scatters through the
/// same map.
fn permutation_op(
    x: &Tensor,
    out_shape: Vec<usize>,
    map: impl Fn(usize) -> usize + Clone + 'static,
) -> Result<Tensor> {
    let src = x.data();
    let n = x.len();
    let data: Vec<Elem> = (0..n).map(|i| src[map(i)]).collect();
    let ta = grad_target(x);
    let ob = Rc::new(Buffer::new(out_shape, data)?);
    record(&[x], ob, move || {
        Box::new(move |gy, grads| {
            if let Some(id) = ta {
                grads.accumulate(id, n, |ga| {
                    for (i, g) in gy.iter().enumerate() {
                        ga[map(i)] += g;
                    }
                });
            }
        })
    })
}

/// Concatenate along `axis`. All other dimensions must agree.
pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
    assert!(!parts.is_empty(), "concat needs at least one tensor");
    let first = parts[0].shape().to_vec();
    if axis >= first.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "concat",
            index: axis,
            len: first.len(),
        });
    }
    let mut axis_total = 0;
    for t in parts {
        let s = t.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(&first)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.clone(),
                rhs: s.to_vec(),
            });
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.clone();
    out_shape[axis] = axis_total;

    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut offset = 0;
    let mut spans = Vec::with_capacity(parts.len());
    for t in parts {
        let span = t.shape()[axis];
        let src = t.data();
        for o in 0..outer {
            let d = (o * axis_total + offset) * inner;
            let s = o * span * inner;
            data[d..d + span * inner].copy_from_slice(&src[s..s + span * inner]);
        }
        spans.push((offset, span, grad_target(t), t.len()));
        offset += span;
    }

    let _ = unified_tape(parts.iter().map(|t| *t).collect::<Vec<_>>().as_slice())?;
    let refs: Vec<&Tensor> = parts.to_vec();
    let ob = Rc::new(Buffer::new(out_shape, data)?);
    record(&refs, ob, move || {
        Box::new(move |gy, grads| {
            for &(off, span, target, len) in &spans {
                if let Some(id) = target {
                    grads.accumulate(id, len, |ga| {
                        for o in 0..outer {
                            let s = (o * axis_total + off) * inner;
                            let d = o * span * inner;
                            for i in 0..span * inner {
                                ga[d + i] += gy[s + i];
                            }
                        }
                    });
                }
            }
        })
    })
}

/// Stack along a new leading axis: n tensors of shape `[d...]` -> `[n, d...]`.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    assert!(!parts.is_empty(), "stack needs at least one tensor");
    let inner_shape = parts[0].shape().to_vec();
    for t in parts {
        if t.shape() != inner_shape {
            return Err(TensorError::ShapeMismatch {
                op: "stack",
                lhs: inner_shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    let span: usize = inner_shape.iter().product();
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&inner_shape);
    let mut data = vec![0.0; span * parts.len()];
    let mut spans = Vec::with_capacity(parts.len());
    for (idx, t) in parts.iter().enumerate() {
        data[idx * span..(idx + 1) * span].copy_from_slice(t.data());
        spans.push((idx, grad_target(t)));
    }
    let refs: Vec<&Tensor> = parts.to_vec();
    let ob = Rc::new(Buffer::new(out_shape, data)?);
    record(&refs, ob, move || {
        Box::new(move |gy, grads| {
            for &(idx, target) in &spans {
                if let Some(id) = target {
                    grads.accumulate(id, span, |ga| {
                        for i in 0..span {
                            ga[i] += gy[idx * span + i];
                        }
                    });
                }
            }
        })
    })
}
