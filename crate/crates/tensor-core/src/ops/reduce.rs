//! Reductions and softmax over the last axis.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{grad_target, record, Buffer, Elem, Tensor};

impl Tensor {
    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let s: Elem = self.data().iter().sum();
        let ta = grad_target(self);
        let n = self.len();
        let out = Rc::new(Buffer::new(vec![1], vec![s]).unwrap());
        record(&[self], out, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        for g in ga.iter_mut() {
                            *g += gy[0];
                        }
                    });
                }
            })
        })
        .expect("single input")
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as Elem)
    }

    /// Sum along one axis. With `keepdim` the axis stays with length 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(TensorError::IndexOutOfRange {
                op: "sum_axis",
                index: axis,
                len: self.rank(),
            });
        }
        let shape = self.shape();
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let src = self.data();
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let ta = grad_target(self);
        let n = self.len();
        let out = Rc::new(Buffer::new(out_shape, data)?);
        record(&[self], out, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        for o in 0..outer {
                            for a in 0..axis_len {
                                let base = (o * axis_len + a) * inner;
                                let g = &gy[o * inner..(o + 1) * inner];
                                for i in 0..inner {
                                    ga[base + i] += g[i];
                                }
                            }
                        }
                    });
                }
            })
        })
    }

    /// Mean along one axis.
    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape()[axis] as Elem;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let width = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.len() / width;
        let src = self.data();
        let mut data = vec![0.0; self.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let out = &mut data[r * width..(r + 1) * width];
            softmax_row(row, out);
        }
        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(shape, data).unwrap());
        let oc = ob.clone();
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        let y = oc.data();
                        for r in 0..rows {
                            let lo = r * width;
                            let hi = lo + width;
                            let dot: Elem =
                                (lo..hi).map(|i| gy[i] * y[i]).sum();
                            for i in lo..hi {
                                ga[i] += y[i] * (gy[i] - dot);
                            }
                        }
                    });
                }
            })
        })
        .expect("single input")
    }

    /// log(softmax) over the last axis, stable via log-sum-exp.
    pub fn log_softmax_last(&self) -> Tensor {
        let shape = self.shape().to_vec();
        let width = *shape.last().expect("log_softmax needs rank >= 1");
        let rows = self.len() / width;
        let src = self.data();
        let mut data = vec![0.0; self.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let m = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<Elem>().ln();
            for (o, &x) in data[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(shape, data).unwrap());
        let oc = ob.clone();
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |ga| {
                        let logp = oc.data();
                        for r in 0..rows {
                            let lo = r * width;
                            let hi = lo + width;
                            let gsum: Elem = gy[lo..hi].iter().sum();
                            for i in lo..hi {
                                ga[i] += gy[i] - logp[i].exp() * gsum;
                            }
                        }
                    });
                }
            })
        })
        .expect("single input")
    }
}

/// Stable softmax of one row into `out`.
pub(crate) fn softmax_row(row: &[Elem], out: &mut [Elem]) {
    let m = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
