//! 2-D matrix product.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{grad_target, record, Buffer, Elem, Tensor};

/// Raw row-major product: a[m,k] * b[k,n] -> c[m,n], accumulated into `c`.
fn matmul_into(a: &[Elem], b: &[Elem], c: &mut [Elem], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

impl Tensor {
    /// `self[m,k] @ rhs[k,n] -> [m,n]`. Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let mut data = vec![0.0; m * n];
        matmul_into(self.data(), rhs.data(), &mut data, m, k, n);

        let ab = self.buf().clone();
        let bb = rhs.buf().clone();
        let ta = grad_target(self);
        let tb = grad_target(rhs);
        let out = Rc::new(Buffer::new(vec![m, n], data)?);
        record(&[self, rhs], out, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, m * k, |ga| {
                        // dA[i,p] = sum_j gy[i,j] * B[p,j]
                        let b = bb.data();
                        for i in 0..m {
                            let gr = &gy[i * n..(i + 1) * n];
                            let gar = &mut ga[i * k..(i + 1) * k];
                            for p in 0..k {
                                let br = &b[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gr[j] * br[j];
                                }
                                gar[p] += s;
                            }
                        }
                    });
                }
                if let Some(id) = tb {
                    grads.accumulate(id, k * n, |gb| {
                        // dB[p,j] = sum_i A[i,p] * gy[i,j]
                        let a = ab.data();
                        for i in 0..m {
                            let gr = &gy[i * n..(i + 1) * n];
                            let ar = &a[i * k..(i + 1) * k];
                            for (p, &aip) in ar.iter().enumerate() {
                                let gbr = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbr[j] += aip * gr[j];
                                }
                            }
                        }
                    });
                }
            })
        })
    }
}
