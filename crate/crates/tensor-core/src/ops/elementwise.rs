//! Broadcasting binary arithmetic and unary maps.
//!
//! Binary ops take fast chunked paths for the structured broadcasts that
//! dominate network code (bias rows, per-channel scalars, keepdim
//! reductions); everything else falls back to a general odometer walk.

use std::rc::Rc;

use crate::error::Result;
use crate::ops::{broadcast_shape, for_each_broadcast};
use crate::tensor::{grad_target, record, Buffer, Elem, Tensor};

/// Decomposition of a broadcast operand against the output shape:
/// `flat_src(i)` walks chunks of `inner` within runs of `blen`, repeated
/// `outer` times. Requires the padded source dims to be 1 outside one
/// contiguous run that matches the output dims exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ChunkPlan {
    outer: usize,
    blen: usize,
    inner: usize,
}

fn chunk_plan(out_shape: &[usize], src_shape: &[usize]) -> Option<ChunkPlan> {
    let rank = out_shape.len();
    let mut padded = vec![1usize; rank];
    let offset = rank - src_shape.len();
    padded[offset..].copy_from_slice(src_shape);

    let lo = padded.iter().position(|&d| d > 1);
    let (lo, hi) = match lo {
        None => {
            // scalar source: one value over everything
            let n: usize = out_shape.iter().product();
            return Some(ChunkPlan {
                outer: 1,
                blen: 1,
                inner: n,
            });
        }
        Some(lo) => (lo, padded.iter().rposition(|&d| d > 1).unwrap()),
    };
    for i in lo..=hi {
        if padded[i] != out_shape[i] {
            return None;
        }
    }
    Some(ChunkPlan {
        outer: out_shape[..lo].iter().product(),
        blen: out_shape[lo..=hi].iter().product(),
        inner: out_shape[hi + 1..].iter().product(),
    })
}

/// Binary elementwise op with trailing-dimension broadcasting.
/// `dfa`/`dfb` are local derivatives `(a, b, y) -> ∂y/∂a` (resp. `∂y/∂b`).
fn binary_op(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    fwd: fn(Elem, Elem) -> Elem,
    dfa: fn(Elem, Elem, Elem) -> Elem,
    dfb: fn(Elem, Elem, Elem) -> Elem,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let mut data = vec![0.0; numel];

    let a_full = a.shape() == out_shape.as_slice();
    let b_full = b.shape() == out_shape.as_slice();
    let plan_b = if a_full && !b_full {
        chunk_plan(&out_shape, b.shape())
    } else {
        None
    };
    let plan_a = if b_full && !a_full {
        chunk_plan(&out_shape, a.shape())
    } else {
        None
    };

    {
        let (ad, bd) = (a.data(), b.data());
        if a_full && b_full {
            for ((o, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
                *o = fwd(x, y);
            }
        } else if let Some(p) = plan_b {
            chunked_forward(&mut data, ad, bd, p, |x, y| fwd(x, y));
        } else if let Some(p) = plan_a {
            chunked_forward(&mut data, bd, ad, p, |y, x| fwd(x, y));
        } else {
            for_each_broadcast(&out_shape, a.shape(), b.shape(), |i, ai, bi| {
                data[i] = fwd(ad[ai], bd[bi]);
            });
        }
    }

    let ab = a.buf().clone();
    let bb = b.buf().clone();
    let ta = grad_target(a);
    let tb = grad_target(b);
    let out = Rc::new(Buffer::new(out_shape.clone(), data)?);
    record(&[a, b], out, move || {
        Box::new(move |gy, grads| {
            let (ad, bd) = (ab.data(), bb.data());
            if a_full && b_full {
                if let Some(id) = ta {
                    grads.accumulate(id, ad.len(), |ga| {
                        for i in 0..gy.len() {
                            ga[i] += gy[i] * dfa(ad[i], bd[i], fwd(ad[i], bd[i]));
                        }
                    });
                }
                if let Some(id) = tb {
                    grads.accumulate(id, bd.len(), |gb| {
                        for i in 0..gy.len() {
                            gb[i] += gy[i] * dfb(ad[i], bd[i], fwd(ad[i], bd[i]));
                        }
                    });
                }
            } else if let Some(p) = plan_b {
                if let Some(id) = ta {
                    grads.accumulate(id, ad.len(), |ga| {
                        chunked_grad_full(ga, gy, ad, bd, p, |x, y| dfa(x, y, fwd(x, y)));
                    });
                }
                if let Some(id) = tb {
                    grads.accumulate(id, bd.len(), |gb| {
                        chunked_grad_small(gb, gy, ad, bd, p, |x, y| dfb(x, y, fwd(x, y)));
                    });
                }
            } else if let Some(p) = plan_a {
                if let Some(id) = tb {
                    grads.accumulate(id, bd.len(), |gb| {
                        chunked_grad_full(gb, gy, bd, ad, p, |y, x| dfb(x, y, fwd(x, y)));
                    });
                }
                if let Some(id) = ta {
                    grads.accumulate(id, ad.len(), |ga| {
                        chunked_grad_small(ga, gy, bd, ad, p, |y, x| dfa(x, y, fwd(x, y)));
                    });
                }
            } else {
                if let Some(id) = ta {
                    grads.accumulate(id, ad.len(), |ga| {
                        for_each_broadcast(&out_shape, ab.shape(), bb.shape(), |i, ai, bi| {
                            ga[ai] += gy[i] * dfa(ad[ai], bd[bi], fwd(ad[ai], bd[bi]));
                        });
                    });
                }
                if let Some(id) = tb {
                    grads.accumulate(id, bd.len(), |gb| {
                        for_each_broadcast(&out_shape, ab.shape(), bb.shape(), |i, ai, bi| {
                            gb[bi] += gy[i] * dfb(ad[ai], bd[bi], fwd(ad[ai], bd[bi]));
                        });
                    });
                }
            }
        })
    })
}

/// out[i] = f(full[i], small[plan index]) with sequential small access.
fn chunked_forward(
    out: &mut [Elem],
    full: &[Elem],
    small: &[Elem],
    p: ChunkPlan,
    f: impl Fn(Elem, Elem) -> Elem,
) {
    let chunk = p.blen * p.inner;
    for o in 0..p.outer {
        let base = o * chunk;
        if p.inner == 1 {
            let orow = &mut out[base..base + p.blen];
            let frow = &full[base..base + p.blen];
            for ((dst, &fv), &sv) in orow.iter_mut().zip(frow).zip(small) {
                *dst = f(fv, sv);
            }
        } else {
            for bi in 0..p.blen {
                let sv = small[bi];
                let s = base + bi * p.inner;
                let orow = &mut out[s..s + p.inner];
                let frow = &full[s..s + p.inner];
                for (dst, &fv) in orow.iter_mut().zip(frow) {
                    *dst = f(fv, sv);
                }
            }
        }
    }
}

/// Gradient into the full-shaped operand: g_full[i] += gy[i]·df.
fn chunked_grad_full(
    g: &mut [Elem],
    gy: &[Elem],
    full: &[Elem],
    small: &[Elem],
    p: ChunkPlan,
    df: impl Fn(Elem, Elem) -> Elem,
) {
    let chunk = p.blen * p.inner;
    for o in 0..p.outer {
        let base = o * chunk;
        if p.inner == 1 {
            for bi in 0..p.blen {
                let i = base + bi;
                g[i] += gy[i] * df(full[i], small[bi]);
            }
        } else {
            for bi in 0..p.blen {
                let sv = small[bi];
                let s = base + bi * p.inner;
                let grow = &mut g[s..s + p.inner];
                let frow = &full[s..s + p.inner];
                let yrow = &gy[s..s + p.inner];
                for ((dst, &fv), &gv) in grow.iter_mut().zip(frow).zip(yrow) {
                    *dst += gv * df(fv, sv);
                }
            }
        }
    }
}

/// Gradient into the broadcast operand: g_small[bi] += Σ gy·df over the
/// positions that share it.
fn chunked_grad_small(
    g: &mut [Elem],
    gy: &[Elem],
    full: &[Elem],
    small: &[Elem],
    p: ChunkPlan,
    df: impl Fn(Elem, Elem) -> Elem,
) {
    let chunk = p.blen * p.inner;
    for o in 0..p.outer {
        let base = o * chunk;
        if p.inner == 1 {
            for bi in 0..p.blen {
                let i = base + bi;
                g[bi] += gy[i] * df(full[i], small[bi]);
            }
        } else {
            for bi in 0..p.blen {
                let sv = small[bi];
                let s = base + bi * p.inner;
                let frow = &full[s..s + p.inner];
                let yrow = &gy[s..s + p.inner];
                let mut acc = 0.0;
                for (&fv, &gv) in frow.iter().zip(yrow) {
                    acc += gv * df(fv, sv);
                }
                g[bi] += acc;
            }
        }
    }
}

/// Unary elementwise op. `df(x, y) -> dy/dx`.
pub(crate) fn unary_op<D>(a: &Tensor, fwd: impl Fn(Elem) -> Elem, df: D) -> Tensor
where
    D: Fn(Elem, Elem) -> Elem + 'static,
{
    let data: Vec<Elem> = a.data().iter().map(|&x| fwd(x)).collect();
    let ab = a.buf().clone();
    let ob = Rc::new(Buffer::new(a.shape().to_vec(), data).unwrap());
    let oc = ob.clone();
    let ta = grad_target(a);
    record(&[a], ob, move || {
        Box::new(move |gy, grads| {
            if let Some(id) = ta {
                grads.accumulate(id, ab.len(), |ga| {
                    let ad = ab.data();
                    let od = oc.data();
                    for i in 0..gy.len() {
                        ga[i] += gy[i] * df(ad[i], od[i]);
                    }
                });
            }
        })
    })
    .expect("unary op cannot mismatch tapes")
}

fn sigmoid_scalar(x: Elem) -> Elem {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("add", self, rhs, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("sub", self, rhs, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op("mul", self, rhs, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_op(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b, _| 1.0 / b,
            |_, b, y| -y / b,
        )
    }

    pub fn neg(&self) -> Tensor {
        unary_op(self, |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary_op(self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary_op(self, |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary_op(self, |x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary_op(self, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        unary_op(
            self,
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Tensor {
        unary_op(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        unary_op(self, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn abs(&self) -> Tensor {
        unary_op(
            self,
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    /// Elementwise power with a constant exponent. `p == 0` is the constant
    /// map to one (zero gradient everywhere, including at x = 0).
    pub fn pow_scalar(&self, p: Elem) -> Tensor {
        if p == 0.0 {
            return unary_op(self, |_| 1.0, |_, _| 0.0);
        }
        if p == 2.0 {
            return unary_op(self, |x| x * x, |x, _| 2.0 * x);
        }
        unary_op(self, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn scale(&self, c: Elem) -> Tensor {
        unary_op(self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: Elem) -> Tensor {
        unary_op(self, move |x| x + c, |_, _| 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_plans() {
        // bias row: [rows, D] + [D]
        assert_eq!(
            chunk_plan(&[5, 3], &[3]),
            Some(ChunkPlan {
                outer: 5,
                blen: 3,
                inner: 1
            })
        );
        // per-channel: [B,C,H,W] op [C,1,1]
        assert_eq!(
            chunk_plan(&[2, 4, 8, 8], &[4, 1, 1]),
            Some(ChunkPlan {
                outer: 2,
                blen: 4,
                inner: 64
            })
        );
        // keepdim mean: [B,C,HW] op [B,C,1]
        assert_eq!(
            chunk_plan(&[2, 4, 64], &[2, 4, 1]),
            Some(ChunkPlan {
                outer: 1,
                blen: 8,
                inner: 64
            })
        );
        // scalar
        assert_eq!(
            chunk_plan(&[3, 3], &[1]),
            Some(ChunkPlan {
                outer: 1,
                blen: 1,
                inner: 9
            })
        );
        // internal 1 that does not match: [B,1,D] against [B,C,D]
        assert_eq!(chunk_plan(&[2, 3, 4], &[2, 1, 4]), None);
    }
}
