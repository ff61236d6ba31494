//! 2-D convolution (cross-correlation semantics) and nearest-neighbor
//! upsampling.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{grad_target, record, Buffer, Elem, Tensor};

/// Copy one [H,W] image into a zero-initialized [H+2p, W+2p] buffer.
fn pad_image(src: &[Elem], h: usize, w: usize, p: usize, dst: &mut [Elem]) {
    let wp = w + 2 * p;
    dst.fill(0.0);
    for i in 0..h {
        let d = (i + p) * wp + p;
        dst[d..d + w].copy_from_slice(&src[i * w..(i + 1) * w]);
    }
}

/// out_row[j] += w * x_row[j*stride], exact-length slices so the stride-1
/// path vectorizes.
#[inline]
fn saxpy_gather(out: &mut [Elem], x: &[Elem], w: Elem, stride: usize) {
    if stride == 1 {
        let x = &x[..out.len()];
        for (o, &v) in out.iter_mut().zip(x) {
            *o += w * v;
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * x[j * stride];
        }
    }
}

/// x_row[j*stride] += w * g_row[j].
#[inline]
fn saxpy_scatter(x: &mut [Elem], g: &[Elem], w: Elem, stride: usize) {
    if stride == 1 {
        for (o, &v) in x[..g.len()].iter_mut().zip(g) {
            *o += w * v;
        }
    } else {
        for (j, &v) in g.iter().enumerate() {
            x[j * stride] += w * v;
        }
    }
}

/// dot(g_row, x_row strided).
#[inline]
fn dot_gather(g: &[Elem], x: &[Elem], stride: usize) -> Elem {
    if stride == 1 {
        g.iter().zip(&x[..g.len()]).map(|(a, b)| a * b).sum()
    } else {
        g.iter()
            .enumerate()
            .map(|(j, &v)| v * x[j * stride])
            .sum()
    }
}

impl Tensor {
    /// Cross-correlation of `self[B,C,H,W]` with `weight[F,C,kh,kw]`.
    /// Output spatial size is `floor((H + 2*pad - kh)/stride) + 1`.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let [bs, ic, h, w] = [
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        ];
        let [fc, _, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if kh > hp || kw > wp {
            return Err(TensorError::KernelTooLarge {
                kernel: vec![kh, kw],
                padded: vec![hp, wp],
            });
        }
        let oh = (hp - kh) / stride + 1;
        let ow = (wp - kw) / stride + 1;

        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; bs * fc * oh * ow];
        let mut xp = vec![0.0; hp * wp];
        for b in 0..bs {
            for c in 0..ic {
                pad_image(&x[(b * ic + c) * h * w..(b * ic + c + 1) * h * w], h, w, pad, &mut xp);
                for f in 0..fc {
                    let wbase = (f * ic + c) * kh * kw;
                    let obase = (b * fc + f) * oh * ow;
                    for oi in 0..oh {
                        let orow = &mut out[obase + oi * ow..obase + (oi + 1) * ow];
                        for ki in 0..kh {
                            let rbase = (oi * stride + ki) * wp;
                            for kj in 0..kw {
                                saxpy_gather(
                                    orow,
                                    &xp[rbase + kj..],
                                    wd[wbase + ki * kw + kj],
                                    stride,
                                );
                            }
                        }
                    }
                }
            }
        }

        let xb = self.buf().clone();
        let wb = weight.buf().clone();
        let tx = grad_target(self);
        let tw = grad_target(weight);
        let ob = Rc::new(Buffer::new(vec![bs, fc, oh, ow], out)?);
        record(&[self, weight], ob, move || {
            Box::new(move |gy, grads| {
                let x = xb.data();
                let wd = wb.data();
                // dX: scatter gy back through the kernel, per padded image.
                if let Some(id) = tx {
                    grads.accumulate(id, xb.len(), |gx| {
                        let mut gxp = vec![0.0; hp * wp];
                        for b in 0..bs {
                            for c in 0..ic {
                                gxp.fill(0.0);
                                for f in 0..fc {
                                    let wbase = (f * ic + c) * kh * kw;
                                    let obase = (b * fc + f) * oh * ow;
                                    for oi in 0..oh {
                                        let grow = &gy[obase + oi * ow..obase + (oi + 1) * ow];
                                        for ki in 0..kh {
                                            let rbase = (oi * stride + ki) * wp;
                                            for kj in 0..kw {
                                                saxpy_scatter(
                                                    &mut gxp[rbase + kj..],
                                                    grow,
                                                    wd[wbase + ki * kw + kj],
                                                    stride,
                                                );
                                            }
                                        }
                                    }
                                }
                                // crop padding back off
                                let gbase = (b * ic + c) * h * w;
                                for i in 0..h {
                                    let s = (i + pad) * wp + pad;
                                    let grow = &gxp[s..s + w];
                                    let gxr = &mut gx[gbase + i * w..gbase + (i + 1) * w];
                                    for (o, &v) in gxr.iter_mut().zip(grow) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                    });
                }
                // dW: correlate input with gy.
                if let Some(id) = tw {
                    grads.accumulate(id, wb.len(), |gw| {
                        let mut xp = vec![0.0; hp * wp];
                        for b in 0..bs {
                            for c in 0..ic {
                                pad_image(
                                    &x[(b * ic + c) * h * w..(b * ic + c + 1) * h * w],
                                    h,
                                    w,
                                    pad,
                                    &mut xp,
                                );
                                for f in 0..fc {
                                    let wbase = (f * ic + c) * kh * kw;
                                    let obase = (b * fc + f) * oh * ow;
                                    for oi in 0..oh {
                                        let grow = &gy[obase + oi * ow..obase + (oi + 1) * ow];
                                        for ki in 0..kh {
                                            let rbase = (oi * stride + ki) * wp;
                                            for kj in 0..kw {
                                                gw[wbase + ki * kw + kj] +=
                                                    dot_gather(grow, &xp[rbase + kj..], stride);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            })
        })
    }

    /// Nearest-neighbor 2x upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(TensorError::InvalidShape {
                what: format!("upsample_nearest2x expects rank 4, got {:?}", self.shape()),
            });
        }
        let [bs, c, h, w] = [
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        ];
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data();
        let mut out = vec![0.0; bs * c * oh * ow];
        for bc in 0..bs * c {
            for i in 0..h {
                let srow = &src[bc * h * w + i * w..bc * h * w + (i + 1) * w];
                for di in 0..2 {
                    let d = bc * oh * ow + (2 * i + di) * ow;
                    for (j, &v) in srow.iter().enumerate() {
                        out[d + 2 * j] = v;
                        out[d + 2 * j + 1] = v;
                    }
                }
            }
        }
        let ta = grad_target(self);
        let n = self.len();
        let ob = Rc::new(Buffer::new(vec![bs, c, oh, ow], out)?);
        record(&[self], ob, move || {
            Box::new(move |gy, grads| {
                if let Some(id) = ta {
                    grads.accumulate(id, n, |gx| {
                        for bc in 0..bs * c {
                            for i in 0..h {
                                for di in 0..2 {
                                    let s = bc * oh * ow + (2 * i + di) * ow;
                                    let d = bc * h * w + i * w;
                                    for j in 0..w {
                                        gx[d + j] += gy[s + 2 * j] + gy[s + 2 * j + 1];
                                    }
                                }
                            }
                        }
                    });
                }
            })
        })
    }
}
