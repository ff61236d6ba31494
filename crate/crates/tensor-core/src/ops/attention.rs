//! Fused scaled dot-product attention with optional key masking.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::{grad_target, record, Buffer, Elem, Tensor};

/// softmax(q·kᵀ/√D + log(mask))·v.
///
/// Shapes: q `[B,Lq,D]`, k/v `[B,Lk,D]`, mask `[B,Lk]` of 0/1. Rank-2
/// inputs are treated as batch size 1 (mask then `[Lk]`); the output rank
/// follows q. A fully masked query row yields a zero output row, which is
/// what lets an absent text prompt contribute nothing downstream. The mask
/// is data, not a differentiable input.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor> {
    let rank2 = q.rank() == 2;
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let dims_ok = match (qs.len(), ks.len(), vs.len()) {
        (3, 3, 3) => qs[0] == ks[0] && ks == vs && qs[2] == ks[2],
        (2, 2, 2) => ks == vs && qs[1] == ks[1],
        _ => false,
    };
    if !dims_ok {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let (b, lq, d) = if rank2 {
        (1, qs[0], qs[1])
    } else {
        (qs[0], qs[1], qs[2])
    };
    let lk = if rank2 { ks[0] } else { ks[1] };
    if let Some(m) = mask {
        let want: &[usize] = if rank2 { &[lk] } else { &[b, lk] };
        if m.shape() != want {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                lhs: m.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
    }

    let scale = 1.0 / (d as Elem).sqrt();
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let md = mask.map(|m| m.data());

    let mut out = vec![0.0; b * lq * d];
    let mut weights = vec![0.0; b * lq * lk];
    let mut scores = vec![0.0; lk];
    for bi in 0..b {
        let mrow = md.map(|m| &m[bi * lk..(bi + 1) * lk]);
        for i in 0..lq {
            let qrow = &qd[(bi * lq + i) * d..(bi * lq + i + 1) * d];
            let mut mx = Elem::NEG_INFINITY;
            let mut any = false;
            for j in 0..lk {
                let keep = mrow.map_or(true, |m| m[j] != 0.0);
                if keep {
                    let krow = &kd[(bi * lk + j) * d..(bi * lk + j + 1) * d];
                    let mut s = 0.0;
                    for t in 0..d {
                        s += qrow[t] * krow[t];
                    }
                    scores[j] = s * scale;
                    mx = mx.max(scores[j]);
                    any = true;
                } else {
                    scores[j] = Elem::NEG_INFINITY;
                }
            }
            let wrow = &mut weights[(bi * lq + i) * lk..(bi * lq + i + 1) * lk];
            if !any {
                wrow.fill(0.0);
                continue; // output row stays zero
            }
            let mut z = 0.0;
            for j in 0..lk {
                let e = if scores[j].is_finite() {
                    (scores[j] - mx).exp()
                } else {
                    0.0
                };
                wrow[j] = e;
                z += e;
            }
            let orow = &mut out[(bi * lq + i) * d..(bi * lq + i + 1) * d];
            for j in 0..lk {
                wrow[j] /= z;
                if wrow[j] != 0.0 {
                    let vrow = &vd[(bi * lk + j) * d..(bi * lk + j + 1) * d];
                    for t in 0..d {
                        orow[t] += wrow[j] * vrow[t];
                    }
                }
            }
        }
    }

    let qb = q.buf().clone();
    let kb = k.buf().clone();
    let vb = v.buf().clone();
    let (tq, tk, tv) = (grad_target(q), grad_target(k), grad_target(v));
    let wshared = Rc::new(weights);
    let ob = Rc::new(Buffer::new(qs.to_vec(), out)?);
    record(&[q, k, v], ob, move || {
        Box::new(move |gy, grads| {
            let w = wshared.as_slice();
            let qd = qb.data();
            let kd = kb.data();
            let vd = vb.data();
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dw = vec![0.0; lk];
            for bi in 0..b {
                for i in 0..lq {
                    let row = (bi * lq + i) * lk;
                    let grow = &gy[(bi * lq + i) * d..(bi * lq + i + 1) * d];
                    let qrow = &qd[(bi * lq + i) * d..(bi * lq + i + 1) * d];
                    // dv_j += w_j * g ; dw_j = g . v_j
                    let mut dot = 0.0;
                    for j in 0..lk {
                        let wj = w[row + j];
                        let vrow = &vd[(bi * lk + j) * d..(bi * lk + j + 1) * d];
                        let mut s = 0.0;
                        for t in 0..d {
                            s += grow[t] * vrow[t];
                            dv[(bi * lk + j) * d + t] += wj * grow[t];
                        }
                        dw[j] = s;
                        dot += wj * s;
                    }
                    // softmax backward, then through the scaled scores
                    for j in 0..lk {
                        let wj = w[row + j];
                        if wj == 0.0 {
                            continue;
                        }
                        let ds = wj * (dw[j] - dot) * scale;
                        let krow = &kd[(bi * lk + j) * d..(bi * lk + j + 1) * d];
                        for t in 0..d {
                            dq[(bi * lq + i) * d + t] += ds * krow[t];
                            dk[(bi * lk + j) * d + t] += ds * qrow[t];
                        }
                    }
                }
            }
            if let Some(id) = tq {
                grads.accumulate(id, dq.len(), |g| {
                    for (gi, di) in g.iter_mut().zip(&dq) {
                        *gi += di;
                    }
                });
            }
            if let Some(id) = tk {
                grads.accumulate(id, dk.len(), |g| {
                    for (gi, di) in g.iter_mut().zip(&dk) {
                        *gi += di;
                    }
                });
            }
            if let Some(id) = tv {
                grads.accumulate(id, dv.len(), |g| {
                    for (gi, di) in g.iter_mut().zip(&dv) {
                        *gi += di;
                    }
                });
            }
        })
    })
}
