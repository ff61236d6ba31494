//! Central-finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tensor::{Elem, Tape, Tensor};

pub struct GradcheckOpts {
    /// Base perturbation; per-coordinate step is `step * (1 + |x|)`.
    pub step: Elem,
    /// Cap on checked coordinates per input (seeded subsample); None = all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        GradcheckOpts {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub max_rel_err: Elem,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Relative error with an absolute floor, so exact-zero gradients compare
/// cleanly against finite-difference noise.
fn rel_err(a: Elem, b: Elem) -> Elem {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare tape gradients of `f` (a scalar-valued tensor function) against
/// central finite differences at `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOpts) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    // Analytic pass on a fresh tape.
    let tape = Tape::new();
    let vars: Vec<Tensor> = inputs.iter().map(|t| tape.var(t)).collect();
    let y = f(&vars)?;
    if y.len() != 1 {
        return Err(TensorError::BackwardFromNonScalar {
            len: y.len(),
            on_tape: y.is_tracked(),
        });
    }
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite {
            context: "gradcheck: forward value".to_string(),
        });
    }
    y.backward()?;
    let analytic: Vec<Vec<Elem>> = vars
        .iter()
        .map(|v| match v.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.len()],
        })
        .collect();

    // Finite differences on plain (untracked) tensors.
    let mut rng = rand::rngs::StdRng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if let Some(cap) = opts.max_coords {
            if coords.len() > cap {
                coords.shuffle(&mut rng);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        for &c in &coords {
            let x = input.data()[c];
            let h = opts.step * (1.0 + x.abs());
            let eval = |v: Elem| -> Result<Elem> {
                let mut data = input.to_vec();
                data[c] = v;
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[i] = Tensor::new(input.shape(), data)?;
                let out = f(&probe)?;
                let val = out.item();
                if !val.is_finite() {
                    return Err(TensorError::NonFinite {
                        context: format!("gradcheck: f at input {i} coord {c}"),
                    });
                }
                Ok(val)
            };
            let fd = (eval(x + h)? - eval(x - h)?) / (2.0 * h);
            if !fd.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("gradcheck: finite difference at input {i} coord {c}"),
                });
            }
            let err = rel_err(analytic[i][c], fd);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, c);
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}
