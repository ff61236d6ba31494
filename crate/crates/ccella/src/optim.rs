//! AdamW with decoupled weight decay, and the second-order polynomial
//! learning-rate schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tensor_core::{load_tensor, save_tensor, Elem, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moment>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in the store. Parameters without a
    /// gradient this step decay their moments toward zero (g = 0) and
    /// still receive weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let param = store.get(&name)?.clone();
            let n = param.len();
            let zero;
            let g: &[Elem] = match grads.get(&name) {
                Some(g) => {
                    if !g.all_finite() {
                        return Err(Error::NonFinite(format!("gradient of {name}")));
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let moment = self.state.entry(name.clone()).or_insert_with(|| Moment {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let mut out = param.to_vec();
            for i in 0..n {
                let gi = g[i] as f64;
                moment.m[i] = self.cfg.beta1 * moment.m[i] + (1.0 - self.cfg.beta1) * gi;
                moment.v[i] = self.cfg.beta2 * moment.v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = moment.m[i] / bc1;
                let v_hat = moment.v[i] / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + lr * self.cfg.weight_decay * out[i] as f64;
                out[i] = (out[i] as f64 - update) as Elem;
            }
            store.set(&name, Tensor::new(param.shape(), out)?)?;
        }
        Ok(())
    }

    /// Reset moments (keeps the step counter).
    pub fn reset_moments(&mut self) {
        for moment in self.state.values_mut() {
            moment.m.fill(0.0);
            moment.v.fill(0.0);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("m"))?;
        fs::create_dir_all(dir.join("v"))?;
        #[derive(Serialize)]
        struct Meta<'a> {
            step: u64,
            cfg: &'a AdamWConfig,
            names: Vec<&'a str>,
        }
        let names: Vec<&str> = self.state.keys().map(String::as_str).collect();
        fs::write(
            dir.join("meta.json"),
            serde_json::to_vec_pretty(&Meta {
                step: self.step,
                cfg: &self.cfg,
                names,
            })?,
        )?;
        for (name, moment) in &self.state {
            let n = moment.m.len();
            save_tensor(
                dir.join("m").join(format!("{name}.tnsr")),
                &Tensor::new(&[n], moment.m.iter().map(|&x| x as Elem).collect())?,
            )?;
            save_tensor(
                dir.join("v").join(format!("{name}.tnsr")),
                &Tensor::new(&[n], moment.v.iter().map(|&x| x as Elem).collect())?,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            step: u64,
            cfg: AdamWConfig,
            names: Vec<String>,
        }
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let mut state = BTreeMap::new();
        for name in meta.names {
            let m = load_tensor(dir.join("m").join(format!("{name}.tnsr")))?;
            let v = load_tensor(dir.join("v").join(format!("{name}.tnsr")))?;
            state.insert(
                name,
                Moment {
                    m: m.data().iter().map(|&x| x as f64).collect(),
                    v: v.data().iter().map(|&x| x as f64).collect(),
                },
            );
        }
        Ok(AdamW {
            cfg: meta.cfg,
            state,
            step: meta.step,
        })
    }
}

/// Second-order polynomial decay: `lr0 · (1 − step/total)²`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!(
            "poly_lr: step {step} beyond total {total_steps}"
        )));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok(lr0 * frac * frac)
}
