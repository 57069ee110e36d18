//! Named parameter containers and the AdamW optimizer.
//!
//! Every trainable struct exposes its tensors in a fixed order through
//! [`Params`]. Gradients are stored in a second instance of the same type,
//! so optimizers and checkpoints only need the visitor.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Params {
    /// `(name, shape, values)` for every tensor, in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&values[off..off + v.len()]);
            off += v.len();
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |_, _, v| v.fill(0.0));
    }

    /// `self += scale * other` for two containers of identical layout.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.flat();
        let mut off = 0;
        self.visit_mut(&mut |_, _, v| {
            for (x, s) in v.iter_mut().zip(&src[off..]) {
                *x += scale * s;
            }
            off += v.len();
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, v| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: v.to_vec(),
            })
        });
        out
    }

    /// Overwrites every tensor from `tensors`; names and shapes must match.
    fn load_named(&mut self, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, shape, v| {
            if err.is_some() {
                return;
            }
            match tensors.get(name) {
                Some(t) if t.shape == shape && t.data.len() == v.len() => v.copy_from_slice(&t.data),
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match expected {shape:?}",
                        t.shape
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to tensors of rank >= 2 only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<P: Params, G: Params>(&mut self, params: &mut P, grads: &G, lr: f64) {
        let g = grads.flat();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(&mut |_, shape, p| {
            let decay = if shape.len() >= 2 { weight_decay } else { 0.0 };
            for (i, x) in p.iter_mut().enumerate() {
                let k = off + i;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + decay * *x);
            }
            off += p.len();
        });
    }
}
