use std::collections::HashMap;

use super::params::{ParamGrads, ParamStore};
use crate::error::{usage, Error, Result};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Self {
            step: 0,
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }

    /// One update of every trainable parameter. Weight decay shrinks the
    /// parameter before the moment estimates are refreshed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            match grads.get(name) {
                None => return usage(format!("adam: no gradient for `{name}`")),
                Some(g) if Some(g.shape()) != params.get(name).map(|p| p.shape()) => {
                    return usage(format!("adam: gradient shape mismatch for `{name}`"))
                }
                _ => {}
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for name in names {
            let g = grads.get(&name).expect("checked above").data();
            let p = params.get_mut(&name).expect("listed above").data_mut();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                p[i] -= self.lr * self.weight_decay * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
