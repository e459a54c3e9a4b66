//! Shared layer plumbing for the encoder and relation module: forward
//! context, parameter initialization, and the linear / conv-block layers.

use std::cell::RefCell;

use rand::Rng;

use crate::error::Result;
use crate::numerics::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::relation::RelationConfig;

/// Momentum of batchnorm running statistics (weight kept on the old value).
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batchnorm; running estimates are collected.
    Train,
    /// Running statistics in batchnorm; fully deterministic per sample.
    Eval,
}

struct BnUpdate {
    prefix: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Everything a forward pass over one tape needs.
pub struct Forward<'a, 't> {
    pub tape: &'t Tape,
    pub params: BoundParams<'t>,
    pub mode: Mode,
    pub relation: &'a RelationConfig,
    updates: RefCell<Vec<BnUpdate>>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn new(
        tape: &'t Tape,
        params: &ParamStore,
        mode: Mode,
        relation: &'a RelationConfig,
    ) -> Self {
        Self {
            tape,
            params: params.bind(tape),
            mode,
            relation,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Forward over parameters already recorded on `tape`.
    pub fn with_params(
        tape: &'t Tape,
        params: BoundParams<'t>,
        mode: Mode,
        relation: &'a RelationConfig,
    ) -> Self {
        Self {
            tape,
            params,
            mode,
            relation,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        self.params.get(name)
    }

    /// `x W + b` for a layer stored as `{prefix}.weight` / `{prefix}.bias`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        x.matmul(&w)?.add_row(&b)
    }

    pub fn batch_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(&gamma, &beta, None)?;
                if let Some(s) = stats {
                    self.updates.borrow_mut().push(BnUpdate {
                        prefix: prefix.to_string(),
                        mean: s.mean,
                        var: s.var,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.data(&format!("{prefix}.running_mean"))?;
                let var = self.params.data(&format!("{prefix}.running_var"))?;
                Ok(x.batch_norm(&gamma, &beta, Some((&mean, &var)))?.0)
            }
        }
    }

    /// conv 3x3 (pad 1) -> batchnorm -> ReLU -> 2x2 max-pool.
    pub fn conv_block(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let w = self.param(&format!("{prefix}.conv.weight"))?;
        let b = self.param(&format!("{prefix}.conv.bias"))?;
        let y = x.conv2d(&w, &b, 1)?;
        let y = self.batch_norm(&format!("{prefix}.bn"), y)?;
        y.relu()?.maxpool2()
    }

    /// Fold the batch statistics seen so far into the running estimates.
    pub fn apply_running_stats(&self, store: &mut ParamStore) {
        for u in self.updates.borrow_mut().drain(..) {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                if let Some(t) = store.get_mut(&format!("{}.{suffix}", u.prefix)) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// He-uniform weights `(fan_in, fan_out)`, zero bias.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) {
    let bound = (6.0 / fan_in as f64).sqrt();
    store.insert(
        format!("{prefix}.weight"),
        uniform(rng, &[fan_in, fan_out], bound),
    );
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_conv_block(
    store: &mut ParamStore,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    rng: &mut impl Rng,
) {
    let bound = (6.0 / (in_ch * 9) as f64).sqrt();
    store.insert(
        format!("{prefix}.conv.weight"),
        uniform(rng, &[out_ch, in_ch, 3, 3], bound),
    );
    store.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[out_ch]));
    store.insert(format!("{prefix}.bn.gamma"), Tensor::full(&[out_ch], 1.0));
    store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[out_ch]));
    store.insert(
        format!("{prefix}.bn.running_mean"),
        Tensor::zeros(&[out_ch]),
    );
    store.insert(
        format!("{prefix}.bn.running_var"),
        Tensor::full(&[out_ch], 1.0),
    );
}
