//! Learnable distance metric over embedding differences, plus the fixed
//! squared-Euclidean alternative.
//!
//! The relation module scores `g(f_i - f_j)` with a small network and passes
//! the score through softplus, so every distance is non-negative and
//! `exp(-d)` acts as a similarity kernel. Flat embeddings use an
//! `d -> hidden -> 1` MLP; feature maps first go through two conv blocks.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::network::{init_conv_block, init_linear, Forward, Mode};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    LearnedRelation,
    SquaredEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationOutput {
    Softplus,
    /// Raw linear score; kept for comparison only.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationConfig {
    /// Per-sample embedding extents (`[d]` or `[C, h, w]`).
    pub feature_shape: Vec<usize>,
    pub hidden: usize,
    pub filters: usize,
    pub output: RelationOutput,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            feature_shape: vec![16],
            hidden: 8,
            filters: 64,
            output: RelationOutput::Softplus,
        }
    }
}

impl RelationConfig {
    fn is_conv(&self) -> bool {
        self.feature_shape.len() == 3
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        match self.feature_shape.as_slice() {
            [d] if *d > 0 => {}
            [_, h, w] if *h >= 4 && *w >= 4 => {}
            s => {
                return Err(Error::Config(format!(
                    "relation module cannot take embeddings shaped {s:?}"
                )))
            }
        }
        if self.hidden == 0 || self.filters == 0 {
            return Err(Error::Config("relation widths must be positive".into()));
        }
        Ok(())
    }

    fn fc_input(&self) -> usize {
        if self.is_conv() {
            self.filters * (self.feature_shape[1] >> 2) * (self.feature_shape[2] >> 2)
        } else {
            self.feature_shape[0]
        }
    }
}

pub fn init_relation(
    cfg: &RelationConfig,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    if cfg.is_conv() {
        init_conv_block(
            store,
            "relation.block0",
            cfg.feature_shape[0],
            cfg.filters,
            rng,
        );
        init_conv_block(store, "relation.block1", cfg.filters, cfg.filters, rng);
    }
    init_linear(store, "relation.fc1", cfg.fc_input(), cfg.hidden, rng);
    init_linear(store, "relation.fc2", cfg.hidden, 1, rng);
    Ok(())
}

/// Relation scores for a batch of flattened differences `(P, feature_len)`,
/// returned as `(P)`.
pub fn relation_scores<'t>(fwd: &Forward<'_, 't>, diffs: Var<'t>) -> Result<Var<'t>> {
    let cfg = fwd.relation;
    let shape = diffs.shape();
    if shape.len() != 2 || shape[1] != cfg.feature_len() {
        return shape_err(
            "relation",
            format!(
                "differences {shape:?} for embeddings {:?}",
                cfg.feature_shape
            ),
        );
    }
    let p = shape[0];
    let mut x = diffs;
    if cfg.is_conv() {
        let mut s = vec![p];
        s.extend(&cfg.feature_shape);
        x = x.reshape(&s)?;
        x = fwd.conv_block("relation.block0", x)?;
        x = fwd.conv_block("relation.block1", x)?;
        x = x.flatten()?;
    }
    let h = fwd.linear("relation.fc1", x)?.relu()?;
    let score = fwd.linear("relation.fc2", h)?.reshape(&[p])?;
    match cfg.output {
        RelationOutput::Softplus => score.softplus(),
        RelationOutput::Linear => Ok(score),
    }
}

impl<'t> Forward<'_, 't> {
    /// Directed distance matrix: entry `(i, j)` is `D(rows[i], cols[j])`.
    pub fn distances(&self, metric: MetricKind, rows: Var<'t>, cols: Var<'t>) -> Result<Var<'t>> {
        let (n, m) = (rows.shape()[0], cols.shape()[0]);
        let diffs = rows.pairwise_diff(&cols)?;
        let flat = match metric {
            MetricKind::SquaredEuclidean => diffs.mul(&diffs)?.sum_cols()?,
            MetricKind::LearnedRelation => relation_scores(self, diffs)?,
        };
        flat.reshape(&[n, m])
    }
}

/// `f_i - f_j`.
pub fn preprocess_diff(fi: &Tensor, fj: &Tensor) -> Result<Tensor> {
    if fi.shape() != fj.shape() {
        return shape_err(
            "preprocess_diff",
            format!("{:?} vs {:?}", fi.shape(), fj.shape()),
        );
    }
    let data = fi
        .data()
        .iter()
        .zip(fj.data())
        .map(|(a, b)| a - b)
        .collect();
    Tensor::new(fi.shape().to_vec(), data)
}

pub fn squared_euclidean(fi: &Tensor, fj: &Tensor) -> Result<f64> {
    Ok(preprocess_diff(fi, fj)?.data().iter().map(|d| d * d).sum())
}

fn as_row(t: &Tensor) -> Result<Tensor> {
    t.clone().reshape(vec![1, t.numel()])
}

/// Learned distance of a single pair, evaluated with running statistics.
pub fn relation_distance(
    params: &ParamStore,
    cfg: &RelationConfig,
    fi: &Tensor,
    fj: &Tensor,
) -> Result<f64> {
    if fi.shape() != fj.shape() {
        return shape_err(
            "relation_distance",
            format!("{:?} vs {:?}", fi.shape(), fj.shape()),
        );
    }
    let tape = Tape::new();
    let fwd = Forward::new(&tape, params, Mode::Eval, cfg);
    let d = fwd.distances(
        MetricKind::LearnedRelation,
        tape.constant(as_row(fi)?),
        tape.constant(as_row(fj)?),
    )?;
    Ok(d.item())
}

/// All-pairs distance matrix of the rows of `features` (`n x d`).
pub fn pairwise_matrix(
    features: &Tensor,
    metric: MetricKind,
    params: &ParamStore,
    cfg: &RelationConfig,
) -> Result<Tensor> {
    let tape = Tape::new();
    let fwd = Forward::new(&tape, params, Mode::Eval, cfg);
    let f = tape.constant(features.clone());
    Ok((*fwd.distances(metric, f, f)?.value()).clone())
}
