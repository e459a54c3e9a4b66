//! Reference implementations shared by the integration tests.

#![allow(dead_code)]

use mrn_core::memory::{
    memory_init, propagate, EpisodeFeatures, MemoryMode, PropagationConfig, Strategy,
};
use mrn_core::network::{Forward, Mode};
use mrn_core::numerics::{ParamStore, Tape, Tensor};
use mrn_core::relation::{
    init_relation, relation_distance, squared_euclidean, MetricKind, RelationConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

pub fn relation_params(dim: usize, seed: u64) -> (RelationConfig, ParamStore) {
    let cfg = RelationConfig {
        feature_shape: vec![dim],
        ..Default::default()
    };
    let mut store = ParamStore::new();
    init_relation(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (cfg, store)
}

/// Propagate `slots` through the library with every row admitted.
pub fn library_propagate(
    slots: &Tensor,
    cfg: &PropagationConfig,
    params: &ParamStore,
    rel: &RelationConfig,
) -> Tensor {
    let tape = Tape::new();
    let fwd = Forward::new(&tape, params, Mode::Eval, rel);
    let feats = EpisodeFeatures {
        support: tape.constant(slots.clone()),
        query: tape.constant(Tensor::zeros(&[0, slots.shape()[1]])),
        unlabeled: None,
    };
    let mut mem = memory_init(&feats, MemoryMode::Transductive, 0).unwrap();
    propagate(&mut mem, cfg, &fwd).unwrap();
    (*mem.nodes().value()).clone()
}

/// Pair-by-pair distance matrix.
fn distance_matrix(
    x: &[Vec<f64>],
    metric: MetricKind,
    params: &ParamStore,
    rel: &RelationConfig,
) -> Vec<Vec<f64>> {
    let t = |v: &Vec<f64>| Tensor::from_vec(v.clone());
    x.iter()
        .map(|a| {
            x.iter()
                .map(|b| match metric {
                    MetricKind::SquaredEuclidean => squared_euclidean(&t(a), &t(b)).unwrap(),
                    MetricKind::LearnedRelation => {
                        relation_distance(params, rel, &t(a), &t(b)).unwrap()
                    }
                })
                .collect()
        })
        .collect()
}

/// Dense reference: materializes the full `m x m` weight matrix at every
/// depth and applies `X <- lambda X + (1 - lambda) W X` (or the masked
/// elementwise maximum for the max strategy).
pub fn dense_propagate(
    slots: &Tensor,
    cfg: &PropagationConfig,
    params: &ParamStore,
    rel: &RelationConfig,
) -> Tensor {
    let (m, f) = (slots.shape()[0], slots.shape()[1]);
    let mut x: Vec<Vec<f64>> = (0..m).map(|i| slots.row(i).to_vec()).collect();
    for _ in 0..cfg.depth {
        if cfg.k == 0 || m < 2 {
            break;
        }
        let d = distance_matrix(&x, cfg.metric, params, rel);
        let mut mask = vec![vec![false; m]; m];
        for i in 0..m {
            let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| d[i][a].partial_cmp(&d[i][b]).unwrap().then(a.cmp(&b)));
            for &j in order.iter().take(cfg.k) {
                mask[i][j] = true;
            }
        }
        let mut agg = vec![vec![0.0; f]; m];
        for i in 0..m {
            let cols: Vec<usize> = (0..m).filter(|&j| mask[i][j]).collect();
            match cfg.strategy {
                Strategy::Max => {
                    for (c, a) in agg[i].iter_mut().enumerate() {
                        *a = cols
                            .iter()
                            .map(|&j| x[j][c])
                            .fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                Strategy::Mean | Strategy::Weighted => {
                    let mut w = vec![0.0; m];
                    if cfg.strategy == Strategy::Mean {
                        for &j in &cols {
                            w[j] = 1.0 / cols.len() as f64;
                        }
                    } else {
                        let lo = cols.iter().map(|&j| d[i][j]).fold(f64::INFINITY, f64::min);
                        let z: f64 = cols.iter().map(|&j| (lo - d[i][j]).exp()).sum();
                        for &j in &cols {
                            w[j] = (lo - d[i][j]).exp() / z;
                        }
                    }
                    for (c, a) in agg[i].iter_mut().enumerate() {
                        *a = (0..m).map(|j| w[j] * x[j][c]).sum();
                    }
                }
            }
        }
        x = (0..m)
            .map(|i| {
                (0..f)
                    .map(|c| cfg.lambda * x[i][c] + (1.0 - cfg.lambda) * agg[i][c])
                    .collect()
            })
            .collect();
    }
    Tensor::new(vec![m, f], x.concat()).unwrap()
}

/// Mean over classes of the average squared distance to the class mean.
pub fn intra_class_variance(rows: &Tensor, labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |c| c + 1);
    let f = rows.row_len();
    let mut total = 0.0;
    for c in 0..classes {
        let members: Vec<&[f64]> = (0..rows.rows())
            .filter(|&i| labels[i] == c)
            .map(|i| rows.row(i))
            .collect();
        let n = members.len() as f64;
        let mean: Vec<f64> = (0..f)
            .map(|j| members.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        total += members
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
    }
    total / classes as f64
}
