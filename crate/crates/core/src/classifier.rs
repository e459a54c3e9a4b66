//! Parameter-free centroid classifier over a (possibly learned) distance.

use crate::error::{usage, Result};
use crate::network::Forward;
use crate::numerics::{Tensor, Var};
use crate::relation::MetricKind;

/// Per-class mean embeddings, row `t` for episode label `t`.
pub struct CentroidSet<'t> {
    pub centroids: Var<'t>,
    pub ways: usize,
}

/// Mean of the `shots` support embeddings of every class `0..ways`.
pub fn class_centroids<'t>(
    support: Var<'t>,
    labels: &[usize],
    ways: usize,
    shots: usize,
) -> Result<CentroidSet<'t>> {
    if labels.len() != support.shape()[0] {
        return usage(format!(
            "{} labels for {} supports",
            labels.len(),
            support.shape()[0]
        ));
    }
    let mut groups = vec![Vec::new(); ways];
    for (row, &l) in labels.iter().enumerate() {
        match groups.get_mut(l) {
            Some(g) => g.push(row),
            None => return usage(format!("support label {l} outside 0..{ways}")),
        }
    }
    for (t, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return usage(format!("class {t} has no support examples"));
        }
        if g.len() != shots {
            return usage(format!(
                "class {t} has {} supports, expected {shots}",
                g.len()
            ));
        }
    }
    Ok(CentroidSet {
        centroids: support.group_mean(&groups)?,
        ways,
    })
}

/// Mean cross-entropy of `softmax(-D)` against the query labels.
pub fn loss_from_distances<'t>(distances: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    if labels.is_empty() {
        return usage("episode loss needs at least one query");
    }
    distances
        .neg()?
        .log_softmax_rows()?
        .pick(labels)?
        .mean()?
        .neg()
}

/// Query-to-centroid distance matrix `(queries, ways)`.
pub fn centroid_distances<'t>(
    fwd: &Forward<'_, 't>,
    queries: Var<'t>,
    centroids: &CentroidSet<'t>,
    metric: MetricKind,
) -> Result<Var<'t>> {
    fwd.distances(metric, queries, centroids.centroids)
}

pub fn episode_loss<'t>(
    fwd: &Forward<'_, 't>,
    queries: Var<'t>,
    labels: &[usize],
    centroids: &CentroidSet<'t>,
    metric: MetricKind,
) -> Result<Var<'t>> {
    if centroids.ways < 2 {
        return usage("episode loss needs at least two classes");
    }
    loss_from_distances(centroid_distances(fwd, queries, centroids, metric)?, labels)
}

/// Row-wise argmin, first index on ties.
pub fn argmin_rows(distances: &Tensor) -> Vec<usize> {
    (0..distances.rows())
        .map(|i| {
            let row = distances.row(i);
            let mut best = 0;
            for (j, &d) in row.iter().enumerate() {
                if d < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict<'t>(
    fwd: &Forward<'_, 't>,
    queries: Var<'t>,
    centroids: &CentroidSet<'t>,
    metric: MetricKind,
) -> Result<Vec<usize>> {
    Ok(argmin_rows(
        &centroid_distances(fwd, queries, centroids, metric)?.value(),
    ))
}
