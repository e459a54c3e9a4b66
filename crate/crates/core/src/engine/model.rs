//! Parameter initialization and the per-episode forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::seeds::{derive_seed, Stream};
use crate::classifier::{class_centroids, episode_loss, predict};
use crate::encoder::{encode, init_encoder};
use crate::episodes::Episode;
use crate::error::Result;
use crate::memory::{memory_init, propagate, EpisodeFeatures, EpisodicMemory, PropagationConfig};
use crate::network::Forward;
use crate::numerics::{ParamStore, Tensor, Var};
use crate::relation::init_relation;

/// Fresh encoder (and, if any stage needs it, relation module) parameters.
pub fn init_model(cfg: &RunConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, 0));
    let mut store = ParamStore::new();
    init_encoder(&cfg.encoder, &mut store, &mut rng)?;
    if cfg.needs_relation() {
        init_relation(&cfg.relation_config(), &mut store, &mut rng)?;
    }
    Ok(store)
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.rows()).sum();
    let data = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(shape, data)
}

/// Encode support, query and unlabeled items in one batch, admit them into a
/// fresh memory and run propagation.
pub fn build_memory<'t>(
    fwd: &Forward<'_, 't>,
    cfg: &RunConfig,
    prop: &PropagationConfig,
    ep: &Episode,
) -> Result<EpisodicMemory<'t>> {
    let mut parts = vec![&ep.support, &ep.query];
    if let Some(u) = &ep.unlabeled {
        parts.push(u);
    }
    let batch = fwd.tape.constant(stack(&parts)?);
    let emb = encode(fwd, &cfg.encoder, batch)?.flatten()?;
    let (ns, nq) = (ep.support.rows(), ep.query.rows());
    let features = EpisodeFeatures {
        support: emb.slice_rows(0..ns)?,
        query: emb.slice_rows(ns..ns + nq)?,
        unlabeled: match &ep.unlabeled {
            Some(u) => Some(emb.slice_rows(ns + nq..ns + nq + u.rows())?),
            None => None,
        },
    };
    let mut memory = memory_init(&features, prop.memory_mode, ep.seed)?;
    propagate(&mut memory, prop, fwd)?;
    Ok(memory)
}

pub struct EpisodeOutcome<'t> {
    pub loss: Var<'t>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Full episode: memory, propagation, centroids from the enhanced supports,
/// query loss and predictions.
pub fn run_episode<'t>(
    fwd: &Forward<'_, 't>,
    cfg: &RunConfig,
    prop: &PropagationConfig,
    ep: &Episode,
) -> Result<EpisodeOutcome<'t>> {
    let memory = build_memory(fwd, cfg, prop, ep)?;
    let centroids = class_centroids(memory.support()?, &ep.support_labels, ep.ways(), cfg.shots)?;
    let query = memory.query()?;
    let loss = episode_loss(fwd, query, &ep.query_labels, &centroids, cfg.metric_dc)?;
    let predictions = predict(fwd, query, &centroids, cfg.metric_dc)?;
    let hits = predictions
        .iter()
        .zip(&ep.query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(EpisodeOutcome {
        loss,
        accuracy: hits as f64 / predictions.len() as f64,
        predictions,
    })
}
