//! Episodic meta-training.

use std::path::Path;

use super::config::RunConfig;
use super::model::{init_model, run_episode};
use super::seeds::{derive_seed, Stream};
use crate::episodes::{sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::network::{Forward, Mode};
use crate::numerics::{load_checkpoint, save_checkpoint, AdamState, ParamStore, Tape};

/// Learning rate after `episode` completed episodes: halved every
/// `halve_every` episodes.
pub fn lr_at(lr0: f64, halve_every: usize, episode: usize) -> f64 {
    lr0 * 0.5f64.powi((episode / halve_every) as i32)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Loss of every training episode, in order.
    pub losses: Vec<f64>,
    pub final_lr: f64,
}

pub fn train(cfg: &RunConfig, dataset: &Dataset, seed: u64) -> Result<TrainOutcome> {
    train_with_progress(cfg, dataset, seed, |_, _| {})
}

/// One Adam step per episode. `progress` sees `(episode, loss)`.
pub fn train_with_progress(
    cfg: &RunConfig,
    dataset: &Dataset,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let mut params = init_model(cfg, seed)?;
    let mut adam = AdamState::new(cfg.lr, cfg.weight_decay)?;
    let prop = cfg.train_propagation();
    let rel = cfg.relation_config();
    let spec = cfg.episode_spec(true);
    let mut losses = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        adam.lr = lr_at(cfg.lr, cfg.halve_every, i);
        let ep_seed = derive_seed(seed, Stream::Train, i as u64);
        let ep = sample_episode(dataset, &cfg.train_split, &spec, ep_seed)?;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                episode: i,
                seed: ep_seed,
            },
            other => other,
        };
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Train, &rel);
        let out = run_episode(&fwd, cfg, &prop, &ep).map_err(diverged)?;
        let loss = out.loss.item();
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "loss" }));
        }
        let grads = tape.backward(out.loss).map_err(diverged)?;
        let pg = fwd.params.gradients(&grads);
        adam.step(&mut params, &pg)?;
        fwd.apply_running_stats(&mut params);
        losses.push(loss);
        progress(i, loss);
    }
    Ok(TrainOutcome {
        params,
        losses,
        final_lr: lr_at(cfg.lr, cfg.halve_every, cfg.episodes),
    })
}

/// Atomic checkpoint with the full configuration embedded.
pub fn save_model(path: &Path, cfg: &RunConfig, params: &ParamStore) -> Result<()> {
    save_checkpoint(path, &cfg.to_text(), params)
}

pub fn load_model(path: &Path) -> Result<(RunConfig, ParamStore)> {
    let (text, params) = load_checkpoint(path)?;
    Ok((RunConfig::from_text(&text)?, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Variant;
    use crate::episodes::{synth_dataset, SynthSpec};

    fn quick(variant: Variant, episodes: usize) -> RunConfig {
        RunConfig {
            variant,
            episodes,
            queries: 5,
            ..Default::default()
        }
    }

    fn data() -> Dataset {
        synth_dataset(&SynthSpec::default()).unwrap()
    }

    #[test]
    fn schedule_halves() {
        assert_eq!(lr_at(1e-3, 1250, 0), 1e-3);
        assert_eq!(lr_at(1e-3, 1250, 1249), 1e-3);
        assert_eq!(lr_at(1e-3, 1250, 1250), 5e-4);
        assert_eq!(lr_at(1e-3, 1250, 2500), 1e-3 / 4.0);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = data();
        let cfg = quick(Variant::Mrn, 5);
        let a = train(&cfg, &ds, 3).unwrap();
        let b = train(&cfg, &ds, 3).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        let c = train(&cfg, &ds, 4).unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn zero_variant_matches_identity_propagation() {
        let ds = data();
        let zero = train(&quick(Variant::MrnZero, 6), &ds, 1).unwrap();
        let mut lam1 = quick(Variant::Mrn, 6);
        lam1.propagation.lambda = 1.0;
        let ident = train(&lam1, &ds, 1).unwrap();
        assert_eq!(zero.losses, ident.losses);
        assert_eq!(zero.params, ident.params);
    }

    #[test]
    fn checkpoint_embeds_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mrnc");
        let cfg = quick(Variant::MrnEuclid, 2);
        let out = train(&cfg, &data(), 0).unwrap();
        save_model(&path, &cfg, &out.params).unwrap();
        let (back_cfg, back) = load_model(&path).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back, out.params);
    }

    #[test]
    fn too_small_train_split_is_a_dataset_error() {
        let ds = synth_dataset(&SynthSpec {
            classes: 5,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            train(&quick(Variant::Mrn, 1), &ds, 0),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn divergence_names_the_episode_seed() {
        let mut cfg = quick(Variant::MrnZero, 3);
        cfg.metric_dc = crate::relation::MetricKind::SquaredEuclidean;
        cfg.lr = 1e300;
        cfg.weight_decay = 0.0;
        match train(&cfg, &data(), 0) {
            Err(Error::Diverged { episode, seed }) => {
                assert!(episode >= 1);
                assert_eq!(seed, derive_seed(0, Stream::Train, episode as u64));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
