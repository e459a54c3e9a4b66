//! Evaluation over independently seeded episodes.

use rayon::prelude::*;

use super::config::RunConfig;
use super::model::run_episode;
use super::seeds::eval_seeds;
use crate::episodes::{sample_episode, Dataset};
use crate::error::{usage, Result};
use crate::network::{Forward, Mode};
use crate::numerics::{ParamStore, Tape};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// Half-width `1.96 * stddev / sqrt(episodes)`, population stddev.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
    pub episodes: usize,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        if per_episode.is_empty() {
            return usage("evaluation needs at least one episode");
        }
        let n = per_episode.len() as f64;
        let mean = per_episode.iter().sum::<f64>() / n;
        let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean_accuracy: mean,
            ci95: Z95 * var.sqrt() / n.sqrt(),
            episodes: per_episode.len(),
            per_episode,
        })
    }
}

/// Accuracy of one episode in evaluation mode.
pub fn evaluate_episode(
    cfg: &RunConfig,
    params: &ParamStore,
    dataset: &Dataset,
    seed: u64,
) -> Result<f64> {
    let ep = sample_episode(dataset, &cfg.eval_split, &cfg.episode_spec(false), seed)?;
    let rel = cfg.relation_config();
    let tape = Tape::new();
    let fwd = Forward::new(&tape, params, Mode::Eval, &rel);
    Ok(run_episode(&fwd, cfg, &cfg.eval_propagation(), &ep)?.accuracy)
}

/// Evaluate the given episode seeds in parallel; results keep seed order.
pub fn evaluate_seeds(
    cfg: &RunConfig,
    params: &ParamStore,
    dataset: &Dataset,
    seeds: &[u64],
) -> Result<EvalReport> {
    let acc = seeds
        .par_iter()
        .map(|&s| evaluate_episode(cfg, params, dataset, s))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(acc)
}

pub fn evaluate(
    cfg: &RunConfig,
    params: &ParamStore,
    dataset: &Dataset,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_seeds(cfg, params, dataset, &eval_seeds(seed, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::init_model;
    use crate::episodes::{synth_dataset, SynthSpec};

    #[test]
    fn constant_accuracies_have_zero_interval() {
        let r = EvalReport::from_accuracies(vec![0.5, 0.5]).unwrap();
        assert_eq!(r.mean_accuracy, 0.5);
        assert_eq!(r.ci95, 0.0);
        assert!(EvalReport::from_accuracies(vec![]).is_err());
    }

    #[test]
    fn interval_matches_hand_value() {
        // mean 0.5, population stddev 0.5
        let r = EvalReport::from_accuracies(vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((r.ci95 - 1.96 * 0.5 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_clusters_are_classified_perfectly() {
        let ds = synth_dataset(&SynthSpec {
            cluster_std: 1e-9,
            center_std: 1.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = RunConfig {
            metric_dc: crate::relation::MetricKind::SquaredEuclidean,
            ..Default::default()
        };
        let params = init_model(&cfg, 0).unwrap();
        let r = evaluate(&cfg, &params, &ds, 50, 1).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.ci95, 0.0);
    }

    #[test]
    fn report_is_concatenation_of_single_episodes() {
        let ds = synth_dataset(&SynthSpec::default()).unwrap();
        let cfg = RunConfig::default();
        let params = init_model(&cfg, 2).unwrap();
        let seeds = crate::engine::eval_seeds(9, 12);
        let whole = evaluate_seeds(&cfg, &params, &ds, &seeds).unwrap();
        let single: Vec<f64> = seeds
            .iter()
            .map(|&s| evaluate_episode(&cfg, &params, &ds, s).unwrap())
            .collect();
        assert_eq!(whole.per_episode, single);
        assert_eq!(whole, evaluate(&cfg, &params, &ds, 12, 9).unwrap());
    }
}
