//! Training, evaluation, ablation sweeps and the glue the CLI drives.

mod ablate;
mod config;
mod eval;
mod model;
mod seeds;
mod train;

use std::path::Path;

pub use ablate::{ablate, AblationRow, Sweep};
pub use config::{parse_kv, RunConfig, Variant, EVAL_ONLY_KEYS, KEYS};
pub use eval::{evaluate, evaluate_episode, evaluate_seeds, EvalReport, Z95};
pub use model::{build_memory, init_model, run_episode, EpisodeOutcome};
pub use seeds::{derive_seed, eval_seeds, Stream};
pub use train::{load_model, lr_at, save_model, train, train_with_progress, TrainOutcome};

use crate::episodes::{
    load_dataset, sample_episode, synth_dataset, Dataset, EpisodeSpec, Split, SynthSpec,
};
use crate::error::{Error, Result};
use crate::memory::{export_similarity, MemoryMode};
use crate::network::{Forward, Mode};
use crate::numerics::{finite_diff_check, objective, Tape, Tensor};
use crate::relation::MetricKind;

/// The configured dataset file, or the synthetic benchmark when none is set.
pub fn load_run_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => load_dataset(path),
        None => synth_dataset(&cfg.synth),
    }
}

/// Parse a flat `key = value` generator description.
pub fn synth_spec_from_text(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for (k, v) in parse_kv(text)? {
        let bad = || Error::Config(format!("{k}: cannot parse `{v}`"));
        match k.as_str() {
            "classes" => spec.classes = v.parse().map_err(|_| bad())?,
            "dim" => spec.dim = v.parse().map_err(|_| bad())?,
            "cluster_std" => spec.cluster_std = v.parse().map_err(|_| bad())?,
            "center_std" => spec.center_std = v.parse().map_err(|_| bad())?,
            "items_per_class" => spec.items_per_class = v.parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Run one evaluation episode through memory and propagation and write the
/// slot similarity matrix `exp(-D_G)` as CSV.
pub fn export_episode_similarity(
    cfg: &RunConfig,
    params: &crate::numerics::ParamStore,
    dataset: &Dataset,
    episode_seed: u64,
    out: &Path,
) -> Result<Tensor> {
    let ep = sample_episode(
        dataset,
        &cfg.eval_split,
        &cfg.episode_spec(false),
        episode_seed,
    )?;
    let prop = cfg.eval_propagation();
    let rel = cfg.relation_config();
    let tape = Tape::new();
    let fwd = Forward::new(&tape, params, Mode::Eval, &rel);
    let memory = build_memory(&fwd, cfg, &prop, &ep)?;
    export_similarity(&memory, &fwd, prop.metric, out)
}

/// Configuration of the end-to-end gradient check: a 2-way 1-shot episode
/// with two queries per class (six samples), learned distances everywhere,
/// `k = 2`, `d = 2`, `lambda = 0.2`.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig {
        ways: 2,
        shots: 1,
        queries: 2,
        ..Default::default()
    };
    cfg.encoder.input_shape = vec![6];
    cfg.encoder.mlp_dims = vec![5];
    cfg.encoder.out_dim = 4;
    cfg.propagation.k = 2;
    cfg.propagation.depth = 2;
    cfg.propagation.lambda = 0.2;
    cfg.propagation.metric = MetricKind::LearnedRelation;
    cfg.propagation.memory_mode = MemoryMode::Transductive;
    cfg.metric_dc = MetricKind::LearnedRelation;
    cfg.synth = SynthSpec {
        classes: 4,
        dim: 6,
        items_per_class: 6,
        ..Default::default()
    };
    cfg.train_split = vec![Split::Train, Split::Val, Split::Test];
    cfg
}

/// Largest relative error between analytic and central-difference gradients
/// of the full episode loss, over every trainable parameter.
pub fn gradcheck_episode(cfg: &RunConfig, seed: u64, h: f64) -> Result<f64> {
    let dataset = synth_dataset(&cfg.synth)?;
    let spec = EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries);
    let ep = sample_episode(&dataset, &cfg.train_split, &spec, seed)?;
    let params = init_model(cfg, seed)?;
    let prop = cfg.train_propagation();
    let rel = cfg.relation_config();
    let f = objective(|tape, bound| {
        let fwd = Forward::with_params(tape, bound.clone(), Mode::Eval, &rel);
        Ok(run_episode(&fwd, cfg, &prop, &ep)?.loss)
    });
    finite_diff_check(f, &params, h)
}
