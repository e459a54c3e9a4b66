//! Flat `key = value` run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::episodes::{parse_splits, EpisodeSpec, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::memory::{MemoryMode, PropagationConfig, Strategy};
use crate::relation::{MetricKind, RelationConfig, RelationOutput};

macro_rules! tokens {
    ($ty:ty { $($var:path => $tok:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($var => $tok),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tok => Ok($var),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($ty),
                        [$($tok),+].join(", ")
                    ))),
                }
            }
        }
    };
}

/// Model family member; each one pins part of the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Mrn,
    /// No propagation: `k = 0`, `d = 0`.
    MrnZero,
    /// Squared Euclidean distance in the relation graph, learned classifier metric.
    MrnEuclid,
    MrnMean,
    MrnMax,
}

tokens!(Variant {
    Variant::Mrn => "mrn",
    Variant::MrnZero => "mrn_zero",
    Variant::MrnEuclid => "mrn_euclid",
    Variant::MrnMean => "mrn_mean",
    Variant::MrnMax => "mrn_max",
});
tokens!(MetricKind {
    MetricKind::LearnedRelation => "learned",
    MetricKind::SquaredEuclidean => "squared_euclidean",
});
tokens!(Strategy {
    Strategy::Weighted => "weighted",
    Strategy::Mean => "mean",
    Strategy::Max => "max",
});
tokens!(MemoryMode {
    MemoryMode::SupportOnly => "support_only",
    MemoryMode::Transductive => "transductive",
    MemoryMode::SemiSupervised => "semi_supervised",
});
tokens!(EncoderKind {
    EncoderKind::Conv4 => "conv4",
    EncoderKind::Mlp => "mlp",
    EncoderKind::Identity => "identity",
});
tokens!(RelationOutput {
    RelationOutput::Softplus => "softplus",
    RelationOutput::Linear => "linear",
});

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Unlabelled extras per episode class (semi-supervised memory).
    pub unlabeled: usize,
    pub augment: bool,
    pub propagation: PropagationConfig,
    /// Metric between queries and class centroids.
    pub metric_dc: MetricKind,
    /// Evaluation-time propagation overrides; the trained backbone is unaffected.
    pub eval_k: Option<usize>,
    pub eval_depth: Option<usize>,
    pub eval_lambda: Option<f64>,
    pub encoder: EncoderConfig,
    pub relation_hidden: usize,
    pub relation_filters: usize,
    pub relation_output: RelationOutput,
    pub lr: f64,
    pub weight_decay: f64,
    pub episodes: usize,
    pub halve_every: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub train_split: Vec<Split>,
    pub eval_split: Vec<Split>,
    /// MRND file; the synthetic generator is used when unset.
    pub dataset: Option<PathBuf>,
    pub synth: SynthSpec,
    pub checkpoint: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mrn,
            ways: 5,
            shots: 1,
            queries: 15,
            unlabeled: 0,
            augment: false,
            propagation: PropagationConfig::default(),
            metric_dc: MetricKind::LearnedRelation,
            eval_k: None,
            eval_depth: None,
            eval_lambda: None,
            encoder: EncoderConfig::default(),
            relation_hidden: 8,
            relation_filters: 64,
            relation_output: RelationOutput::Softplus,
            lr: 1e-3,
            weight_decay: 1e-6,
            episodes: 5000,
            halve_every: 1250,
            eval_episodes: 1000,
            seeds: vec![0],
            train_split: vec![Split::Train],
            eval_split: vec![Split::Val, Split::Test],
            dataset: None,
            synth: SynthSpec::default(),
            checkpoint: PathBuf::from("model.mrnc"),
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "variant",
    "ways",
    "shots",
    "queries",
    "unlabeled",
    "augment",
    "k",
    "depth",
    "lambda",
    "strategy",
    "metric_dg",
    "memory_mode",
    "symmetrize",
    "stop_grad",
    "metric_dc",
    "eval_k",
    "eval_depth",
    "eval_lambda",
    "encoder",
    "input_shape",
    "channels",
    "mlp_dims",
    "out_dim",
    "relation_hidden",
    "relation_filters",
    "relation_output",
    "lr",
    "weight_decay",
    "episodes",
    "halve_every",
    "eval_episodes",
    "seeds",
    "train_split",
    "eval_split",
    "dataset",
    "synth_classes",
    "synth_dim",
    "synth_cluster_std",
    "synth_center_std",
    "synth_items",
    "synth_seed",
    "checkpoint",
];

/// Keys that only matter once a backbone has been trained.
pub const EVAL_ONLY_KEYS: &[&str] = &[
    "eval_k",
    "eval_depth",
    "eval_lambda",
    "eval_episodes",
    "eval_split",
    "seeds",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

/// Split `text` into `(key, value)` pairs. Blank lines and `#` comments are
/// skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`",
                n + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let p = &mut self.propagation;
        match key {
            "variant" => self.variant = v.parse()?,
            "ways" => self.ways = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "unlabeled" => self.unlabeled = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "k" => p.k = parse(key, v)?,
            "depth" => p.depth = parse(key, v)?,
            "lambda" => p.lambda = parse(key, v)?,
            "strategy" => p.strategy = v.parse()?,
            "metric_dg" => p.metric = v.parse()?,
            "memory_mode" => p.memory_mode = v.parse()?,
            "symmetrize" => p.symmetrize = parse(key, v)?,
            "stop_grad" => p.stop_grad = parse(key, v)?,
            "metric_dc" => self.metric_dc = v.parse()?,
            "eval_k" => self.eval_k = parse_opt(key, v)?,
            "eval_depth" => self.eval_depth = parse_opt(key, v)?,
            "eval_lambda" => self.eval_lambda = parse_opt(key, v)?,
            "encoder" => self.encoder.kind = v.parse()?,
            "input_shape" => self.encoder.input_shape = parse_list(key, v)?,
            "channels" => self.encoder.channels = parse(key, v)?,
            "mlp_dims" => self.encoder.mlp_dims = parse_list(key, v)?,
            "out_dim" => self.encoder.out_dim = parse(key, v)?,
            "relation_hidden" => self.relation_hidden = parse(key, v)?,
            "relation_filters" => self.relation_filters = parse(key, v)?,
            "relation_output" => self.relation_output = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "halve_every" => self.halve_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "train_split" => {
                self.train_split = parse_splits(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "eval_split" => {
                self.eval_split = parse_splits(v).map_err(|e| Error::Config(e.to_string()))?
            }
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_classes" => self.synth.classes = parse(key, v)?,
            "synth_dim" => self.synth.dim = parse(key, v)?,
            "synth_cluster_std" => self.synth.cluster_std = parse(key, v)?,
            "synth_center_std" => self.synth.center_std = parse(key, v)?,
            "synth_items" => self.synth.items_per_class = parse(key, v)?,
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let p = &self.propagation;
        let splits = |s: &[Split]| join(s, "+");
        Ok(match key {
            "variant" => self.variant.to_string(),
            "ways" => self.ways.to_string(),
            "shots" => self.shots.to_string(),
            "queries" => self.queries.to_string(),
            "unlabeled" => self.unlabeled.to_string(),
            "augment" => self.augment.to_string(),
            "k" => p.k.to_string(),
            "depth" => p.depth.to_string(),
            "lambda" => p.lambda.to_string(),
            "strategy" => p.strategy.to_string(),
            "metric_dg" => p.metric.to_string(),
            "memory_mode" => p.memory_mode.to_string(),
            "symmetrize" => p.symmetrize.to_string(),
            "stop_grad" => p.stop_grad.to_string(),
            "metric_dc" => self.metric_dc.to_string(),
            "eval_k" => opt(&self.eval_k),
            "eval_depth" => opt(&self.eval_depth),
            "eval_lambda" => opt(&self.eval_lambda),
            "encoder" => self.encoder.kind.to_string(),
            "input_shape" => join(&self.encoder.input_shape, ","),
            "channels" => self.encoder.channels.to_string(),
            "mlp_dims" => join(&self.encoder.mlp_dims, ","),
            "out_dim" => self.encoder.out_dim.to_string(),
            "relation_hidden" => self.relation_hidden.to_string(),
            "relation_filters" => self.relation_filters.to_string(),
            "relation_output" => self.relation_output.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "episodes" => self.episodes.to_string(),
            "halve_every" => self.halve_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "seeds" => join(&self.seeds, ","),
            "train_split" => splits(&self.train_split),
            "eval_split" => splits(&self.eval_split),
            "dataset" => self
                .dataset
                .as_ref()
                .map_or(String::new(), |d| d.display().to_string()),
            "synth_classes" => self.synth.classes.to_string(),
            "synth_dim" => self.synth.dim.to_string(),
            "synth_cluster_std" => self.synth.cluster_std.to_string(),
            "synth_center_std" => self.synth.center_std.to_string(),
            "synth_items" => self.synth.items_per_class.to_string(),
            "synth_seed" => self.synth.seed.to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        })
    }

    /// Defaults overlaid with `text`; later lines win.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Apply `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override `{o}` is not key=value")));
            };
            self.set(k.trim(), v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.halve_every == 0 {
            return bad("halve_every must be positive".into());
        }
        if self.ways < 2 || self.shots == 0 || self.queries == 0 {
            return bad(format!(
                "episode shape {}-way {}-shot with {} queries is degenerate",
                self.ways, self.shots, self.queries
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.train_split.is_empty() || self.eval_split.is_empty() {
            return bad("split lists must be non-empty".into());
        }
        if let Some(l) = self.eval_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("eval_lambda must lie in [0, 1], got {l}"));
            }
        }
        self.train_propagation().validate()?;
        self.eval_propagation().validate()?;
        self.encoder.validate()?;
        self.relation_config().validate()
    }

    fn force(&self, p: &mut PropagationConfig) {
        match self.variant {
            Variant::Mrn => {}
            Variant::MrnZero => {
                p.k = 0;
                p.depth = 0;
            }
            Variant::MrnEuclid => p.metric = MetricKind::SquaredEuclidean,
            Variant::MrnMean => p.strategy = Strategy::Mean,
            Variant::MrnMax => p.strategy = Strategy::Max,
        }
    }

    /// Propagation used while training, after the variant's constraints.
    pub fn train_propagation(&self) -> PropagationConfig {
        let mut p = self.propagation.clone();
        self.force(&mut p);
        p
    }

    /// Propagation used at evaluation: evaluation overrides first, then the
    /// variant's constraints.
    pub fn eval_propagation(&self) -> PropagationConfig {
        let mut p = self.propagation.clone();
        p.k = self.eval_k.unwrap_or(p.k);
        p.depth = self.eval_depth.unwrap_or(p.depth);
        p.lambda = self.eval_lambda.unwrap_or(p.lambda);
        self.force(&mut p);
        p
    }

    pub fn relation_config(&self) -> RelationConfig {
        RelationConfig {
            feature_shape: self.encoder.feature_shape(),
            hidden: self.relation_hidden,
            filters: self.relation_filters,
            output: self.relation_output,
        }
    }

    /// Whether any stage of training or evaluation uses the relation module.
    pub fn needs_relation(&self) -> bool {
        let learned =
            |p: &PropagationConfig| !p.is_identity() && p.metric == MetricKind::LearnedRelation;
        self.metric_dc == MetricKind::LearnedRelation
            || learned(&self.train_propagation())
            || learned(&self.eval_propagation())
    }

    pub fn episode_spec(&self, augment: bool) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            unlabeled: if self.propagation.memory_mode == MemoryMode::SemiSupervised {
                self.unlabeled
            } else {
                0
            },
            augment: augment && self.augment,
        }
    }

    /// Canonical text of everything that influences training. Two configs
    /// with the same key train bit-identical backbones for a given seed.
    pub fn training_key(&self) -> String {
        KEYS.iter()
            .filter(|k| !EVAL_ONLY_KEYS.contains(k))
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.30000000000000004").unwrap();
        cfg.set("eval_k", "7").unwrap();
        cfg.set("eval_split", "val+test").unwrap();
        cfg.set("mlp_dims", "").unwrap();
        cfg.set("seeds", "3, 1,4").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.seeds, vec![3, 1, 4]);
        assert!(back.encoder.mlp_dims.is_empty());
    }

    #[test]
    fn comments_blank_lines_and_unknown_keys() {
        let cfg = RunConfig::from_text("# header\n\nk = 5 # five\nvariant = mrn_max\n").unwrap();
        assert_eq!(cfg.propagation.k, 5);
        assert_eq!(cfg.variant, Variant::MrnMax);
        assert!(RunConfig::from_text("kk = 5\n").is_err());
        assert!(RunConfig::from_text("k 5\n").is_err());
        assert!(RunConfig::from_text("k = five\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::from_text("k = 5\n")
            .unwrap()
            .with_overrides(&["k=9", "strategy = max"])
            .unwrap();
        assert_eq!(cfg.propagation.k, 9);
        assert_eq!(cfg.propagation.strategy, Strategy::Max);
        assert!(RunConfig::default().with_overrides(&["k"]).is_err());
    }

    #[test]
    fn halve_every_must_be_positive() {
        assert!(RunConfig::from_text("halve_every = 0\n").is_err());
    }

    #[test]
    fn variants_pin_their_settings() {
        let mut cfg = RunConfig {
            variant: Variant::MrnZero,
            ..Default::default()
        };
        let p = cfg.train_propagation();
        assert_eq!((p.k, p.depth), (0, 0));
        assert!(p.is_identity());
        cfg.eval_k = Some(10);
        assert_eq!(cfg.eval_propagation().k, 0);

        cfg.variant = Variant::MrnEuclid;
        assert_eq!(cfg.train_propagation().metric, MetricKind::SquaredEuclidean);
        assert_eq!(cfg.metric_dc, MetricKind::LearnedRelation);

        cfg.variant = Variant::MrnMean;
        assert_eq!(cfg.train_propagation().strategy, Strategy::Mean);
        cfg.variant = Variant::MrnMax;
        assert_eq!(cfg.eval_propagation().strategy, Strategy::Max);
    }

    #[test]
    fn eval_overrides_leave_training_untouched() {
        let mut cfg = RunConfig::default();
        let key = cfg.training_key();
        cfg.eval_lambda = Some(1.0);
        cfg.eval_depth = Some(3);
        cfg.seeds = vec![8];
        assert_eq!(cfg.training_key(), key);
        assert_eq!(cfg.eval_propagation().depth, 3);
        assert_eq!(cfg.train_propagation().depth, 1);
        cfg.propagation.lambda = 0.5;
        assert_ne!(cfg.training_key(), key);
    }

    #[test]
    fn every_key_is_settable_with_its_own_value() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for k in KEYS {
            other.set(k, &cfg.get(k).unwrap()).unwrap();
        }
        assert_eq!(other, cfg);
    }
}
