//! Episodic memory and embedding enhancement by neighborhood propagation.
//!
//! The memory holds one slot per admitted instance of an episode. Each
//! propagation depth rebuilds a directed relation graph from the current slot
//! contents, picks every node's `k` nearest slots (never itself), and
//! replaces the node by `lambda * f_i + (1 - lambda) * aggregate(neighbors)`.
//! All nodes at one depth read pre-step values only, so the update is
//! order-independent.
//!
//! In support-only mode the queries are carried as transient nodes: they read
//! from the memory but are never admitted into it.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{usage, Error, Result};
use crate::network::Forward;
use crate::numerics::{softmin_weights, Tensor, Var};
use crate::relation::MetricKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Support,
    Query,
    Unlabeled,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Support => "s",
            Provenance::Query => "q",
            Provenance::Unlabeled => "u",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "s" => Some(Provenance::Support),
            "q" => Some(Provenance::Query),
            "u" => Some(Provenance::Unlabeled),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    SupportOnly,
    Transductive,
    SemiSupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Weighted,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationConfig {
    pub k: usize,
    pub depth: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub metric: MetricKind,
    pub memory_mode: MemoryMode,
    /// Average `D(i, j)` and `D(j, i)` before neighbor selection.
    pub symmetrize: bool,
    /// Treat the aggregated term as a constant in the backward pass.
    pub stop_grad: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k: 20,
            depth: 1,
            lambda: 0.2,
            strategy: Strategy::Weighted,
            metric: MetricKind::LearnedRelation,
            memory_mode: MemoryMode::Transductive,
            symmetrize: false,
            stop_grad: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether propagation leaves every slot untouched.
    pub fn is_identity(&self) -> bool {
        self.k == 0 || self.depth == 0 || self.lambda == 1.0
    }
}

/// Embeddings of one episode, split by role. Each is `(rows, feature_len)`.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeFeatures<'t> {
    pub support: Var<'t>,
    pub query: Var<'t>,
    pub unlabeled: Option<Var<'t>>,
}

/// Per-episode working memory. Rows are ordered support, query, unlabeled;
/// the first `slots` rows are admitted, the rest are transient.
pub struct EpisodicMemory<'t> {
    nodes: Var<'t>,
    provenance: Vec<Provenance>,
    slots: usize,
    n_support: usize,
    n_query: usize,
    episode_id: u64,
}

impl fmt::Debug for EpisodicMemory<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EpisodicMemory")
            .field("slots", &self.slots)
            .field("nodes", &self.provenance.len())
            .field("episode_id", &self.episode_id)
            .finish()
    }
}

impl<'t> EpisodicMemory<'t> {
    /// Number of admitted slots `m`.
    pub fn slot_count(&self) -> usize {
        self.slots
    }

    /// Admitted plus transient rows.
    pub fn node_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn episode_id(&self) -> u64 {
        self.episode_id
    }

    /// Provenance of admitted slots.
    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance[..self.slots]
    }

    /// Every node: admitted slots then transient rows.
    pub fn nodes(&self) -> Var<'t> {
        self.nodes
    }

    pub fn slots(&self) -> Result<Var<'t>> {
        if self.slots == self.node_count() {
            Ok(self.nodes)
        } else {
            self.nodes.slice_rows(0..self.slots)
        }
    }

    pub fn support(&self) -> Result<Var<'t>> {
        self.nodes.slice_rows(0..self.n_support)
    }

    pub fn query(&self) -> Result<Var<'t>> {
        self.nodes
            .slice_rows(self.n_support..self.n_support + self.n_query)
    }
}

fn rows(v: &Var<'_>) -> usize {
    v.shape()[0]
}

/// Build the memory for one episode according to `mode`.
pub fn memory_init<'t>(
    features: &EpisodeFeatures<'t>,
    mode: MemoryMode,
    episode_id: u64,
) -> Result<EpisodicMemory<'t>> {
    let (ns, nq) = (rows(&features.support), rows(&features.query));
    let mut parts = vec![features.support, features.query];
    let mut provenance = vec![Provenance::Support; ns];
    provenance.extend(std::iter::repeat_n(Provenance::Query, nq));
    let slots = match mode {
        MemoryMode::SupportOnly => ns,
        MemoryMode::Transductive => ns + nq,
        MemoryMode::SemiSupervised => {
            let Some(u) = features.unlabeled else {
                return usage("semi-supervised memory needs an unlabeled pool");
            };
            let nu = rows(&u);
            parts.push(u);
            provenance.extend(std::iter::repeat_n(Provenance::Unlabeled, nu));
            ns + nq + nu
        }
    };
    if slots == 0 {
        return usage("memory_init: no instances admitted");
    }
    let nodes = Var::concat_rows(&parts)?;
    Ok(EpisodicMemory {
        nodes,
        provenance,
        slots,
        n_support: ns,
        n_query: nq,
        episode_id,
    })
}

/// Weighted graph over the memory: `distances[i, j] = D(node_i, slot_j)`.
pub struct RelationGraph<'t> {
    pub distances: Var<'t>,
    pub neighbors: Vec<Vec<usize>>,
}

/// For every row of an `(n, m)` distance matrix, the `k` smallest-distance
/// columns in ascending order, ties broken by lower index. Row `i < m` never
/// lists itself; transient rows (`i >= m`) may use every slot.
pub fn select_neighbors(dist: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let (n, m) = (dist.shape()[0], dist.shape()[1]);
    (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| dist.at2(i, a).total_cmp(&dist.at2(i, b)).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect()
}

fn graph_over<'t>(
    fwd: &Forward<'_, 't>,
    nodes: Var<'t>,
    slots: usize,
    metric: MetricKind,
    k: usize,
    symmetrize: bool,
) -> Result<RelationGraph<'t>> {
    let mem = if slots == rows(&nodes) {
        nodes
    } else {
        nodes.slice_rows(0..slots)?
    };
    let mut distances = fwd.distances(metric, nodes, mem)?;
    if symmetrize {
        let back = fwd.distances(metric, mem, nodes)?.transpose()?;
        distances = distances.add(&back)?.scale(0.5)?;
    }
    let neighbors = select_neighbors(&distances.value(), k);
    Ok(RelationGraph {
        distances,
        neighbors,
    })
}

/// Relation graph of the memory's current contents.
pub fn build_graph<'t>(
    memory: &EpisodicMemory<'t>,
    fwd: &Forward<'_, 't>,
    metric: MetricKind,
    k: usize,
    symmetrize: bool,
) -> Result<RelationGraph<'t>> {
    graph_over(fwd, memory.nodes, memory.slots, metric, k, symmetrize)
}

/// Attention over a node's neighbors: `softmax(-d)`, shifted by the minimum
/// distance for stability.
pub fn aggregation_weights(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.is_empty() {
        return usage("aggregation_weights: empty neighbor set");
    }
    Ok(softmin_weights(distances))
}

fn aggregate<'t>(
    fwd: &Forward<'_, 't>,
    graph: &RelationGraph<'t>,
    src: Var<'t>,
    strategy: Strategy,
) -> Result<Var<'t>> {
    let lists = &graph.neighbors;
    match strategy {
        Strategy::Weighted => {
            let w = graph.distances.neighbor_weights(lists)?;
            Var::neighbor_sum(&w, &src, lists)
        }
        Strategy::Mean => {
            let w: Vec<f64> = lists
                .iter()
                .flat_map(|l| std::iter::repeat_n(1.0 / l.len() as f64, l.len()))
                .collect();
            let w = fwd.tape.constant(Tensor::from_vec(w));
            Var::neighbor_sum(&w, &src, lists)
        }
        Strategy::Max => Var::neighbor_max(&src, lists),
    }
}

/// Run `cfg.depth` synchronous propagation steps over the memory.
pub fn propagate<'t>(
    memory: &mut EpisodicMemory<'t>,
    cfg: &PropagationConfig,
    fwd: &Forward<'_, 't>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(());
    }
    let m = memory.slots;
    for _ in 0..cfg.depth {
        let base = if cfg.stop_grad {
            memory.nodes.detach()
        } else {
            memory.nodes
        };
        let graph = graph_over(fwd, base, m, cfg.metric, cfg.k, cfg.symmetrize)?;
        let src = if m == rows(&base) {
            base
        } else {
            base.slice_rows(0..m)?
        };
        let agg = aggregate(fwd, &graph, src, cfg.strategy)?;
        let active: Vec<bool> = graph.neighbors.iter().map(|l| !l.is_empty()).collect();
        memory.nodes = memory.nodes.blend(&agg, cfg.lambda, &active)?;
    }
    Ok(())
}

/// Similarity matrix `exp(-D)` between admitted slots.
pub fn similarity_matrix(
    memory: &EpisodicMemory<'_>,
    fwd: &Forward<'_, '_>,
    metric: MetricKind,
) -> Result<Tensor> {
    let slots = memory.slots()?;
    let d = fwd.distances(metric, slots, slots)?;
    Ok(d.value().map(|v| (-v).exp()))
}

/// Write the slot similarity matrix as CSV with a provenance header.
pub fn export_similarity(
    memory: &EpisodicMemory<'_>,
    fwd: &Forward<'_, '_>,
    metric: MetricKind,
    path: &Path,
) -> Result<Tensor> {
    let sim = similarity_matrix(memory, fwd, metric)?;
    let mut out = String::from("# provenance: ");
    let tags: Vec<&str> = memory.provenance().iter().map(|p| p.tag()).collect();
    out.push_str(&tags.join(","));
    out.push('\n');
    for i in 0..sim.rows() {
        let row: Vec<String> = sim.row(i).iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(sim)
}

/// Read back a file written by [`export_similarity`].
pub fn read_similarity(path: &Path) -> Result<(Vec<Provenance>, Tensor)> {
    let text = fs::read_to_string(path)?;
    let bad = |msg: String| Error::Format { offset: 0, msg };
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("# provenance: "))
        .ok_or_else(|| bad("missing provenance header".into()))?;
    let prov = header
        .split(',')
        .map(|t| Provenance::from_tag(t).ok_or_else(|| bad(format!("unknown provenance `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for line in lines {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() != prov.len() {
        return Err(bad(format!("{} rows for {} slots", rows.len(), prov.len())));
    }
    Ok((prov, Tensor::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::Mode;
    use crate::numerics::{ParamStore, Tape};
    use crate::relation::{init_relation, RelationConfig};

    fn euclid(k: usize, depth: usize, lambda: f64, strategy: Strategy) -> PropagationConfig {
        PropagationConfig {
            k,
            depth,
            lambda,
            strategy,
            metric: MetricKind::SquaredEuclidean,
            ..Default::default()
        }
    }

    fn col(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    /// Propagate `slots` transductively with no queries.
    fn run(
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

    fn no_params() -> (ParamStore, RelationConfig) {
        (ParamStore::new(), RelationConfig::default())
    }

    #[test]
    fn memory_sizes_follow_mode() {
        let tape = Tape::new();
        let feats = EpisodeFeatures {
            support: tape.constant(Tensor::zeros(&[5, 4])),
            query: tape.constant(Tensor::zeros(&[75, 4])),
            unlabeled: Some(tape.constant(Tensor::zeros(&[20, 4]))),
        };
        assert_eq!(
            memory_init(&feats, MemoryMode::Transductive, 1)
                .unwrap()
                .slot_count(),
            80
        );
        assert_eq!(
            memory_init(&feats, MemoryMode::SemiSupervised, 1)
                .unwrap()
                .slot_count(),
            100
        );
        let five_shot = EpisodeFeatures {
            support: tape.constant(Tensor::zeros(&[25, 4])),
            query: tape.constant(Tensor::zeros(&[50, 4])),
            unlabeled: None,
        };
        let mem = memory_init(&five_shot, MemoryMode::SupportOnly, 2).unwrap();
        assert_eq!(mem.slot_count(), 25);
        assert_eq!(mem.node_count(), 75);
        assert!(mem.provenance().iter().all(|&p| p == Provenance::Support));
        assert!(memory_init(&five_shot, MemoryMode::SemiSupervised, 2).is_err());

        let empty = EpisodeFeatures {
            support: tape.constant(Tensor::zeros(&[0, 4])),
            query: tape.constant(Tensor::zeros(&[3, 4])),
            unlabeled: None,
        };
        assert!(matches!(
            memory_init(&empty, MemoryMode::SupportOnly, 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn hand_graph_neighbors() {
        let d = Tensor::from_rows(&[
            vec![0.0, 1.0, 16.0],
            vec![1.0, 0.0, 9.0],
            vec![16.0, 9.0, 0.0],
        ])
        .unwrap();
        assert_eq!(select_neighbors(&d, 1), vec![vec![1], vec![0], vec![1]]);
        assert_eq!(
            select_neighbors(&d, 5),
            vec![vec![1, 2], vec![0, 2], vec![1, 0]]
        );
        assert!(select_neighbors(&d, 0).iter().all(Vec::is_empty));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = Tensor::from_rows(&[vec![0.0, 2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(select_neighbors(&d, 2), vec![vec![1, 2]]);
    }

    #[test]
    fn build_graph_uses_current_slots() {
        let (params, rel) = no_params();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Eval, &rel);
        let feats = EpisodeFeatures {
            support: tape.constant(col(&[0.0, 1.0, 4.0])),
            query: tape.constant(Tensor::zeros(&[0, 1])),
            unlabeled: None,
        };
        let mem = memory_init(&feats, MemoryMode::Transductive, 0).unwrap();
        let g = build_graph(&mem, &fwd, MetricKind::SquaredEuclidean, 1, false).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(
            g.distances.value().data(),
            &[0.0, 1.0, 16.0, 1.0, 0.0, 9.0, 16.0, 9.0, 0.0]
        );
    }

    #[test]
    fn weight_examples() {
        assert_eq!(aggregation_weights(&[3.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        let w = aggregation_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!(aggregation_weights(&[]).is_err());
    }

    #[test]
    fn one_dimensional_hand_case() {
        let (params, rel) = no_params();
        let out = run(
            &col(&[0.0, 1.0, 4.0]),
            &euclid(1, 1, 0.2, Strategy::Weighted),
            &params,
            &rel,
        );
        let expect = [0.8, 0.2, 1.6];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn lambda_one_is_bitwise_identity() {
        let (params, rel) = no_params();
        let slots = col(&[-0.0, 1.5, 4.0, -2.25]);
        for k in [1, 3] {
            for d in [1, 4] {
                let out = run(
                    &slots,
                    &euclid(k, d, 1.0, Strategy::Weighted),
                    &params,
                    &rel,
                );
                let same = out
                    .data()
                    .iter()
                    .zip(slots.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same);
            }
        }
    }

    #[test]
    fn rejects_bad_lambda() {
        let (params, rel) = no_params();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Eval, &rel);
        let feats = EpisodeFeatures {
            support: tape.constant(col(&[0.0, 1.0])),
            query: tape.constant(Tensor::zeros(&[0, 1])),
            unlabeled: None,
        };
        let mut mem = memory_init(&feats, MemoryMode::Transductive, 0).unwrap();
        let cfg = euclid(1, 1, 1.5, Strategy::Weighted);
        assert!(matches!(
            propagate(&mut mem, &cfg, &fwd),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn support_only_queries_read_but_are_not_read() {
        let (params, rel) = no_params();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Eval, &rel);
        // Two supports far apart, one query right next to support 0.
        let feats = EpisodeFeatures {
            support: tape.constant(col(&[0.0, 10.0])),
            query: tape.constant(col(&[0.5])),
            unlabeled: None,
        };
        let mut mem = memory_init(&feats, MemoryMode::SupportOnly, 0).unwrap();
        propagate(&mut mem, &euclid(1, 1, 0.5, Strategy::Weighted), &fwd).unwrap();
        // support 0's only neighbor is support 1, never the nearby query
        assert_eq!(mem.nodes().value().data(), &[5.0, 5.0, 0.25]);
    }

    #[test]
    fn mean_equals_weighted_when_distances_tie() {
        let (params, rel) = no_params();
        // Regular simplex corners: every pairwise distance equal.
        let s = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let a = run(&s, &euclid(2, 1, 0.3, Strategy::Weighted), &params, &rel);
        let b = run(&s, &euclid(2, 1, 0.3, Strategy::Mean), &params, &rel);
        assert_eq!(a, b);
    }

    #[test]
    fn max_strategy_takes_elementwise_maximum() {
        let (params, rel) = no_params();
        let s = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let out = run(&s, &euclid(2, 1, 0.0, Strategy::Max), &params, &rel);
        assert_eq!(out.row(0), &[1.0, 1.0]);
        assert_eq!(out.row(1), &[0.0, 1.0]);
        assert_eq!(out.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn collapse_on_uniform_complete_graph() {
        let (params, rel) = no_params();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let s = Tensor::new(
            vec![5, 3],
            (0..15).map(|_| r.random_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let spread = |t: &Tensor| {
            let mut worst = 0.0f64;
            for i in 0..5 {
                for j in 0..5 {
                    let d: f64 = t
                        .row(i)
                        .iter()
                        .zip(t.row(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    worst = worst.max(d);
                }
            }
            worst
        };
        let mut prev = spread(&s);
        for depth in 1..=10 {
            // mean over the 4 other nodes is the uniform-weight complete graph
            let out = run(&s, &euclid(4, depth, 0.5, Strategy::Mean), &params, &rel);
            let now = spread(&out);
            assert!(now < prev, "depth {depth}: {now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn similarity_export_round_trips() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let rel = RelationConfig {
            feature_shape: vec![3],
            ..Default::default()
        };
        let mut params = ParamStore::new();
        init_relation(&rel, &mut params, &mut r).unwrap();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Eval, &rel);
        let feats = EpisodeFeatures {
            support: tape.constant(
                Tensor::new(
                    vec![2, 3],
                    (0..6).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            ),
            query: tape.constant(
                Tensor::new(
                    vec![3, 3],
                    (0..9).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            ),
            unlabeled: None,
        };
        let mem = memory_init(&feats, MemoryMode::Transductive, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        for metric in [MetricKind::LearnedRelation, MetricKind::SquaredEuclidean] {
            let sim = export_similarity(&mem, &fwd, metric, &path).unwrap();
            let text = fs::read_to_string(&path).unwrap();
            assert!(text.starts_with("# provenance: s,s,q,q,q\n"));
            let (prov, back) = read_similarity(&path).unwrap();
            assert_eq!(prov.len(), 5);
            assert!(back.max_abs_diff(&sim).unwrap() < 1e-9);
            if metric == MetricKind::SquaredEuclidean {
                assert!((0..5).all(|i| sim.at2(i, i) == 1.0));
            }
        }
    }

    #[test]
    fn identical_slots_have_uniform_similarity() {
        let (params, rel) = no_params();
        let tape = Tape::new();
        let fwd = Forward::new(&tape, &params, Mode::Eval, &rel);
        let feats = EpisodeFeatures {
            support: tape.constant(Tensor::full(&[3, 2], 0.7)),
            query: tape.constant(Tensor::zeros(&[0, 2])),
            unlabeled: None,
        };
        let mem = memory_init(&feats, MemoryMode::Transductive, 0).unwrap();
        let sim = similarity_matrix(&mem, &fwd, MetricKind::SquaredEuclidean).unwrap();
        assert!(sim.data().iter().all(|&v| v == sim.data()[0]));
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution(d in prop::collection::vec(0.0..50.0f64, 1..30)) {
            let w = aggregation_weights(&d).unwrap();
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weighted_update_stays_in_bounding_box(
            vals in prop::collection::vec(-10.0..10.0f64, 6 * 2),
            k in 1usize..6,
            depth in 1usize..4,
            lambda in 0.0..1.0f64,
        ) {
            let (params, rel) = no_params();
            let s = Tensor::new(vec![6, 2], vals).unwrap();
            let out = run(&s, &euclid(k, depth, lambda, Strategy::Weighted), &params, &rel);
            for c in 0..2 {
                let lo = (0..6).map(|i| s.at2(i, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..6).map(|i| s.at2(i, c)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..6 {
                    prop_assert!(out.at2(i, c) >= lo - 1e-12 && out.at2(i, c) <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn propagation_commutes_with_slot_permutation(
            vals in prop::collection::vec(-10.0..10.0f64, 7 * 2),
            seed in 0u64..1000,
        ) {
            let (params, rel) = no_params();
            let s = Tensor::new(vec![7, 2], vals).unwrap();
            let mut perm: Vec<usize> = (0..7).collect();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..7).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let permute = |t: &Tensor| {
                Tensor::from_rows(&perm.iter().map(|&p| t.row(p).to_vec()).collect::<Vec<_>>()).unwrap()
            };
            let cfg = euclid(3, 2, 0.3, Strategy::Weighted);
            let a = permute(&run(&s, &cfg, &params, &rel));
            let b = run(&permute(&s), &cfg, &params, &rel);
            // random continuous inputs have no distance ties
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
