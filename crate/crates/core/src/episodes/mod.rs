//! Datasets and episodic sampling.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{
    decode_items, encode_dataset, encode_manifest, load_dataset, manifest_path, parse_manifest,
    read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};
pub use synth::{synth_dataset, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

/// Parse a `+`-separated split list such as `val+test`.
pub fn parse_splits(s: &str) -> Result<Vec<Split>> {
    let mut out: Vec<Split> = s
        .split('+')
        .map(|p| p.trim().parse())
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// One raw instance: an image `[C, H, W]` or a feature vector `[len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub class_id: u32,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Immutable labelled collection with a class-level split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    splits: BTreeMap<u32, Split>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    /// Every class present in `items` must be assigned a split; all items
    /// must share one shape.
    pub fn new(items: Vec<Item>, splits: BTreeMap<u32, Split>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Dataset("no items".into()));
        };
        let shape = first.shape.clone();
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if it.shape != shape {
                return Err(Error::Dataset(format!(
                    "item {i} has shape {:?}, expected {shape:?}",
                    it.shape
                )));
            }
            if it.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Dataset(format!(
                    "item {i} payload does not match its shape"
                )));
            }
            if !splits.contains_key(&it.class_id) {
                return Err(Error::Dataset(format!(
                    "class {} has no split assignment",
                    it.class_id
                )));
            }
            class_index.entry(it.class_id).or_default().push(i);
        }
        Ok(Self {
            items,
            splits,
            class_index,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.items[0].shape
    }

    /// Class id to split, including classes without items.
    pub fn split_map(&self) -> &BTreeMap<u32, Split> {
        &self.splits
    }

    pub fn split_of(&self, class_id: u32) -> Option<Split> {
        self.splits.get(&class_id).copied()
    }

    /// Item indices of `class_id`, in storage order.
    pub fn class_items(&self, class_id: u32) -> &[usize] {
        self.class_index.get(&class_id).map_or(&[], Vec::as_slice)
    }

    /// Classes with at least one item in any of `splits`, ascending.
    pub fn classes(&self, splits: &[Split]) -> Vec<u32> {
        self.class_index
            .keys()
            .copied()
            .filter(|c| splits.contains(&self.splits[c]))
            .collect()
    }
}

/// Episode shape: `ways` classes with `shots` supports, `queries` queries and
/// `unlabeled` extra unlabelled items each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub unlabeled: usize,
    /// Random horizontal flips on train-split images.
    pub augment: bool,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        Self {
            ways,
            shots,
            queries,
            unlabeled: 0,
            augment: false,
        }
    }

    fn per_class(&self) -> usize {
        self.shots + self.queries + self.unlabeled
    }
}

/// One sampled task. Tensors are `(rows, item_shape...)`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub unlabeled: Option<Tensor>,
    /// Episode-local label to global class id.
    pub class_map: Vec<u32>,
    pub seed: u64,
    pub support_items: Vec<usize>,
    pub query_items: Vec<usize>,
    pub unlabeled_items: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }
}

/// Reverse the last axis of a `[.., W]` payload.
pub fn hflip(shape: &[usize], data: &[f32]) -> Vec<f32> {
    let w = *shape.last().unwrap_or(&1);
    if w == 0 {
        return data.to_vec();
    }
    data.chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn stack(dataset: &Dataset, idx: &[usize], flips: &[bool]) -> Result<Tensor> {
    let shape = dataset.item_shape();
    let mut data = Vec::with_capacity(idx.len() * shape.iter().product::<usize>());
    for (&i, &f) in idx.iter().zip(flips) {
        let it = &dataset.items[i];
        if f {
            data.extend(hflip(shape, &it.data).into_iter().map(f64::from));
        } else {
            data.extend(it.data.iter().map(|&v| f64::from(v)));
        }
    }
    let mut full = vec![idx.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Draw one episode from the classes of `splits`. Classes and items are
/// sampled uniformly without replacement; local labels follow the order in
/// which classes were drawn. `seed` fully determines the result.
pub fn sample_episode(
    dataset: &Dataset,
    splits: &[Split],
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<Episode> {
    if spec.ways == 0 || spec.shots == 0 || spec.queries == 0 {
        return Err(Error::Dataset(format!("degenerate episode shape {spec:?}")));
    }
    let pool = dataset.classes(splits);
    if pool.len() < spec.ways {
        return Err(Error::Dataset(format!(
            "{} classes in {splits:?}, episode needs {}",
            pool.len(),
            spec.ways
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_map: Vec<u32> = pool.choose_multiple(&mut rng, spec.ways).copied().collect();
    let need = spec.per_class();
    let (mut s, mut q, mut u) = (Vec::new(), Vec::new(), Vec::new());
    let (mut sl, mut ql) = (Vec::new(), Vec::new());
    for (local, &c) in class_map.iter().enumerate() {
        let items = dataset.class_items(c);
        if items.len() < need {
            return Err(Error::Dataset(format!(
                "class {c} has {} items, episode needs {need}",
                items.len()
            )));
        }
        let mut picked: Vec<usize> = items.choose_multiple(&mut rng, need).copied().collect();
        picked.shuffle(&mut rng);
        s.extend_from_slice(&picked[..spec.shots]);
        q.extend_from_slice(&picked[spec.shots..spec.shots + spec.queries]);
        u.extend_from_slice(&picked[spec.shots + spec.queries..]);
        sl.extend(std::iter::repeat_n(local, spec.shots));
        ql.extend(std::iter::repeat_n(local, spec.queries));
    }
    debug_assert!(
        s.iter().all(|i| !q.contains(i)),
        "support and query overlap"
    );

    let image = dataset.item_shape().len() == 3;
    let mut flips = |idx: &[usize]| -> Vec<bool> {
        idx.iter()
            .map(|&i| {
                spec.augment
                    && image
                    && dataset.split_of(dataset.items[i].class_id) == Some(Split::Train)
                    && rng.random_bool(0.5)
            })
            .collect()
    };
    let (fs, fq, fu) = (flips(&s), flips(&q), flips(&u));
    Ok(Episode {
        support: stack(dataset, &s, &fs)?,
        support_labels: sl,
        query: stack(dataset, &q, &fq)?,
        query_labels: ql,
        unlabeled: if u.is_empty() {
            None
        } else {
            Some(stack(dataset, &u, &fu)?)
        },
        class_map,
        seed,
        support_items: s,
        query_items: q,
        unlabeled_items: u,
    })
}
