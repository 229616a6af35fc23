//! Parameter storage.
//!
//! Parameters live in *groups*, keyed by a [`Family`] (the architecture of the
//! group: a per-path linear, a per-path string LSTM, the shared SumLSTM, ...)
//! and a [`PathKey`] (a canonical element path, a shared singleton, or the
//! per-family unknown-path fallback). Groups hold named tensors; slots created
//! through a fixed spec have stable indices, while character/category rows are
//! added lazily during the training pre-pass and frozen afterwards.

use crate::autodiff::{ParamKey, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Container type discriminator for families shared per container kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Container {
    Array,
    Object,
}

/// Architectural family of a parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    /// w·x̂ + b for numbers.
    NumberLin,
    /// w·int(v) + b for booleans.
    BoolLin,
    /// Character-level LSTM for strings (per path).
    StrLstm,
    /// One embedding row per distinct value (per path).
    CatTable,
    /// Path-specific final linear of the deep-set container embedder.
    DeepSetFinal(Container),
    /// Shared element-embedding MLP of the deep-set embedder.
    DeepSetShared(Container),
    /// Shared pooling linear of the deep-set embedder.
    DeepSetPool(Container),
    /// Per-path vanilla LSTM over c‖h child inputs.
    ArrayLstm,
    /// Shared Child-Sum Tree-LSTM cell.
    SumLstmShared,
    /// Path-specific linear applied to the SumLSTM hidden state.
    ObjLinear,
    /// Per-path LSTM over child latents for XML tags.
    TagLstm,
    /// Per-attribute-id character LSTM for XML attribute values.
    AttrLstm,
    /// Shared character embedding table.
    CharTable,
    /// Final linear map to class logits.
    Output,
    /// MLP baseline layer.
    MlpLayer(u16),
}

/// Path component of a group key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathKey {
    /// Singleton shared across the model.
    Shared,
    /// Canonical element path (or attribute id for [`Family::AttrLstm`]).
    Path(String),
    /// Fallback for (type, path) pairs unseen in training.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub family: Family,
    pub path: PathKey,
}

impl GroupKey {
    pub fn shared(family: Family) -> Self {
        GroupKey { family, path: PathKey::Shared }
    }

    pub fn at(family: Family, path: impl Into<String>) -> Self {
        GroupKey { family, path: PathKey::Path(path.into()) }
    }

    pub fn unknown(family: Family) -> Self {
        GroupKey { family, path: PathKey::Unknown }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier,
    Zero,
    /// Constant fill (forget-gate biases).
    Const(f64),
}

pub struct SlotSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl SlotSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        SlotSpec { name: name.into(), rows, cols, init }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupId(pub u32);

pub struct Group {
    key: GroupKey,
    slot_names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    /// Lazy per-character rows (string/attribute embedders).
    chars: HashMap<char, u32>,
    /// Lazy per-value rows (categorical embedders).
    values: HashMap<String, u32>,
}

impl Group {
    pub fn key(&self) -> &GroupKey {
        &self.key
    }

    pub fn slot_names(&self) -> &[String] {
        &self.slot_names
    }

    pub fn tensors(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    pub fn char_slot(&self, c: char) -> Option<u32> {
        self.chars.get(&c).copied()
    }

    pub fn value_slot(&self, v: &str) -> Option<u32> {
        self.values.get(v).copied()
    }

    pub fn slot_by_name(&self, name: &str) -> Option<u32> {
        self.slot_names.iter().position(|n| n == name).map(|i| i as u32)
    }
}

const UNK_SLOT_NAME: &str = "unk";

/// Named real tensors keyed by parameter group, plus the seeded source of
/// initialization randomness. Group creation order is deterministic, so a
/// fixed seed and dataset reproduce bit-identical parameters.
pub struct ParameterStore {
    groups: Vec<Group>,
    index: HashMap<GroupKey, GroupId>,
    rng: ChaCha8Rng,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            groups: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5852_4c41), // "XRLA" tag keeps init
            // decoupled from other seed consumers
        }
    }

    pub fn lookup(&self, key: &GroupKey) -> Option<GroupId> {
        self.index.get(key).copied()
    }

    pub fn group(&self, id: GroupId) -> &Group {
        &self.groups[id.0 as usize]
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn init_tensor(&mut self, rows: usize, cols: usize, init: Init) -> Tensor {
        let uniform = |rng: &mut ChaCha8Rng, bound: f64| {
            Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        match init {
            Init::Zero => Tensor::zeros(rows, cols),
            Init::Xavier => uniform(&mut self.rng, (6.0 / (rows + cols) as f64).sqrt()),
            Init::Const(v) => Tensor::from_vec(rows, cols, vec![v; rows * cols]),
        }
    }

    /// Get or create the group for `key`. The spec closure runs only on
    /// creation and defines the fixed slots (in stable index order).
    pub fn ensure_group(&mut self, key: GroupKey, spec: impl FnOnce() -> Vec<SlotSpec>) -> GroupId {
        if let Some(id) = self.index.get(&key) {
            return *id;
        }
        let specs = spec();
        let mut slot_names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let t = self.init_tensor(s.rows, s.cols, s.init);
            slot_names.push(s.name);
            tensors.push(Arc::new(t));
        }
        let id = GroupId(self.groups.len() as u32);
        self.groups.push(Group {
            key: key.clone(),
            slot_names,
            tensors,
            chars: HashMap::new(),
            values: HashMap::new(),
        });
        self.index.insert(key, id);
        id
    }

    fn push_slot(&mut self, id: GroupId, name: String, rows: usize, cols: usize, init: Init) -> u32 {
        let t = self.init_tensor(rows, cols, init);
        let g = &mut self.groups[id.0 as usize];
        let slot = g.tensors.len() as u32;
        g.slot_names.push(name);
        g.tensors.push(Arc::new(t));
        slot
    }

    /// Lazily create the embedding row for a character (training pre-pass).
    pub fn ensure_char(&mut self, id: GroupId, c: char, m: usize) -> u32 {
        if let Some(slot) = self.groups[id.0 as usize].chars.get(&c) {
            return *slot;
        }
        let slot = self.push_slot(id, format!("c:{c}"), m, 1, Init::Xavier);
        self.groups[id.0 as usize].chars.insert(c, slot);
        slot
    }

    /// Lazily create the embedding row for a categorical value.
    pub fn ensure_value(&mut self, id: GroupId, v: &str, m: usize) -> u32 {
        if let Some(slot) = self.groups[id.0 as usize].values.get(v) {
            return *slot;
        }
        let slot = self.push_slot(id, format!("v:{v}"), m, 1, Init::Xavier);
        self.groups[id.0 as usize].values.insert(v.to_string(), slot);
        slot
    }

    /// Reserved row for characters/values unseen in training.
    pub fn ensure_unk(&mut self, id: GroupId, m: usize) -> u32 {
        if let Some(slot) = self.groups[id.0 as usize].slot_by_name(UNK_SLOT_NAME) {
            return slot;
        }
        self.push_slot(id, UNK_SLOT_NAME.to_string(), m, 1, Init::Xavier)
    }

    pub fn unk_slot(&self, id: GroupId) -> Option<u32> {
        self.group(id).slot_by_name(UNK_SLOT_NAME)
    }

    pub fn tensor(&self, key: ParamKey) -> &Arc<Tensor> {
        &self.groups[key.group as usize].tensors[key.slot as usize]
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor {
        Arc::make_mut(&mut self.groups[key.group as usize].tensors[key.slot as usize])
    }

    /// All parameter keys in deterministic (group, slot) order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut out = Vec::new();
        for (g, group) in self.groups.iter().enumerate() {
            for s in 0..group.tensors.len() {
                out.push(ParamKey { group: g as u32, slot: s as u32 });
            }
        }
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.groups.iter().map(|g| g.tensors.iter().map(|t| t.len()).sum::<usize>()).sum()
    }

    /// Rebuild the lazy lookup maps after deserialization.
    pub(crate) fn rebuild_indices(&mut self) {
        for g in &mut self.groups {
            g.chars.clear();
            g.values.clear();
            for (i, name) in g.slot_names.iter().enumerate() {
                if let Some(rest) = name.strip_prefix("c:") {
                    let mut it = rest.chars();
                    if let (Some(c), None) = (it.next(), it.next()) {
                        g.chars.insert(c, i as u32);
                    }
                } else if let Some(rest) = name.strip_prefix("v:") {
                    g.values.insert(rest.to_string(), i as u32);
                }
            }
        }
    }

    pub(crate) fn from_parts(groups: Vec<(GroupKey, Vec<(String, Tensor)>)>, seed: u64) -> Self {
        let mut store = ParameterStore::new(seed);
        for (key, slots) in groups {
            let id = GroupId(store.groups.len() as u32);
            let mut slot_names = Vec::with_capacity(slots.len());
            let mut tensors = Vec::with_capacity(slots.len());
            for (name, t) in slots {
                slot_names.push(name);
                tensors.push(Arc::new(t));
            }
            store.groups.push(Group {
                key: key.clone(),
                slot_names,
                tensors,
                chars: HashMap::new(),
                values: HashMap::new(),
            });
            store.index.insert(key, id);
        }
        store.rebuild_indices();
        store
    }

    pub fn iter_groups(&self) -> impl Iterator<Item = (GroupId, &Group)> {
        self.groups.iter().enumerate().map(|(i, g)| (GroupId(i as u32), g))
    }
}
