//! Per-example dynamic network construction.
//!
//! A [`TreeModel`] is built from a training split in one pre-pass that
//! registers every (type, path) parameter group, the normalization
//! statistics, and the label vocabulary. Embedding an element then walks the
//! tree bottom-up: each leaf dispatches to the primitive embedder selected by
//! the mapping dictionary, each container consumes its children's latents,
//! and the root hidden state feeds one linear output layer.

use crate::autodiff::{NodeId, Tape};
use crate::embedders::{
    self, deepset_mlp_spec, linear_spec, lstm_spec, sumlstm_spec, EmbedCtx, Latent, NormStats,
    NormStatsBuilder,
};
use crate::params::{Container, Family, GroupId, GroupKey, ParameterStore};
use crate::stree::{escape_segment, render_number, Element, Kind, Value};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("no mapping-dictionary entry matches ({kind}, \"{path}\")")]
    UnknownTemplate { kind: Kind, path: String },
    #[error("template '{template}' cannot embed {kind} elements")]
    InvalidTemplate { template: String, kind: Kind },
    #[error("invalid mapping pattern '{0}'")]
    InvalidPattern(String),
    #[error("invalid template name '{0}'")]
    InvalidTemplateName(String),
    #[error("mapping dictionary must be a JSON object of pattern → template entries")]
    InvalidDictionary,
    #[error("no parameters for family {family:?} at '{path}' and no fallback group")]
    UnknownPath { family: Family, path: String },
    #[error("label '{0}' does not appear in the model's vocabulary")]
    LabelUnknown(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Json(#[from] crate::stree::SyntaxError),
}

type Result<T> = std::result::Result<T, EngineError>;

// ---------------------------------------------------------------------------
// Templates and the mapping dictionary
// ---------------------------------------------------------------------------

/// Embedding-function templates selectable per (type, path).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Template {
    /// Per-path linear on the normalized scalar.
    Number,
    /// Per-path linear on int(bool).
    Boolean,
    /// Per-path character LSTM ("string").
    StringLstm,
    /// One latent vector per distinct value ("catEmbedding").
    CatEmbedding,
    /// Deep-set container embedder ("deepSets").
    DeepSets,
    /// Per-path vanilla LSTM over child (c, h) pairs ("LSTM").
    Lstm,
    /// Shared SumLSTM plus per-path linear ("sumTreeLSTM").
    SumTreeLstm,
    /// XML tag embedder: child LSTM plus attribute sum ("tagLSTM").
    TagLstm,
    /// Drop the element entirely ("ignore").
    Ignore,
}

impl Template {
    pub fn parse(name: &str) -> Result<Template> {
        Ok(match name {
            "number" => Template::Number,
            "boolean" => Template::Boolean,
            "string" => Template::StringLstm,
            "catEmbedding" => Template::CatEmbedding,
            "deepSets" => Template::DeepSets,
            "LSTM" => Template::Lstm,
            "sumTreeLSTM" => Template::SumTreeLstm,
            "tagLSTM" => Template::TagLstm,
            "ignore" => Template::Ignore,
            _ => return Err(EngineError::InvalidTemplateName(name.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Template::Number => "number",
            Template::Boolean => "boolean",
            Template::StringLstm => "string",
            Template::CatEmbedding => "catEmbedding",
            Template::DeepSets => "deepSets",
            Template::Lstm => "LSTM",
            Template::SumTreeLstm => "sumTreeLSTM",
            Template::TagLstm => "tagLSTM",
            Template::Ignore => "ignore",
        }
    }

    fn applicable(&self, kind: Kind) -> bool {
        match self {
            Template::Ignore => true,
            Template::CatEmbedding => matches!(kind, Kind::Number | Kind::Text | Kind::Boolean),
            Template::Number => kind == Kind::Number,
            Template::Boolean => kind == Kind::Boolean,
            Template::StringLstm => kind == Kind::Text,
            Template::DeepSets | Template::Lstm | Template::SumTreeLstm | Template::TagLstm => {
                matches!(kind, Kind::Array | Kind::Object)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum Tok {
    /// `..` — any possibly-empty run of segments.
    Any,
    Lit(String),
}

/// One pattern: optional `<type>~` prefix plus a path pattern, or the
/// match-everything `.*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    source: String,
    kind: Option<Kind>,
    /// `None` means `.*`: matches every type and path.
    toks: Option<Vec<Tok>>,
}

fn kind_from_name(name: &str) -> Option<Kind> {
    match name {
        "number" => Some(Kind::Number),
        "string" => Some(Kind::Text),
        "boolean" => Some(Kind::Boolean),
        "array" => Some(Kind::Array),
        "object" => Some(Kind::Object),
        _ => None,
    }
}

impl Pattern {
    pub fn parse(source: &str) -> Result<Pattern> {
        let (kind, path_part) = match source.split_once('~') {
            Some((k, rest)) => {
                let kind = kind_from_name(k)
                    .ok_or_else(|| EngineError::InvalidPattern(source.to_string()))?;
                (Some(kind), rest)
            }
            None => (None, source),
        };
        if path_part == ".*" {
            return Ok(Pattern { source: source.to_string(), kind, toks: None });
        }
        let mut toks = Vec::new();
        for chunk in path_part.split('/') {
            if chunk.is_empty() {
                if path_part == "" && toks.is_empty() {
                    break; // empty pattern: matches only the root path
                }
                return Err(EngineError::InvalidPattern(source.to_string()));
            }
            let mut first = true;
            for part in chunk.split("..") {
                if !first {
                    toks.push(Tok::Any);
                }
                if !part.is_empty() {
                    toks.push(Tok::Lit(part.to_string()));
                }
                first = false;
            }
        }
        Ok(Pattern { source: source.to_string(), kind, toks: Some(toks) })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Glob-style match of the token list against the segment list.
    fn matches(&self, kind: Kind, segments: &[String]) -> bool {
        if let Some(k) = self.kind {
            if k != kind {
                return false;
            }
        }
        let toks = match &self.toks {
            None => return true,
            Some(t) => t,
        };
        fn rec(toks: &[Tok], segs: &[String]) -> bool {
            match toks.split_first() {
                None => segs.is_empty(),
                Some((Tok::Lit(name), rest)) => {
                    segs.first().map_or(false, |s| s == name) && rec(rest, &segs[1..])
                }
                Some((Tok::Any, rest)) => {
                    (0..=segs.len()).any(|skip| rec(rest, &segs[skip..]))
                }
            }
        }
        rec(toks, segments)
    }
}

/// Ordered pattern → template entries; the first matching entry wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingDictionary {
    entries: Vec<(Pattern, Template)>,
}

impl MappingDictionary {
    pub fn from_entries(entries: &[(&str, &str)]) -> Result<Self> {
        let entries = entries
            .iter()
            .map(|(p, t)| Ok((Pattern::parse(p)?, Template::parse(t)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MappingDictionary { entries })
    }

    /// Parse the JSON-object file format of pattern → template-name pairs.
    /// Member order is the match order.
    pub fn from_json(text: &str) -> Result<Self> {
        let root = crate::stree::parse_json(text)?;
        let members = match &root.value {
            Value::Object(m) => m,
            _ => return Err(EngineError::InvalidDictionary),
        };
        let mut entries = Vec::with_capacity(members.len());
        for (pattern, value) in members {
            let name = match &value.value {
                Value::Text(s) => s,
                _ => return Err(EngineError::InvalidDictionary),
            };
            entries.push((Pattern::parse(pattern)?, Template::parse(name)?));
        }
        Ok(MappingDictionary { entries })
    }

    pub fn entries(&self) -> &[(Pattern, Template)] {
        &self.entries
    }

    /// First matching entry wins; errors when nothing matches.
    pub fn resolve(&self, kind: Kind, segments: &[String]) -> Result<Template> {
        for (pattern, template) in &self.entries {
            if pattern.matches(kind, segments) {
                return Ok(*template);
            }
        }
        Err(EngineError::UnknownTemplate {
            kind,
            path: segments.iter().map(|s| escape_segment(s)).collect::<Vec<_>>().join("/"),
        })
    }

    /// Deep-set containers, standard primitive embedders.
    pub fn builtin_set() -> Self {
        MappingDictionary::from_entries(&[
            ("object~..", "deepSets"),
            ("array~..", "deepSets"),
            ("string~..", "string"),
            ("number~..", "number"),
            ("boolean~..", "boolean"),
            (".*", "deepSets"),
        ])
        .expect("builtin dictionary is valid")
    }

    /// LSTM arrays, SumLSTM objects, standard primitive embedders.
    pub fn builtin_lstm() -> Self {
        MappingDictionary::from_entries(&[
            ("object~..", "sumTreeLSTM"),
            ("array~..", "LSTM"),
            ("string~..", "string"),
            ("number~..", "number"),
            ("boolean~..", "boolean"),
            (".*", "deepSets"),
        ])
        .expect("builtin dictionary is valid")
    }

    /// XML trees: tag containers with attribute embedders, string leaves.
    pub fn builtin_xml() -> Self {
        MappingDictionary::from_entries(&[
            ("object~..", "tagLSTM"),
            ("array~..", "tagLSTM"),
            ("string~..", "string"),
            ("number~..", "number"),
            ("boolean~..", "boolean"),
            (".*", "deepSets"),
        ])
        .expect("builtin dictionary is valid")
    }
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Set,
    Lstm,
    Tailored,
}

impl ModelKind {
    pub fn parse(name: &str) -> Option<ModelKind> {
        match name {
            "set" => Some(ModelKind::Set),
            "lstm" => Some(ModelKind::Lstm),
            "tailored" => Some(ModelKind::Tailored),
            _ => None,
        }
    }
}

/// Ablation modes of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    Pathless,
    Homogeneous,
    Both,
}

impl Ablation {
    pub fn parse(name: &str) -> Option<Ablation> {
        match name {
            "pathless" => Some(Ablation::Pathless),
            "homogeneous" => Some(Ablation::Homogeneous),
            "both" => Some(Ablation::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent width m.
    pub hidden: usize,
    pub kind: ModelKind,
    pub mapping: MappingDictionary,
    /// Tie parameters across paths (one group per type).
    pub pathless: bool,
    /// Collapse containers to the object function and primitives to the
    /// string function over str(x).
    pub homogeneous: bool,
    /// Extend array-item paths with 1-based ordinals.
    pub ordinal_paths: bool,
    /// Deep-set element-embedding MLP depth.
    pub deepset_layers: usize,
    /// Fraction of training-time lookups randomly remapped to the fallback
    /// groups so they receive gradients. Zero keeps fallbacks untrained.
    pub unseen_remap_fraction: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, hidden: usize, seed: u64) -> Self {
        let mapping = match kind {
            ModelKind::Set => MappingDictionary::builtin_set(),
            ModelKind::Lstm => MappingDictionary::builtin_lstm(),
            ModelKind::Tailored => MappingDictionary::builtin_lstm(),
        };
        ModelConfig {
            hidden,
            kind,
            mapping,
            pathless: false,
            homogeneous: false,
            ordinal_paths: false,
            deepset_layers: 1,
            unseen_remap_fraction: 0.0,
            seed,
        }
    }

    pub fn with_mapping(mut self, mapping: MappingDictionary) -> Self {
        self.mapping = mapping;
        self
    }
}

/// Apply an ablation mode to a base configuration.
pub fn apply_ablation(mut config: ModelConfig, mode: Ablation) -> ModelConfig {
    match mode {
        Ablation::Pathless => config.pathless = true,
        Ablation::Homogeneous => config.homogeneous = true,
        Ablation::Both => {
            config.pathless = true;
            config.homogeneous = true;
        }
    }
    config
}

// ---------------------------------------------------------------------------
// Path dictionary
// ---------------------------------------------------------------------------

/// Frozen map from (element type, canonical path) to the path-specific
/// parameter group, built from training examples only; unseen pairs fall back
/// to per-family untrained groups.
#[derive(Debug, Default, Clone)]
pub struct PathDictionary {
    entries: HashMap<(Kind, String), GroupId>,
    unknown: HashMap<Family, GroupId>,
}

impl PathDictionary {
    pub fn lookup(&self, kind: Kind, path: &str) -> Option<GroupId> {
        self.entries.get(&(kind, path.to_string())).copied()
    }

    pub fn unknown_group(&self, family: Family) -> Option<GroupId> {
        self.unknown.get(&family).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(Kind, String), &GroupId)> {
        self.entries.iter()
    }

    pub(crate) fn insert_entry(&mut self, kind: Kind, path: String, id: GroupId) {
        self.entries.insert((kind, path), id);
    }

    pub(crate) fn insert_unknown(&mut self, family: Family, id: GroupId) {
        self.unknown.insert(family, id);
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

pub struct TreeModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub stats: NormStats,
    pub labels: Vec<String>,
    pub dict: PathDictionary,
}

/// Incremental canonical-path cursor used during tree walks.
pub struct PathCursor {
    segments: Vec<String>,
    canonical: String,
    marks: Vec<usize>,
}

impl PathCursor {
    pub fn root() -> Self {
        PathCursor { segments: Vec::new(), canonical: String::new(), marks: Vec::new() }
    }

    pub fn push(&mut self, seg: &str) {
        self.marks.push(self.canonical.len());
        if !self.segments.is_empty() {
            self.canonical.push('/');
        }
        self.canonical.push_str(&escape_segment(seg));
        self.segments.push(seg.to_string());
    }

    pub fn pop(&mut self) {
        let mark = self.marks.pop().expect("pop on root path");
        self.canonical.truncate(mark);
        self.segments.pop();
    }

    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }
}

/// Effective element type under the homogeneous ablation: containers collapse
/// to objects, primitives to strings.
fn effective_kind(kind: Kind, homogeneous: bool) -> Kind {
    if !homogeneous {
        return kind;
    }
    match kind {
        Kind::Number | Kind::Text | Kind::Boolean => Kind::Text,
        Kind::Array | Kind::Object => Kind::Object,
    }
}

/// str(x) rendering used by the homogeneous ablation and by catEmbedding.
fn value_as_text(e: &Element) -> String {
    match &e.value {
        Value::Number(x) => render_number(*x),
        Value::Text(s) => s.clone(),
        Value::Boolean(Some(true)) => "true".to_string(),
        Value::Boolean(Some(false)) => "false".to_string(),
        Value::Boolean(None) => "null".to_string(),
        _ => unreachable!("containers are never rendered as text"),
    }
}

impl TreeModel {
    /// The parameter-group families needed to run `template` on `kind`,
    /// path-specific one first.
    fn families_for(template: Template, kind: Kind) -> Vec<Family> {
        let container = if kind == Kind::Array { Container::Array } else { Container::Object };
        match template {
            Template::Number => vec![Family::NumberLin],
            Template::Boolean => vec![Family::BoolLin],
            Template::StringLstm => vec![Family::StrLstm, Family::CharTable],
            Template::CatEmbedding => vec![Family::CatTable],
            Template::DeepSets => vec![
                Family::DeepSetFinal(container),
                Family::DeepSetShared(container),
                Family::DeepSetPool(container),
            ],
            Template::Lstm => vec![Family::ArrayLstm],
            Template::SumTreeLstm => vec![Family::ObjLinear, Family::SumLstmShared],
            Template::TagLstm => vec![Family::TagLstm],
            Template::Ignore => vec![],
        }
    }

    fn group_spec(family: Family, m: usize, deepset_layers: usize) -> Vec<crate::params::SlotSpec> {
        match family {
            Family::NumberLin | Family::BoolLin => linear_spec(m, 1),
            Family::StrLstm | Family::TagLstm | Family::AttrLstm => lstm_spec(m, m),
            Family::ArrayLstm => lstm_spec(m, 2 * m),
            Family::SumLstmShared => sumlstm_spec(m),
            Family::ObjLinear | Family::DeepSetFinal(_) => linear_spec(m, m),
            Family::DeepSetPool(_) => crate::embedders::deepset_pool_spec(m),
            Family::DeepSetShared(_) => deepset_mlp_spec(m, deepset_layers),
            Family::CatTable | Family::CharTable => Vec::new(),
            Family::Output | Family::MlpLayer(_) => unreachable!("sized at build"),
        }
    }

    fn is_shared(family: Family) -> bool {
        matches!(
            family,
            Family::DeepSetShared(_)
                | Family::DeepSetPool(_)
                | Family::SumLstmShared
                | Family::CharTable
        )
    }

    fn path_key(&self, canonical: &str) -> String {
        if self.config.pathless {
            String::new()
        } else {
            canonical.to_string()
        }
    }

    /// Build a model from a training split: one pre-pass constructs the path
    /// dictionary, normalization statistics, vocabulary tables, and all
    /// parameter groups, so the parameter count is fixed before optimization.
    pub fn build(config: ModelConfig, train: &[(Element, String)]) -> Result<TreeModel> {
        let mut store = ParameterStore::new(config.seed);
        let m = config.hidden;

        // fallback groups first, in a fixed order independent of the data
        let mut dict = PathDictionary::default();
        let mut fallback_families: Vec<Family> = Vec::new();
        for kind in [Kind::Number, Kind::Text, Kind::Boolean, Kind::Array, Kind::Object] {
            for (_, template) in &config.mapping.entries {
                if template.applicable(kind) {
                    for fam in Self::families_for(*template, kind) {
                        if !fallback_families.contains(&fam) {
                            fallback_families.push(fam);
                        }
                    }
                }
            }
        }
        if fallback_families.contains(&Family::TagLstm)
            && !fallback_families.contains(&Family::AttrLstm)
        {
            fallback_families.push(Family::AttrLstm);
        }
        for fam in &fallback_families {
            if Self::is_shared(*fam) {
                let id = store.ensure_group(GroupKey::shared(*fam), || {
                    Self::group_spec(*fam, m, config.deepset_layers)
                });
                if *fam == Family::CharTable {
                    store.ensure_unk(id, m);
                }
            } else {
                let id = store.ensure_group(GroupKey::unknown(*fam), || {
                    Self::group_spec(*fam, m, config.deepset_layers)
                });
                if *fam == Family::CatTable {
                    store.ensure_unk(id, m);
                } else if *fam == Family::AttrLstm {
                    store.ensure_unk(id, m);
                }
                dict.unknown.insert(*fam, id);
            }
        }

        let mut labels: Vec<String> = Vec::new();
        let mut stats = NormStatsBuilder::new();
        let mut model = TreeModel {
            config,
            store,
            stats: NormStats::default(),
            labels: Vec::new(),
            dict,
        };

        for (root, label) in train {
            if !labels.iter().any(|l| l == label) {
                labels.push(label.clone());
            }
            let mut cursor = PathCursor::root();
            model.register_element(root, &mut cursor, &mut stats)?;
        }

        let classes = labels.len().max(1);
        model.store.ensure_group(GroupKey::shared(Family::Output), || linear_spec(classes, m));
        model.labels = labels;
        model.stats = stats.finish();
        Ok(model)
    }

    fn register_element(
        &mut self,
        e: &Element,
        cursor: &mut PathCursor,
        stats: &mut NormStatsBuilder,
    ) -> Result<()> {
        let kind = effective_kind(e.kind(), self.config.homogeneous);
        let template = self.config.mapping.resolve(kind, cursor.segments())?;
        if !template.applicable(kind) {
            return Err(EngineError::InvalidTemplate {
                template: template.name().to_string(),
                kind,
            });
        }
        let m = self.config.hidden;
        let deepset_layers = self.config.deepset_layers;
        let pk = self.path_key(cursor.canonical());

        let families = Self::families_for(template, kind);
        let mut path_group = None;
        for fam in families {
            let key = if Self::is_shared(fam) {
                GroupKey::shared(fam)
            } else {
                GroupKey::at(fam, pk.clone())
            };
            let id = self.store.ensure_group(key, || Self::group_spec(fam, m, deepset_layers));
            if path_group.is_none() && !Self::is_shared(fam) {
                path_group = Some(id);
            }
        }
        if let Some(id) = path_group {
            self.dict.entries.entry((kind, pk.clone())).or_insert(id);
        }

        match template {
            Template::Number => {
                if let Value::Number(x) = e.value {
                    stats.observe(&pk, x);
                }
            }
            Template::StringLstm => {
                let text = value_as_text(e);
                let chars = self.store.lookup(&GroupKey::shared(Family::CharTable)).unwrap();
                for c in text.chars() {
                    self.store.ensure_char(chars, c, m);
                }
            }
            Template::CatEmbedding => {
                let group = path_group.expect("cat table is path-specific");
                self.store.ensure_value(group, &value_as_text(e), m);
                self.store.ensure_unk(group, m);
            }
            Template::TagLstm => {
                for (id, value) in &e.description {
                    let gid = self
                        .store
                        .ensure_group(GroupKey::at(Family::AttrLstm, id.clone()), || {
                            Self::group_spec(Family::AttrLstm, m, deepset_layers)
                        });
                    for c in value.chars() {
                        self.store.ensure_char(gid, c, m);
                    }
                    self.store.ensure_unk(gid, m);
                }
            }
            _ => {}
        }

        // recurse into children with the wrapped/unwrapped path rule
        match &e.value {
            Value::Array(items) => {
                for (i, item) in items.iter().enumerate() {
                    if self.config.ordinal_paths {
                        cursor.push(&(i + 1).to_string());
                        self.register_element(item, cursor, stats)?;
                        cursor.pop();
                    } else {
                        self.register_element(item, cursor, stats)?;
                    }
                }
            }
            Value::Object(members) => {
                for (name, child) in members {
                    cursor.push(name);
                    self.register_element(child, cursor, stats)?;
                    cursor.pop();
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolve the parameter-group id for a (type, path) pair: the stable id
    /// assigned in training, or the per-family fallback for unseen pairs.
    pub fn resolve_parameters(&self, kind: Kind, canonical_path: &str) -> Result<GroupId> {
        let kind = effective_kind(kind, self.config.homogeneous);
        let segments: Vec<String> = if canonical_path.is_empty() {
            Vec::new()
        } else {
            split_canonical(canonical_path)
        };
        let template = self.config.mapping.resolve(kind, &segments)?;
        let family = *Self::families_for(template, kind)
            .first()
            .ok_or(EngineError::InvalidTemplate { template: "ignore".to_string(), kind })?;
        self.group_for(family, &self.path_key(canonical_path), &mut None)
    }

    fn group_for(
        &self,
        family: Family,
        path_key: &str,
        augment: &mut Option<(ChaCha8Rng, f64)>,
    ) -> Result<GroupId> {
        if let Some((rng, frac)) = augment {
            if *frac > 0.0 && rng.gen::<f64>() < *frac {
                if let Some(id) = self.dict.unknown_group(family) {
                    return Ok(id);
                }
            }
        }
        if let Some(id) = self.store.lookup(&GroupKey::at(family, path_key)) {
            return Ok(id);
        }
        self.dict.unknown_group(family).ok_or_else(|| EngineError::UnknownPath {
            family,
            path: path_key.to_string(),
        })
    }

    fn shared_group(&self, family: Family) -> GroupId {
        self.store
            .lookup(&GroupKey::shared(family))
            .expect("shared groups are created at build time")
    }

    pub fn resolve_template(&self, kind: Kind, segments: &[String]) -> Result<Template> {
        self.config.mapping.resolve(effective_kind(kind, self.config.homogeneous), segments)
    }

    pub fn output_group(&self) -> GroupId {
        self.shared_group(Family::Output)
    }
}

/// Split a canonical path back into raw segments (inverse of the `\/` escape).
pub fn split_canonical(path: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = path.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'/') => {
                cur.push('/');
                chars.next();
            }
            '/' => {
                out.push(std::mem::take(&mut cur));
            }
            c => cur.push(c),
        }
    }
    if !path.is_empty() {
        out.push(cur);
    }
    out
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// One example's forward pass: owns the tape being built.
pub struct Forward<'m> {
    pub model: &'m TreeModel,
    pub tape: Tape,
    augment: Option<(ChaCha8Rng, f64)>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m TreeModel) -> Self {
        Forward { model, tape: Tape::new(), augment: None }
    }

    /// Training-time variant: remap a random fraction of parameter lookups to
    /// the fallback groups (off when the fraction is zero).
    pub fn with_augmentation(model: &'m TreeModel, example_seed: u64) -> Self {
        let frac = model.config.unseen_remap_fraction;
        let augment = if frac > 0.0 {
            Some((ChaCha8Rng::seed_from_u64(example_seed), frac))
        } else {
            None
        };
        Forward { model, tape: Tape::new(), augment }
    }

    /// The recursive embedding of an element at a path. Returns `None` for
    /// elements mapped to the `ignore` template.
    pub fn embed_element(
        &mut self,
        e: &Element,
        cursor: &mut PathCursor,
    ) -> Result<Option<Latent>> {
        let model = self.model;
        let config = &model.config;
        let kind = effective_kind(e.kind(), config.homogeneous);
        let template = config.mapping.resolve(kind, cursor.segments())?;
        if !template.applicable(kind) {
            return Err(EngineError::InvalidTemplate {
                template: template.name().to_string(),
                kind,
            });
        }
        if template == Template::Ignore {
            return Ok(None);
        }
        let pk = model.path_key(cursor.canonical());

        // containers: embed children first (wrapped/unwrapped path rule)
        let children: Vec<Latent> = match &e.value {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    let lat = if config.ordinal_paths {
                        cursor.push(&(i + 1).to_string());
                        let lat = self.embed_element(item, cursor)?;
                        cursor.pop();
                        lat
                    } else {
                        self.embed_element(item, cursor)?
                    };
                    out.extend(lat);
                }
                out
            }
            Value::Object(members) => {
                let mut out = Vec::with_capacity(members.len());
                for (name, child) in members {
                    cursor.push(name);
                    let lat = self.embed_element(child, cursor)?;
                    cursor.pop();
                    out.extend(lat);
                }
                out
            }
            _ => Vec::new(),
        };

        let latent = match template {
            Template::Number => {
                let group = self.model.group_for(Family::NumberLin, &pk, &mut self.augment)?;
                let x = match e.value {
                    Value::Number(x) => x,
                    _ => unreachable!("template applicability is checked above"),
                };
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_number(&mut ctx, group, &model.stats, &pk, x)?
            }
            Template::Boolean => {
                let group = self.model.group_for(Family::BoolLin, &pk, &mut self.augment)?;
                let v = match e.value {
                    Value::Boolean(v) => v,
                    _ => unreachable!(),
                };
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_boolean(&mut ctx, group, v)?
            }
            Template::StringLstm => {
                let group = self.model.group_for(Family::StrLstm, &pk, &mut self.augment)?;
                let chars = model.shared_group(Family::CharTable);
                let text = value_as_text(e);
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_string(&mut ctx, group, chars, &text)?
            }
            Template::CatEmbedding => {
                let group = self.model.group_for(Family::CatTable, &pk, &mut self.augment)?;
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_cat(&mut ctx, group, &value_as_text(e))?
            }
            Template::DeepSets => {
                let container = if kind == Kind::Array { Container::Array } else { Container::Object };
                let fin = self
                    .model
                    .group_for(Family::DeepSetFinal(container), &pk, &mut self.augment)?;
                let mlp = model.shared_group(Family::DeepSetShared(container));
                let pool = model.shared_group(Family::DeepSetPool(container));
                let hs: Vec<NodeId> = children.iter().map(|l| l.h).collect();
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_container_set(&mut ctx, mlp, pool, fin, &hs)?
            }
            Template::Lstm => {
                let group = self.model.group_for(Family::ArrayLstm, &pk, &mut self.augment)?;
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_array_lstm(&mut ctx, group, &children)?
            }
            Template::SumTreeLstm => {
                let lin = self.model.group_for(Family::ObjLinear, &pk, &mut self.augment)?;
                let sum = model.shared_group(Family::SumLstmShared);
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                embedders::embed_object_sumlstm(&mut ctx, sum, lin, &children)?
            }
            Template::TagLstm => {
                let group = self.model.group_for(Family::TagLstm, &pk, &mut self.augment)?;
                let hs: Vec<NodeId> = children.iter().map(|l| l.h).collect();
                let mut attr_groups = Vec::with_capacity(e.description.len());
                for (id, value) in &e.description {
                    let gid = self.model.group_for_attr(id, &mut self.augment)?;
                    attr_groups.push((gid, value.as_str()));
                }
                let mut ctx = EmbedCtx::new(&model.store, &mut self.tape);
                crate::xmltree::embed_tag_resolved(&mut ctx, group, &hs, &attr_groups)?
            }
            Template::Ignore => unreachable!(),
        };
        Ok(Some(latent))
    }

    /// Embed the whole document and apply the output layer.
    pub fn logits_node(&mut self, root: &Element) -> Result<NodeId> {
        let mut cursor = PathCursor::root();
        let latent = self.embed_element(root, &mut cursor)?;
        let m = self.model.config.hidden;
        let h = match latent {
            Some(l) => l.h,
            None => self.tape.zeros(m),
        };
        let out = self.model.output_group();
        let mut ctx = EmbedCtx::new(&self.model.store, &mut self.tape);
        let (w, b) = embedders::linear_nodes(&mut ctx, out);
        let wh = self.tape.matvec(w, h)?;
        Ok(self.tape.add(wh, b)?)
    }

    /// Cross-entropy loss node for a labeled example.
    pub fn loss_node(&mut self, root: &Element, label_index: usize) -> Result<NodeId> {
        let logits = self.logits_node(root)?;
        Ok(self.tape.cross_entropy(logits, label_index)?)
    }
}

impl TreeModel {
    fn group_for_attr(
        &self,
        id: &str,
        augment: &mut Option<(ChaCha8Rng, f64)>,
    ) -> Result<GroupId> {
        self.group_for(Family::AttrLstm, id, augment)
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| EngineError::LabelUnknown(label.to_string()))
    }

    /// Deterministic prediction: logits and the argmax class (lowest index on
    /// ties).
    pub fn predict(&self, root: &Element) -> Result<Prediction> {
        let mut fwd = Forward::new(self);
        let node = fwd.logits_node(root)?;
        let logits = fwd.tape.value(node).data().to_vec();
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        Ok(Prediction {
            label: self.labels.get(best).cloned().unwrap_or_default(),
            class_index: best,
            logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub class_index: usize,
    pub label: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stree::{parse_json, train_journey};

    fn poker_dictionary() -> MappingDictionary {
        MappingDictionary::from_json(
            r#"{
                "object~..": "sumTreeLSTM",  "array~..": "LSTM",
                "string~..": "catEmbedding", "number~..": "catEmbedding",
                ".*": "deepSets"
            }"#,
        )
        .unwrap()
    }

    fn segs(path: &str) -> Vec<String> {
        if path.is_empty() {
            Vec::new()
        } else {
            path.split('/').map(str::to_string).collect()
        }
    }

    #[test]
    fn poker_dictionary_resolution() {
        let dict = poker_dictionary();
        assert_eq!(dict.resolve(Kind::Object, &segs("")).unwrap(), Template::SumTreeLstm);
        assert_eq!(dict.resolve(Kind::Object, &segs("a/b/c")).unwrap(), Template::SumTreeLstm);
        assert_eq!(dict.resolve(Kind::Text, &segs("suit")).unwrap(), Template::CatEmbedding);
        assert_eq!(dict.resolve(Kind::Number, &segs("rank")).unwrap(), Template::CatEmbedding);
        assert_eq!(dict.resolve(Kind::Array, &segs("")).unwrap(), Template::Lstm);
        // a type with no entry of its own falls through to '.*'
        assert_eq!(dict.resolve(Kind::Boolean, &segs("x")).unwrap(), Template::DeepSets);
    }

    #[test]
    fn first_match_precedence() {
        let dict = MappingDictionary::from_entries(&[("a/..", "LSTM"), ("..", "sumTreeLSTM")])
            .unwrap();
        assert_eq!(dict.resolve(Kind::Array, &segs("a/b")).unwrap(), Template::Lstm);
        assert_eq!(dict.resolve(Kind::Array, &segs("b/a")).unwrap(), Template::SumTreeLstm);
        assert_eq!(dict.resolve(Kind::Array, &segs("a")).unwrap(), Template::Lstm);
    }

    #[test]
    fn dotdot_prefix_patterns_match_suffixes() {
        let dict =
            MappingDictionary::from_entries(&[("..lastrect", "ignore"), (".*", "deepSets")])
                .unwrap();
        assert_eq!(dict.resolve(Kind::Object, &segs("a/b/lastrect")).unwrap(), Template::Ignore);
        assert_eq!(dict.resolve(Kind::Object, &segs("lastrect")).unwrap(), Template::Ignore);
        assert_eq!(dict.resolve(Kind::Object, &segs("lastrect/x")).unwrap(), Template::DeepSets);

        let dict = MappingDictionary::from_entries(&[
            ("number~..rect..", "number"),
            (".*", "catEmbedding"),
        ])
        .unwrap();
        assert_eq!(dict.resolve(Kind::Number, &segs("a/rect/b")).unwrap(), Template::Number);
        assert_eq!(dict.resolve(Kind::Number, &segs("rect")).unwrap(), Template::Number);
        assert_eq!(dict.resolve(Kind::Number, &segs("a/b")).unwrap(), Template::CatEmbedding);
        assert_eq!(dict.resolve(Kind::Text, &segs("rect")).unwrap(), Template::CatEmbedding);
    }

    #[test]
    fn unmatched_resolution_is_an_error() {
        let dict = MappingDictionary::from_entries(&[("number~..", "number")]).unwrap();
        assert!(matches!(
            dict.resolve(Kind::Text, &segs("x")),
            Err(EngineError::UnknownTemplate { .. })
        ));
    }

    fn tiny_train() -> Vec<(Element, String)> {
        vec![
            (train_journey(), "yes".to_string()),
            (
                parse_json(r#"{"time": "09:10", "stops": ["Leeds"], "train": {"carriages": 4, "shop": true}}"#)
                    .unwrap(),
                "no".to_string(),
            ),
        ]
    }

    #[test]
    fn build_then_resolve_parameters_is_stable() {
        let config = ModelConfig::new(ModelKind::Lstm, 8, 3);
        let model = TreeModel::build(config, &tiny_train()).unwrap();
        let g1 = model.resolve_parameters(Kind::Boolean, "train/shop").unwrap();
        let g2 = model.resolve_parameters(Kind::Boolean, "train/shop").unwrap();
        assert_eq!(g1, g2);
        // unseen pair falls back to the family's untrained group
        let unk = model.resolve_parameters(Kind::Number, "never/seen").unwrap();
        assert_eq!(unk, model.dict.unknown_group(Family::NumberLin).unwrap());
        assert_ne!(unk, model.resolve_parameters(Kind::Number, "train/carriages").unwrap());
    }

    #[test]
    fn root_primitive_document_equals_direct_primitive_embedding() {
        let config = ModelConfig::new(ModelKind::Lstm, 6, 5);
        let train = vec![
            (parse_json("3.5").unwrap(), "a".to_string()),
            (parse_json("7").unwrap(), "b".to_string()),
        ];
        let model = TreeModel::build(config, &train).unwrap();
        let doc = parse_json("4.25").unwrap();

        let mut fwd = Forward::new(&model);
        let mut cursor = PathCursor::root();
        let lat = fwd.embed_element(&doc, &mut cursor).unwrap().unwrap();

        let group = model.resolve_parameters(Kind::Number, "").unwrap();
        let mut tape = Tape::new();
        let mut ctx = EmbedCtx::new(&model.store, &mut tape);
        let direct = embedders::embed_number(&mut ctx, group, &model.stats, "", 4.25).unwrap();
        assert_eq!(fwd.tape.value(lat.h).data(), tape.value(direct.h).data());
    }

    #[test]
    fn prediction_is_pure_and_deterministic() {
        let config = ModelConfig::new(ModelKind::Lstm, 8, 11);
        let model = TreeModel::build(config, &tiny_train()).unwrap();
        let doc = train_journey();
        let p1 = model.predict(&doc).unwrap();
        let p2 = model.predict(&doc).unwrap();
        assert_eq!(p1, p2);
        // deep copy embeds identically
        let copy = doc.clone();
        let p3 = model.predict(&copy).unwrap();
        assert_eq!(p1.logits, p3.logits);
    }

    #[test]
    fn zero_output_weights_tie_break_to_class_zero() {
        let config = ModelConfig::new(ModelKind::Lstm, 8, 2);
        let mut model = TreeModel::build(config, &tiny_train()).unwrap();
        let out = model.output_group();
        for slot in 0..2u32 {
            let key = crate::autodiff::ParamKey { group: out.0, slot };
            model.store.tensor_mut(key).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let p = model.predict(&train_journey()).unwrap();
        assert!(p.logits.iter().all(|&z| z == 0.0));
        assert_eq!(p.class_index, 0);
    }

    #[test]
    fn pathless_model_is_invariant_to_wrapper_renaming() {
        let mut config = ModelConfig::new(ModelKind::Lstm, 8, 4);
        config = apply_ablation(config, Ablation::Pathless);
        let model = TreeModel::build(config, &tiny_train()).unwrap();
        let original = train_journey();
        let renamed = parse_json(
            r#"{
                "when": "12:43",
                "halts": [ "Manchester", "Preston", "Glasgow" ],
                "loco": { "cars": 6, "store": false }
            }"#,
        )
        .unwrap();
        let a = model.predict(&original).unwrap();
        let b = model.predict(&renamed).unwrap();
        assert_eq!(a.logits, b.logits, "pathless logits must be bit-identical");
        assert_eq!(a.class_index, b.class_index);
    }

    #[test]
    fn full_model_is_path_sensitive_somewhere() {
        let mut witness = false;
        for seed in 0..100 {
            let config = ModelConfig::new(ModelKind::Lstm, 6, seed);
            let model = TreeModel::build(config, &tiny_train()).unwrap();
            let a = model.predict(&train_journey()).unwrap();
            let renamed = parse_json(
                r#"{
                    "when": "12:43",
                    "stops": [ "Manchester", "Preston", "Glasgow" ],
                    "train": { "carriages": 6, "shop": false }
                }"#,
            )
            .unwrap();
            let b = model.predict(&renamed).unwrap();
            if a.logits.iter().zip(&b.logits).any(|(x, y)| (x - y).abs() > 1e-9) {
                witness = true;
                break;
            }
        }
        assert!(witness, "renaming a wrapper never changed the logits in 100 trials");
    }

    #[test]
    fn homogeneous_number_embeds_like_its_text_rendering() {
        let mut config = ModelConfig::new(ModelKind::Lstm, 8, 6);
        config = apply_ablation(config, Ablation::Homogeneous);
        let train = vec![
            (parse_json(r#"{"a": 6, "b": "6"}"#).unwrap(), "x".to_string()),
            (parse_json(r#"{"a": 7, "b": "8"}"#).unwrap(), "y".to_string()),
        ];
        let model = TreeModel::build(config, &train).unwrap();
        // Number 6 at path "a" must embed exactly like Text "6" at path "a"
        let num = parse_json(r#"{"a": 6, "b": "6"}"#).unwrap();
        let txt = parse_json(r#"{"a": "6", "b": "6"}"#).unwrap();
        let a = model.predict(&num).unwrap();
        let b = model.predict(&txt).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn both_ablations_compose() {
        let mut config = ModelConfig::new(ModelKind::Lstm, 8, 6);
        config = apply_ablation(config, Ablation::Both);
        assert!(config.pathless && config.homogeneous);
        let model = TreeModel::build(config, &tiny_train()).unwrap();
        let renamed_and_textual = parse_json(
            r#"{
                "when": "12:43",
                "halts": [ "Manchester", "Preston", "Glasgow" ],
                "loco": { "cars": "6", "store": "false" }
            }"#,
        )
        .unwrap();
        let textual = parse_json(
            r#"{
                "time": "12:43",
                "stops": [ "Manchester", "Preston", "Glasgow" ],
                "train": { "carriages": "6", "shop": "false" }
            }"#,
        )
        .unwrap();
        let a = model.predict(&train_journey()).unwrap();
        let b = model.predict(&renamed_and_textual).unwrap();
        let c = model.predict(&textual).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.logits, c.logits);
    }

    #[test]
    fn split_canonical_inverts_escaping() {
        assert_eq!(split_canonical("a\\/b/c"), vec!["a/b".to_string(), "c".to_string()]);
        assert_eq!(split_canonical(""), Vec::<String>::new());
        assert_eq!(split_canonical("x"), vec!["x".to_string()]);
    }
}
