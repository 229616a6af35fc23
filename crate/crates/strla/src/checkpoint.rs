//! Model serialization.
//!
//! Checkpoints are self-describing JSON containers with the version header
//! "STRLA/1". Floating-point values round-trip exactly (shortest-decimal
//! encoding), so a loaded model predicts bit-identically to the model that
//! wrote it.

use crate::autodiff::Tensor;
use crate::embedders::NormStats;
use crate::engine::{ModelConfig, PathDictionary, TreeModel};
use crate::params::{Family, GroupKey, ParameterStore};
use crate::stree::Kind;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "STRLA/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: found '{0}', expected '{FORMAT}'")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: ModelConfig,
    labels: Vec<String>,
    stats: NormStats,
    dict_entries: Vec<(Kind, String, u32)>,
    dict_unknown: Vec<(Family, u32)>,
    groups: Vec<(GroupKey, Vec<(String, Tensor)>)>,
}

pub fn save(model: &TreeModel, path: impl AsRef<Path>) -> Result<()> {
    let mut groups = Vec::with_capacity(model.store.n_groups());
    for (_, group) in model.store.iter_groups() {
        let slots: Vec<(String, Tensor)> = group
            .slot_names()
            .iter()
            .cloned()
            .zip(group.tensors().iter().map(|t| (**t).clone()))
            .collect();
        groups.push((group.key().clone(), slots));
    }
    let mut dict_entries: Vec<(Kind, String, u32)> = model
        .dict
        .entries()
        .map(|((kind, path), id)| (*kind, path.clone(), id.0))
        .collect();
    dict_entries.sort();
    let mut dict_unknown: Vec<(Family, u32)> = [
        Family::NumberLin,
        Family::BoolLin,
        Family::StrLstm,
        Family::CatTable,
        Family::ArrayLstm,
        Family::ObjLinear,
        Family::TagLstm,
        Family::AttrLstm,
        Family::DeepSetFinal(crate::params::Container::Array),
        Family::DeepSetFinal(crate::params::Container::Object),
    ]
    .iter()
    .filter_map(|f| model.dict.unknown_group(*f).map(|id| (*f, id.0)))
    .collect();
    dict_unknown.sort();

    let file = CheckpointFile {
        format: FORMAT.to_string(),
        config: model.config.clone(),
        labels: model.labels.clone(),
        stats: model.stats.clone(),
        dict_entries,
        dict_unknown,
        groups,
    };
    let out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(out, &file)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TreeModel> {
    let file: CheckpointFile =
        serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
    if file.format != FORMAT {
        return Err(CheckpointError::VersionMismatch(file.format));
    }
    for (key, slots) in &file.groups {
        for (name, t) in slots {
            if t.data().len() != t.rows() * t.cols() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} of {key:?} has inconsistent shape"
                )));
            }
        }
    }
    let n_groups = file.groups.len() as u32;
    let store = ParameterStore::from_parts(file.groups, file.config.seed);
    let mut dict = PathDictionary::default();
    for (kind, path, id) in file.dict_entries {
        if id >= n_groups {
            return Err(CheckpointError::Corrupt(format!("dictionary id {id} out of range")));
        }
        dict.insert_entry(kind, path, crate::params::GroupId(id));
    }
    for (family, id) in file.dict_unknown {
        if id >= n_groups {
            return Err(CheckpointError::Corrupt(format!("fallback id {id} out of range")));
        }
        dict.insert_unknown(family, crate::params::GroupId(id));
    }
    Ok(TreeModel { config: file.config, store, stats: file.stats, labels: file.labels, dict })
}
