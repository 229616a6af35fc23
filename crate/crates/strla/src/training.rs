//! Loss, optimizer, pseudo-minibatching, the cross-validation harness, and
//! the fixed-size-feature-vector MLP baseline.
//!
//! Batching works by gradient accumulation: each example builds its own graph,
//! gradients are summed over the batch in example order (so results are
//! independent of scheduling) and averaged into one Adam step.

use crate::autodiff::{NodeId, ParamKey, Tape, Tensor};
use crate::data::{Featurizer, Table};
use crate::embedders::linear_spec;
use crate::engine::{EngineError, Forward, ModelConfig, TreeModel};
use crate::params::{Family, GroupKey, ParameterStore};
use crate::stree::Element;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("non-finite loss at example {example}")]
    NonFiniteLoss { example: usize },
    #[error("fold {fold} leaves no training example of class '{label}'")]
    FoldTooSmall { fold: usize, label: String },
    #[error("dataset label '{0}' is not in the model vocabulary")]
    LabelMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Gradient-accumulation count per optimizer step.
    pub batch_size: usize,
    /// Hidden width m.
    pub hidden: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub folds: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            hidden: 32,
            learning_rate: 1e-3,
            seed: 0,
            folds: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::BadConfig("hidden width must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(TrainError::BadConfig("folds must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-fold hyperparameter override (epochs, batch size, hidden width, and
/// for the MLP baseline the number of layers).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FoldHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    #[serde(default)]
    pub layers: Option<usize>,
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Softmax cross-entropy of raw logits against a class index, recorded on the
/// tape (stabilized by max subtraction).
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    label: usize,
) -> std::result::Result<NodeId, crate::autodiff::AutodiffError> {
    tape.cross_entropy(logits, label)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct Moment {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. State is allocated lazily per parameter and
/// parameters without a gradient in a step are left untouched, which is what
/// lazily-instantiated per-path groups need.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: HashMap<ParamKey, Moment>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            moments: HashMap::new(),
        }
    }

    /// One update over the accumulated gradients, scaled by `scale`
    /// (1/batch for mean-of-batch semantics).
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[(ParamKey, Tensor)], scale: f64) {
        for (key, grad) in grads {
            let entry = self.moments.entry(*key).or_insert_with(|| Moment {
                m: Tensor::zeros(grad.rows(), grad.cols()),
                v: Tensor::zeros(grad.rows(), grad.cols()),
                t: 0,
            });
            entry.t += 1;
            let bc1 = 1.0 - self.beta1.powi(entry.t as i32);
            let bc2 = 1.0 - self.beta2.powi(entry.t as i32);
            let theta = store.tensor_mut(*key);
            for i in 0..grad.len() {
                let g = grad.data()[i] * scale;
                let m = self.beta1 * entry.m.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * entry.v.data()[i] + (1.0 - self.beta2) * g * g;
                entry.m.data_mut()[i] = m;
                entry.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                theta.data_mut()[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Sum per-example gradient lists in example order; output sorted by key.
pub fn merge_grads(per_example: Vec<Vec<(ParamKey, Tensor)>>) -> Vec<(ParamKey, Tensor)> {
    let mut acc: Vec<(ParamKey, Tensor)> = Vec::new();
    let mut index: HashMap<ParamKey, usize> = HashMap::new();
    for grads in per_example {
        for (key, g) in grads {
            match index.get(&key) {
                Some(&i) => acc[i].1.add_assign(&g),
                None => {
                    index.insert(key, acc.len());
                    acc.push((key, g));
                }
            }
        }
    }
    acc.sort_by_key(|(k, _)| *k);
    acc
}

// ---------------------------------------------------------------------------
// Tree-model training
// ---------------------------------------------------------------------------

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    bytes[16] = 0x53; // domain tag: shuffling
    ChaCha8Rng::from_seed(bytes)
}

fn tree_example_grads(
    model: &TreeModel,
    doc: &Element,
    label_index: usize,
    example_seed: u64,
) -> Result<(Vec<(ParamKey, Tensor)>, f64)> {
    let mut fwd = Forward::with_augmentation(model, example_seed);
    let loss = fwd.loss_node(doc, label_index)?;
    let loss_value = fwd.tape.value(loss).data()[0];
    let grads = fwd.tape.backward(loss)?.into_param_grads(&fwd.tape);
    Ok((grads, loss_value))
}

/// Train a built model in place on `data[indices]`. Returns the loss curve
/// (mean loss per optimizer step).
pub fn train(
    model: &mut TreeModel,
    data: &[(Element, String)],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let label_idx: Vec<usize> = indices
        .iter()
        .map(|&i| model.label_index(&data[i].1).map_err(TrainError::from))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(cfg);
    let mut curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        for chunk in order.chunks(cfg.batch_size) {
            let model_ro: &TreeModel = model;
            let results: Vec<(Vec<(ParamKey, Tensor)>, f64)> = chunk
                .par_iter()
                .map(|&j| {
                    let i = indices[j];
                    let seed = cfg
                        .seed
                        .wrapping_mul(0x9E3779B97F4A7C15)
                        .wrapping_add((epoch as u64) << 32)
                        .wrapping_add(i as u64);
                    tree_example_grads(model_ro, &data[i].0, label_idx[j], seed)
                        .map_err(|e| match e {
                            TrainError::Autodiff(
                                crate::autodiff::AutodiffError::NonFiniteValue { .. },
                            ) => TrainError::NonFiniteLoss { example: i },
                            e => e,
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_loss =
                results.iter().map(|(_, l)| *l).sum::<f64>() / results.len() as f64;
            if !mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { example: indices[chunk[0]] });
            }
            let merged = merge_grads(results.into_iter().map(|(g, _)| g).collect());
            adam.step(&mut model.store, &merged, 1.0);
            curve.push(mean_loss);
        }
    }
    Ok(curve)
}

/// Predicted labels for `data[indices]`, in order.
pub fn evaluate(
    model: &TreeModel,
    data: &[(Element, String)],
    indices: &[usize],
) -> Result<Vec<String>> {
    indices
        .par_iter()
        .map(|&i| {
            let p = model.predict(&data[i].0)?;
            Ok(p.label)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Stratified k-fold split: per-label shuffled round-robin assignment.
/// Returns the test-index list of each fold; folds disjointly cover the data.
pub fn stratified_folds(labels: &[&str], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut by_label: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match by_label.iter_mut().find(|(l, _)| l == label) {
            Some((_, v)) => v.push(i),
            None => by_label.push((label, vec![i])),
        }
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (g, (_, mut idxs)) in by_label.into_iter().enumerate() {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&(g as u64).to_le_bytes());
        bytes[16] = 0x46; // domain tag: folds
        idxs.shuffle(&mut ChaCha8Rng::from_seed(bytes));
        for (j, idx) in idxs.into_iter().enumerate() {
            folds[j % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

/// Per-fold accuracies with their mean/stddev and the pooled confusion matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Pooled over folds; rows = true label, columns = predicted.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    fn from_folds(labels: Vec<String>, fold_accuracies: Vec<f64>, confusion: Vec<Vec<u64>>) -> Self {
        let n = fold_accuracies.len() as f64;
        let mean = fold_accuracies.iter().sum::<f64>() / n;
        let var = fold_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Metrics {
            labels,
            fold_accuracies,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            confusion,
        }
    }
}

fn global_labels(data_labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for l in data_labels {
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
}

fn check_folds_cover_labels(
    labels: &[String],
    fold_labels: &[Vec<&str>],
) -> Result<()> {
    for (f, test) in fold_labels.iter().enumerate() {
        // the training split of fold f is everything outside it
        for label in labels {
            let in_train = fold_labels
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .any(|(_, fl)| fl.iter().any(|l| l == label));
            if !in_train {
                return Err(TrainError::FoldTooSmall { fold: f, label: label.clone() });
            }
        }
        let _ = test;
    }
    Ok(())
}

/// The trained fold models together with the aggregate metrics and per-fold
/// loss curves.
pub struct CvOutcome {
    pub metrics: Metrics,
    pub models: Vec<TreeModel>,
    pub loss_curves: Vec<Vec<f64>>,
}

/// Stratified k-fold cross-validation of the tree model. For each fold the
/// normalization statistics and path dictionary are rebuilt from that fold's
/// training split only.
pub fn cross_validate(
    data: &[(Element, String)],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    per_fold: Option<&[FoldHyper]>,
) -> Result<CvOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(pf) = per_fold {
        if pf.len() != cfg.folds {
            return Err(TrainError::BadConfig(format!(
                "{} per-fold overrides for {} folds",
                pf.len(),
                cfg.folds
            )));
        }
    }
    let labels = global_labels(data.iter().map(|(_, l)| l.clone()));
    let label_refs: Vec<&str> = data.iter().map(|(_, l)| l.as_str()).collect();
    let folds = stratified_folds(&label_refs, cfg.folds, cfg.seed);
    let fold_labels: Vec<Vec<&str>> =
        folds.iter().map(|f| f.iter().map(|&i| label_refs[i]).collect()).collect();
    check_folds_cover_labels(&labels, &fold_labels)?;

    let mut fold_accs = Vec::with_capacity(cfg.folds);
    let mut confusion = vec![vec![0u64; labels.len()]; labels.len()];
    let mut models = Vec::with_capacity(cfg.folds);
    let mut loss_curves = Vec::with_capacity(cfg.folds);

    for (f, test_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> =
            folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect();
        let hyper = per_fold.map(|pf| pf[f]);
        let epochs = hyper.map_or(cfg.epochs, |h| h.epochs);
        let batch_size = hyper.map_or(cfg.batch_size, |h| h.batch_size);
        let hidden = hyper.map_or(cfg.hidden, |h| h.hidden);

        let mut mc = model_config.clone();
        mc.hidden = hidden;
        mc.seed = cfg.seed.wrapping_add(f as u64 * 7919);
        let fold_seed = mc.seed;
        let train_slice: Vec<(Element, String)> =
            train_idx.iter().map(|&i| data[i].clone()).collect();
        let mut model = TreeModel::build(mc, &train_slice)?;
        let fold_cfg = TrainConfig { epochs, batch_size, hidden, seed: fold_seed, ..cfg.clone() };
        let all: Vec<usize> = (0..train_slice.len()).collect();
        loss_curves.push(train(&mut model, &train_slice, &all, &fold_cfg)?);

        let predictions = evaluate(&model, data, test_idx)?;
        let mut correct = 0usize;
        for (&i, pred) in test_idx.iter().zip(&predictions) {
            let truth = &data[i].1;
            let ti = labels.iter().position(|l| l == truth).unwrap();
            let pi = labels
                .iter()
                .position(|l| l == pred)
                .ok_or_else(|| TrainError::LabelMismatch(pred.clone()))?;
            confusion[ti][pi] += 1;
            if truth == pred {
                correct += 1;
            }
        }
        fold_accs.push(correct as f64 / test_idx.len() as f64);
        models.push(model);
    }
    Ok(CvOutcome { metrics: Metrics::from_folds(labels, fold_accs, confusion), models, loss_curves })
}

// ---------------------------------------------------------------------------
// MLP baseline
// ---------------------------------------------------------------------------

/// Fully-connected ReLU network over fixed-size feature vectors, trained with
/// the identical loss/optimizer/harness.
pub struct MlpModel {
    pub store: ParameterStore,
    pub labels: Vec<String>,
    pub layers: usize,
}

impl MlpModel {
    pub fn build(
        input_dim: usize,
        hidden: usize,
        layers: usize,
        labels: Vec<String>,
        seed: u64,
    ) -> Self {
        let mut store = ParameterStore::new(seed);
        let mut prev = input_dim;
        for l in 0..layers {
            store.ensure_group(GroupKey::shared(Family::MlpLayer(l as u16)), || {
                linear_spec(hidden, prev)
            });
            prev = hidden;
        }
        let classes = labels.len().max(1);
        store.ensure_group(GroupKey::shared(Family::Output), || linear_spec(classes, prev));
        MlpModel { store, labels, layers }
    }

    fn logits_node(&self, tape: &mut Tape, features: &[f64]) -> Result<NodeId> {
        let mut ctx = crate::embedders::EmbedCtx::new(&self.store, tape);
        let mut h = ctx.tape.leaf_const(Tensor::vector(features.to_vec()));
        for l in 0..self.layers {
            let gid = ctx
                .store
                .lookup(&GroupKey::shared(Family::MlpLayer(l as u16)))
                .expect("mlp layers exist");
            let (w, b) = crate::embedders::linear_nodes(&mut ctx, gid);
            let wh = ctx.tape.matvec(w, h).map_err(TrainError::from)?;
            let lin = ctx.tape.add(wh, b).map_err(TrainError::from)?;
            h = ctx.tape.relu(lin).map_err(TrainError::from)?;
        }
        let out = ctx.store.lookup(&GroupKey::shared(Family::Output)).expect("output exists");
        let (w, b) = crate::embedders::linear_nodes(&mut ctx, out);
        let wh = ctx.tape.matvec(w, h).map_err(TrainError::from)?;
        Ok(ctx.tape.add(wh, b).map_err(TrainError::from)?)
    }

    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let mut tape = Tape::new();
        let logits = self.logits_node(&mut tape, features)?;
        let z = tape.value(logits).data();
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Train an MLP on feature vectors with the same optimizer and shuffling.
///
/// Unlike the per-example tree graphs (which accumulate raw gradient sums),
/// fixed-size inputs batch conventionally: the step uses the batch-mean
/// gradient.
pub fn train_mlp(
    model: &mut MlpModel,
    features: &[Vec<f64>],
    label_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = Adam::new(cfg);
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        for chunk in order.chunks(cfg.batch_size) {
            let model_ro: &MlpModel = model;
            let results: Vec<(Vec<(ParamKey, Tensor)>, f64)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let logits = model_ro.logits_node(&mut tape, &features[i])?;
                    let loss = tape.cross_entropy(logits, label_idx[i]).map_err(TrainError::from)?;
                    let value = tape.value(loss).data()[0];
                    let grads = tape.backward(loss).map_err(TrainError::from)?.into_param_grads(&tape);
                    Ok((grads, value))
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_loss = results.iter().map(|(_, l)| *l).sum::<f64>() / results.len() as f64;
            if !mean_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { example: chunk[0] });
            }
            let merged = merge_grads(results.into_iter().map(|(g, _)| g).collect());
            adam.step(&mut model.store, &merged, 1.0 / chunk.len() as f64);
            curve.push(mean_loss);
        }
    }
    Ok(curve)
}

/// Cross-validate the MLP baseline over a raw table: the featurizer (one-hot
/// vocabularies, numeric statistics) is fitted on each fold's training split
/// only.
pub fn mlp_cross_validate(
    table: &Table,
    label_column: &str,
    layers: usize,
    cfg: &TrainConfig,
    per_fold: Option<&[FoldHyper]>,
) -> Result<Metrics> {
    cfg.validate()?;
    let label_col = table
        .column_index(label_column)
        .ok_or_else(|| TrainError::BadConfig(format!("no column '{label_column}'")))?;
    let labels_all: Vec<String> = table.rows().iter().map(|r| r[label_col].clone()).collect();
    let labels = global_labels(labels_all.iter().cloned());
    let label_refs: Vec<&str> = labels_all.iter().map(|s| s.as_str()).collect();
    let folds = stratified_folds(&label_refs, cfg.folds, cfg.seed);
    let fold_labels: Vec<Vec<&str>> =
        folds.iter().map(|f| f.iter().map(|&i| label_refs[i]).collect()).collect();
    check_folds_cover_labels(&labels, &fold_labels)?;

    let mut fold_accs = Vec::with_capacity(cfg.folds);
    let mut confusion = vec![vec![0u64; labels.len()]; labels.len()];

    for (f, test_idx) in folds.iter().enumerate() {
        let train_idx: Vec<usize> =
            folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect();
        let hyper = per_fold.map(|pf| pf[f]);
        let epochs = hyper.map_or(cfg.epochs, |h| h.epochs);
        let batch_size = hyper.map_or(cfg.batch_size, |h| h.batch_size);
        let hidden = hyper.map_or(cfg.hidden, |h| h.hidden);
        let layers = hyper.and_then(|h| h.layers).unwrap_or(layers);

        let featurizer = Featurizer::fit(table, &train_idx, label_column)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        let train_feats: Vec<Vec<f64>> =
            train_idx.iter().map(|&i| featurizer.transform(&table.rows()[i])).collect();
        let fold_label_vocab = global_labels(train_idx.iter().map(|&i| labels_all[i].clone()));
        let train_labels: Vec<usize> = train_idx
            .iter()
            .map(|&i| fold_label_vocab.iter().position(|l| l == &labels_all[i]).unwrap())
            .collect();

        let seed = cfg.seed.wrapping_add(f as u64 * 7919);
        let mut model =
            MlpModel::build(featurizer.dim(), hidden, layers, fold_label_vocab.clone(), seed);
        let fold_cfg = TrainConfig { epochs, batch_size, hidden, seed, ..cfg.clone() };
        train_mlp(&mut model, &train_feats, &train_labels, &fold_cfg)?;

        let mut correct = 0usize;
        for &i in test_idx {
            let feats = featurizer.transform(&table.rows()[i]);
            let pred = &fold_label_vocab[model.predict(&feats)?];
            let truth = &labels_all[i];
            let ti = labels.iter().position(|l| l == truth).unwrap();
            let pi = labels
                .iter()
                .position(|l| l == pred)
                .ok_or_else(|| TrainError::LabelMismatch(pred.clone()))?;
            confusion[ti][pi] += 1;
            if truth == pred {
                correct += 1;
            }
        }
        fold_accs.push(correct as f64 / test_idx.len() as f64);
    }
    Ok(Metrics::from_folds(labels, fold_accs, confusion))
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub parameters_checked: usize,
}

/// Compare analytic gradients of the full model loss against central finite
/// differences over every parameter entry. `corruption` is added to the first
/// analytic gradient component (zero in normal use; nonzero only as the
/// negative control in tests).
///
/// Parameters are first jittered by a small seeded perturbation: freshly
/// initialized biases are exactly zero, which can park a ReLU input exactly
/// on its kink, where central differences measure half the one-sided slope.
pub fn gradient_check_tree(
    model: &mut TreeModel,
    doc: &Element,
    label_index: usize,
    h: f64,
    corruption: f64,
) -> Result<GradCheckReport> {
    let mut jitter = ChaCha8Rng::seed_from_u64(0x4a49_5454);
    for key in model.store.param_keys() {
        for x in model.store.tensor_mut(key).data_mut() {
            *x += rand::Rng::gen_range(&mut jitter, -1e-3..1e-3);
        }
    }
    let (mut grads, _) = tree_example_grads(model, doc, label_index, 0)?;
    if corruption != 0.0 {
        if let Some((_, g)) = grads.first_mut() {
            g.data_mut()[0] += corruption;
        }
    }
    let mut max_err: f64 = 0.0;
    let mut checked = 0usize;
    for (key, analytic) in &grads {
        for i in 0..analytic.len() {
            let orig = model.store.tensor(*key).data()[i];
            model.store.tensor_mut(*key).data_mut()[i] = orig + h;
            let plus = {
                let mut fwd = Forward::new(model);
                let l = fwd.loss_node(doc, label_index)?;
                fwd.tape.value(l).data()[0]
            };
            model.store.tensor_mut(*key).data_mut()[i] = orig - h;
            let minus = {
                let mut fwd = Forward::new(model);
                let l = fwd.loss_node(doc, label_index)?;
                fwd.tape.value(l).data()[0]
            };
            model.store.tensor_mut(*key).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            max_err = max_err.max(crate::autodiff::rel_err(analytic.data()[i], fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_err, parameters_checked: checked })
}
