//! Optimization: Adam, gradient verification, the epoch loop and ablation
//! variants.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::StudentSequence;
use crate::embed::FeatureMatrices;
use crate::encoder::EncoderOptions;
use crate::error::{Error, Result};
use crate::eval::{accuracy, auc};
use crate::graph::{build_transition_graph, HeteroGraph, Relation, TRANSITION_EDGE_THRESHOLD};
use crate::model::{ModelDims, Reduction, SinktModel, SinktParams, Variant};
use crate::student::IndexedSequence;
use crate::tensor::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Epochs without validation AUC improvement before stopping.
    pub patience: usize,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.95,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            variant: Variant::Full,
            patience: 10,
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate in effect after `epochs` completed epochs.
    pub fn lr_after(&self, epochs: usize) -> f64 {
        let mut lr = self.lr;
        for _ in 0..epochs {
            lr *= self.decay;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &SinktParams) -> Self {
        let shapes: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

pub fn init_params(dims: ModelDims, seed: u64) -> Result<SinktParams> {
    dims.validate()?;
    Ok(SinktParams::init(dims, seed))
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut SinktParams,
    grads: &SinktParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if let Err(name) = grads.is_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let gt = grads.tensors();
    let mut pt = params.tensors_mut();
    if pt.len() != gt.len() || pt.len() != state.m.len() {
        return Err(Error::dim("parameter, gradient and moment sets differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, ((name, p), (_, g))) in pt.iter_mut().zip(&gt).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if p.len() != g.len() || m.len() != g.len() {
            return Err(Error::dim(format!("shape mismatch in `{name}`")));
        }
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Coordinates checked per tensor (all of them when a tensor is smaller).
pub const FD_COORDS_PER_TENSOR: usize = 200;

/// Central-difference check of the analytic gradient; returns the largest
/// relative error over the sampled coordinates.
pub fn finite_diff_check(model: &SinktModel, batch: &[IndexedSequence], eps: f64) -> Result<f64> {
    let analytic = model.compute_gradients(batch)?.grads;
    finite_diff_against(model, batch, eps, &analytic)
}

/// Like [`finite_diff_check`] but compares against a supplied gradient set.
pub fn finite_diff_against(
    model: &SinktModel,
    batch: &[IndexedSequence],
    eps: f64,
    analytic: &SinktParams,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let sizes: Vec<usize> = model.params.tensors().iter().map(|(_, t)| t.len()).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.to_vec()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        let coords: Vec<usize> = if len <= FD_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            let mut c = (0..len).choose_multiple(&mut rng, FD_COORDS_PER_TENSOR);
            c.sort_unstable();
            c
        };
        for j in coords {
            let orig = model.params.tensors()[ti].1[j];
            set_coord(&mut probe.params, ti, j, orig + eps);
            let plus = probe.batch_loss(batch)?;
            set_coord(&mut probe.params, ti, j, orig - eps);
            let minus = probe.batch_loss(batch)?;
            set_coord(&mut probe.params, ti, j, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn set_coord(params: &mut SinktParams, tensor: usize, coord: usize, value: f64) {
    params.tensors_mut()[tensor].1[coord] = value;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,val_auc,lr\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_acc, r.val_auc, r.lr);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (or the last epoch when no
    /// validation AUC is available).
    pub model: SinktModel,
    pub history: TrainHistory,
    pub optimizer: OptimizerState,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Validation ACC/AUC, `NaN` where undefined.
pub fn validation_metrics(model: &SinktModel, seqs: &[IndexedSequence]) -> Result<(f64, f64)> {
    let seqs: Vec<IndexedSequence> = seqs.iter().filter(|s| !s.is_empty()).cloned().collect();
    if seqs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let preds = model.predict_sequences(&seqs)?;
    let mut y = Vec::new();
    let mut r = Vec::new();
    for (p, s) in preds.iter().zip(&seqs) {
        y.extend_from_slice(p);
        r.extend_from_slice(&s.correct);
    }
    let acc = accuracy(&y, &r, 0.5)?;
    Ok((acc, auc(&y, &r).unwrap_or(f64::NAN)))
}

/// Mini-batch training over `train`; `val` drives model selection and early
/// stopping.
pub fn train(
    config: &TrainConfig,
    model: SinktModel,
    train: &[IndexedSequence],
    val: &[IndexedSequence],
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = model;
    let mut optimizer = OptimizerState::new(&model.params);
    let mut history = TrainHistory::default();
    let mut best = (f64::NEG_INFINITY, model.params.clone(), 0usize);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).filter(|&i| !train[i].is_empty()).collect();
    if config.max_epochs > 0 && order.is_empty() {
        return Err(Error::invalid("no training interactions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut epochs_run = 0;

    for epoch in 1..=config.max_epochs {
        let lr = config.lr_after(epoch - 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut points = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<IndexedSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let g = model.compute_gradients_with(&batch, config.reduction).map_err(|e| diverged(e, epoch))?;
            loss_sum += g.loss_sum;
            points += g.points;
            adam_step(&mut model.params, &g.grads, &mut optimizer, lr).map_err(|e| diverged(e, epoch))?;
        }
        let train_loss = loss_sum / points as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        let (val_acc, val_auc) = validation_metrics(&model, val)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            val_auc,
            lr,
        });
        epochs_run = epoch;
        log::info!("epoch {epoch}: loss {train_loss:.5} val acc {val_acc:.4} auc {val_auc:.4}");

        if val_auc.is_nan() {
            best = (f64::NEG_INFINITY, model.params.clone(), epoch);
            continue;
        }
        if val_auc > best.0 {
            best = (val_auc, model.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = best.2;
    model.params = best.1;
    Ok(TrainOutcome {
        model,
        history,
        optimizer,
        epochs_run,
        best_epoch,
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss(student) => {
            log::error!("non-finite loss for student {student} in epoch {epoch}");
            Error::Diverged(epoch)
        }
        Error::NonFiniteGradient(tensor) => {
            log::error!("non-finite gradient in {tensor} in epoch {epoch}");
            Error::Diverged(epoch)
        }
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: ModelDims,
    pub variant: Variant,
    pub options: EncoderOptions,
    pub seed: u64,
    pub epoch: usize,
    pub params: SinktParams,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &SinktModel, optimizer: Option<&OptimizerState>, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims: model.dims,
            variant: model.variant,
            options: model.options,
            seed: model.seed,
            epoch,
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: checkpoint version {} is not supported",
                path.display(),
                c.version
            )));
        }
        Ok(c)
    }

    /// Attach the checkpoint's parameters to a graph and features, checking
    /// that every dimension agrees. The graph may have grown since the
    /// checkpoint was written; free feature rows of new vertices keep their
    /// fresh random values.
    pub fn into_model(self, graph: HeteroGraph, features: FeatureMatrices) -> Result<SinktModel> {
        if features.dim() != self.dims.d_t {
            return Err(Error::dim(format!(
                "checkpoint expects d_t = {}, features have dimension {}",
                self.dims.d_t,
                features.dim()
            )));
        }
        let mut model = SinktModel::new(self.dims, self.variant, graph, features, self.seed)?;
        let shapes = |p: &SinktParams| -> Vec<(String, usize)> {
            let mut p = p.clone();
            p.free_features = None;
            p.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect()
        };
        if shapes(&model.params) != shapes(&self.params) {
            return Err(Error::dim(
                "checkpoint tensors do not match the model implied by its dims",
            ));
        }
        let mut params = self.params;
        match (&mut params.free_features, model.params.free_features.take()) {
            (Some(saved), Some(fresh)) => {
                for (old, new) in [(&mut saved.concepts, &fresh.concepts), (&mut saved.questions, &fresh.questions)] {
                    if old.rows > new.rows {
                        return Err(Error::dim("checkpoint has more vertices than the graph"));
                    }
                    for r in old.rows..new.rows {
                        old.push_row(new.row(r));
                    }
                }
            }
            (None, None) => {}
            _ => return Err(Error::dim("checkpoint and variant disagree on free features")),
        }
        model.params = params;
        model.options = self.options;
        Ok(model)
    }
}

/// Concept graph for a variant: the transition variant swaps in edges mined
/// from the training sequences; the others keep `graph`.
pub fn make_variant(
    variant: Variant,
    graph: &HeteroGraph,
    training: &[StudentSequence],
) -> Result<HeteroGraph> {
    match variant {
        Variant::Transition => {
            let t = build_transition_graph(training, graph)?;
            graph.with_concept_edges(&t.edges(graph, TRANSITION_EDGE_THRESHOLD))
        }
        _ => Ok(graph.clone()),
    }
}

/// Build a fresh model for a variant (see [`make_variant`]).
pub fn build_model(
    dims: ModelDims,
    variant: Variant,
    graph: &HeteroGraph,
    features: &FeatureMatrices,
    training: &[StudentSequence],
    seed: u64,
) -> Result<SinktModel> {
    let g = make_variant(variant, graph, training)?;
    SinktModel::new(dims, variant, g, features.clone(), seed)
}

/// Remove the given questions (and their feature rows) from a graph,
/// keeping every concept and concept edge.
pub fn drop_questions(
    graph: &HeteroGraph,
    features: &FeatureMatrices,
    drop: &HashSet<&str>,
) -> Result<(HeteroGraph, FeatureMatrices)> {
    let mut g = HeteroGraph::empty();
    for c in graph.concepts() {
        g.add_concept(c);
    }
    let mut rows = Matrix::zeros(0, features.dim());
    for (qi, q) in graph.questions().iter().enumerate() {
        if drop.contains(q.as_str()) {
            continue;
        }
        let cs: Vec<String> = graph
            .question_concepts(qi)
            .iter()
            .map(|&c| graph.concept_id(c).to_owned())
            .collect();
        g.add_question(q, &cs)?;
        rows.push_row(features.questions.row(qi));
    }
    let g = g.with_concept_edges(&graph.edges(Relation::ConceptConcept))?;
    Ok((
        g,
        FeatureMatrices {
            concepts: features.concepts.clone(),
            questions: rows,
        },
    ))
}

/// Add back questions absent from `model`'s graph, taking their concepts
/// and feature rows from the full graph. No parameters change.
pub fn attach_questions(
    model: &mut SinktModel,
    full_graph: &HeteroGraph,
    full_features: &FeatureMatrices,
) -> Result<usize> {
    let mut added = 0;
    for (qi, q) in full_graph.questions().iter().enumerate() {
        if model.graph.question_index(q).is_some() {
            continue;
        }
        let cs: Vec<String> = full_graph
            .question_concepts(qi)
            .iter()
            .map(|&c| full_graph.concept_id(c).to_owned())
            .collect();
        model.add_question(q, &cs, full_features.questions.row(qi))?;
        added += 1;
    }
    Ok(added)
}
