//! Metrics, evaluation and experiment grids.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{subsample_students, SplitMode, SplitSequences, StudentSequence};
use crate::embed::FeatureMatrices;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::model::{ModelDims, SinktModel, Variant};
use crate::student::sequence_forward;
use crate::train::{attach_questions, build_model, drop_questions, train, TrainConfig, TrainOutcome};

pub fn accuracy(predictions: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_pairs(predictions, labels)?;
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Area under the ROC curve from average ranks; ties count one half.
pub fn auc(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    check_pairs(predictions, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC is undefined for single-class labels".into()));
    }
    let mut idx: Vec<usize> = (0..predictions.len()).collect();
    idx.sort_by(|&a, &b| predictions[a].total_cmp(&predictions[b]));
    // twice the rank sum of positives, kept integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && predictions[idx[j]] == predictions[idx[i]] {
            j += 1;
        }
        // tied block occupies ranks i+1..=j; twice the mean rank is i+1+j
        let twice_rank = (i + 1 + j) as u64;
        let block_pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += twice_rank * block_pos;
        i = j;
    }
    let num2 = rank_sum2 - pos * (pos + 1);
    Ok(num2 as f64 / (2 * pos * neg) as f64)
}

fn check_pairs(predictions: &[f64], labels: &[u8]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::Metric("no prediction points".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.iter().any(|p| p.is_nan()) {
        return Err(Error::Metric("NaN prediction".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub auc: f64,
    pub n_points: usize,
    pub variant: Variant,
    pub k: usize,
    pub d: usize,
    pub split: SplitMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub student: String,
    pub step: usize,
    pub question: String,
    pub label: u8,
    pub prediction: f64,
}

/// Per-step predictions for every sequence, in input order.
pub fn collect_predictions(model: &SinktModel, sequences: &[StudentSequence]) -> Result<Vec<PredictionRow>> {
    let indexed = model.index_sequences(sequences)?;
    let (encoded, _) = model.encode()?;
    let per: Vec<Vec<f64>> = indexed
        .par_iter()
        .map(|s| sequence_forward(s, &model.params.sequence, &encoded, &model.graph).map(|o| o.predictions))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (seq, preds) in sequences.iter().zip(per) {
        for (t, (step, y)) in seq.steps.iter().zip(preds).enumerate() {
            rows.push(PredictionRow {
                student: seq.student.clone(),
                step: t,
                question: step.question.clone(),
                label: step.correct,
                prediction: y,
            });
        }
    }
    Ok(rows)
}

pub fn prediction_csv(rows: &[PredictionRow]) -> String {
    let mut s = String::from("student_id,step,question_id,label,prediction\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.student, r.step, r.question, r.label, r.prediction);
    }
    s
}

/// Metrics over all steps, or over steps whose question is in `filter`
/// (an empty filter means no filtering). Unfiltered steps still advance
/// the student state.
pub fn evaluate(
    model: &SinktModel,
    sequences: &[StudentSequence],
    filter: Option<&HashSet<String>>,
    split: SplitMode,
) -> Result<MetricReport> {
    let rows = collect_predictions(model, sequences)?;
    let filter = filter.filter(|f| !f.is_empty());
    let kept: Vec<&PredictionRow> = rows
        .iter()
        .filter(|r| filter.map_or(true, |f| f.contains(&r.question)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Metric("no prediction points left to evaluate".into()));
    }
    let y: Vec<f64> = kept.iter().map(|r| r.prediction).collect();
    let l: Vec<u8> = kept.iter().map(|r| r.label).collect();
    Ok(MetricReport {
        acc: accuracy(&y, &l, 0.5)?,
        auc: auc(&y, &l)?,
        n_points: kept.len(),
        variant: model.variant,
        k: model.dims.k,
        d: model.dims.d,
        split,
        seed: model.seed,
    })
}

/// Everything a training run needs besides hyperparameters.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub graph: HeteroGraph,
    pub features: FeatureMatrices,
    pub split: SplitSequences,
    pub mode: SplitMode,
    /// Held-out questions (inductive mode).
    pub heldout: Vec<String>,
}

impl ExperimentData {
    pub fn heldout_set(&self) -> HashSet<String> {
        self.heldout.iter().cloned().collect()
    }
}

/// Result of one fit: the selected model (with held-out questions attached
/// in inductive mode), its training record and its test report.
pub struct FitResult {
    pub outcome: TrainOutcome,
    pub report: MetricReport,
}

/// Train on the training split and report on the test split. In inductive
/// mode the model never sees held-out questions during training (they are
/// removed from the graph and from validation); they are attached afterwards
/// and the report covers only their interactions.
pub fn fit_and_evaluate(
    dims: ModelDims,
    config: &TrainConfig,
    data: &ExperimentData,
    train_students: Option<usize>,
) -> Result<FitResult> {
    let heldout = data.heldout_set();
    let held_refs: HashSet<&str> = heldout.iter().map(String::as_str).collect();
    let inductive = data.mode == SplitMode::Inductive;
    let train_seqs = match train_students {
        Some(n) => subsample_students(&data.split.train, n, config.seed)?,
        None => data.split.train.clone(),
    };
    let (graph, features) = if inductive {
        drop_questions(&data.graph, &data.features, &held_refs)?
    } else {
        (data.graph.clone(), data.features.clone())
    };
    let model = build_model(dims, config.variant, &graph, &features, &train_seqs, config.seed)?;
    let val_seqs: Vec<StudentSequence> = if inductive {
        strip_questions(&data.split.val, &held_refs)
    } else {
        data.split.val.clone()
    };
    let train_idx = model.index_sequences(&train_seqs)?;
    let val_idx = model.index_sequences(&val_seqs)?;
    let mut outcome = train(config, model, &train_idx, &val_idx)?;
    if inductive {
        attach_questions(&mut outcome.model, &data.graph, &data.features)?;
    }
    let filter = inductive.then_some(&heldout);
    let report = evaluate(&outcome.model, &data.split.test, filter, data.mode)?;
    Ok(FitResult { outcome, report })
}

fn strip_questions(seqs: &[StudentSequence], drop: &HashSet<&str>) -> Vec<StudentSequence> {
    seqs.iter()
        .map(|s| StudentSequence {
            student: s.student.clone(),
            steps: s
                .steps
                .iter()
                .filter(|st| !drop.contains(st.question.as_str()))
                .cloned()
                .collect(),
        })
        .filter(|s| !s.steps.is_empty())
        .collect()
}

/// Axes of an experiment grid; the cells are their Cartesian product.
/// An empty axis falls back to the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Training-student counts; `None` means all.
    pub students: Vec<Option<usize>>,
    pub k: Vec<usize>,
    pub d: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl GridSpec {
    pub fn cold_start(sizes: &[usize]) -> Self {
        let mut students: Vec<Option<usize>> = sizes.iter().copied().map(Some).collect();
        students.push(None);
        Self {
            students,
            ..Self::default()
        }
    }

    pub fn layers() -> Self {
        Self {
            k: vec![0, 1, 2, 3],
            ..Self::default()
        }
    }

    pub fn dims() -> Self {
        Self {
            d: vec![128, 256, 512],
            ..Self::default()
        }
    }

    pub fn cells(&self, base: ModelDims, variant: Variant) -> Vec<GridCell> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for variant in axis(&self.variants, variant) {
            for &k in &axis(&self.k, base.k) {
                for &d in &axis(&self.d, base.d) {
                    for &students in &axis(&self.students, None) {
                        out.push(GridCell {
                            id: out.len(),
                            variant,
                            dims: ModelDims { k, d, ..base },
                            students,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub id: usize,
    pub variant: Variant,
    pub dims: ModelDims,
    pub students: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: GridCell,
    pub n_students: usize,
    pub seed: u64,
    pub report: std::result::Result<MetricReport, String>,
    pub predictions: Vec<PredictionRow>,
}

/// Train and evaluate every cell; cell `i` uses seed `base.seed + i`.
/// A failing cell is recorded and the rest still run.
pub fn run_experiment(
    grid: &GridSpec,
    base_dims: ModelDims,
    base: &TrainConfig,
    data: &ExperimentData,
) -> Vec<CellResult> {
    grid.cells(base_dims, base.variant)
        .into_iter()
        .map(|cell| {
            let seed = base.seed + cell.id as u64;
            let config = TrainConfig {
                seed,
                variant: cell.variant,
                ..base.clone()
            };
            let n_students = cell
                .students
                .map_or(data.split.train.len(), |n| n.min(data.split.train.len()));
            let fit = fit_and_evaluate(cell.dims, &config, data, cell.students);
            let (report, predictions) = match fit {
                Ok(f) => {
                    let rows = collect_predictions(&f.outcome.model, &data.split.test).unwrap_or_default();
                    (Ok(f.report), rows)
                }
                Err(e) => {
                    log::warn!("cell {} failed: {e}", cell.id);
                    (Err(e.to_string()), Vec::new())
                }
            };
            CellResult {
                cell,
                n_students,
                seed,
                report,
                predictions,
            }
        })
        .collect()
}

pub fn report_csv(results: &[CellResult], split: SplitMode) -> String {
    let mut s = String::from("cell_id,variant,k,d,n_students,split,acc,auc,n_points,seed\n");
    let mode = match split {
        SplitMode::Transductive => "transductive",
        SplitMode::Inductive => "inductive",
    };
    for r in results {
        let (acc, auc, n) = match &r.report {
            Ok(m) => (m.acc, m.auc, m.n_points),
            Err(_) => (f64::NAN, f64::NAN, 0),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell.id, r.cell.variant, r.cell.dims.k, r.cell.dims.d, r.n_students, mode, acc, auc, n, r.seed
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise_auc(p: &[f64], l: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in 0..p.len() {
            for j in 0..p.len() {
                if l[i] == 1 && l[j] == 0 {
                    pairs += 1;
                    twice += if p[i] > p[j] {
                        2
                    } else if p[i] == p[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.2], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.6, 0.6, 0.4], &[1, 0, 0], 0.5).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::Metric(_))));
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_oracle(
            pts in prop::collection::vec((0u8..8, 0u8..2), 2..50)
        ) {
            let p: Vec<f64> = pts.iter().map(|&(s, _)| s as f64 / 8.0).collect();
            let l: Vec<u8> = pts.iter().map(|&(_, y)| y).collect();
            let has_both = l.contains(&0) && l.contains(&1);
            prop_assume!(has_both);
            prop_assert_eq!(auc(&p, &l).unwrap(), pairwise_auc(&p, &l));
        }

        #[test]
        fn accuracy_invariant_under_monotone_map(
            pts in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..40)
        ) {
            let p: Vec<f64> = pts.iter().map(|&(s, _)| s).collect();
            let l: Vec<u8> = pts.iter().map(|&(_, y)| y).collect();
            // cube-root about 0.5 is strictly monotone and fixes 0.5
            let q: Vec<f64> = p.iter().map(|x| 0.5 + (x - 0.5).cbrt() * 0.5f64.powf(2.0 / 3.0)).collect();
            prop_assert_eq!(accuracy(&p, &l, 0.5).unwrap(), accuracy(&q, &l, 0.5).unwrap());
        }

        #[test]
        fn metrics_ignore_point_order(
            pts in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..40),
            rot in 0usize..40
        ) {
            let p: Vec<f64> = pts.iter().map(|&(s, _)| s).collect();
            let l: Vec<u8> = pts.iter().map(|&(_, y)| y).collect();
            let has_both = l.contains(&0) && l.contains(&1);
            prop_assume!(has_both);
            let r = rot % p.len();
            let (mut p2, mut l2) = (p.clone(), l.clone());
            p2.rotate_left(r);
            l2.rotate_left(r);
            prop_assert_eq!(auc(&p, &l).unwrap(), auc(&p2, &l2).unwrap());
            prop_assert_eq!(accuracy(&p, &l, 0.5).unwrap(), accuracy(&p2, &l2, 0.5).unwrap());
        }
    }

    #[test]
    fn grid_cell_counts() {
        let base = ModelDims { d_t: 8, d: 16, k: 1 };
        assert_eq!(GridSpec::cold_start(&[100, 500, 1000, 2000]).cells(base, Variant::Full).len(), 5);
        assert_eq!(GridSpec::layers().cells(base, Variant::Full).len(), 4);
        assert_eq!(GridSpec::dims().cells(base, Variant::Full).len(), 3);
        let cells = GridSpec::layers().cells(base, Variant::Full);
        assert_eq!(cells.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }
}
