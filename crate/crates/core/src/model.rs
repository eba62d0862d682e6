//! The assembled model: encoder and sequence parameters together with the
//! graph and input features they run on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::StudentSequence;
use crate::embed::FeatureMatrices;
use crate::encoder::{encode, encode_backward, EncodeTrace, Encoded, EncoderOptions, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::student::{sequence_backward, sequence_forward, IndexedSequence, SequenceModelParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// No self terms in encoder layers.
    Linear,
    /// Zero encoder layers: linear adapter only.
    Gat,
    /// Free trainable vertex embeddings instead of text features.
    Text,
    /// Concept edges mined from training transitions.
    Transition,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Linear,
        Variant::Gat,
        Variant::Text,
        Variant::Transition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Linear => "linear",
            Variant::Gat => "gat",
            Variant::Text => "text",
            Variant::Transition => "transition",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// How per-point losses of a batch are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_t: usize,
    pub d: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 || self.d == 0 {
            return Err(Error::invalid(format!(
                "dimensions must be positive, got d_t = {}, d = {}",
                self.d_t, self.d
            )));
        }
        Ok(())
    }

    /// Closed-form number of encoder and sequence-model parameters.
    pub fn parameter_count(&self) -> usize {
        let (d_t, d, k) = (self.d_t, self.d, self.k);
        let encoder = if k == 0 {
            2 * d * d_t
        } else {
            let layer = |din: usize| 5 * d * din + 3 * 2 * din;
            layer(d_t) + (k - 1) * layer(d)
        };
        let gru = 3 * d * 3 * d + 3 * d;
        let predictor = 3 * d + 1;
        encoder + gru + predictor
    }
}

/// Every trainable tensor. Also used, zero-initialized, as the gradient set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinktParams {
    pub encoder: EncoderParams,
    pub sequence: SequenceModelParams,
    /// Trainable vertex inputs (only for [`Variant::Text`]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_features: Option<FreeFeatures>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeFeatures {
    pub concepts: Matrix,
    pub questions: Matrix,
}

impl FreeFeatures {
    pub fn random<R: Rng>(n_concepts: usize, n_questions: usize, d_t: usize, rng: &mut R) -> Self {
        Self {
            concepts: random_rows(n_concepts, d_t, rng),
            questions: random_rows(n_questions, d_t, rng),
        }
    }
}

/// Rows uniform in `±sqrt(3 / d_t)` (unit expected squared norm).
pub fn random_rows<R: Rng>(rows: usize, d_t: usize, rng: &mut R) -> Matrix {
    let b = (3.0 / d_t as f64).sqrt();
    Matrix {
        rows,
        cols: d_t,
        data: (0..rows * d_t).map(|_| rng.gen_range(-b..=b)).collect(),
    }
}

impl SinktParams {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            encoder: EncoderParams::init(dims.d_t, dims.d, dims.k, &mut rng),
            sequence: SequenceModelParams::init(dims.d, &mut rng),
            free_features: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            sequence: SequenceModelParams::zeros(self.sequence.dim()),
            free_features: self.free_features.as_ref().map(|f| FreeFeatures {
                concepts: Matrix::zeros(f.concepts.rows, f.concepts.cols),
                questions: Matrix::zeros(f.questions.rows, f.questions.cols),
            }),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        out.extend(self.sequence.tensors());
        if let Some(f) = &self.free_features {
            out.push(("features.concepts".into(), &f.concepts.data[..]));
            out.push(("features.questions".into(), &f.questions.data[..]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.sequence.tensors_mut());
        if let Some(f) = &mut self.free_features {
            out.push(("features.concepts".into(), &mut f.concepts.data[..]));
            out.push(("features.questions".into(), &mut f.questions.data[..]));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &SinktParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> std::result::Result<(), String> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinktModel {
    pub dims: ModelDims,
    pub variant: Variant,
    pub options: EncoderOptions,
    pub seed: u64,
    pub params: SinktParams,
    /// Frozen text features (ignored for inputs when free features exist).
    pub features: FeatureMatrices,
    pub graph: HeteroGraph,
}

/// Loss and gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Reduced log loss (mean per point unless summed).
    pub loss: f64,
    pub loss_sum: f64,
    pub points: usize,
    pub grads: SinktParams,
}

impl SinktModel {
    /// Fresh parameters for `graph` and `features`. `graph` and `features`
    /// should already reflect the variant (see `train::make_variant`).
    pub fn new(
        dims: ModelDims,
        variant: Variant,
        graph: HeteroGraph,
        features: FeatureMatrices,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        if features.dim() != dims.d_t {
            return Err(Error::dim(format!(
                "features have dimension {}, model expects d_t = {}",
                features.dim(),
                dims.d_t
            )));
        }
        if features.concepts.rows != graph.num_concepts() || features.questions.rows != graph.num_questions() {
            return Err(Error::dim("feature rows do not match graph vertices"));
        }
        let dims = if variant == Variant::Gat {
            ModelDims { k: 0, ..dims }
        } else {
            dims
        };
        let mut params = SinktParams::init(dims, seed);
        if variant == Variant::Text {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2);
            params.free_features = Some(FreeFeatures::random(
                graph.num_concepts(),
                graph.num_questions(),
                dims.d_t,
                &mut rng,
            ));
        }
        let expected = dims.parameter_count()
            + params
                .free_features
                .as_ref()
                .map_or(0, |f| f.concepts.data.len() + f.questions.data.len());
        assert_eq!(params.count(), expected, "parameter count mismatch");
        Ok(Self {
            dims,
            variant,
            options: EncoderOptions {
                jumping_knowledge: variant != Variant::Linear,
            },
            seed,
            params,
            features,
            graph,
        })
    }

    pub fn inputs(&self) -> (&Matrix, &Matrix) {
        match &self.params.free_features {
            Some(f) => (&f.concepts, &f.questions),
            None => (&self.features.concepts, &self.features.questions),
        }
    }

    pub fn encode(&self) -> Result<(Encoded, EncodeTrace)> {
        let (c, q) = self.inputs();
        encode(c, q, &self.graph, &self.params.encoder, self.options)
    }

    pub fn index_sequence(&self, seq: &StudentSequence) -> Result<IndexedSequence> {
        let questions = seq
            .steps
            .iter()
            .map(|s| {
                self.graph.question_index(&s.question).ok_or_else(|| Error::UnknownId {
                    kind: "question",
                    id: s.question.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IndexedSequence {
            student: seq.student.clone(),
            questions,
            correct: seq.steps.iter().map(|s| s.correct).collect(),
        })
    }

    pub fn index_sequences(&self, seqs: &[StudentSequence]) -> Result<Vec<IndexedSequence>> {
        seqs.iter().map(|s| self.index_sequence(s)).collect()
    }

    /// Per-step predictions for each sequence, with the encoder run once.
    pub fn predict_sequences(&self, seqs: &[IndexedSequence]) -> Result<Vec<Vec<f64>>> {
        let (encoded, _) = self.encode()?;
        seqs.par_iter()
            .map(|s| {
                sequence_forward(s, &self.params.sequence, &encoded, &self.graph).map(|o| o.predictions)
            })
            .collect()
    }

    /// Mean batch loss without gradients.
    pub fn batch_loss(&self, batch: &[IndexedSequence]) -> Result<f64> {
        self.batch_loss_with(batch, Reduction::Mean)
    }

    pub fn batch_loss_with(&self, batch: &[IndexedSequence], reduction: Reduction) -> Result<f64> {
        let (encoded, _) = self.encode()?;
        let mut sum = 0.0;
        let mut points = 0;
        for s in batch {
            sum += sequence_forward(s, &self.params.sequence, &encoded, &self.graph)?.loss;
            points += s.len();
        }
        Ok(match reduction {
            Reduction::Mean => sum / points as f64,
            Reduction::Sum => sum,
        })
    }

    /// Exact gradient of the mean per-point log loss over `batch`.
    pub fn compute_gradients(&self, batch: &[IndexedSequence]) -> Result<BatchGradients> {
        self.compute_gradients_with(batch, Reduction::Mean)
    }

    /// Exact gradient of the reduced log loss over `batch`.
    /// Per-student gradients are computed in parallel and combined in batch order.
    pub fn compute_gradients_with(&self, batch: &[IndexedSequence], reduction: Reduction) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let points: usize = batch.iter().map(IndexedSequence::len).sum();
        if points == 0 {
            return Err(Error::invalid("batch has no interactions"));
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / points as f64,
            Reduction::Sum => 1.0,
        };
        let (encoded, trace) = self.encode()?;
        let per_student: Vec<Result<(f64, crate::student::SequenceGrads)>> = batch
            .par_iter()
            .map(|s| {
                let out = sequence_forward(s, &self.params.sequence, &encoded, &self.graph)?;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss(s.student.clone()));
                }
                let g = sequence_backward(s, &out, &self.params.sequence, &encoded, &self.graph, scale);
                Ok((out.loss, g))
            })
            .collect();

        let mut grads = self.params.zeros_like();
        let d = self.dims.d;
        let mut d_concepts = Matrix::zeros(encoded.concepts.rows, d);
        let mut d_questions = Matrix::zeros(encoded.questions.rows, d);
        let mut loss_sum = 0.0;
        for r in per_student {
            let (loss, g) = r?;
            loss_sum += loss;
            for ((_, a), (_, b)) in grads
                .sequence
                .tensors_mut()
                .into_iter()
                .zip(g.params.tensors())
            {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            for (x, y) in d_concepts.data.iter_mut().zip(&g.d_concepts.data) {
                *x += y;
            }
            for (x, y) in d_questions.data.iter_mut().zip(&g.d_questions.data) {
                *x += y;
            }
        }

        let (dx_c, dx_q) = encode_backward(
            &d_concepts,
            &d_questions,
            &encoded,
            &trace,
            &self.graph,
            &self.params.encoder,
            self.options,
            &mut grads.encoder,
        );
        if let Some(f) = &mut grads.free_features {
            f.concepts = dx_c;
            f.questions = dx_q;
        }
        Ok(BatchGradients {
            loss: loss_sum * scale,
            loss_sum,
            points,
            grads,
        })
    }

    /// Add a concept vertex with its feature row (and a random free row for
    /// the text variant). Parameters are untouched.
    pub fn add_concept(&mut self, id: &str, feature: &[f64]) -> Result<usize> {
        if self.graph.concept_index(id).is_some() {
            return Err(Error::invalid(format!("concept `{id}` already exists")));
        }
        self.check_feature(feature)?;
        let idx = self.graph.add_concept(id);
        self.features.concepts.push_row(feature);
        let (seed, d_t) = (self.seed ^ idx as u64, self.dims.d_t);
        if let Some(f) = &mut self.params.free_features {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            f.concepts.push_row(&random_rows(1, d_t, &mut rng).data);
        }
        Ok(idx)
    }

    pub fn add_question(&mut self, id: &str, concepts: &[String], feature: &[f64]) -> Result<usize> {
        self.check_feature(feature)?;
        let idx = self.graph.add_question(id, concepts)?;
        self.features.questions.push_row(feature);
        let (seed, d_t) = (self.seed ^ (idx as u64).rotate_left(32), self.dims.d_t);
        if let Some(f) = &mut self.params.free_features {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            f.questions.push_row(&random_rows(1, d_t, &mut rng).data);
        }
        Ok(idx)
    }

    fn check_feature(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dims.d_t {
            return Err(Error::dim(format!(
                "feature row has {} values, expected {}",
                feature.len(),
                self.dims.d_t
            )));
        }
        Ok(())
    }
}
