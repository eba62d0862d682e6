//! Structural encoder over the concept–question graph.
//!
//! Each layer runs three single-head attention aggregations:
//!
//! * `cq`: a question gathers its concepts,
//! * `cc`: a concept gathers its concept in-neighbors,
//! * `qc`: a concept gathers its questions,
//!
//! and adds a self term (`W_c x`, `W_q x`) before a ReLU. Scores are
//! `LeakyReLU(aᵀ(x_center ⊕ x_neighbor))` on the layer inputs; messages are
//! attention-weighted sums of `W x_neighbor`. With zero layers the encoder is
//! a per-type linear adapter `ReLU(W x)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::tensor::{axpy, dot, Matrix};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Centers below this count are processed sequentially.
const PAR_MIN_ROWS: usize = 256;

#[inline]
fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_cq: Matrix,
    pub w_cc: Matrix,
    pub w_qc: Matrix,
    pub a_cq: Vec<f64>,
    pub a_cc: Vec<f64>,
    pub a_qc: Vec<f64>,
    pub w_c: Matrix,
    pub w_q: Matrix,
}

impl LayerParams {
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let att = |rng: &mut R| Matrix::glorot(1, 2 * input, rng).data;
        Self {
            w_cq: Matrix::glorot(output, input, rng),
            w_cc: Matrix::glorot(output, input, rng),
            w_qc: Matrix::glorot(output, input, rng),
            a_cq: att(rng),
            a_cc: att(rng),
            a_qc: att(rng),
            w_c: Matrix::glorot(output, input, rng),
            w_q: Matrix::glorot(output, input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w_cq: Matrix::zeros(output, input),
            w_cc: Matrix::zeros(output, input),
            w_qc: Matrix::zeros(output, input),
            a_cq: vec![0.0; 2 * input],
            a_cc: vec![0.0; 2 * input],
            a_qc: vec![0.0; 2 * input],
            w_c: Matrix::zeros(output, input),
            w_q: Matrix::zeros(output, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_c.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w_c.rows
    }
}

/// Zero-layer encoder: one linear map per vertex type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w_c: Matrix,
    pub w_q: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<LayerParams>,
    pub adapter: Option<AdapterParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(d_t: usize, d: usize, k: usize, rng: &mut R) -> Self {
        if k == 0 {
            return Self {
                layers: Vec::new(),
                adapter: Some(AdapterParams {
                    w_c: Matrix::glorot(d, d_t, rng),
                    w_q: Matrix::glorot(d, d_t, rng),
                }),
            };
        }
        let layers = (0..k)
            .map(|l| LayerParams::init(if l == 0 { d_t } else { d }, d, rng))
            .collect();
        Self {
            layers,
            adapter: None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            adapter: self.adapter.as_ref().map(|a| AdapterParams {
                w_c: Matrix::zeros(a.w_c.rows, a.w_c.cols),
                w_q: Matrix::zeros(a.w_q.rows, a.w_q.cols),
            }),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        match (&self.adapter, self.layers.first()) {
            (Some(a), _) => a.w_c.cols,
            (None, Some(l)) => l.input_dim(),
            (None, None) => 0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match (&self.adapter, self.layers.last()) {
            (Some(a), _) => a.w_c.rows,
            (None, Some(l)) => l.output_dim(),
            (None, None) => 0,
        }
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if let Some(a) = &self.adapter {
            out.push(("adapter.w_c".into(), &a.w_c.data));
            out.push(("adapter.w_q".into(), &a.w_q.data));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.w_cq"), &l.w_cq.data));
            out.push((format!("layer{i}.w_cc"), &l.w_cc.data));
            out.push((format!("layer{i}.w_qc"), &l.w_qc.data));
            out.push((format!("layer{i}.a_cq"), &l.a_cq));
            out.push((format!("layer{i}.a_cc"), &l.a_cc));
            out.push((format!("layer{i}.a_qc"), &l.a_qc));
            out.push((format!("layer{i}.w_c"), &l.w_c.data));
            out.push((format!("layer{i}.w_q"), &l.w_q.data));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(a) = &mut self.adapter {
            out.push(("adapter.w_c".into(), &mut a.w_c.data));
            out.push(("adapter.w_q".into(), &mut a.w_q.data));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_cq"), &mut l.w_cq.data));
            out.push((format!("layer{i}.w_cc"), &mut l.w_cc.data));
            out.push((format!("layer{i}.w_qc"), &mut l.w_qc.data));
            out.push((format!("layer{i}.a_cq"), &mut l.a_cq));
            out.push((format!("layer{i}.a_cc"), &mut l.a_cc));
            out.push((format!("layer{i}.a_qc"), &mut l.a_qc));
            out.push((format!("layer{i}.w_c"), &mut l.w_c.data));
            out.push((format!("layer{i}.w_q"), &mut l.w_q.data));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderOptions {
    /// Include the self terms `W_c x`, `W_q x` in each layer.
    pub jumping_knowledge: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self {
            jumping_knowledge: true,
        }
    }
}

/// Softmax over `LeakyReLU(aᵀ(center ⊕ neighbor_j))`, max-subtracted.
pub fn attention_weights(center: &[f64], neighbors: &[&[f64]], a: &[f64]) -> Result<Vec<f64>> {
    let n = center.len();
    if a.len() != 2 * n {
        return Err(Error::dim(format!(
            "attention vector has length {}, expected {}",
            a.len(),
            2 * n
        )));
    }
    let base = dot(&a[..n], center);
    let mut scores = Vec::with_capacity(neighbors.len());
    for nb in neighbors {
        if nb.len() != n {
            return Err(Error::dim(format!(
                "neighbor has dimension {}, center has {n}",
                nb.len()
            )));
        }
        scores.push(leaky_relu(base + dot(&a[n..], nb)));
    }
    Ok(softmax(&scores))
}

/// Stable softmax; empty input gives an empty output.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let Some(max) = scores.iter().copied().reduce(f64::max) else {
        return Vec::new();
    };
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `Σ_j α_j · (W · neighbor_j)`; zero vector of `W`'s output size when there
/// are no neighbors.
pub fn relation_message(
    center: &[f64],
    neighbors: &[&[f64]],
    w: &Matrix,
    a: &[f64],
) -> Result<Vec<f64>> {
    let alpha = attention_weights(center, neighbors, a)?;
    if w.cols != center.len() {
        return Err(Error::dim(format!(
            "aggregation matrix expects {} inputs, vectors have {}",
            w.cols,
            center.len()
        )));
    }
    let mut out = vec![0.0; w.rows];
    for (alpha_j, nb) in alpha.iter().zip(neighbors) {
        axpy(*alpha_j, &w.matvec(nb), &mut out);
    }
    Ok(out)
}

/// Attention intermediates for one relation in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationTrace {
    /// Per center vertex, attention weights over its neighbor list.
    pub alpha: Vec<Vec<f64>>,
    /// Pre-activation scores `aᵀ(x_i ⊕ x_j)`, aligned with `alpha`.
    pub scores: Vec<Vec<f64>>,
    /// `W x_j` for every vertex of the neighbor type.
    pub transformed: Matrix,
}

/// Recorded intermediates of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input_c: Matrix,
    pub input_q: Matrix,
    pub cq: RelationTrace,
    pub cc: RelationTrace,
    pub qc: RelationTrace,
    pub message_cq: Matrix,
    pub message_cc: Matrix,
    pub message_qc: Matrix,
    pub output_c: Matrix,
    pub output_q: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace {
    pub layers: Vec<LayerTrace>,
    /// Inputs to the zero-layer adapter (present only when `k = 0`).
    pub adapter_input: Option<(Matrix, Matrix)>,
}

/// Final vertex representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub concepts: Matrix,
    pub questions: Matrix,
}

fn relation_forward(
    centers: &Matrix,
    neighbors: &Matrix,
    adjacency: &[Vec<usize>],
    w: &Matrix,
    a: &[f64],
) -> (Matrix, RelationTrace) {
    let din = centers.cols;
    let transformed = neighbors.mul_transposed(w);
    let nb_score: Vec<f64> = (0..neighbors.rows)
        .map(|j| dot(&a[din..], neighbors.row(j)))
        .collect();
    let per_center = |i: usize| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let base = dot(&a[..din], centers.row(i));
        let scores: Vec<f64> = adjacency[i].iter().map(|&j| base + nb_score[j]).collect();
        let act: Vec<f64> = scores.iter().map(|&s| leaky_relu(s)).collect();
        let alpha = softmax(&act);
        let mut msg = vec![0.0; w.rows];
        for (&j, &al) in adjacency[i].iter().zip(&alpha) {
            axpy(al, transformed.row(j), &mut msg);
        }
        (alpha, scores, msg)
    };
    let results: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = if centers.rows >= PAR_MIN_ROWS {
        (0..centers.rows).into_par_iter().map(per_center).collect()
    } else {
        (0..centers.rows).map(per_center).collect()
    };
    let mut messages = Matrix::zeros(centers.rows, w.rows);
    let mut alpha = Vec::with_capacity(centers.rows);
    let mut scores = Vec::with_capacity(centers.rows);
    for (i, (al, sc, msg)) in results.into_iter().enumerate() {
        messages.row_mut(i).copy_from_slice(&msg);
        alpha.push(al);
        scores.push(sc);
    }
    (
        messages,
        RelationTrace {
            alpha,
            scores,
            transformed,
        },
    )
}

/// Accumulate gradients of one relation given the gradient of its messages.
#[allow(clippy::too_many_arguments)]
fn relation_backward(
    d_messages: &Matrix,
    trace: &RelationTrace,
    centers: &Matrix,
    neighbors: &Matrix,
    adjacency: &[Vec<usize>],
    w: &Matrix,
    a: &[f64],
    d_w: &mut Matrix,
    d_a: &mut [f64],
    d_centers: &mut Matrix,
    d_neighbors: &mut Matrix,
) {
    let din = centers.cols;
    let mut d_transformed = Matrix::zeros(neighbors.rows, w.rows);
    for (i, nbrs) in adjacency.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let g = d_messages.row(i);
        let alpha = &trace.alpha[i];
        let d_alpha: Vec<f64> = nbrs
            .iter()
            .map(|&j| dot(g, trace.transformed.row(j)))
            .collect();
        for (&j, &al) in nbrs.iter().zip(alpha) {
            axpy(al, g, d_transformed.row_mut(j));
        }
        let weighted: f64 = alpha.iter().zip(&d_alpha).map(|(al, da)| al * da).sum();
        for (k, &j) in nbrs.iter().enumerate() {
            let d_score = alpha[k] * (d_alpha[k] - weighted) * leaky_relu_grad(trace.scores[i][k]);
            if d_score == 0.0 {
                continue;
            }
            axpy(d_score, centers.row(i), &mut d_a[..din]);
            axpy(d_score, neighbors.row(j), &mut d_a[din..]);
            axpy(d_score, &a[..din], d_centers.row_mut(i));
            axpy(d_score, &a[din..], d_neighbors.row_mut(j));
        }
    }
    for j in 0..neighbors.rows {
        let g = d_transformed.row(j);
        d_w.add_outer(1.0, g, neighbors.row(j));
        w.matvec_t_acc(g, d_neighbors.row_mut(j));
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.data.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn check_input(x: &Matrix, expected_rows: usize, din: usize, what: &str) -> Result<()> {
    if x.rows != expected_rows || x.cols != din {
        return Err(Error::dim(format!(
            "{what} features are {}x{}, expected {expected_rows}x{din}",
            x.rows, x.cols
        )));
    }
    Ok(())
}

/// One encoder layer.
pub fn encode_layer(
    x_c: &Matrix,
    x_q: &Matrix,
    graph: &HeteroGraph,
    params: &LayerParams,
    options: EncoderOptions,
) -> Result<(Matrix, Matrix, LayerTrace)> {
    let din = params.input_dim();
    check_input(x_c, graph.num_concepts(), din, "concept")?;
    check_input(x_q, graph.num_questions(), din, "question")?;

    let q_adj: Vec<Vec<usize>> = (0..graph.num_questions())
        .map(|q| graph.question_concepts(q).to_vec())
        .collect();
    let cc_adj: Vec<Vec<usize>> = (0..graph.num_concepts())
        .map(|c| graph.concept_in_neighbors(c).to_vec())
        .collect();
    let qc_adj: Vec<Vec<usize>> = (0..graph.num_concepts())
        .map(|c| graph.concept_questions(c).to_vec())
        .collect();

    let (m_cq, t_cq) = relation_forward(x_q, x_c, &q_adj, &params.w_cq, &params.a_cq);
    let (m_cc, t_cc) = relation_forward(x_c, x_c, &cc_adj, &params.w_cc, &params.a_cc);
    let (m_qc, t_qc) = relation_forward(x_c, x_q, &qc_adj, &params.w_qc, &params.a_qc);

    let mut out_c = if options.jumping_knowledge {
        x_c.mul_transposed(&params.w_c)
    } else {
        Matrix::zeros(x_c.rows, params.output_dim())
    };
    for (o, (a, b)) in out_c.data.iter_mut().zip(m_cc.data.iter().zip(&m_qc.data)) {
        *o += a + b;
    }
    relu_in_place(&mut out_c);

    let mut out_q = if options.jumping_knowledge {
        x_q.mul_transposed(&params.w_q)
    } else {
        Matrix::zeros(x_q.rows, params.output_dim())
    };
    for (o, m) in out_q.data.iter_mut().zip(&m_cq.data) {
        *o += m;
    }
    relu_in_place(&mut out_q);

    let trace = LayerTrace {
        input_c: x_c.clone(),
        input_q: x_q.clone(),
        cq: t_cq,
        cc: t_cc,
        qc: t_qc,
        message_cq: m_cq,
        message_cc: m_cc,
        message_qc: m_qc,
        output_c: out_c.clone(),
        output_q: out_q.clone(),
    };
    Ok((out_c, out_q, trace))
}

/// Run the whole encoder from the input features.
pub fn encode(
    x_c: &Matrix,
    x_q: &Matrix,
    graph: &HeteroGraph,
    params: &EncoderParams,
    options: EncoderOptions,
) -> Result<(Encoded, EncodeTrace)> {
    if let Some(adapter) = &params.adapter {
        let din = adapter.w_c.cols;
        check_input(x_c, graph.num_concepts(), din, "concept")?;
        check_input(x_q, graph.num_questions(), din, "question")?;
        let mut c = x_c.mul_transposed(&adapter.w_c);
        let mut q = x_q.mul_transposed(&adapter.w_q);
        relu_in_place(&mut c);
        relu_in_place(&mut q);
        return Ok((
            Encoded {
                concepts: c,
                questions: q,
            },
            EncodeTrace {
                layers: Vec::new(),
                adapter_input: Some((x_c.clone(), x_q.clone())),
            },
        ));
    }
    if params.layers.is_empty() {
        return Err(Error::invalid("encoder has neither layers nor an adapter"));
    }
    let mut c = x_c.clone();
    let mut q = x_q.clone();
    let mut traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (nc, nq, t) = encode_layer(&c, &q, graph, layer, options)?;
        c = nc;
        q = nq;
        traces.push(t);
    }
    Ok((
        Encoded {
            concepts: c,
            questions: q,
        },
        EncodeTrace {
            layers: traces,
            adapter_input: None,
        },
    ))
}

fn relu_mask(grad: &Matrix, output: &Matrix) -> Matrix {
    let mut g = grad.clone();
    for (gi, &o) in g.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *gi = 0.0;
        }
    }
    g
}

/// Self term backward: `out = X Wᵀ`.
fn linear_backward(d_out: &Matrix, x: &Matrix, w: &Matrix, d_w: &mut Matrix, d_x: &mut Matrix) {
    for i in 0..x.rows {
        let g = d_out.row(i);
        d_w.add_outer(1.0, g, x.row(i));
        w.matvec_t_acc(g, d_x.row_mut(i));
    }
}

/// Backpropagate gradients of the final representations into encoder
/// parameter gradients (accumulated into `grads`). Returns gradients with
/// respect to the input features.
pub fn encode_backward(
    d_concepts: &Matrix,
    d_questions: &Matrix,
    encoded: &Encoded,
    trace: &EncodeTrace,
    graph: &HeteroGraph,
    params: &EncoderParams,
    options: EncoderOptions,
    grads: &mut EncoderParams,
) -> (Matrix, Matrix) {
    if let (Some(adapter), Some((x_c, x_q))) = (&params.adapter, &trace.adapter_input) {
        let g_adapter = grads.adapter.as_mut().expect("gradient adapter");
        let dc = relu_mask(d_concepts, &encoded.concepts);
        let dq = relu_mask(d_questions, &encoded.questions);
        let mut dx_c = Matrix::zeros(x_c.rows, x_c.cols);
        let mut dx_q = Matrix::zeros(x_q.rows, x_q.cols);
        linear_backward(&dc, x_c, &adapter.w_c, &mut g_adapter.w_c, &mut dx_c);
        linear_backward(&dq, x_q, &adapter.w_q, &mut g_adapter.w_q, &mut dx_q);
        return (dx_c, dx_q);
    }

    let q_adj: Vec<Vec<usize>> = (0..graph.num_questions())
        .map(|q| graph.question_concepts(q).to_vec())
        .collect();
    let cc_adj: Vec<Vec<usize>> = (0..graph.num_concepts())
        .map(|c| graph.concept_in_neighbors(c).to_vec())
        .collect();
    let qc_adj: Vec<Vec<usize>> = (0..graph.num_concepts())
        .map(|c| graph.concept_questions(c).to_vec())
        .collect();

    let mut d_c = d_concepts.clone();
    let mut d_q = d_questions.clone();
    for (l, (layer, t)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.layers[l];
        let d_pre_c = relu_mask(&d_c, &t.output_c);
        let d_pre_q = relu_mask(&d_q, &t.output_q);
        let mut dx_c = Matrix::zeros(t.input_c.rows, t.input_c.cols);
        let mut dx_q = Matrix::zeros(t.input_q.rows, t.input_q.cols);
        if options.jumping_knowledge {
            linear_backward(&d_pre_c, &t.input_c, &layer.w_c, &mut g.w_c, &mut dx_c);
            linear_backward(&d_pre_q, &t.input_q, &layer.w_q, &mut g.w_q, &mut dx_q);
        }
        // cq: questions gather concepts
        let mut dx_c_nb = Matrix::zeros(dx_c.rows, dx_c.cols);
        relation_backward(
            &d_pre_q, &t.cq, &t.input_q, &t.input_c, &q_adj, &layer.w_cq, &layer.a_cq,
            &mut g.w_cq, &mut g.a_cq, &mut dx_q, &mut dx_c_nb,
        );
        // cc: concepts gather concept in-neighbors; centers and neighbors share dx_c
        let mut dx_c_center = Matrix::zeros(dx_c.rows, dx_c.cols);
        relation_backward(
            &d_pre_c, &t.cc, &t.input_c, &t.input_c, &cc_adj, &layer.w_cc, &layer.a_cc,
            &mut g.w_cc, &mut g.a_cc, &mut dx_c_center, &mut dx_c_nb,
        );
        // qc: concepts gather questions
        relation_backward(
            &d_pre_c, &t.qc, &t.input_c, &t.input_q, &qc_adj, &layer.w_qc, &layer.a_qc,
            &mut g.w_qc, &mut g.a_qc, &mut dx_c_center, &mut dx_q,
        );
        for ((o, a), b) in dx_c.data.iter_mut().zip(&dx_c_nb.data).zip(&dx_c_center.data) {
            *o += a + b;
        }
        d_c = dx_c;
        d_q = dx_q;
    }
    (d_c, d_q)
}
