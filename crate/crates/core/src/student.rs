//! Concept-level student state tracking and response prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::tensor::{axpy, concat, dot, sigmoid, Matrix};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// GRU gates over `v ⊕ h` (width `3d`) and the response predictor over
/// `h ⊕ q̃ ⊕ u` (width `3d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModelParams {
    pub w_r: Matrix,
    pub w_z: Matrix,
    pub w_h: Matrix,
    pub b_r: Vec<f64>,
    pub b_z: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w_p: Vec<f64>,
    pub b_p: f64,
}

impl SequenceModelParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_r: Matrix::zeros(d, 3 * d),
            w_z: Matrix::zeros(d, 3 * d),
            w_h: Matrix::zeros(d, 3 * d),
            b_r: vec![0.0; d],
            b_z: vec![0.0; d],
            b_h: vec![0.0; d],
            w_p: vec![0.0; 3 * d],
            b_p: 0.0,
        }
    }

    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            w_r: Matrix::glorot(d, 3 * d, rng),
            w_z: Matrix::glorot(d, 3 * d, rng),
            w_h: Matrix::glorot(d, 3 * d, rng),
            w_p: Matrix::glorot(1, 3 * d, rng).data,
            ..Self::zeros(d)
        }
    }

    pub fn dim(&self) -> usize {
        self.b_r.len()
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("gru.w_r".into(), &self.w_r.data[..]),
            ("gru.w_z".into(), &self.w_z.data[..]),
            ("gru.w_h".into(), &self.w_h.data[..]),
            ("gru.b_r".into(), &self.b_r[..]),
            ("gru.b_z".into(), &self.b_z[..]),
            ("gru.b_h".into(), &self.b_h[..]),
            ("pred.w_p".into(), &self.w_p[..]),
            ("pred.b_p".into(), std::slice::from_ref(&self.b_p)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("gru.w_r".into(), &mut self.w_r.data[..]),
            ("gru.w_z".into(), &mut self.w_z.data[..]),
            ("gru.w_h".into(), &mut self.w_h.data[..]),
            ("gru.b_r".into(), &mut self.b_r[..]),
            ("gru.b_z".into(), &mut self.b_z[..]),
            ("gru.b_h".into(), &mut self.b_h[..]),
            ("pred.w_p".into(), &mut self.w_p[..]),
            ("pred.b_p".into(), std::slice::from_mut(&mut self.b_p)),
        ]
    }

    fn check(&self, v: usize, h: usize) -> Result<()> {
        let d = self.dim();
        if v != 2 * d || h != d || self.w_r.cols != 3 * d {
            return Err(Error::dim(format!(
                "gru expects v of length {} and h of length {d}, got {v} and {h}",
                2 * d
            )));
        }
        Ok(())
    }
}

/// A student's history resolved to graph indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedSequence {
    pub student: String,
    pub questions: Vec<usize>,
    pub correct: Vec<u8>,
}

impl IndexedSequence {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Mean of the encoded concepts of `question`.
pub fn question_concept_mean(question: usize, concepts: &Matrix, graph: &HeteroGraph) -> Result<Vec<f64>> {
    if question >= graph.num_questions() {
        return Err(Error::UnknownId {
            kind: "question",
            id: format!("#{question}"),
        });
    }
    let cs = graph.question_concepts(question);
    let mut u = vec![0.0; concepts.cols];
    for &c in cs {
        axpy(1.0, concepts.row(c), &mut u);
    }
    let n = cs.len() as f64;
    u.iter_mut().for_each(|x| *x /= n);
    Ok(u)
}

/// `u ⊕ 0` for a correct response, `0 ⊕ u` otherwise.
pub fn interaction_vector(u: &[f64], r: u8) -> Result<Vec<f64>> {
    let zero = vec![0.0; u.len()];
    match r {
        1 => Ok(concat(&[u, &zero])),
        0 => Ok(concat(&[&zero, u])),
        other => Err(Error::invalid(format!("response must be 0 or 1, got {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTrace {
    pub reset: Vec<f64>,
    pub update: Vec<f64>,
    pub candidate: Vec<f64>,
}

pub fn gru_step(v: &[f64], h_prev: &[f64], p: &SequenceModelParams) -> Result<(Vec<f64>, GateTrace)> {
    p.check(v.len(), h_prev.len())?;
    let x = concat(&[v, h_prev]);
    let reset: Vec<f64> = p
        .w_r
        .matvec(&x)
        .iter()
        .zip(&p.b_r)
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let update: Vec<f64> = p
        .w_z
        .matvec(&x)
        .iter()
        .zip(&p.b_z)
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let gated: Vec<f64> = reset.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    let xh = concat(&[v, &gated]);
    let candidate: Vec<f64> = p
        .w_h
        .matvec(&xh)
        .iter()
        .zip(&p.b_h)
        .map(|(a, b)| (a + b).tanh())
        .collect();
    let h = (0..h_prev.len())
        .map(|i| (1.0 - update[i]) * candidate[i] + update[i] * h_prev[i])
        .collect();
    Ok((
        h,
        GateTrace {
            reset,
            update,
            candidate,
        },
    ))
}

fn predict_logit(h: &[f64], q: &[f64], u: &[f64], p: &SequenceModelParams) -> Result<f64> {
    let d = p.dim();
    if h.len() != d || q.len() != d || u.len() != d || p.w_p.len() != 3 * d {
        return Err(Error::dim(format!(
            "predictor expects three vectors of length {d}, got {}, {}, {}",
            h.len(),
            q.len(),
            u.len()
        )));
    }
    Ok(dot(&p.w_p[..d], h) + dot(&p.w_p[d..2 * d], q) + dot(&p.w_p[2 * d..], u) + p.b_p)
}

/// `σ(W_p · (h ⊕ q̃ ⊕ u) + b_p)`
pub fn predict(h: &[f64], q_tilde: &[f64], u_next: &[f64], p: &SequenceModelParams) -> Result<f64> {
    Ok(sigmoid(predict_logit(h, q_tilde, u_next, p)?))
}

/// Binary cross-entropy with clamped probability.
pub fn log_loss(y: f64, r: u8) -> f64 {
    let yc = y.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if r == 1 {
        -yc.ln()
    } else {
        -(1.0 - yc).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub gates: GateTrace,
    pub h: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// Summed log loss over all steps.
    pub loss: f64,
    pub predictions: Vec<f64>,
    pub steps: Vec<StepTrace>,
}

/// Predict every step from the state after the previous ones (`h_0 = 0`),
/// then fold the observed response into the state.
pub fn sequence_forward(
    seq: &IndexedSequence,
    params: &SequenceModelParams,
    encoded: &Encoded,
    graph: &HeteroGraph,
) -> Result<SequenceOutput> {
    if seq.is_empty() {
        return Err(Error::invalid(format!("sequence of `{}` is empty", seq.student)));
    }
    let d = params.dim();
    if encoded.concepts.cols != d || encoded.questions.cols != d {
        return Err(Error::dim(format!(
            "encoded width {} does not match state width {d}",
            encoded.concepts.cols
        )));
    }
    let mut h = vec![0.0; d];
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(seq.len());
    let mut steps = Vec::with_capacity(seq.len());
    for (&q, &r) in seq.questions.iter().zip(&seq.correct) {
        let u = question_concept_mean(q, &encoded.concepts, graph)?;
        let y = predict(&h, encoded.questions.row(q), &u, params)?;
        loss += log_loss(y, r);
        let v = interaction_vector(&u, r)?;
        let (h_next, gates) = gru_step(&v, &h, params)?;
        predictions.push(y);
        steps.push(StepTrace {
            u,
            v,
            gates,
            h: h_next.clone(),
            y,
        });
        h = h_next;
    }
    Ok(SequenceOutput {
        loss,
        predictions,
        steps,
    })
}

/// Gradients of one sequence's contribution to the loss.
pub struct SequenceGrads {
    pub params: SequenceModelParams,
    pub d_concepts: Matrix,
    pub d_questions: Matrix,
}

/// Backpropagate `scale · loss` through the sequence (BPTT).
pub fn sequence_backward(
    seq: &IndexedSequence,
    out: &SequenceOutput,
    params: &SequenceModelParams,
    encoded: &Encoded,
    graph: &HeteroGraph,
    scale: f64,
) -> SequenceGrads {
    let d = params.dim();
    let mut g = SequenceModelParams::zeros(d);
    let mut d_concepts = Matrix::zeros(encoded.concepts.rows, d);
    let mut d_questions = Matrix::zeros(encoded.questions.rows, d);
    let zero = vec![0.0; d];

    // gradient flowing into h_t from later steps
    let mut dh = vec![0.0; d];
    for t in (0..seq.len()).rev() {
        let st = &out.steps[t];
        let h_prev: &[f64] = if t == 0 { &zero } else { &out.steps[t - 1].h };
        let q = seq.questions[t];
        let r = seq.correct[t];
        let mut du = vec![0.0; d];
        let mut dh_prev = vec![0.0; d];

        // GRU step t
        if dh.iter().any(|&x| x != 0.0) {
            let GateTrace {
                reset,
                update,
                candidate,
            } = &st.gates;
            let mut d_cand = vec![0.0; d];
            let mut d_upd = vec![0.0; d];
            for i in 0..d {
                d_cand[i] = dh[i] * (1.0 - update[i]) * (1.0 - candidate[i] * candidate[i]);
                d_upd[i] = dh[i] * (h_prev[i] - candidate[i]) * update[i] * (1.0 - update[i]);
                dh_prev[i] += dh[i] * update[i];
            }
            let gated: Vec<f64> = reset.iter().zip(h_prev).map(|(a, b)| a * b).collect();
            let xh = concat(&[&st.v, &gated]);
            let x = concat(&[&st.v, h_prev]);
            g.w_h.add_outer(1.0, &d_cand, &xh);
            axpy(1.0, &d_cand, &mut g.b_h);
            let mut dxh = vec![0.0; 3 * d];
            params.w_h.matvec_t_acc(&d_cand, &mut dxh);
            let mut d_res = vec![0.0; d];
            for i in 0..d {
                d_res[i] = dxh[2 * d + i] * h_prev[i] * reset[i] * (1.0 - reset[i]);
                dh_prev[i] += dxh[2 * d + i] * reset[i];
            }
            g.w_z.add_outer(1.0, &d_upd, &x);
            axpy(1.0, &d_upd, &mut g.b_z);
            g.w_r.add_outer(1.0, &d_res, &x);
            axpy(1.0, &d_res, &mut g.b_r);
            let mut dx = vec![0.0; 3 * d];
            params.w_z.matvec_t_acc(&d_upd, &mut dx);
            params.w_r.matvec_t_acc(&d_res, &mut dx);
            for i in 0..d {
                dh_prev[i] += dx[2 * d + i];
            }
            let dv: Vec<f64> = (0..2 * d).map(|i| dxh[i] + dx[i]).collect();
            let half = if r == 1 { &dv[..d] } else { &dv[d..] };
            axpy(1.0, half, &mut du);
        }

        // prediction at step t
        let y = st.y;
        let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&y);
        let d_logit = if clamped { 0.0 } else { scale * (y - r as f64) };
        if d_logit != 0.0 {
            let qv = encoded.questions.row(q);
            axpy(d_logit, h_prev, &mut g.w_p[..d]);
            axpy(d_logit, qv, &mut g.w_p[d..2 * d]);
            axpy(d_logit, &st.u, &mut g.w_p[2 * d..]);
            g.b_p += d_logit;
            axpy(d_logit, &params.w_p[..d], &mut dh_prev);
            axpy(d_logit, &params.w_p[d..2 * d], d_questions.row_mut(q));
            axpy(d_logit, &params.w_p[2 * d..], &mut du);
        }

        // u_t is the mean of the question's concepts
        let cs = graph.question_concepts(q);
        let inv = 1.0 / cs.len() as f64;
        for &c in cs {
            axpy(inv, &du, d_concepts.row_mut(c));
        }
        dh = dh_prev;
    }
    SequenceGrads {
        params: g,
        d_concepts,
        d_questions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_hetero_graph;
    use indexmap::IndexMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph() -> HeteroGraph {
        let concepts: Vec<String> = (1..=3).map(|i| format!("c{i}")).collect();
        let qc: IndexMap<String, Vec<String>> = [
            ("q1".to_string(), vec!["c1".to_string()]),
            ("q2".to_string(), vec!["c1".to_string(), "c2".to_string()]),
            ("q3".to_string(), vec!["c1".to_string(), "c2".to_string(), "c3".to_string()]),
            ("q4".to_string(), vec!["c2".to_string(), "c1".to_string()]),
        ]
        .into();
        build_hetero_graph(&concepts, &qc, &[]).unwrap()
    }

    #[test]
    fn concept_means() {
        let g = graph();
        let c = Matrix::from_rows(&[vec![1.0, 0.0, 3.0], vec![0.0, 1.0, -3.0], vec![2.0, 2.0, 6.0]]);
        assert_eq!(question_concept_mean(0, &c, &g).unwrap(), vec![1.0, 0.0, 3.0]);
        assert_eq!(question_concept_mean(1, &c, &g).unwrap(), vec![0.5, 0.5, 0.0]);
        assert_eq!(question_concept_mean(2, &c, &g).unwrap(), vec![1.0, 1.0, 2.0]);
        // concept order of the question does not matter
        let a = question_concept_mean(1, &c, &g).unwrap();
        let b = question_concept_mean(3, &c, &g).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(question_concept_mean(9, &c, &g).is_err());
    }

    #[test]
    fn interaction_halves() {
        assert_eq!(interaction_vector(&[0.5, -1.0], 1).unwrap(), vec![0.5, -1.0, 0.0, 0.0]);
        assert_eq!(interaction_vector(&[0.5, -1.0], 0).unwrap(), vec![0.0, 0.0, 0.5, -1.0]);
        assert!(interaction_vector(&[0.5], 2).is_err());
    }

    #[test]
    fn zero_gru_halves_state() {
        let p = SequenceModelParams::zeros(3);
        let h_prev = [0.4, -0.8, 1.0];
        let (h, gates) = gru_step(&[1.0; 6], &h_prev, &p).unwrap();
        assert_eq!(gates.reset, vec![0.5; 3]);
        assert_eq!(gates.update, vec![0.5; 3]);
        assert_eq!(gates.candidate, vec![0.0; 3]);
        assert_eq!(h, vec![0.2, -0.4, 0.5]);
    }

    #[test]
    fn saturated_update_keeps_state() {
        let mut p = SequenceModelParams::zeros(2);
        p.b_z = vec![100.0; 2];
        let h_prev = [0.3, -0.6];
        let (h, _) = gru_step(&[0.9, 0.1, -0.4, 0.2], &h_prev, &p).unwrap();
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn gru_shape_mismatch() {
        let p = SequenceModelParams::zeros(2);
        assert!(gru_step(&[0.0; 3], &[0.0; 2], &p).is_err());
        assert!(gru_step(&[0.0; 4], &[0.0; 3], &p).is_err());
    }

    /// Straight-line re-evaluation of the gate equations, written out
    /// element by element.
    fn gru_reference(v: &[f64], h: &[f64], p: &SequenceModelParams) -> Vec<f64> {
        let d = h.len();
        let row = |m: &Matrix, i: usize, x: &[f64]| -> f64 {
            let mut s = 0.0;
            for j in 0..3 * d {
                s += m.data[i * 3 * d + j] * x[j];
            }
            s
        };
        let mut vh = v.to_vec();
        vh.extend_from_slice(h);
        let mut out = vec![0.0; d];
        let mut r = vec![0.0; d];
        for i in 0..d {
            r[i] = 1.0 / (1.0 + (-(row(&p.w_r, i, &vh) + p.b_r[i])).exp());
        }
        let mut vrh = v.to_vec();
        for i in 0..d {
            vrh.push(r[i] * h[i]);
        }
        for i in 0..d {
            let z = 1.0 / (1.0 + (-(row(&p.w_z, i, &vh) + p.b_z[i])).exp());
            let c = (row(&p.w_h, i, &vrh) + p.b_h[i]).tanh();
            out[i] = (1.0 - z) * c + z * h[i];
        }
        out
    }

    #[test]
    fn gru_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut p = SequenceModelParams::init(3, &mut rng);
        p.b_r = vec![0.1, -0.2, 0.3];
        p.b_z = vec![-0.5, 0.4, 0.0];
        p.b_h = vec![0.2, 0.2, -0.1];
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (got, _) = gru_step(&v, &h, &p).unwrap();
        let want = gru_reference(&v, &h, &p);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn predictions() {
        let mut p = SequenceModelParams::zeros(2);
        assert_eq!(predict(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &p).unwrap(), 0.5);
        p.b_p = 3f64.ln();
        assert!((predict(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &p).unwrap() - 0.75).abs() < 1e-15);
        p.w_p = vec![50.0; 6];
        let y = predict(&[1.0; 2], &[1.0; 2], &[1.0; 2], &p).unwrap();
        assert!(y > 0.0 && y <= 1.0);
        assert!(predict(&[1.0], &[1.0; 2], &[1.0; 2], &p).is_err());
    }

    fn encoded(d: usize) -> Encoded {
        Encoded {
            concepts: Matrix::from_rows(&(0..3).map(|i| vec![0.1 * (i + 1) as f64; d]).collect::<Vec<_>>()),
            questions: Matrix::from_rows(&(0..4).map(|i| vec![-0.2 * i as f64; d]).collect::<Vec<_>>()),
        }
    }

    fn idx_seq(qs: &[usize], rs: &[u8]) -> IndexedSequence {
        IndexedSequence {
            student: "s".into(),
            questions: qs.to_vec(),
            correct: rs.to_vec(),
        }
    }

    #[test]
    fn uniform_prediction_loss() {
        let p = SequenceModelParams::zeros(2);
        let out = sequence_forward(&idx_seq(&[0, 1, 2, 3], &[1, 0, 0, 1]), &p, &encoded(2), &graph()).unwrap();
        assert!((out.loss - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(out.predictions.iter().all(|&y| y == 0.5));
    }

    #[test]
    fn two_step_hand_worksheet() {
        // d = 2, only b_p, w_p[h-part] and b_h are non-zero.
        // step 1: h0 = 0 -> y1 = σ(b_p) = σ(0.5)
        //         u1 = c1 = [0.1, 0.1]; r1 = 1; gates: r = z = 0.5,
        //         candidate = tanh(b_h) = tanh(0.3), h1 = 0.5 tanh(0.3)
        // step 2: y2 = σ(w·h1·2 + b_p) with w = 1 on both h coordinates
        let mut p = SequenceModelParams::zeros(2);
        p.b_p = 0.5;
        p.b_h = vec![0.3, 0.3];
        p.w_p = vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let out = sequence_forward(&idx_seq(&[0, 1], &[1, 0]), &p, &encoded(2), &graph()).unwrap();
        let y1 = 1.0 / (1.0 + (-0.5f64).exp());
        let h1 = 0.5 * 0.3f64.tanh();
        let y2 = 1.0 / (1.0 + (-(2.0 * h1 + 0.5)).exp());
        assert!((out.predictions[0] - y1).abs() < 1e-12);
        assert!((out.steps[0].h[0] - h1).abs() < 1e-12);
        assert!((out.predictions[1] - y2).abs() < 1e-12);
        let loss = -y1.ln() - (1.0 - y2).ln();
        assert!((out.loss - loss).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_hit_the_clamp() {
        let mut p = SequenceModelParams::zeros(2);
        p.b_p = 1000.0;
        let out = sequence_forward(&idx_seq(&[0, 1, 2], &[1, 1, 1]), &p, &encoded(2), &graph()).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.loss <= 3.0 * 1.1e-7);
        p.b_p = -1000.0;
        let out = sequence_forward(&idx_seq(&[0, 1, 2], &[1, 1, 1]), &p, &encoded(2), &graph()).unwrap();
        assert!(out.loss.is_finite());
    }

    #[test]
    fn empty_sequence_is_error() {
        let p = SequenceModelParams::zeros(2);
        assert!(sequence_forward(&idx_seq(&[], &[]), &p, &encoded(2), &graph()).is_err());
    }
}
