//! Heterogeneous concept–question graph, its JSON file form, and the
//! empirical concept transition graph used as an ablation baseline.

pub mod llm;

use std::path::Path;

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};

use crate::corpus::StudentSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Minimum transition probability kept when the transition graph stands in
/// for generated concept edges.
pub const TRANSITION_EDGE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    ConceptQuestion,
    QuestionConcept,
    ConceptConcept,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroGraph {
    concepts: IndexSet<String>,
    questions: IndexSet<String>,
    /// Concepts of each question, in qc-map order (question→concept edges).
    question_concepts: Vec<Vec<usize>>,
    /// Questions of each concept (concept→question edges).
    concept_questions: Vec<Vec<usize>>,
    /// Sources of concept→concept edges entering each concept.
    concept_in: Vec<Vec<usize>>,
    cc_edges: Vec<(usize, usize)>,
}

impl HeteroGraph {
    pub fn empty() -> Self {
        Self {
            concepts: IndexSet::new(),
            questions: IndexSet::new(),
            question_concepts: Vec::new(),
            concept_questions: Vec::new(),
            concept_in: Vec::new(),
            cc_edges: Vec::new(),
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn concepts(&self) -> &IndexSet<String> {
        &self.concepts
    }

    pub fn questions(&self) -> &IndexSet<String> {
        &self.questions
    }

    pub fn concept_index(&self, id: &str) -> Option<usize> {
        self.concepts.get_index_of(id)
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.questions.get_index_of(id)
    }

    pub fn concept_id(&self, idx: usize) -> &str {
        &self.concepts[idx]
    }

    pub fn question_id(&self, idx: usize) -> &str {
        &self.questions[idx]
    }

    /// `C_q`: concept neighbors of question `q`.
    pub fn question_concepts(&self, q: usize) -> &[usize] {
        &self.question_concepts[q]
    }

    /// `Q_c`: question neighbors of concept `c`.
    pub fn concept_questions(&self, c: usize) -> &[usize] {
        &self.concept_questions[c]
    }

    /// Concept in-neighbors of concept `c`.
    pub fn concept_in_neighbors(&self, c: usize) -> &[usize] {
        &self.concept_in[c]
    }

    pub fn concept_edges(&self) -> &[(usize, usize)] {
        &self.cc_edges
    }

    pub fn adjacency(&self, relation: Relation) -> &[Vec<usize>] {
        match relation {
            Relation::ConceptQuestion => &self.question_concepts,
            Relation::QuestionConcept => &self.concept_questions,
            Relation::ConceptConcept => &self.concept_in,
        }
    }

    /// Directed `(source, target)` edges of one relation, as ids.
    pub fn edges(&self, relation: Relation) -> Vec<(String, String)> {
        match relation {
            Relation::QuestionConcept => self
                .question_concepts
                .iter()
                .enumerate()
                .flat_map(|(q, cs)| {
                    cs.iter()
                        .map(move |&c| (self.questions[q].clone(), self.concepts[c].clone()))
                })
                .collect(),
            Relation::ConceptQuestion => self
                .concept_questions
                .iter()
                .enumerate()
                .flat_map(|(c, qs)| {
                    qs.iter()
                        .map(move |&q| (self.concepts[c].clone(), self.questions[q].clone()))
                })
                .collect(),
            Relation::ConceptConcept => self
                .cc_edges
                .iter()
                .map(|&(s, t)| (self.concepts[s].clone(), self.concepts[t].clone()))
                .collect(),
        }
    }

    pub fn add_concept(&mut self, id: &str) -> usize {
        let (idx, fresh) = self.concepts.insert_full(id.to_owned());
        if fresh {
            self.concept_questions.push(Vec::new());
            self.concept_in.push(Vec::new());
        }
        idx
    }

    pub fn add_question(&mut self, id: &str, concepts: &[String]) -> Result<usize> {
        if concepts.is_empty() {
            return Err(Error::EmptyConceptList(id.to_owned()));
        }
        if self.questions.contains(id) {
            return Err(Error::invalid(format!("question `{id}` already in graph")));
        }
        let mut cidx = Vec::with_capacity(concepts.len());
        for c in concepts {
            let ci = self.concept_index(c).ok_or_else(|| Error::UnknownId {
                kind: "concept",
                id: c.clone(),
            })?;
            if !cidx.contains(&ci) {
                cidx.push(ci);
            }
        }
        let (q, _) = self.questions.insert_full(id.to_owned());
        for &ci in &cidx {
            self.concept_questions[ci].push(q);
        }
        self.question_concepts.push(cidx);
        Ok(q)
    }

    /// Add a directed concept edge. Returns `false` for self-loops and duplicates.
    pub fn add_concept_edge(&mut self, src: &str, dst: &str) -> Result<bool> {
        let lookup = |id: &str| {
            self.concept_index(id).ok_or_else(|| Error::UnknownId {
                kind: "concept",
                id: id.to_owned(),
            })
        };
        let (s, t) = (lookup(src)?, lookup(dst)?);
        if s == t || self.concept_in[t].contains(&s) {
            return Ok(false);
        }
        self.concept_in[t].push(s);
        self.cc_edges.push((s, t));
        Ok(true)
    }

    /// Same vertices and question–concept edges, different concept edges.
    pub fn with_concept_edges(&self, edges: &[(String, String)]) -> Result<Self> {
        let mut g = self.clone();
        g.cc_edges.clear();
        g.concept_in.iter_mut().for_each(Vec::clear);
        for (s, t) in edges {
            g.add_concept_edge(s, t)?;
        }
        Ok(g)
    }

    pub fn to_file(&self, provenance: Provenance) -> GraphFile {
        GraphFile {
            concepts: self.concepts.iter().cloned().collect(),
            questions: self.questions.iter().cloned().collect(),
            qc_edges: self.edges(Relation::QuestionConcept),
            cc_edges: self.edges(Relation::ConceptConcept),
            provenance,
        }
    }

    pub fn from_file(file: &GraphFile) -> Result<Self> {
        let mut g = HeteroGraph::empty();
        for c in &file.concepts {
            g.add_concept(c);
        }
        let mut qc: IndexMap<&str, Vec<String>> =
            file.questions.iter().map(|q| (q.as_str(), Vec::new())).collect();
        for (q, c) in &file.qc_edges {
            qc.get_mut(q.as_str())
                .ok_or_else(|| Error::UnknownId {
                    kind: "question",
                    id: q.clone(),
                })?
                .push(c.clone());
        }
        for (q, cs) in qc {
            g.add_question(q, &cs)?;
        }
        for (s, t) in &file.cc_edges {
            g.add_concept_edge(s, t)?;
        }
        Ok(g)
    }
}

/// Build the graph from the question→concept map and generated concept edges.
/// Vertices are `concepts` (in order) plus every question of `qc_map`.
pub fn build_hetero_graph<'a>(
    concepts: impl IntoIterator<Item = &'a String>,
    qc_map: &IndexMap<String, Vec<String>>,
    concept_edges: &[(String, String)],
) -> Result<HeteroGraph> {
    if qc_map.is_empty() {
        return Err(Error::invalid("question-concept map is empty"));
    }
    let mut g = HeteroGraph::empty();
    for c in concepts {
        g.add_concept(c);
    }
    for (q, cs) in qc_map {
        g.add_question(q, cs)?;
    }
    for (s, t) in concept_edges {
        g.add_concept_edge(s, t)?;
    }
    Ok(g)
}

pub fn edge_density(graph: &HeteroGraph) -> Result<f64> {
    let n = graph.num_concepts();
    if n < 2 {
        return Err(Error::invalid(format!(
            "edge density needs at least 2 concepts, got {n}"
        )));
    }
    Ok(graph.concept_edges().len() as f64 / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub client: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFile {
    pub concepts: Vec<String>,
    pub questions: Vec<String>,
    /// `[question, concept]` pairs.
    pub qc_edges: Vec<(String, String)>,
    /// Directed `[source, target]` concept pairs.
    pub cc_edges: Vec<(String, String)>,
    pub provenance: Provenance,
}

impl GraphFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `probs[(i, j)]` is the empirical probability that concept `i` follows
/// concept `j` at the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    pub probs: Matrix,
}

impl TransitionGraph {
    pub fn get(&self, next: usize, prev: usize) -> f64 {
        self.probs.data[next * self.probs.cols + prev]
    }

    /// Directed concept edges `prev -> next` whose probability reaches `threshold`.
    pub fn edges(&self, graph: &HeteroGraph, threshold: f64) -> Vec<(String, String)> {
        let n = self.probs.rows;
        let mut out = Vec::new();
        for prev in 0..n {
            for next in 0..n {
                if next != prev && self.get(next, prev) >= threshold {
                    out.push((
                        graph.concept_id(prev).to_owned(),
                        graph.concept_id(next).to_owned(),
                    ));
                }
            }
        }
        out
    }
}

/// Count, over consecutive steps of each student, a transition from every
/// concept of the earlier question to every concept of the later one, then
/// normalize each source column.
pub fn build_transition_graph(
    training_sequences: &[StudentSequence],
    graph: &HeteroGraph,
) -> Result<TransitionGraph> {
    let n = graph.num_concepts();
    let mut counts = Matrix::zeros(n, n);
    for seq in training_sequences {
        let qs: Vec<usize> = seq
            .steps
            .iter()
            .map(|s| {
                graph.question_index(&s.question).ok_or_else(|| Error::UnknownId {
                    kind: "question",
                    id: s.question.clone(),
                })
            })
            .collect::<Result<_>>()?;
        for pair in qs.windows(2) {
            for &prev in graph.question_concepts(pair[0]) {
                for &next in graph.question_concepts(pair[1]) {
                    counts.data[next * n + prev] += 1.0;
                }
            }
        }
    }
    for prev in 0..n {
        let total: f64 = (0..n).map(|next| counts.data[next * n + prev]).sum();
        if total > 0.0 {
            for next in 0..n {
                counts.data[next * n + prev] /= total;
            }
        }
    }
    Ok(TransitionGraph { probs: counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Step;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn fixture() -> HeteroGraph {
        let concepts = ids(&["c1", "c2", "c3"]);
        let qc: IndexMap<String, Vec<String>> = [
            ("q1".to_string(), ids(&["c1", "c2"])),
            ("q2".to_string(), ids(&["c3"])),
        ]
        .into();
        let cc = vec![("c2".to_string(), "c1".to_string()), ("c1".to_string(), "c3".to_string())];
        build_hetero_graph(&concepts, &qc, &cc).unwrap()
    }

    #[test]
    fn question_edges_are_paired() {
        let g = fixture();
        let qc = g.edges(Relation::QuestionConcept);
        let cq = g.edges(Relation::ConceptQuestion);
        assert_eq!(qc.iter().filter(|(q, _)| q == "q1").count(), 2);
        assert_eq!(cq.iter().filter(|(_, q)| q == "q1").count(), 2);
        for (q, c) in &qc {
            assert!(cq.contains(&(c.clone(), q.clone())));
        }
        assert_eq!(qc.len(), cq.len());
    }

    #[test]
    fn adjacency_matches_hand_built_lists() {
        let g = fixture();
        assert_eq!(g.adjacency(Relation::ConceptQuestion), &[vec![0, 1], vec![2]]);
        assert_eq!(g.adjacency(Relation::QuestionConcept), &[vec![0], vec![0], vec![1]]);
        assert_eq!(g.adjacency(Relation::ConceptConcept), &[vec![1], vec![], vec![0]]);
    }

    #[test]
    fn no_concept_edges_gives_empty_in_neighbors() {
        let g = fixture().with_concept_edges(&[]).unwrap();
        assert!((0..3).all(|c| g.concept_in_neighbors(c).is_empty()));
    }

    #[test]
    fn unknown_vertex_is_rejected() {
        let concepts = ids(&["c1"]);
        let qc: IndexMap<String, Vec<String>> = [("q1".to_string(), ids(&["c1"]))].into();
        let bad = vec![("c1".to_string(), "c9".to_string())];
        assert!(matches!(
            build_hetero_graph(&concepts, &qc, &bad),
            Err(Error::UnknownId { kind: "concept", .. })
        ));
        let qc_bad: IndexMap<String, Vec<String>> = [("q1".to_string(), ids(&["c7"]))].into();
        assert!(build_hetero_graph(&concepts, &qc_bad, &[]).is_err());
    }

    #[test]
    fn self_loops_and_duplicates_are_ignored() {
        let mut g = fixture();
        assert!(!g.add_concept_edge("c1", "c1").unwrap());
        assert!(!g.add_concept_edge("c2", "c1").unwrap());
        assert_eq!(g.concept_edges().len(), 2);
    }

    #[test]
    fn density() {
        let g = fixture();
        assert!((edge_density(&g).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(edge_density(&g.with_concept_edges(&[]).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn density_needs_two_concepts() {
        let qc: IndexMap<String, Vec<String>> = [("q1".to_string(), ids(&["c1"]))].into();
        let g = build_hetero_graph(&ids(&["c1"]), &qc, &[]).unwrap();
        assert!(edge_density(&g).is_err());
    }

    #[test]
    fn file_round_trip_is_idempotent() {
        let g = fixture();
        let file = g.to_file(Provenance::default());
        let back = HeteroGraph::from_file(&file).unwrap();
        assert_eq!(g, back);
        assert_eq!(back.to_file(Provenance::default()), file);
    }

    fn single_concept_graph() -> HeteroGraph {
        let qc: IndexMap<String, Vec<String>> = [
            ("q1".to_string(), ids(&["c1"])),
            ("q2".to_string(), ids(&["c2"])),
        ]
        .into();
        build_hetero_graph(&ids(&["c1", "c2", "c3"]), &qc, &[]).unwrap()
    }

    fn steps(qs: &[&str]) -> StudentSequence {
        StudentSequence {
            student: "s".into(),
            steps: qs
                .iter()
                .enumerate()
                .map(|(i, q)| Step {
                    question: q.to_string(),
                    correct: 1,
                    timestamp: i as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn transition_alternating_stream() {
        let g = single_concept_graph();
        let t = build_transition_graph(&[steps(&["q1", "q2", "q1", "q2"])], &g).unwrap();
        assert_eq!(t.get(1, 0), 1.0);
        assert_eq!(t.get(0, 1), 1.0);
        assert_eq!(t.get(0, 0), 0.0);
        // c3 never observed as a source
        assert!((0..3).all(|i| t.get(i, 2) == 0.0));
        let edges = t.edges(&g, TRANSITION_EDGE_THRESHOLD);
        assert_eq!(
            edges,
            vec![("c1".to_string(), "c2".to_string()), ("c2".to_string(), "c1".to_string())]
        );
    }

    #[test]
    fn transition_without_pairs_is_zero() {
        let g = single_concept_graph();
        let t = build_transition_graph(&[steps(&["q1"]), steps(&["q2"])], &g).unwrap();
        assert!(t.probs.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn transition_columns_are_stochastic() {
        let g = fixture();
        let t = build_transition_graph(&[steps(&["q1", "q2", "q2", "q1", "q1"])], &g).unwrap();
        for prev in 0..3 {
            let s: f64 = (0..3).map(|n| t.get(n, prev)).sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }
}
