//! Frozen text features for concept and question vertices.
//!
//! Precomputed language-model embeddings are read from a plain text format:
//!
//! ```text
//! #dim 3
//! #pooling mean
//! c1 0.1 -0.2 0.3
//! ```
//!
//! Vertices without a precomputed row fall back to a hashed bag-of-tokens
//! featurizer so the whole pipeline runs without a language model.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::corpus::InteractionCorpus;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::tensor::{max_abs, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    pooling: Option<String>,
    rows: IndexMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            pooling: None,
            rows: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pooling(&self) -> Option<&str> {
        self.pooling.as_deref()
    }

    pub fn set_pooling(&mut self, pooling: impl Into<String>) {
        self.pooling = Some(pooling.into());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.rows
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId {
                kind: "embedding row",
                id: id.to_owned(),
            })
    }

    pub fn insert(&mut self, id: impl Into<String>, row: Vec<f64>) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::dim(format!(
                "row `{id}` has {} values, table dimension is {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("row `{id}` has non-finite values")));
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#dim {}\n", self.dim);
        if let Some(p) = &self.pooling {
            let _ = writeln!(s, "#pooling {p}");
        }
        for (id, row) in &self.rows {
            s.push_str(id);
            for v in row {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#dim") {
                if table.is_some() {
                    return Err(Error::parse(file, line_no, "duplicate #dim header"));
                }
                let dim: usize = rest
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::parse(file, line_no, "#dim must be a positive integer"))?;
                table = Some(EmbeddingTable::new(dim));
                continue;
            }
            if let Some(rest) = line.strip_prefix("#pooling") {
                let t = table
                    .as_mut()
                    .ok_or_else(|| Error::parse(file, line_no, "#dim header must come first"))?;
                t.pooling = Some(rest.trim().to_owned());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let t = table
                .as_mut()
                .ok_or_else(|| Error::parse(file, line_no, "missing #dim header"))?;
            let mut parts = line.split_whitespace();
            let id = parts.next().expect("nonempty line").to_owned();
            let row: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(file, line_no, format!("row `{id}`: {e}")))?;
            if row.len() != t.dim {
                return Err(Error::parse(
                    file,
                    line_no,
                    format!("row `{id}` has {} values, expected {}", row.len(), t.dim),
                ));
            }
            t.insert(id, row)
                .map_err(|e| Error::parse(file, line_no, e.to_string()))?;
        }
        table.ok_or_else(|| Error::parse(file, 1, "missing #dim header"))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::parse(&text, &path.display().to_string())
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Hashed bag-of-tokens: every token adds a signed unit to two buckets chosen
/// by a seeded SHA-256 of the token; the result is scaled to unit max-norm.
pub fn fallback_embed(text: &str, d_t: usize, seed: u64) -> Vec<f64> {
    assert!(d_t >= 1, "embedding dimension must be positive");
    let mut v = vec![0.0; d_t];
    let mut any = false;
    for tok in tokens(text) {
        any = true;
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(tok.as_bytes());
        let digest = h.finalize();
        for k in 0..2 {
            let chunk: [u8; 8] = digest[k * 8..(k + 1) * 8].try_into().expect("8 bytes");
            let x = u64::from_le_bytes(chunk);
            let bucket = (x >> 1) as usize % d_t;
            let sign = if x & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
    }
    if !any {
        log::warn!("fallback embedding of empty text; using the zero vector");
        return v;
    }
    let m = max_abs(&v);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
    v
}

/// Per-vertex input features, rows aligned with the graph's vertex indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrices {
    pub concepts: Matrix,
    pub questions: Matrix,
}

impl FeatureMatrices {
    pub fn dim(&self) -> usize {
        self.concepts.cols
    }

    pub fn to_tables(&self, graph: &HeteroGraph) -> (EmbeddingTable, EmbeddingTable) {
        let mut c = EmbeddingTable::new(self.dim());
        for (i, id) in graph.concepts().iter().enumerate() {
            c.rows.insert(id.clone(), self.concepts.row(i).to_vec());
        }
        let mut q = EmbeddingTable::new(self.dim());
        for (i, id) in graph.questions().iter().enumerate() {
            q.rows.insert(id.clone(), self.questions.row(i).to_vec());
        }
        (c, q)
    }

    pub fn from_tables(
        graph: &HeteroGraph,
        concepts: &EmbeddingTable,
        questions: &EmbeddingTable,
    ) -> Result<Self> {
        if concepts.dim() != questions.dim() {
            return Err(Error::dim(format!(
                "concept features have dimension {}, question features {}",
                concepts.dim(),
                questions.dim()
            )));
        }
        let mut cm = Matrix::zeros(0, concepts.dim());
        for id in graph.concepts() {
            cm.push_row(concepts.get(id)?);
        }
        let mut qm = Matrix::zeros(0, questions.dim());
        for id in graph.questions() {
            qm.push_row(questions.get(id)?);
        }
        Ok(Self {
            concepts: cm,
            questions: qm,
        })
    }
}

/// Feature row for one concept: the table entry if present, otherwise the
/// fallback embedding of its text.
pub fn concept_features(
    id: &str,
    text: &str,
    table: Option<&EmbeddingTable>,
    d_t: usize,
    seed: u64,
) -> Vec<f64> {
    match table.and_then(|t| t.get(id).ok()) {
        Some(row) => row.to_vec(),
        None => fallback_embed(text, d_t, seed),
    }
}

/// Feature row for one question: table entry, else its own text, else the
/// space-joined texts of its concepts.
pub fn question_features(
    id: &str,
    text: Option<&str>,
    concept_texts: &[&str],
    table: Option<&EmbeddingTable>,
    d_t: usize,
    seed: u64,
) -> Vec<f64> {
    if let Some(row) = table.and_then(|t| t.get(id).ok()) {
        return row.to_vec();
    }
    match text.filter(|t| !t.trim().is_empty()) {
        Some(t) => fallback_embed(t, d_t, seed),
        None => fallback_embed(&concept_texts.join(" "), d_t, seed),
    }
}

pub fn assemble_feature_matrices(
    corpus: &InteractionCorpus,
    graph: &HeteroGraph,
    concept_table: Option<&EmbeddingTable>,
    question_table: Option<&EmbeddingTable>,
    d_t: usize,
    seed: u64,
) -> Result<FeatureMatrices> {
    for t in [concept_table, question_table].into_iter().flatten() {
        if t.dim() != d_t {
            return Err(Error::dim(format!(
                "embedding table dimension {} conflicts with d_t = {d_t}",
                t.dim()
            )));
        }
    }
    if d_t == 0 {
        return Err(Error::invalid("d_t must be positive"));
    }
    let concept_text = |id: &str| -> Result<&str> {
        corpus
            .concept_text
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownId {
                kind: "concept",
                id: id.to_owned(),
            })
    };
    let mut concepts = Matrix::zeros(0, d_t);
    for id in graph.concepts() {
        concepts.push_row(&concept_features(id, concept_text(id)?, concept_table, d_t, seed));
    }
    let mut questions = Matrix::zeros(0, d_t);
    for (qi, id) in graph.questions().iter().enumerate() {
        let texts: Vec<&str> = graph
            .question_concepts(qi)
            .iter()
            .map(|&c| concept_text(graph.concept_id(c)))
            .collect::<Result<_>>()?;
        questions.push_row(&question_features(
            id,
            corpus.question_text(id),
            &texts,
            question_table,
            d_t,
            seed,
        ));
    }
    Ok(FeatureMatrices {
        concepts,
        questions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_hetero_graph;

    #[test]
    fn parse_fixture_rows() {
        let t = EmbeddingTable::parse("#dim 3\nc1 0.5 -1 2\nc2 0 0 0.25\n", "f").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.get("c1").unwrap(), &[0.5, -1.0, 2.0]);
        assert_eq!(t.get("c2").unwrap(), &[0.0, 0.0, 0.25]);
    }

    #[test]
    fn missing_lookup_names_id() {
        let t = EmbeddingTable::parse("#dim 1\nc1 1\n", "f").unwrap();
        let err = t.get("c9").unwrap_err().to_string();
        assert!(err.contains("c9"));
    }

    #[test]
    fn wrong_row_width_fails_at_that_row() {
        let err = EmbeddingTable::parse("#dim 3\nc1 1 2 3\nc2 1 2 3 4\n", "emb.txt")
            .unwrap_err()
            .to_string();
        assert!(err.contains("emb.txt:3") && err.contains("c2"), "{err}");
    }

    #[test]
    fn header_is_required() {
        assert!(EmbeddingTable::parse("c1 1 2\n", "f").is_err());
        assert!(EmbeddingTable::parse("#dim 0\n", "f").is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut t = EmbeddingTable::new(2);
        t.set_pooling("cls");
        t.insert("a", vec![0.1, -1.0 / 3.0]).unwrap();
        let back = EmbeddingTable::parse(&t.to_text(), "f").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn fallback_is_deterministic_and_bounded() {
        let a = fallback_embed("addition", 32, 0);
        assert_eq!(a, fallback_embed("addition", 32, 0));
        let b = fallback_embed("subtraction", 32, 0);
        assert_ne!(a, b);
        for d in [1, 7, 32] {
            let v = fallback_embed("fractions of whole numbers", d, 3);
            assert_eq!(v.len(), d);
            assert!(v.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
        }
        assert_ne!(fallback_embed("addition", 32, 0), fallback_embed("addition", 32, 1));
    }

    #[test]
    fn fallback_of_empty_text_is_zero() {
        assert_eq!(fallback_embed("  ", 4, 0), vec![0.0; 4]);
    }

    fn corpus() -> InteractionCorpus {
        let concepts: IndexMap<String, String> = [
            ("c1".to_string(), "addition".to_string()),
            ("c2".to_string(), "subtraction".to_string()),
        ]
        .into();
        let qc: IndexMap<String, Vec<String>> = [
            ("q1".to_string(), vec!["c1".to_string(), "c2".to_string()]),
            ("q2".to_string(), vec!["c2".to_string()]),
        ]
        .into();
        let qt: IndexMap<String, String> = [("q2".to_string(), "take away seven".to_string())].into();
        InteractionCorpus::new(Vec::new(), concepts, qc, Some(qt)).unwrap()
    }

    #[test]
    fn assembly_rules() {
        let corpus = corpus();
        let g = build_hetero_graph(corpus.concepts.iter(), &corpus.qc_map, &[]).unwrap();
        let mut table = EmbeddingTable::new(8);
        table.insert("c1", vec![0.25; 8]).unwrap();
        let f = assemble_feature_matrices(&corpus, &g, Some(&table), None, 8, 5).unwrap();
        assert_eq!((f.concepts.rows, f.questions.rows), (2, 2));
        assert_eq!(f.concepts.row(0), &[0.25; 8]);
        assert_eq!(f.concepts.row(1), fallback_embed("subtraction", 8, 5).as_slice());
        assert_eq!(f.questions.row(0), fallback_embed("addition subtraction", 8, 5).as_slice());
        assert_eq!(f.questions.row(1), fallback_embed("take away seven", 8, 5).as_slice());
    }

    #[test]
    fn table_dimension_conflict() {
        let corpus = corpus();
        let g = build_hetero_graph(corpus.concepts.iter(), &corpus.qc_map, &[]).unwrap();
        let c = EmbeddingTable::new(8);
        let q = EmbeddingTable::new(4);
        assert!(assemble_feature_matrices(&corpus, &g, Some(&c), Some(&q), 8, 0).is_err());
    }
}
