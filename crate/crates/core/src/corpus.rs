//! Interaction logs, per-student sequences and student-level splits.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::Path;

use indexmap::{IndexMap, IndexSet};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_LEN: usize = 10;
pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);
pub const DEFAULT_HOLDOUT_FRAC: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub student: String,
    pub question: String,
    pub correct: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionCorpus {
    pub students: IndexSet<String>,
    pub questions: IndexSet<String>,
    pub concepts: IndexSet<String>,
    pub records: Vec<Record>,
    pub concept_text: IndexMap<String, String>,
    pub question_text: Option<IndexMap<String, String>>,
    pub qc_map: IndexMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub students: usize,
    pub interactions: usize,
    pub questions: usize,
    pub concepts: usize,
}

impl InteractionCorpus {
    /// Assemble a corpus from in-memory parts, checking every invariant.
    pub fn new(
        records: Vec<Record>,
        concept_text: IndexMap<String, String>,
        qc_map: IndexMap<String, Vec<String>>,
        question_text: Option<IndexMap<String, String>>,
    ) -> Result<Self> {
        for (q, cs) in &qc_map {
            if cs.is_empty() {
                return Err(Error::EmptyConceptList(q.clone()));
            }
            for c in cs {
                if !concept_text.contains_key(c) {
                    return Err(Error::UnknownId {
                        kind: "concept",
                        id: c.clone(),
                    });
                }
            }
        }
        if let Some(qt) = &question_text {
            for q in qt.keys() {
                if !qc_map.contains_key(q) {
                    return Err(Error::EmptyConceptList(q.clone()));
                }
            }
        }
        let mut students = IndexSet::new();
        for r in &records {
            if !qc_map.contains_key(&r.question) {
                return Err(Error::UnknownId {
                    kind: "question",
                    id: r.question.clone(),
                });
            }
            if r.correct > 1 {
                return Err(Error::invalid(format!(
                    "correctness must be 0 or 1, got {}",
                    r.correct
                )));
            }
            students.insert(r.student.clone());
        }
        Ok(Self {
            students,
            questions: qc_map.keys().cloned().collect(),
            concepts: concept_text.keys().cloned().collect(),
            records,
            concept_text,
            question_text,
            qc_map,
        })
    }

    pub fn counts(&self) -> CorpusCounts {
        CorpusCounts {
            students: self.students.len(),
            interactions: self.records.len(),
            questions: self.questions.len(),
            concepts: self.concepts.len(),
        }
    }

    pub fn question_text(&self, question: &str) -> Option<&str> {
        self.question_text
            .as_ref()
            .and_then(|m| m.get(question))
            .map(String::as_str)
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn check_header(
    reader: &mut csv::Reader<File>,
    path: &Path,
    expected: &[&str],
) -> Result<()> {
    let name = path.display().to_string();
    let header = reader
        .headers()
        .map_err(|e| Error::parse(&name, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::parse(
            &name,
            1,
            format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Read every data row as a vector of exactly `width` fields, paired with its
/// 1-based line number.
fn read_rows(path: &Path, expected: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let name = path.display().to_string();
    let mut reader = open_csv(path)?;
    check_header(&mut reader, path, expected)?;
    let mut rows = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(&name, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != expected.len() {
            return Err(Error::parse(
                &name,
                line,
                format!("expected {} fields, got {}", expected.len(), record.len()),
            ));
        }
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

fn read_text_map(path: &Path, id_col: &str) -> Result<IndexMap<String, String>> {
    let name = path.display().to_string();
    let mut out = IndexMap::new();
    for (line, row) in read_rows(path, &[id_col, "text"])? {
        if row[0].is_empty() {
            return Err(Error::parse(&name, line, "empty id"));
        }
        out.insert(row[0].clone(), row[1].clone());
    }
    Ok(out)
}

fn read_qc_map(path: &Path) -> Result<IndexMap<String, Vec<String>>> {
    let name = path.display().to_string();
    let mut out: IndexMap<String, Vec<String>> = IndexMap::new();
    for (line, row) in read_rows(path, &["question_id", "concept_id"])? {
        if row[0].is_empty() {
            return Err(Error::parse(&name, line, "empty question id"));
        }
        if row[1].is_empty() {
            return Err(Error::EmptyConceptList(row[0].clone()));
        }
        let list = out.entry(row[0].clone()).or_default();
        if !list.contains(&row[1]) {
            list.push(row[1].clone());
        }
    }
    Ok(out)
}

fn read_interactions(
    path: &Path,
    qc_map: &IndexMap<String, Vec<String>>,
) -> Result<Vec<Record>> {
    let name = path.display().to_string();
    let rows = read_rows(path, &["student_id", "question_id", "correct", "timestamp"])?;
    let mut records = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let correct = match row[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::parse(
                    &name,
                    line,
                    format!("correct must be 0 or 1, got `{other}`"),
                ))
            }
        };
        let timestamp: i64 = row[3]
            .parse()
            .map_err(|_| Error::parse(&name, line, format!("bad timestamp `{}`", row[3])))?;
        if row[0].is_empty() {
            return Err(Error::parse(&name, line, "empty student id"));
        }
        if !qc_map.contains_key(&row[1]) {
            return Err(Error::parse(
                &name,
                line,
                format!("question `{}` has no concept mapping", row[1]),
            ));
        }
        records.push(Record {
            student: row[0].clone(),
            question: row[1].clone(),
            correct,
            timestamp,
        });
    }
    Ok(records)
}

/// Concept texts and the question-concept map, without interactions.
pub fn load_concepts_and_map(
    concept_text_path: &Path,
    qc_map_path: &Path,
) -> Result<(IndexMap<String, String>, IndexMap<String, Vec<String>>)> {
    let concept_text = read_text_map(concept_text_path, "concept_id")?;
    let qc_map = read_qc_map(qc_map_path)?;
    for cs in qc_map.values() {
        for c in cs {
            if !concept_text.contains_key(c) {
                return Err(Error::UnknownId {
                    kind: "concept",
                    id: c.clone(),
                });
            }
        }
    }
    Ok((concept_text, qc_map))
}

pub fn load_corpus(
    interaction_path: &Path,
    concept_text_path: &Path,
    qc_map_path: &Path,
    question_text_path: Option<&Path>,
) -> Result<InteractionCorpus> {
    let concept_text = read_text_map(concept_text_path, "concept_id")?;
    let qc_map = read_qc_map(qc_map_path)?;
    let question_text = question_text_path
        .map(|p| read_text_map(p, "question_id"))
        .transpose()?;
    let records = read_interactions(interaction_path, &qc_map)?;
    let corpus = InteractionCorpus::new(records, concept_text, qc_map, question_text)?;
    let c = corpus.counts();
    log::info!(
        "loaded corpus: {} students, {} interactions, {} questions, {} concepts",
        c.students,
        c.interactions,
        c.questions,
        c.concepts
    );
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub question: String,
    pub correct: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student: String,
    pub steps: Vec<Step>,
}

impl StudentSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub kept: usize,
    pub dropped_short: usize,
    pub truncated: usize,
    pub records_dropped_by_truncation: usize,
}

/// Group records per student, sort by timestamp (stable, so ties keep file
/// order), drop students with fewer than `min_len` interactions and keep only
/// the most recent `max_len`.
pub fn build_sequences(
    corpus: &InteractionCorpus,
    min_len: usize,
    max_len: usize,
) -> (Vec<StudentSequence>, SequenceReport) {
    let mut grouped: IndexMap<&str, Vec<&Record>> = IndexMap::new();
    for r in &corpus.records {
        grouped.entry(r.student.as_str()).or_default().push(r);
    }
    let mut report = SequenceReport::default();
    let mut out = Vec::new();
    for (student, mut recs) in grouped {
        if recs.len() < min_len {
            report.dropped_short += 1;
            continue;
        }
        recs.sort_by_key(|r| r.timestamp);
        if recs.len() > max_len {
            report.truncated += 1;
            report.records_dropped_by_truncation += recs.len() - max_len;
            recs.drain(..recs.len() - max_len);
        }
        out.push(StudentSequence {
            student: student.to_owned(),
            steps: recs
                .into_iter()
                .map(|r| Step {
                    question: r.question.clone(),
                    correct: r.correct,
                    timestamp: r.timestamp,
                })
                .collect(),
        });
    }
    report.kept = out.len();
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub heldout_questions: Vec<String>,
    pub seed: u64,
}

/// The three student partitions materialized as sequences.
#[derive(Debug, Clone, Default)]
pub struct SplitSequences {
    pub train: Vec<StudentSequence>,
    pub val: Vec<StudentSequence>,
    pub test: Vec<StudentSequence>,
}

impl SplitSpec {
    pub fn heldout_set(&self) -> HashSet<&str> {
        self.heldout_questions.iter().map(String::as_str).collect()
    }

    /// Materialize the partitions. Training sequences lose every interaction
    /// with a held-out question; validation and test sequences are untouched.
    pub fn apply(&self, sequences: &[StudentSequence]) -> SplitSequences {
        let by_id: HashMap<&str, &StudentSequence> =
            sequences.iter().map(|s| (s.student.as_str(), s)).collect();
        let heldout = self.heldout_set();
        let pick = |ids: &[String]| -> Vec<StudentSequence> {
            ids.iter()
                .filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()))
                .collect()
        };
        let train = pick(&self.train)
            .into_iter()
            .map(|s| strip_questions(&s, &heldout))
            .collect();
        SplitSequences {
            train,
            val: pick(&self.val),
            test: pick(&self.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn strip_questions(seq: &StudentSequence, heldout: &HashSet<&str>) -> StudentSequence {
    StudentSequence {
        student: seq.student.clone(),
        steps: seq
            .steps
            .iter()
            .filter(|s| !heldout.contains(s.question.as_str()))
            .cloned()
            .collect(),
    }
}

/// Part sizes by flooring each share and handing the remainder to the parts
/// with the largest fractional parts (earlier parts win ties).
fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            remaining -= 1;
        }
    }
    sizes
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<[f64; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must be in [0,1] and sum to 1, got {ratios:?}"
        )));
    }
    Ok(r)
}

fn shuffled_students(sequences: &[StudentSequence], seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = sequences.iter().map(|s| s.student.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids
}

fn partition_students(
    sequences: &[StudentSequence],
    ratios: [f64; 3],
    seed: u64,
) -> (Vec<String>, Vec<String>, Vec<String>) {
    let ids = shuffled_students(sequences, seed);
    let [a, b, _] = partition_sizes(ids.len(), ratios);
    let test = ids[a + b..].to_vec();
    let val = ids[a..a + b].to_vec();
    let train = ids[..a].to_vec();
    (train, val, test)
}

pub fn split_transductive(
    sequences: &[StudentSequence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSpec> {
    let r = check_ratios(ratios)?;
    if sequences.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 sequences to split, got {}",
            sequences.len()
        )));
    }
    let (train, val, test) = partition_students(sequences, r, seed);
    Ok(SplitSpec {
        mode: SplitMode::Transductive,
        train,
        val,
        test,
        heldout_questions: Vec::new(),
        seed,
    })
}

pub fn split_inductive(
    sequences: &[StudentSequence],
    holdout_frac: f64,
    seed: u64,
) -> Result<SplitSpec> {
    split_inductive_with(sequences, holdout_frac, DEFAULT_RATIOS, DEFAULT_MIN_LEN, seed)
}

/// Student partition as in [`split_transductive`], plus a uniformly sampled
/// `ceil(holdout_frac * |Q|)` set of held-out questions. Training students
/// whose history drops below `min_len` once held-out questions are removed
/// leave the training partition.
pub fn split_inductive_with(
    sequences: &[StudentSequence],
    holdout_frac: f64,
    ratios: (f64, f64, f64),
    min_len: usize,
    seed: u64,
) -> Result<SplitSpec> {
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::invalid(format!(
            "holdout fraction must be in [0, 1), got {holdout_frac}"
        )));
    }
    let mut spec = split_transductive(sequences, ratios, seed)?;
    spec.mode = SplitMode::Inductive;

    let universe: IndexSet<&str> = sequences
        .iter()
        .flat_map(|s| s.steps.iter().map(|st| st.question.as_str()))
        .collect();
    let n_hold = (holdout_frac * universe.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut picked: Vec<usize> = index::sample(&mut rng, universe.len(), n_hold).into_vec();
    picked.sort_unstable();
    spec.heldout_questions = picked
        .into_iter()
        .map(|i| universe[i].to_owned())
        .collect();

    let heldout = spec.heldout_set();
    let by_id: HashMap<&str, &StudentSequence> =
        sequences.iter().map(|s| (s.student.as_str(), s)).collect();
    let mut kept_interactions = 0usize;
    let train: Vec<String> = spec
        .train
        .iter()
        .filter(|id| {
            let remaining = by_id[id.as_str()]
                .steps
                .iter()
                .filter(|s| !heldout.contains(s.question.as_str()))
                .count();
            kept_interactions += remaining;
            remaining >= min_len
        })
        .cloned()
        .collect();
    if train.is_empty() || kept_interactions == 0 {
        return Err(Error::invalid(
            "question holdout removes all training interactions",
        ));
    }
    drop(heldout);
    spec.train = train;
    Ok(spec)
}

pub fn subsample_students(
    sequences: &[StudentSequence],
    n: usize,
    seed: u64,
) -> Result<Vec<StudentSequence>> {
    if n == 0 || n > sequences.len() {
        return Err(Error::invalid(format!(
            "sample size {n} out of range 1..={}",
            sequences.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, sequences.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| sequences[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn fixture_files(dir: &Path, interactions: &str) -> [std::path::PathBuf; 3] {
        [
            write(dir, "inter.csv", interactions),
            write(dir, "concepts.csv", "concept_id,text\nc1,addition\nc2,subtraction\n"),
            write(dir, "qc.csv", "question_id,concept_id\nq1,c1\nq2,c1\nq2,c2\n"),
        ]
    }

    fn seq(student: &str, len: usize) -> StudentSequence {
        StudentSequence {
            student: student.into(),
            steps: (0..len)
                .map(|i| Step {
                    question: format!("q{}", i % 8),
                    correct: (i % 2) as u8,
                    timestamp: i as i64,
                })
                .collect(),
        }
    }

    #[test]
    fn loads_three_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let [i, c, q] = fixture_files(
            dir.path(),
            "student_id,question_id,correct,timestamp\nA,q1,1,10\nA,q2,0,11\nB,q1,1,5\n",
        );
        let corpus = load_corpus(&i, &c, &q, None).unwrap();
        let counts = corpus.counts();
        assert_eq!(counts.students, 2);
        assert_eq!(counts.interactions, 3);
        assert_eq!(counts.questions, 2);
        assert_eq!(counts.concepts, 2);
        assert_eq!(corpus.qc_map["q2"], vec!["c1", "c2"]);
    }

    #[test]
    fn empty_interaction_file() {
        let dir = tempfile::tempdir().unwrap();
        let [i, c, q] = fixture_files(dir.path(), "student_id,question_id,correct,timestamp\n");
        let corpus = load_corpus(&i, &c, &q, None).unwrap();
        assert_eq!(corpus.counts().students, 0);
        assert_eq!(corpus.counts().interactions, 0);
    }

    #[test]
    fn malformed_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let [i, c, q] = fixture_files(
            dir.path(),
            "student_id,question_id,correct,timestamp\nA,q1,1,10\nA,q1,2,11\n",
        );
        let err = load_corpus(&i, &c, &q, None).unwrap_err().to_string();
        assert!(err.contains("inter.csv:3"), "{err}");
    }

    #[test]
    fn empty_concept_in_qc_map_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let [i, c, _] = fixture_files(dir.path(), "student_id,question_id,correct,timestamp\n");
        let q = write(dir.path(), "qc_bad.csv", "question_id,concept_id\nq1,\n");
        assert!(matches!(
            load_corpus(&i, &c, &q, None),
            Err(Error::EmptyConceptList(ref id)) if id == "q1"
        ));
    }

    #[test]
    fn question_text_without_concepts_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let [i, c, q] = fixture_files(dir.path(), "student_id,question_id,correct,timestamp\n");
        let qt = write(dir.path(), "qt.csv", "question_id,text\nq9,orphan\n");
        assert!(matches!(
            load_corpus(&i, &c, &q, Some(&qt)),
            Err(Error::EmptyConceptList(_))
        ));
    }

    fn corpus_with(lengths: &[(&str, usize)]) -> InteractionCorpus {
        let mut records = Vec::new();
        for (s, n) in lengths {
            for t in 0..*n {
                records.push(Record {
                    student: (*s).into(),
                    question: "q1".into(),
                    correct: 1,
                    timestamp: t as i64,
                });
            }
        }
        let concepts: IndexMap<_, _> = [("c1".to_string(), "addition".to_string())].into();
        let qc: IndexMap<_, _> = [("q1".to_string(), vec!["c1".to_string()])].into();
        InteractionCorpus::new(records, concepts, qc, None).unwrap()
    }

    #[test]
    fn sequence_length_filtering() {
        let corpus = corpus_with(&[("short", 9), ("edge", 10), ("long", 250)]);
        let (seqs, report) = build_sequences(&corpus, DEFAULT_MIN_LEN, DEFAULT_MAX_LEN);
        assert_eq!(seqs.len(), 2);
        assert_eq!(report.dropped_short, 1);
        assert_eq!(seqs[0].student, "edge");
        assert_eq!(seqs[0].len(), 10);
        assert_eq!(seqs[1].len(), 200);
        // the earliest 50 were dropped
        assert_eq!(seqs[1].steps[0].timestamp, 50);
        assert_eq!(seqs[1].steps[199].timestamp, 249);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let mut corpus = corpus_with(&[]);
        let qc = &mut corpus.qc_map;
        qc.insert("q2".into(), vec!["c1".into()]);
        let mk = |q: &str, ts| Record {
            student: "s".into(),
            question: q.into(),
            correct: 0,
            timestamp: ts,
        };
        let mut records = vec![mk("q2", 5), mk("q1", 5), mk("q1", 1)];
        for i in 0..10 {
            records.push(mk("q1", 100 + i));
        }
        let corpus = InteractionCorpus::new(
            records,
            corpus.concept_text.clone(),
            corpus.qc_map.clone(),
            None,
        )
        .unwrap();
        let (seqs, _) = build_sequences(&corpus, 10, 200);
        let qs: Vec<&str> = seqs[0].steps[..3].iter().map(|s| s.question.as_str()).collect();
        assert_eq!(qs, vec!["q1", "q2", "q1"]);
        assert_eq!(seqs[0].steps[1].timestamp, 5);
    }

    #[test]
    fn transductive_sizes_and_determinism() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("s{i}"), 12)).collect();
        let a = split_transductive(&seqs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 1, 1));
        let b = split_transductive(&seqs, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
        let all = split_transductive(&seqs, (1.0, 0.0, 0.0), 7).unwrap();
        assert_eq!(all.train.len(), 10);
        assert!(all.val.is_empty() && all.test.is_empty());
        assert!(split_transductive(&seqs, (0.5, 0.1, 0.1), 7).is_err());
        assert!(split_transductive(&seqs[..2], (0.8, 0.1, 0.1), 7).is_err());
    }

    #[test]
    fn partition_sizes_distribute_remainder() {
        assert_eq!(partition_sizes(10, [0.8, 0.1, 0.1]), [8, 1, 1]);
        assert_eq!(partition_sizes(7, [0.8, 0.1, 0.1]), [5, 1, 1]);
        assert_eq!(partition_sizes(3, [1.0, 0.0, 0.0]), [3, 0, 0]);
    }

    #[test]
    fn inductive_holdout_count_and_exclusion() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("s{i}"), 40)).collect();
        let spec = split_inductive(&seqs, 0.25, 3).unwrap();
        assert_eq!(spec.heldout_questions.len(), 2);
        let split = spec.apply(&seqs);
        let held = spec.heldout_set();
        for s in &split.train {
            assert!(s.steps.iter().all(|st| !held.contains(st.question.as_str())));
            assert_eq!(s.len(), 30);
        }
        for s in &split.test {
            assert_eq!(s.len(), 40);
        }
    }

    #[test]
    fn zero_holdout_matches_transductive() {
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("s{i}"), 12)).collect();
        let ind = split_inductive(&seqs, 0.0, 11).unwrap();
        let tra = split_transductive(&seqs, DEFAULT_RATIOS, 11).unwrap();
        assert!(ind.heldout_questions.is_empty());
        assert_eq!((ind.train, ind.val, ind.test), (tra.train, tra.val, tra.test));
    }

    #[test]
    fn inductive_drops_short_training_students() {
        // 10 steps each; removing any two of the eight questions leaves at most 8
        let seqs: Vec<_> = (0..10).map(|i| seq(&format!("s{i}"), 10)).collect();
        let res = split_inductive(&seqs, 0.25, 3);
        assert!(res.is_err());
    }

    #[test]
    fn subsample_bounds_and_identity() {
        let seqs: Vec<_> = (0..20).map(|i| seq(&format!("s{i}"), 10)).collect();
        assert_eq!(subsample_students(&seqs, 5, 1).unwrap().len(), 5);
        assert_eq!(subsample_students(&seqs, 20, 1).unwrap(), seqs);
        assert_eq!(
            subsample_students(&seqs, 5, 9).unwrap(),
            subsample_students(&seqs, 5, 9).unwrap()
        );
        assert!(subsample_students(&seqs, 0, 1).is_err());
        assert!(subsample_students(&seqs, 21, 1).is_err());
    }
}
