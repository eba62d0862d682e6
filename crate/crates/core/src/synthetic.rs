//! Generated worlds with known structure: latent skills, a known concept
//! graph and mastery-driven responses. Used by the test suites and the
//! `synth` command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{build_sequences, InteractionCorpus, Record, StudentSequence};
use crate::embed::{assemble_feature_matrices, FeatureMatrices};
use crate::error::{Error, Result};
use crate::graph::{build_hetero_graph, HeteroGraph};
use crate::model::{random_rows, ModelDims, SinktModel, Variant};
use crate::student::IndexedSequence;
use crate::tensor::sigmoid;
use crate::train::build_model;

const SKILL_WORDS: [&str; 12] = [
    "algebra",
    "geometry",
    "probability",
    "calculus",
    "statistics",
    "logic",
    "arithmetic",
    "trigonometry",
    "combinatorics",
    "topology",
    "number",
    "measure",
];

/// Difficulty levels and the word that names each in question text.
const LEVELS: [(f64, &str); 5] = [
    (-2.0, "trivial"),
    (-1.0, "easy"),
    (0.0, "moderate"),
    (1.0, "hard"),
    (2.0, "brutal"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub skills: usize,
    pub concepts_per_skill: usize,
    pub questions: usize,
    pub students: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance of staying on the current skill at the next step.
    pub stay_prob: f64,
    /// Ability gain on a skill per attempt.
    pub learn_rate: f64,
    /// Share of a gain passed on to the next skill along the prerequisite chain.
    pub transfer: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            skills: 10,
            concepts_per_skill: 4,
            questions: 200,
            students: 300,
            min_len: 20,
            max_len: 60,
            stay_prob: 0.7,
            learn_rate: 0.15,
            transfer: 0.5,
            seed: 7,
        }
    }
}

impl WorldSpec {
    /// Five students with twenty steps each.
    pub fn overfit(seed: u64) -> Self {
        Self {
            students: 5,
            min_len: 20,
            max_len: 20,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub corpus: InteractionCorpus,
    /// The true concept graph, `(src, dst)`.
    pub concept_edges: Vec<(String, String)>,
    /// Canned relation answers reproducing `concept_edges`, keyed by concept id.
    pub mock_responses: BTreeMap<String, String>,
    pub difficulty: IndexMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct WorldFiles {
    pub interactions: PathBuf,
    pub concepts: PathBuf,
    pub qc: PathBuf,
    pub questions: PathBuf,
    pub mock: PathBuf,
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    if spec.skills == 0 || spec.skills > SKILL_WORDS.len() || spec.concepts_per_skill == 0 {
        return Err(Error::invalid(format!(
            "skills must be in 1..={} with at least one concept each",
            SKILL_WORDS.len()
        )));
    }
    if spec.questions == 0 || spec.students == 0 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::invalid("world needs questions, students and a valid length range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cps = spec.concepts_per_skill;
    let n_concepts = spec.skills * cps;

    let concept_id = |i: usize| format!("k{i:02}");
    let mut concept_text = IndexMap::new();
    for i in 0..n_concepts {
        concept_text.insert(concept_id(i), format!("{} unit{}", SKILL_WORDS[i / cps], i));
    }

    // core concept of each skill precedes its siblings and the next core
    let mut concept_edges = Vec::new();
    for s in 0..spec.skills {
        let core = s * cps;
        for j in 1..cps {
            concept_edges.push((concept_id(core), concept_id(core + j)));
        }
        if s > 0 {
            concept_edges.push((concept_id(core - cps), concept_id(core)));
        }
    }
    let mut mock_responses = BTreeMap::new();
    for i in 0..n_concepts {
        let target = concept_id(i);
        let sources: Vec<&str> = concept_edges
            .iter()
            .filter(|(_, t)| *t == target)
            .map(|(s, _)| concept_text[s].as_str())
            .collect();
        mock_responses.insert(target, format!("Related: [{}]", sources.join(", ")));
    }

    let mut qc_map = IndexMap::new();
    let mut question_text = IndexMap::new();
    let mut difficulty = IndexMap::new();
    let mut by_skill: Vec<Vec<usize>> = vec![Vec::new(); spec.skills];
    let jitter = Normal::new(0.0, 0.25).expect("valid normal");
    for q in 0..spec.questions {
        let skill = q % spec.skills;
        let primary = skill * cps + rng.gen_range(0..cps);
        let mut cs = vec![primary];
        if cps > 1 && rng.gen_bool(0.3) {
            let other = skill * cps + rng.gen_range(0..cps);
            if other != primary {
                cs.push(other);
            }
        }
        let (level, word) = LEVELS[rng.gen_range(0..LEVELS.len())];
        let id = format!("p{q:03}");
        let texts: Vec<&str> = cs.iter().map(|&c| concept_text[&concept_id(c)].as_str()).collect();
        question_text.insert(id.clone(), format!("{} {word}", texts.join(" ")));
        qc_map.insert(id.clone(), cs.into_iter().map(concept_id).collect::<Vec<_>>());
        difficulty.insert(id, level + jitter.sample(&mut rng));
        by_skill[skill].push(q);
    }
    let qids: Vec<String> = qc_map.keys().cloned().collect();

    let ability = Normal::new(0.0, 1.0).expect("valid normal");
    let mut records = Vec::new();
    for s in 0..spec.students {
        let student = format!("s{s:03}");
        let mut theta: Vec<f64> = (0..spec.skills).map(|_| ability.sample(&mut rng)).collect();
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut skill = rng.gen_range(0..spec.skills);
        for t in 0..len {
            if t > 0 && !rng.gen_bool(spec.stay_prob) {
                skill = rng.gen_range(0..spec.skills);
            }
            let q = *by_skill[skill].choose(&mut rng).ok_or_else(|| {
                Error::invalid(format!("skill {skill} has no questions; add more questions"))
            })?;
            let p = sigmoid(theta[skill] - difficulty[q]);
            let correct = u8::from(rng.gen_bool(p));
            records.push(Record {
                student: student.clone(),
                question: qids[q].clone(),
                correct,
                timestamp: t as i64,
            });
            let gain = spec.learn_rate * if correct == 1 { 1.5 } else { 0.5 };
            theta[skill] += gain;
            if skill + 1 < spec.skills {
                theta[skill + 1] += spec.transfer * gain;
            }
        }
    }

    let corpus = InteractionCorpus::new(records, concept_text, qc_map, Some(question_text))?;
    Ok(SyntheticWorld {
        spec: spec.clone(),
        corpus,
        concept_edges,
        mock_responses,
        difficulty,
    })
}

impl SyntheticWorld {
    pub fn graph(&self) -> Result<HeteroGraph> {
        build_hetero_graph(self.corpus.concepts.iter(), &self.corpus.qc_map, &self.concept_edges)
    }

    pub fn features(&self, graph: &HeteroGraph, d_t: usize, seed: u64) -> Result<FeatureMatrices> {
        assemble_feature_matrices(&self.corpus, graph, None, None, d_t, seed)
    }

    pub fn sequences(&self) -> Vec<StudentSequence> {
        build_sequences(&self.corpus, self.spec.min_len.min(10), self.spec.max_len.max(200)).0
    }

    /// Write the corpus files and the mock relation fixture into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<WorldFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = WorldFiles {
            interactions: dir.join("interactions.csv"),
            concepts: dir.join("concepts.csv"),
            qc: dir.join("qc.csv"),
            questions: dir.join("questions.csv"),
            mock: dir.join("mock.json"),
        };
        let mut w = csv::Writer::from_path(&files.interactions)?;
        w.write_record(["student_id", "question_id", "correct", "timestamp"])?;
        for r in &self.corpus.records {
            w.write_record([
                r.student.as_str(),
                r.question.as_str(),
                &r.correct.to_string(),
                &r.timestamp.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&files.interactions, e))?;

        let mut w = csv::Writer::from_path(&files.concepts)?;
        w.write_record(["concept_id", "text"])?;
        for (id, text) in &self.corpus.concept_text {
            w.write_record([id, text])?;
        }
        w.flush().map_err(|e| Error::io(&files.concepts, e))?;

        let mut w = csv::Writer::from_path(&files.qc)?;
        w.write_record(["question_id", "concept_id"])?;
        for (q, cs) in &self.corpus.qc_map {
            for c in cs {
                w.write_record([q, c])?;
            }
        }
        w.flush().map_err(|e| Error::io(&files.qc, e))?;

        let mut w = csv::Writer::from_path(&files.questions)?;
        w.write_record(["question_id", "text"])?;
        for (q, text) in self.corpus.question_text.iter().flatten() {
            w.write_record([q, text])?;
        }
        w.flush().map_err(|e| Error::io(&files.questions, e))?;

        let json = serde_json::to_string_pretty(&self.mock_responses)?;
        std::fs::write(&files.mock, json).map_err(|e| Error::io(&files.mock, e))?;
        Ok(files)
    }
}

/// The three-concept relation fixture: concept rows, canned answers and the
/// edge set they imply.
pub fn three_concept_fixture() -> (Vec<(&'static str, &'static str)>, BTreeMap<String, String>, Vec<(String, String)>) {
    let concepts = vec![("c1", "addition"), ("c2", "subtraction"), ("c3", "multiplication")];
    let responses = [
        ("c1", "[subtraction]"),
        ("c2", "[]"),
        ("c3", "Both: [addition, subtraction]"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v.to_owned()))
    .collect();
    // c1 lists c2; c3 lists c1 and c2
    let edges = [("c2", "c1"), ("c1", "c3"), ("c2", "c3")]
        .into_iter()
        .map(|(a, b)| (a.to_owned(), b.to_owned()))
        .collect();
    (concepts, responses, edges)
}

/// Three concepts, four questions and two five-step students with dense
/// random features.
pub struct TinyWorld {
    pub graph: HeteroGraph,
    pub features: FeatureMatrices,
    pub sequences: Vec<StudentSequence>,
}

pub const TINY_DIMS: ModelDims = ModelDims { d_t: 5, d: 8, k: 1 };

pub fn tiny_world(seed: u64) -> TinyWorld {
    let (concepts, _, edges) = three_concept_fixture();
    let qc: IndexMap<String, Vec<String>> = [
        ("q1", vec!["c1"]),
        ("q2", vec!["c2"]),
        ("q3", vec!["c1", "c3"]),
        ("q4", vec!["c2", "c3"]),
    ]
    .into_iter()
    .map(|(q, cs)| (q.to_owned(), cs.into_iter().map(str::to_owned).collect()))
    .collect();
    let ids: Vec<String> = concepts.iter().map(|(id, _)| id.to_string()).collect();
    let graph = build_hetero_graph(ids.iter(), &qc, &edges).expect("tiny graph");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = FeatureMatrices {
        concepts: random_rows(3, TINY_DIMS.d_t, &mut rng),
        questions: random_rows(4, TINY_DIMS.d_t, &mut rng),
    };
    let sequences = (0..2)
        .map(|s| StudentSequence {
            student: format!("t{s}"),
            steps: (0..5)
                .map(|t| crate::corpus::Step {
                    question: format!("q{}", rng.gen_range(1..=4)),
                    correct: u8::from(rng.gen_bool(0.5)),
                    timestamp: t,
                })
                .collect(),
        })
        .collect();
    TinyWorld {
        graph,
        features,
        sequences,
    }
}

/// Tiny model of a given variant and its batch.
pub fn tiny_fixture(variant: Variant, seed: u64) -> (SinktModel, Vec<IndexedSequence>) {
    let w = tiny_world(seed);
    let model = build_model(TINY_DIMS, variant, &w.graph, &w.features, &w.sequences, seed).expect("tiny model");
    let batch = model.index_sequences(&w.sequences).expect("tiny batch");
    (model, batch)
}
