//! Command-line front end.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    build_sequences, load_corpus, split_inductive_with, split_transductive, InteractionCorpus, SplitMode,
    SplitSpec, StudentSequence, DEFAULT_HOLDOUT_FRAC, DEFAULT_MAX_LEN, DEFAULT_MIN_LEN, DEFAULT_RATIOS,
};
use crate::embed::{
    assemble_feature_matrices, fallback_embed, load_embeddings, question_features, FeatureMatrices,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, fit_and_evaluate, prediction_csv, collect_predictions, report_csv, run_experiment, write_text,
    ExperimentData, GridSpec,
};
use crate::graph::llm::{
    annotate_question, generate_concept_edges, generate_edges_for, ConceptEntry, HttpClient, LlmClient, MockClient,
};
use crate::graph::{build_hetero_graph, GraphFile, HeteroGraph, Provenance};
use crate::model::{ModelDims, SinktModel, Variant};
use crate::student::{sequence_forward, IndexedSequence};
use crate::synthetic::{generate_world, WorldSpec};
use crate::train::{attach_questions, Checkpoint, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "sinkt", version, about = "Graph-based inductive knowledge tracing")]
pub struct Cli {
    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory (command dependent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Hold out questions from training and score only their interactions.
    #[arg(long)]
    pub inductive: bool,
    #[arg(long)]
    pub holdout_frac: Option<f64>,
    /// Training-student subsample size(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub students_n: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridKind {
    /// Number of layers k in {0,1,2,3}.
    K,
    /// Representation size d in {128,256,512}.
    D,
    /// Training-student counts from --students-n plus all.
    ColdStart,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus, relation fixture and config.
    Synth {
        #[arg(long, default_value_t = 300)]
        students: usize,
    },
    /// Load the corpus, build sequences and write the split.
    Ingest(ModelFlags),
    /// Generate the concept graph with an LLM (or canned answers).
    GenGraph {
        /// JSON map from concept id to canned response.
        #[arg(long)]
        mock: Option<PathBuf>,
    },
    Train(ModelFlags),
    /// Score a trained model on the test split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        inductive: bool,
    },
    /// Train and evaluate the full model and every ablation.
    Ablate(ModelFlags),
    /// Layer, dimension or cold-start grid.
    Sweep {
        #[command(flatten)]
        flags: ModelFlags,
        #[arg(long, value_enum)]
        grid: GridKind,
    },
    /// First-layer concept-to-concept attention as `src,dst,weight`.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
    },
    /// Add a concept and/or question to a trained model without retraining.
    IngestNew {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mock: Option<PathBuf>,
        #[arg(long, requires = "concept_text")]
        concept_id: Option<String>,
        #[arg(long)]
        concept_text: Option<String>,
        #[arg(long, requires = "question_text")]
        question_id: Option<String>,
        #[arg(long)]
        question_text: Option<String>,
        /// Concepts of the new question; asked from the LLM when omitted.
        #[arg(long, value_delimiter = ',')]
        question_concepts: Vec<String>,
    },
    /// Per-step predictions for one history, e.g. `q1:1,q2:0,q7`.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        history: String,
    },
}

/// Run configuration. Every path is optional so flags and defaults can fill in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub qc: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub concept_embeddings: Option<PathBuf>,
    pub question_embeddings: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub mock: Option<PathBuf>,
    pub d_t: usize,
    pub d: usize,
    pub k: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub split_mode: SplitMode,
    pub holdout_frac: f64,
    pub ratios: (f64, f64, f64),
    pub embed_seed: u64,
    pub students_n: Option<usize>,
    pub cold_start: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            concepts: None,
            qc: None,
            questions: None,
            concept_embeddings: None,
            question_embeddings: None,
            graph: None,
            split: None,
            mock: None,
            d_t: 64,
            d: 32,
            k: 1,
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
            split_mode: SplitMode::Transductive,
            holdout_frac: DEFAULT_HOLDOUT_FRAC,
            ratios: DEFAULT_RATIOS,
            embed_seed: 0,
            students_n: None,
            cold_start: vec![100, 500, 1000, 2000],
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.interactions,
            &mut self.concepts,
            &mut self.qc,
            &mut self.questions,
            &mut self.concept_embeddings,
            &mut self.question_embeddings,
            &mut self.graph,
            &mut self.split,
            &mut self.mock,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn apply_flags(&mut self, seed: Option<u64>, flags: &ModelFlags) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(v) = flags.variant {
            self.train.variant = v;
        }
        if let Some(k) = flags.k {
            self.k = k;
        }
        if let Some(d) = flags.d {
            self.d = d;
        }
        if flags.inductive {
            self.split_mode = SplitMode::Inductive;
        }
        if let Some(f) = flags.holdout_frac {
            self.holdout_frac = f;
        }
        if let Some(&n) = flags.students_n.first() {
            self.students_n = Some(n);
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_t: self.d_t,
            d: self.d,
            k: self.k,
        }
    }

    fn required<'a>(&self, p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::invalid(format!("config is missing `{name}`")))
    }
}

/// Every input needed to train or evaluate.
pub struct Inputs {
    pub corpus: InteractionCorpus,
    pub sequences: Vec<StudentSequence>,
    pub graph: HeteroGraph,
    pub features: FeatureMatrices,
    pub split: SplitSpec,
}

impl Inputs {
    pub fn experiment(&self) -> ExperimentData {
        ExperimentData {
            graph: self.graph.clone(),
            features: self.features.clone(),
            split: self.split.apply(&self.sequences),
            mode: self.split.mode,
            heldout: self.split.heldout_questions.clone(),
        }
    }
}

pub fn load_corpus_from(cfg: &RunConfig) -> Result<InteractionCorpus> {
    load_corpus(
        cfg.required(&cfg.interactions, "interactions")?,
        cfg.required(&cfg.concepts, "concepts")?,
        cfg.required(&cfg.qc, "qc")?,
        cfg.questions.as_deref(),
    )
}

pub fn compute_split(cfg: &RunConfig, sequences: &[StudentSequence]) -> Result<SplitSpec> {
    match cfg.split_mode {
        SplitMode::Transductive => split_transductive(sequences, cfg.ratios, cfg.train.seed),
        SplitMode::Inductive => {
            split_inductive_with(sequences, cfg.holdout_frac, cfg.ratios, cfg.min_len, cfg.train.seed)
        }
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let corpus = load_corpus_from(cfg)?;
    let (sequences, report) = build_sequences(&corpus, cfg.min_len, cfg.max_len);
    log::info!("{} sequences kept, {} dropped as short", report.kept, report.dropped_short);
    let graph = match &cfg.graph {
        Some(p) => HeteroGraph::from_file(&GraphFile::load(p)?)?,
        None => {
            log::warn!("no graph file configured; using the graph without concept edges");
            build_hetero_graph(corpus.concepts.iter(), &corpus.qc_map, &[])?
        }
    };
    let ctable = cfg.concept_embeddings.as_deref().map(load_embeddings).transpose()?;
    let qtable = cfg.question_embeddings.as_deref().map(load_embeddings).transpose()?;
    let features = assemble_feature_matrices(&corpus, &graph, ctable.as_ref(), qtable.as_ref(), cfg.d_t, cfg.embed_seed)?;
    let split = match cfg.split.as_deref().filter(|p| p.exists()) {
        Some(p) => {
            let s = SplitSpec::load(p)?;
            if s.mode != cfg.split_mode {
                return Err(Error::invalid(format!(
                    "{} holds a {:?} split but the run asks for {:?}",
                    p.display(),
                    s.mode,
                    cfg.split_mode
                )));
            }
            s
        }
        None => compute_split(cfg, &sequences)?,
    };
    Ok(Inputs {
        corpus,
        sequences,
        graph,
        features,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started: u64,
    pub finished: u64,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileHash {
        path: path.to_owned(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Files produced by a command; the manifest goes next to them.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_owned(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        write_text(&p, text)?;
        self.files.push(p.clone());
        Ok(p)
    }

    fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn manifest(&self, command: &str, cfg: &RunConfig, started: u64) -> Result<()> {
        let inputs = [
            &cfg.interactions,
            &cfg.concepts,
            &cfg.qc,
            &cfg.questions,
            &cfg.concept_embeddings,
            &cfg.question_embeddings,
            &cfg.graph,
            &cfg.split,
            &cfg.mock,
        ]
        .into_iter()
        .flatten()
        .filter(|p| p.exists())
        .map(|p| hash_file(p))
        .collect::<Result<Vec<_>>>()?;
        let outputs = self.files.iter().map(|p| hash_file(p)).collect::<Result<Vec<_>>>()?;
        let m = RunManifest {
            command: command.to_owned(),
            config: cfg.clone(),
            seed: cfg.train.seed,
            inputs,
            outputs,
            started,
            finished: now(),
        };
        let path = self.dir.join("manifest.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&path, e))
    }
}

/// Texts of every vertex a model knows, kept with the model so new vertices
/// can be related to existing ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VertexTexts {
    pub concepts: IndexMap<String, String>,
    pub questions: IndexMap<String, String>,
}

impl VertexTexts {
    fn from_corpus(corpus: &InteractionCorpus) -> Self {
        Self {
            concepts: corpus.concept_text.clone(),
            questions: corpus.question_text.clone().unwrap_or_default(),
        }
    }
}

/// Paths of a model directory.
pub struct ModelDir(pub PathBuf);

impl ModelDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("checkpoint.json")
    }
    pub fn graph(&self) -> PathBuf {
        self.0.join("graph.json")
    }
    pub fn concept_features(&self) -> PathBuf {
        self.0.join("concept_features.emb")
    }
    pub fn question_features(&self) -> PathBuf {
        self.0.join("question_features.emb")
    }
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
    pub fn split(&self) -> PathBuf {
        self.0.join("split.json")
    }
    pub fn history(&self) -> PathBuf {
        self.0.join("history.csv")
    }
    pub fn texts(&self) -> PathBuf {
        self.0.join("texts.json")
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        let p = self.config();
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))
    }

    pub fn load_model(&self) -> Result<SinktModel> {
        let ck = Checkpoint::load(&self.checkpoint())?;
        let graph = HeteroGraph::from_file(&GraphFile::load(&self.graph())?)?;
        let ct = load_embeddings(&self.concept_features())?;
        let qt = load_embeddings(&self.question_features())?;
        let features = FeatureMatrices::from_tables(&graph, &ct, &qt)?;
        ck.into_model(graph, features)
    }

    pub fn load_texts(&self) -> Result<VertexTexts> {
        let p = self.texts();
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Write graph, features and texts; returns the written paths.
    fn save_graph_state(&self, model: &SinktModel, texts: &VertexTexts, provenance: Provenance) -> Result<Vec<PathBuf>> {
        model.graph.to_file(provenance).save(&self.graph())?;
        let (ct, qt) = model.features.to_tables(&model.graph);
        ct.save(&self.concept_features())?;
        qt.save(&self.question_features())?;
        write_text(&self.texts(), &serde_json::to_string_pretty(texts)?)?;
        Ok(vec![self.graph(), self.concept_features(), self.question_features(), self.texts()])
    }
}

fn client_for(mock: Option<&Path>) -> Result<Box<dyn LlmClient>> {
    Ok(match mock {
        Some(p) => Box::new(MockClient::load(p)?),
        None => Box::new(HttpClient::from_env()?),
    })
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let started = now();
    match &cli.command {
        Command::Synth { students } => synth(cli, *students, started),
        Command::Ingest(flags) => ingest(cli, flags, started),
        Command::GenGraph { mock } => gen_graph(cli, mock.as_deref(), started),
        Command::Train(flags) => train_cmd(cli, flags, started),
        Command::Evaluate { model, inductive } => evaluate_cmd(cli, model, *inductive, started),
        Command::Ablate(flags) => {
            let grid = GridSpec {
                variants: Variant::ALL.to_vec(),
                ..GridSpec::default()
            };
            grid_cmd(cli, flags, grid, "ablate", "ablation.csv", started)
        }
        Command::Sweep { flags, grid } => {
            let g = match grid {
                GridKind::K => GridSpec::layers(),
                GridKind::D => GridSpec::dims(),
                GridKind::ColdStart => {
                    let sizes = if flags.students_n.is_empty() {
                        base_config(cli)?.cold_start
                    } else {
                        flags.students_n.clone()
                    };
                    GridSpec::cold_start(&sizes)
                }
            };
            let flags = ModelFlags {
                students_n: Vec::new(),
                ..flags.clone()
            };
            grid_cmd(cli, &flags, g, "sweep", "sweep.csv", started)
        }
        Command::ExportAttention { model } => export_attention(cli, model, started),
        Command::IngestNew {
            model,
            mock,
            concept_id,
            concept_text,
            question_id,
            question_text,
            question_concepts,
        } => ingest_new(
            model,
            mock.as_deref(),
            concept_id.as_deref().zip(concept_text.as_deref()),
            question_id.as_deref().zip(question_text.as_deref()),
            question_concepts,
            started,
        ),
        Command::Predict { model, history } => predict_cmd(model, history),
    }
}

fn synth(cli: &Cli, students: usize, started: u64) -> Result<()> {
    let dir = out_dir(&cli.out, "synthetic");
    let spec = WorldSpec {
        students,
        seed: cli.seed.unwrap_or(WorldSpec::default().seed),
        ..WorldSpec::default()
    };
    let world = generate_world(&spec)?;
    let files = world.write_files(&dir)?;
    let mut cfg = RunConfig {
        interactions: Some("interactions.csv".into()),
        concepts: Some("concepts.csv".into()),
        qc: Some("qc.csv".into()),
        questions: Some("questions.csv".into()),
        graph: Some("graph.json".into()),
        mock: Some("mock.json".into()),
        ..RunConfig::default()
    };
    cfg.train.lr = 5e-3;
    cfg.train.max_epochs = 60;
    let mut out = Outputs::new(&dir)?;
    out.write("config.json", &serde_json::to_string_pretty(&cfg)?)?;
    for p in [files.interactions, files.concepts, files.qc, files.questions, files.mock] {
        out.record(p);
    }
    cfg.resolve(&dir);
    out.manifest("synth", &cfg, started)?;
    println!("wrote synthetic world to {}", dir.display());
    Ok(())
}

fn ingest(cli: &Cli, flags: &ModelFlags, started: u64) -> Result<()> {
    let mut cfg = base_config(cli)?;
    cfg.apply_flags(cli.seed, flags);
    let corpus = load_corpus_from(&cfg)?;
    let (sequences, report) = build_sequences(&corpus, cfg.min_len, cfg.max_len);
    let split = compute_split(&cfg, &sequences)?;
    let dir = out_dir(&cli.out, "ingest");
    let mut out = Outputs::new(&dir)?;
    let p = dir.join("split.json");
    split.save(&p)?;
    out.record(p);
    let summary = serde_json::json!({
        "counts": corpus.counts(),
        "sequences": report,
        "split": {
            "mode": split.mode,
            "train": split.train.len(),
            "val": split.val.len(),
            "test": split.test.len(),
            "heldout_questions": split.heldout_questions.len(),
        },
    });
    out.write("ingest.json", &serde_json::to_string_pretty(&summary)?)?;
    out.manifest("ingest", &cfg, started)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn gen_graph(cli: &Cli, mock: Option<&Path>, started: u64) -> Result<()> {
    let cfg = base_config(cli)?;
    let mock = mock.map(Path::to_owned).or_else(|| cfg.mock.clone());
    let concepts_path = cfg.required(&cfg.concepts, "concepts")?;
    let qc_path = cfg.required(&cfg.qc, "qc")?;
    let (concept_text, qc_map) = crate::corpus::load_concepts_and_map(concepts_path, qc_path)?;
    let client = client_for(mock.as_deref())?;
    let entries: Vec<ConceptEntry> = concept_text
        .iter()
        .map(|(id, text)| ConceptEntry { id, text })
        .collect();
    let (edges, report) = generate_concept_edges(&entries, client.as_ref())?;
    log::info!("{} calls, {} unparsable answers, {} unknown items", report.calls, report.unparsable, report.unknown_items);
    let graph = build_hetero_graph(concept_text.keys(), &qc_map, &edges)?;
    let path = cli
        .out
        .clone()
        .or_else(|| cfg.graph.clone())
        .unwrap_or_else(|| PathBuf::from("graph.json"));
    graph
        .to_file(Provenance {
            client: client.kind(),
            fixture_hash: client.fixture_hash(),
        })
        .save(&path)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut out = Outputs::new(dir)?;
    out.record(path.clone());
    let mut cfg = cfg;
    cfg.mock = mock;
    out.manifest("gen-graph", &cfg, started)?;
    println!("{} concept edges written to {}", edges.len(), path.display());
    Ok(())
}

fn train_cmd(cli: &Cli, flags: &ModelFlags, started: u64) -> Result<()> {
    let mut cfg = base_config(cli)?;
    cfg.apply_flags(cli.seed, flags);
    let inputs = load_inputs(&cfg)?;
    let data = inputs.experiment();
    let train_cfg = cfg.train.clone();
    let fit = fit_and_evaluate(cfg.dims(), &train_cfg, &data, cfg.students_n)?;

    let dir = ModelDir(out_dir(&cli.out, "model"));
    let mut out = Outputs::new(&dir.0)?;
    let model = &fit.outcome.model;
    Checkpoint::from_model(model, Some(&fit.outcome.optimizer), fit.outcome.best_epoch).save(&dir.checkpoint())?;
    out.record(dir.checkpoint());
    fit.outcome.history.save(&dir.history())?;
    out.record(dir.history());
    let provenance = Provenance {
        client: "train".into(),
        fixture_hash: None,
    };
    for p in dir.save_graph_state(model, &VertexTexts::from_corpus(&inputs.corpus), provenance)? {
        out.record(p);
    }
    inputs.split.save(&dir.split())?;
    out.record(dir.split());
    let mut saved = cfg.clone();
    saved.split = Some(std::path::absolute(dir.split()).map_err(|e| Error::io(dir.split(), e))?);
    out.write("config.json", &serde_json::to_string_pretty(&saved)?)?;
    out.write("report.json", &serde_json::to_string_pretty(&fit.report)?)?;
    out.manifest("train", &cfg, started)?;
    println!(
        "test acc {:.4} auc {:.4} over {} points (best epoch {})",
        fit.report.acc, fit.report.auc, fit.report.n_points, fit.outcome.best_epoch
    );
    Ok(())
}

fn evaluate_cmd(cli: &Cli, model_dir: &Path, inductive: bool, started: u64) -> Result<()> {
    let dir = ModelDir(model_dir.to_owned());
    let cfg = dir.load_config()?;
    if inductive && cfg.split_mode != SplitMode::Inductive {
        return Err(Error::invalid(
            "--inductive needs a model trained with --inductive (no held-out questions recorded)",
        ));
    }
    let mut model = dir.load_model()?;
    let inputs = load_inputs(&cfg)?;
    attach_questions(&mut model, &inputs.graph, &inputs.features)?;
    let test = inputs.split.apply(&inputs.sequences).test;
    let heldout: HashSet<String> = inputs.split.heldout_questions.iter().cloned().collect();
    let filter = inductive.then_some(&heldout);
    let mode = if inductive { SplitMode::Inductive } else { SplitMode::Transductive };
    let report = evaluate(&model, &test, filter, mode)?;
    let rows = collect_predictions(&model, &test)?;
    let out_path = out_dir(&cli.out, &dir.0.join("eval").to_string_lossy());
    let mut out = Outputs::new(&out_path)?;
    out.write("report.json", &serde_json::to_string_pretty(&report)?)?;
    out.write("predictions.csv", &prediction_csv(&rows))?;
    out.manifest("evaluate", &cfg, started)?;
    println!("acc {:.4} auc {:.4} over {} points", report.acc, report.auc, report.n_points);
    Ok(())
}

fn grid_cmd(cli: &Cli, flags: &ModelFlags, grid: GridSpec, command: &str, file: &str, started: u64) -> Result<()> {
    let mut cfg = base_config(cli)?;
    cfg.apply_flags(cli.seed, flags);
    let inputs = load_inputs(&cfg)?;
    let data = inputs.experiment();
    let results = run_experiment(&grid, cfg.dims(), &cfg.train, &data);
    let dir = out_dir(&cli.out, command);
    let mut out = Outputs::new(&dir)?;
    let csv = report_csv(&results, data.mode);
    out.write(file, &csv)?;
    for r in &results {
        if !r.predictions.is_empty() {
            out.write(&format!("predictions_cell{}.csv", r.cell.id), &prediction_csv(&r.predictions))?;
        }
    }
    out.manifest(command, &cfg, started)?;
    print!("{csv}");
    let failed = results.iter().filter(|r| r.report.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", results.len());
    }
    Ok(())
}

fn export_attention(cli: &Cli, model_dir: &Path, started: u64) -> Result<()> {
    let dir = ModelDir(model_dir.to_owned());
    let model = dir.load_model()?;
    let text = attention_csv(&model)?;
    let path = cli.out.clone().unwrap_or_else(|| dir.0.join("attention_cc.csv"));
    write_text(&path, &text)?;
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut out = Outputs::new(parent)?;
    out.record(path.clone());
    out.manifest("export-attention", &dir.load_config()?, started)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// First-layer concept-to-concept attention weights.
pub fn attention_csv(model: &SinktModel) -> Result<String> {
    let (_, trace) = model.encode()?;
    let layer = trace
        .layers
        .first()
        .ok_or_else(|| Error::invalid("model has no attention layers (k = 0)"))?;
    let mut s = String::from("src,dst,weight\n");
    for (dst, alpha) in layer.cc.alpha.iter().enumerate() {
        for (&src, w) in model.graph.concept_in_neighbors(dst).iter().zip(alpha) {
            s.push_str(&format!(
                "{},{},{}\n",
                model.graph.concept_id(src),
                model.graph.concept_id(dst),
                w
            ));
        }
    }
    Ok(s)
}

fn ingest_new(
    model_dir: &Path,
    mock: Option<&Path>,
    concept: Option<(&str, &str)>,
    question: Option<(&str, &str)>,
    question_concepts: &[String],
    started: u64,
) -> Result<()> {
    if concept.is_none() && question.is_none() {
        return Err(Error::invalid("nothing to ingest: give --concept-id/--concept-text or --question-id/--question-text"));
    }
    let dir = ModelDir(model_dir.to_owned());
    let mut cfg = dir.load_config()?;
    let mut model = dir.load_model()?;
    let mut texts = dir.load_texts()?;
    let client = client_for(mock.or(cfg.mock.as_deref()))?;
    let (d_t, seed) = (model.dims.d_t, cfg.embed_seed);

    if let Some((id, text)) = concept {
        model.add_concept(id, &fallback_embed(text, d_t, seed))?;
        texts.concepts.insert(id.to_owned(), text.to_owned());
        let entries: Vec<ConceptEntry> = texts
            .concepts
            .iter()
            .map(|(id, text)| ConceptEntry { id, text })
            .collect();
        let target = [ConceptEntry { id, text }];
        let (edges, _) = generate_edges_for(&target, &entries, client.as_ref())?;
        for (s, t) in &edges {
            model.graph.add_concept_edge(s, t)?;
        }
        println!("concept {id}: {} incoming edges", edges.len());
    }
    if let Some((id, text)) = question {
        let concepts = if question_concepts.is_empty() {
            let entries: Vec<ConceptEntry> = texts
                .concepts
                .iter()
                .map(|(id, text)| ConceptEntry { id, text })
                .collect();
            annotate_question(id, text, &entries, client.as_ref())?
        } else {
            question_concepts.to_vec()
        };
        let ctexts: Vec<&str> = concepts
            .iter()
            .map(|c| texts.concepts.get(c).map(String::as_str).unwrap_or(""))
            .collect();
        let row = question_features(id, Some(text), &ctexts, None, d_t, seed);
        model.add_question(id, &concepts, &row)?;
        texts.questions.insert(id.to_owned(), text.to_owned());
        println!("question {id}: concepts {}", concepts.join(","));
    }

    let provenance = Provenance {
        client: client.kind(),
        fixture_hash: client.fixture_hash(),
    };
    let mut out = Outputs::new(&dir.0)?;
    for p in dir.save_graph_state(&model, &texts, provenance)? {
        out.record(p);
    }
    cfg.mock = mock.map(Path::to_owned).or(cfg.mock);
    out.manifest("ingest-new", &cfg, started)?;
    Ok(())
}

/// Parse `q1:1,q2:0,q3` into questions and labels; an unlabeled step is
/// allowed only last.
pub fn parse_history(history: &str) -> Result<Vec<(String, Option<u8>)>> {
    let items: Vec<&str> = history.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::invalid("history is empty"));
    }
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let (q, label) = match item.split_once(':') {
            Some((q, "1")) => (q, Some(1)),
            Some((q, "0")) => (q, Some(0)),
            Some((_, l)) => return Err(Error::invalid(format!("label `{l}` must be 0 or 1"))),
            None if i + 1 == items.len() => (*item, None),
            None => return Err(Error::invalid(format!("step `{item}` needs a label"))),
        };
        out.push((q.to_owned(), label));
    }
    Ok(out)
}

/// Predictions for each step of a history.
pub fn predict_history(model: &SinktModel, history: &[(String, Option<u8>)]) -> Result<Vec<f64>> {
    let questions = history
        .iter()
        .map(|(q, _)| {
            model.graph.question_index(q).ok_or_else(|| Error::UnknownId {
                kind: "question",
                id: q.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = IndexedSequence {
        student: "query".into(),
        questions,
        correct: history.iter().map(|(_, l)| l.unwrap_or(0)).collect(),
    };
    let (encoded, _) = model.encode()?;
    Ok(sequence_forward(&seq, &model.params.sequence, &encoded, &model.graph)?.predictions)
}

fn predict_cmd(model_dir: &Path, history: &str) -> Result<()> {
    let model = ModelDir(model_dir.to_owned()).load_model()?;
    let hist = parse_history(history)?;
    let preds = predict_history(&model, &hist)?;
    println!("step,question_id,label,prediction");
    for (t, ((q, l), y)) in hist.iter().zip(preds).enumerate() {
        let l = l.map_or(String::new(), |l| l.to_string());
        println!("{t},{q},{l},{y}");
    }
    Ok(())
}
