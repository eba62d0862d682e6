//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sinkt::cli::{dispatch, predict_history, ModelDir};
use sinkt::corpus::{split_inductive, split_transductive, SplitMode, Step, StudentSequence, DEFAULT_RATIOS};
use sinkt::encoder::{attention_weights, encode_layer, relation_message, EncoderOptions, LayerParams};
use sinkt::eval::{auc, evaluate, fit_and_evaluate, ExperimentData};
use sinkt::graph::{build_hetero_graph, build_transition_graph, edge_density, GraphFile, HeteroGraph};
use sinkt::model::{ModelDims, Variant};
use sinkt::synthetic::{generate_world, three_concept_fixture, tiny_fixture, WorldSpec};
use sinkt::tensor::Matrix;
use sinkt::train::{build_model, finite_diff_check, train, validation_metrics, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Synthetic-world runs: feature and state sizes.
const D_T: usize = 64;
const D: usize = 32;
const SYNTH_LR: f64 = 5e-3;
const SYNTH_EPOCHS: usize = 60;

fn synth_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: SYNTH_LR,
        max_epochs: SYNTH_EPOCHS,
        seed,
        variant,
        ..TrainConfig::default()
    }
}

fn world_data(mode: SplitMode, split_seed: u64) -> ExperimentData {
    let w = generate_world(&WorldSpec::default()).unwrap();
    let graph = w.graph().unwrap();
    let features = w.features(&graph, D_T, 0).unwrap();
    let seqs = w.sequences();
    let spec = match mode {
        SplitMode::Transductive => split_transductive(&seqs, DEFAULT_RATIOS, split_seed).unwrap(),
        SplitMode::Inductive => split_inductive(&seqs, 0.25, split_seed).unwrap(),
    };
    ExperimentData {
        graph,
        features,
        split: spec.apply(&seqs),
        mode,
        heldout: spec.heldout_questions.clone(),
    }
}

fn gradient_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let (model, batch) = tiny_fixture(v, 1);
        let err = finite_diff_check(&model, &batch, 1e-5).unwrap();
        parts.push(format!("{v} {err:.1e}"));
        worst = worst.max(err);
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && t < Duration::from_secs(30),
        format!("max rel err {worst:.2e} [{}] in {t:.1?}", parts.join(", ")),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    }
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut worst_perm: f64 = 0.0;
    let mut negative = false;
    let mut rows = 0usize;
    for _ in 0..1000 {
        let n_c = rng.gen_range(2..7);
        let n_q = rng.gen_range(1..7);
        let din = rng.gen_range(1..5);
        let dout = rng.gen_range(1..5);
        let concepts: Vec<String> = (0..n_c).map(|i| format!("c{i}")).collect();
        let mut qc = indexmap::IndexMap::new();
        for q in 0..n_q {
            let take = rng.gen_range(1..=n_c);
            let mut cs: Vec<String> = concepts.choose_multiple(&mut rng, take).cloned().collect();
            cs.sort();
            qc.insert(format!("q{q}"), cs);
        }
        let mut edges = Vec::new();
        for s in 0..n_c {
            for t in 0..n_c {
                if s != t && rng.gen_bool(0.4) {
                    edges.push((concepts[s].clone(), concepts[t].clone()));
                }
            }
        }
        let graph = build_hetero_graph(concepts.iter(), &qc, &edges).unwrap();
        let params = LayerParams::init(din, dout, &mut rng);
        let x_c = random_matrix(&mut rng, n_c, din);
        let x_q = random_matrix(&mut rng, n_q, din);
        let (_, _, trace) = encode_layer(&x_c, &x_q, &graph, &params, EncoderOptions::default()).unwrap();
        for rel in [&trace.cq, &trace.cc, &trace.qc] {
            for alpha in rel.alpha.iter().filter(|a| !a.is_empty()) {
                rows += 1;
                worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
                negative |= alpha.iter().any(|&a| a < 0.0);
            }
        }

        // neighbor permutation
        let center: Vec<f64> = (0..din).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = rng.gen_range(1..8);
        let nbrs: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..din).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let refs: Vec<&[f64]> = nbrs.iter().map(Vec::as_slice).collect();
        let prefs: Vec<&[f64]> = perm.iter().map(|&i| nbrs[i].as_slice()).collect();
        let a = relation_message(&center, &refs, &params.w_cc, &params.a_cc).unwrap();
        let b = relation_message(&center, &prefs, &params.w_cc, &params.a_cc).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_perm = worst_perm.max((x - y).abs());
        }
        let w = attention_weights(&center, &refs, &params.a_cc).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    outcome(
        worst_sum <= 1e-6 && !negative && worst_perm < 1e-9,
        format!("{rows} rows, max |sum-1| {worst_sum:.1e}, negative {negative}, max perm diff {worst_perm:.1e}"),
    )
}

fn pairwise_auc(p: &[f64], l: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (pi, li) in p.iter().zip(l) {
        for (pj, lj) in p.iter().zip(l) {
            if *li == 1 && *lj == 0 {
                pairs += 1;
                twice += match pi.partial_cmp(pj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 1000 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(2..12);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        if !(l.contains(&0) && l.contains(&1)) {
            continue;
        }
        done += 1;
        if auc(&p, &l).unwrap() != pairwise_auc(&p, &l) {
            mismatches += 1;
        }
    }
    let fixed = auc(&[0.9, 0.8, 0.3, 0.2], &[1, 0, 1, 0]).unwrap();
    outcome(
        mismatches == 0 && fixed == 0.75,
        format!("{mismatches} mismatches in 1000 instances, fixed example {fixed}"),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let w = generate_world(&WorldSpec::overfit(11)).unwrap();
    let graph = w.graph().unwrap();
    let seqs = w.sequences();
    let features = w.features(&graph, D_T, 0).unwrap();
    let dims = ModelDims { d_t: D_T, d: 16, k: 1 };
    let model = build_model(dims, Variant::Full, &graph, &features, &seqs, 1).unwrap();
    let batch = model.index_sequences(&seqs).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        decay: 1.0,
        batch_size: 5,
        max_epochs: 500,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&cfg, model, &batch, &[]).unwrap();
    let loss = out.history.epochs.last().unwrap().train_loss;
    let (acc, _) = validation_metrics(&out.model, &batch).unwrap();
    let t = start.elapsed();
    outcome(
        loss < 0.1 && acc > 0.95 && t < Duration::from_secs(120),
        format!(
            "{} students x 20 steps: loss {loss:.4}, train acc {acc:.3} after {} epochs in {t:.1?}",
            seqs.len(),
            out.epochs_run
        ),
    )
}

fn learnability() -> Outcome {
    let start = Instant::now();
    let data = world_data(SplitMode::Transductive, 5);
    let fit = fit_and_evaluate(ModelDims { d_t: D_T, d: D, k: 1 }, &synth_config(Variant::Full, 1), &data, None).unwrap();
    let train_rate = {
        let (n, c) = data
            .split
            .train
            .iter()
            .flat_map(|s| &s.steps)
            .fold((0usize, 0usize), |(n, c), st| (n + 1, c + st.correct as usize));
        c as f64 / n as f64
    };
    let labels: Vec<u8> = data.split.test.iter().flat_map(|s| s.steps.iter().map(|st| st.correct)).collect();
    let baseline = auc(&vec![train_rate; labels.len()], &labels).unwrap();
    let t = start.elapsed();
    let gap = fit.report.auc - baseline;
    outcome(
        fit.report.auc >= 0.75 && gap >= 0.10 && t < Duration::from_secs(600),
        format!(
            "test AUC {:.4} (ACC {:.4}, {} points), global-rate baseline AUC {baseline:.4}, gap {gap:.4}, {t:.1?}",
            fit.report.auc, fit.report.acc, fit.report.n_points
        ),
    )
}

fn inductive() -> Outcome {
    let data = world_data(SplitMode::Inductive, 5);
    let heldout: HashSet<String> = data.heldout.iter().cloned().collect();
    // held-out interactions of both validation and test students
    let eval_seqs: Vec<StudentSequence> = data.split.val.iter().chain(&data.split.test).cloned().collect();
    let dims = ModelDims { d_t: D_T, d: D, k: 1 };
    let mut aucs = Vec::new();
    let mut points = 0;
    for v in [Variant::Full, Variant::Text] {
        let fit = fit_and_evaluate(dims, &synth_config(v, 1), &data, None).unwrap();
        let r = evaluate(&fit.outcome.model, &eval_seqs, Some(&heldout), SplitMode::Inductive).unwrap();
        points = r.n_points;
        aucs.push(r.auc);
    }
    let (full, text) = (aucs[0], aucs[1]);
    outcome(
        full >= 0.60 && full - 0.5 >= 0.05 && text <= 0.53,
        format!(
            "{} held-out questions, {points} points: full AUC {full:.4}, text (random rows) AUC {text:.4}",
            heldout.len()
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let dims = ModelDims { d_t: D_T, d: D, k: 1 };
    let mut full = Vec::new();
    let mut gat = Vec::new();
    for seed in 1..=5u64 {
        let data = world_data(SplitMode::Transductive, seed);
        full.push(fit_and_evaluate(dims, &synth_config(Variant::Full, seed), &data, None).unwrap().report.auc);
        gat.push(fit_and_evaluate(dims, &synth_config(Variant::Gat, seed), &data, None).unwrap().report.auc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, mg) = (mean(&full), mean(&gat));
    outcome(
        mf >= mg,
        format!("mean AUC over 5 seeds: full {mf:.4} vs gat {mg:.4} (full {full:.4?}, gat {gat:.4?})"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["sinkt"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_world(dir: &Path) -> std::path::PathBuf {
    assert_eq!(run_cli(&["synth", "--students", "60", "--out", s(dir)]), 0);
    assert_eq!(run_cli(&["gen-graph", "--config", s(&dir.join("config.json"))]), 0);
    let cfg = dir.join("config.json");
    let mut c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    c["train"]["max_epochs"] = 8.into();
    c["d"] = 16.into();
    std::fs::write(&cfg, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    cfg
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_world(&tmp.path().join("world"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ca = run_cli(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&a)]);
    let cb = run_cli(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(&b)]);
    let same = |f: &str| std::fs::read(a.join(f)).ok().is_some_and(|x| Some(x) == std::fs::read(b.join(f)).ok());
    let (h, c) = (same("history.csv"), same("checkpoint.json"));
    outcome(
        ca == 0 && cb == 0 && h && c,
        format!("exit codes {ca}/{cb}, history identical {h}, checkpoint identical {c}"),
    )
}

fn graph_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (concepts, responses, expected) = three_concept_fixture();
    let mut text = String::from("concept_id,text\n");
    for (id, t) in &concepts {
        text.push_str(&format!("{id},{t}\n"));
    }
    std::fs::write(dir.join("concepts.csv"), text).unwrap();
    std::fs::write(dir.join("qc.csv"), "question_id,concept_id\nq1,c1\nq2,c2\nq3,c3\n").unwrap();
    std::fs::write(dir.join("rel.json"), serde_json::to_string(&responses).unwrap()).unwrap();
    std::fs::write(dir.join("c.json"), r#"{"concepts": "concepts.csv", "qc": "qc.csv"}"#).unwrap();
    let code = run_cli(&[
        "gen-graph",
        "--config",
        s(&dir.join("c.json")),
        "--mock",
        s(&dir.join("rel.json")),
        "--out",
        s(&dir.join("graph.json")),
    ]);
    let file = GraphFile::load(&dir.join("graph.json")).unwrap();
    let edges_ok = code == 0 && file.cc_edges == expected;

    let ids: Vec<String> = ["c1", "c2", "c3"].iter().map(|s| s.to_string()).collect();
    let qc: indexmap::IndexMap<String, Vec<String>> =
        ids.iter().map(|c| (format!("q_{c}"), vec![c.clone()])).collect();
    let two = vec![("c1".to_string(), "c2".to_string()), ("c2".to_string(), "c3".to_string())];
    let density = edge_density(&build_hetero_graph(ids.iter(), &qc, &two).unwrap()).unwrap();
    let density_ok = (density - 0.3333).abs() <= 1e-4 && (density - 1.0 / 3.0).abs() <= 1e-12;

    let g2: HeteroGraph = build_hetero_graph(ids[..2].iter(), &qc.iter().take(2).map(|(k, v)| (k.clone(), v.clone())).collect(), &[]).unwrap();
    let stream = StudentSequence {
        student: "s".into(),
        steps: ["q_c1", "q_c2", "q_c1", "q_c2"]
            .iter()
            .enumerate()
            .map(|(t, q)| Step {
                question: q.to_string(),
                correct: 1,
                timestamp: t as i64,
            })
            .collect(),
    };
    let tg = build_transition_graph(&[stream], &g2).unwrap();
    let (c1, c2) = (g2.concept_index("c1").unwrap(), g2.concept_index("c2").unwrap());
    let (p21, p12) = (tg.get(c2, c1), tg.get(c1, c2));
    outcome(
        edges_ok && density_ok && p21 == 1.0 && p12 == 1.0,
        format!(
            "cc edges {:?}, density {density:.12}, P(c2|c1) {p21}, P(c1|c2) {p12}",
            file.cc_edges
        ),
    )
}

fn ingestion() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_world(&tmp.path().join("world"));
    let model_dir = tmp.path().join("model");
    assert_eq!(run_cli(&["train", "--config", s(&cfg), "--out", s(&model_dir)]), 0);
    let mock = tmp.path().join("new.json");
    std::fs::write(
        &mock,
        r#"{"k40": "Related: [algebra unit0, algebra unit1]", "pnew": "[algebra unit1, algebra matrices]"}"#,
    )
    .unwrap();
    let before = std::fs::read(model_dir.join("checkpoint.json")).unwrap();

    let start = Instant::now();
    let code = run_cli(&[
        "ingest-new",
        "--model",
        s(&model_dir),
        "--mock",
        s(&mock),
        "--concept-id",
        "k40",
        "--concept-text",
        "algebra matrices",
        "--question-id",
        "pnew",
        "--question-text",
        "algebra matrices hard",
    ]);
    let model = ModelDir(model_dir.clone()).load_model().unwrap();
    let history = vec![
        ("p000".to_string(), Some(1)),
        ("p010".to_string(), Some(0)),
        ("pnew".to_string(), None),
    ];
    let y = predict_history(&model, &history).unwrap();
    let t = start.elapsed();
    let last = *y.last().unwrap();
    let unchanged = std::fs::read(model_dir.join("checkpoint.json")).unwrap() == before;
    let linked = model
        .graph
        .question_index("pnew")
        .map(|q| model.graph.question_concepts(q).to_vec())
        .unwrap_or_default();
    outcome(
        code == 0 && last > 0.0 && last < 1.0 && unchanged && !linked.is_empty() && t < Duration::from_secs(5),
        format!(
            "new question linked to {} concepts, y = {last:.4}, checkpoint unchanged {unchanged}, {t:.2?}",
            linked.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient exactness", gradient_exactness),
        ("attention normalization", attention_normalization),
        ("AUC oracle equivalence", auc_oracle),
        ("overfit check", overfit),
        ("synthetic learnability", learnability),
        ("inductive capability", inductive),
        ("ablation ordering", ablation_ordering),
        ("determinism", determinism),
        ("graph pipeline fidelity", graph_pipeline),
        ("inductive ingestion end-to-end", ingestion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let r = run();
        println!("[{}] {id:>2}. {name}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
