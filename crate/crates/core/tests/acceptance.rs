//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria that need a dataset missing from `data/` print FAIL with the
//! reason and are not asserted; everything else is asserted after printing.
//! The lines go straight to stdout so they show without `--nocapture`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use kgelab::config::ConfigMap;
use kgelab::data::{load_dataset, KnowledgeGraph, Split, Triple, Vocabulary};
use kgelab::eval::{countries_auc_pr, evaluate, filtered_rank, EvalOptions, LinkScorer, OneToOne, TieMode};
use kgelab::graph::{derive_robust_dataset, pagerank, SymmetricPolicy, DAMPING, MAX_ITER, TOLERANCE};
use kgelab::inverse::{detect_inverse_relations, evaluate_inverse_model, leakage_report};
use kgelab::models::{count_parameters, ModelConfig, ModelKind, ModelParams};
use kgelab::tensor::ops::conv2d;
use kgelab::tensor::{Mode, Tensor};
use kgelab::training::{bce_with_logits, train, StopMetric, TrainConfig, TrainOutcome};
use kgelab::{rng_from_seed, Result};
use rand::seq::SliceRandom;
use rand::Rng;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn report(id: &str, pass: bool, what: &str, detail: &str) {
    let line = format!("criterion {id:>2} {}  {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    writeln!(std::io::stdout().lock(), "{line}").unwrap();
}

/// Criteria with a time budget run one at a time so that the harness's
/// parallel test threads do not inflate each other's wall clock.
fn timed() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn load(name: &str) -> Option<KnowledgeGraph> {
    let dir = root().join("data").join(name);
    dir.is_dir().then(|| load_dataset(&dir).unwrap().0)
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

struct Run {
    kg: KnowledgeGraph,
    outcome: TrainOutcome,
    seconds: f64,
}

/// Trains exactly as `kgelab train --config configs/<name>` would.
fn run_config(name: &str, seed: Option<u64>) -> Run {
    kgelab::retain_freed_memory();
    let mut cfg = ConfigMap::load(root().join("configs").join(name)).unwrap();
    let dataset = root().join(cfg.remove("dataset").expect("config names a dataset"));
    if let Some(s) = seed {
        cfg.set("seed", s);
    }
    let model_cfg = ModelConfig::from_config_map(&cfg).unwrap();
    let train_cfg = TrainConfig::from_config_map(&cfg).unwrap();
    let kg = load_dataset(&dataset).unwrap().0.add_reciprocals().unwrap();
    let mut params = ModelParams::init(&model_cfg, kg.n_entities(), kg.n_relations(), train_cfg.seed).unwrap();
    let start = Instant::now();
    let outcome = train(&kg, &mut params, &train_cfg).unwrap();
    Run {
        kg,
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn inverse_model_on(name: &str) -> Option<(f64, f64, f64, f64, f64)> {
    let kg = load(name)?;
    let start = Instant::now();
    let rules = detect_inverse_relations(&kg).unwrap();
    let eval = evaluate_inverse_model(&rules, &kg, Split::Test, 0).unwrap();
    let leak = leakage_report(&kg).unwrap();
    let m = &eval.report.metrics;
    Some((m.mrr, m.hits1, m.hits10, leak.leakage, start.elapsed().as_secs_f64()))
}

#[test]
fn c01_inverse_model_wn18() {
    let _timed = timed();
    let Some((mrr, _, h10, _, secs)) = inverse_model_on("wn18") else {
        report("1", false, "inverse model on WN18", "data/wn18 not present");
        return;
    };
    let pass = mrr >= 0.95 && h10 >= 0.95 && secs < 300.0;
    report("1", pass, "inverse model on WN18", &format!("MRR {mrr:.4}, Hits@10 {h10:.4}, {secs:.1}s (need both >= 0.95, < 300s)"));
    assert!(pass);
}

#[test]
fn c02_inverse_model_fb15k() {
    let _timed = timed();
    let Some((mrr, h1, h10, _, secs)) = inverse_model_on("fb15k") else {
        report("2", false, "inverse model on FB15k", "data/fb15k not present; dataset not available in this environment");
        return;
    };
    let pass = (mrr - 0.660).abs() <= 0.02 && (h10 - h1).abs() <= 0.02 && secs < 600.0;
    report("2", pass, "inverse model on FB15k", &format!("MRR {mrr:.4}, Hits@1 {h1:.4}, Hits@10 {h10:.4}, {secs:.1}s"));
    assert!(pass);
}

#[test]
fn c03_leakage_audit() {
    let wn = inverse_model_on("wn18").map(|r| r.3);
    let fb = inverse_model_on("fb15k").map(|r| r.3);
    let show = |v: Option<f64>| v.map_or("unavailable".to_string(), |v| format!("{v:.4}"));
    let wn_ok = wn.is_some_and(|v| (v - 0.94).abs() <= 0.02);
    let fb_ok = fb.is_some_and(|v| (v - 0.81).abs() <= 0.03);
    report(
        "3",
        wn_ok && fb_ok,
        "test leakage",
        &format!("WN18 {} (0.94 +- 0.02), FB15k {} (0.81 +- 0.03)", show(wn), show(fb)),
    );
    // each half is asserted when its data is present
    if wn.is_some() {
        assert!(wn_ok);
    }
    if fb.is_some() {
        assert!(fb_ok);
    }
}

#[test]
fn c04_conve_countries_s1() {
    let _timed = timed();
    let cfg = ConfigMap::load(root().join("configs/conve_countries.cfg")).unwrap();
    assert_eq!(TrainConfig::from_config_map(&cfg).unwrap().metric, StopMetric::AucPr);
    let mut passes = 0;
    let mut detail = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 1..=10u64 {
        let run = run_config("conve_countries.cfg", Some(seed));
        let auc = countries_auc_pr(&run.outcome.best, &run.kg, Split::Test).unwrap();
        passes += (auc >= 0.99) as usize;
        slowest = slowest.max(run.seconds);
        detail.push(format!("{auc:.3}"));
    }
    let pass = passes >= 8 && slowest < 1800.0;
    report(
        "4",
        pass,
        "ConvE on Countries S1",
        &format!("{passes}/10 runs with AUC-PR >= 0.99 [{}], slowest {slowest:.0}s", detail.join(" ")),
    );
    assert!(pass);
}

fn link_prediction(id: &str, cfg: &str, what: &str, min_mrr: f64, min_h10: f64) {
    let run = run_config(cfg, None);
    let rep = evaluate(&run.outcome.best, &run.kg, Split::Test, &EvalOptions::default()).unwrap();
    let m = &rep.metrics;
    let pass = m.mrr >= min_mrr && m.hits10 >= min_h10 && run.seconds < 3600.0;
    report(
        id,
        pass,
        what,
        &format!(
            "MRR {:.4}, Hits@10 {:.4}, best epoch {}, {:.0}s (need >= {min_mrr}, >= {min_h10})",
            m.mrr,
            m.hits10,
            run.outcome.log.best_epoch().map_or("none".into(), |e| e.to_string()),
            run.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn c05_conve_umls() {
    let _timed = timed();
    link_prediction("5", "conve_umls.cfg", "ConvE on UMLS", 0.90, 0.97);
}

#[test]
fn c06_conve_kinship() {
    let _timed = timed();
    link_prediction("6", "conve_kinship.cfg", "ConvE on Kinship", 0.78, 0.95);
}

/// Reported parameter counts are in millions with two decimals; the
/// smallest DistMult row is truncated rather than rounded.
fn matches_two_decimals(count: usize, millions: f64) -> bool {
    let m = count as f64 / 1e4;
    ((m.round() / 100.0) - millions).abs() < 1e-9 || ((m.floor() / 100.0) - millions).abs() < 1e-9
}

#[test]
fn c07_parameter_counts() {
    // FB15k-237 vocabulary
    let (n_e, n_r) = (14_541, 237);
    let mut ok = true;
    let mut detail = Vec::new();
    for (k, paper) in [(128, 1.89), (64, 0.95), (16, 0.23)] {
        let c = count_parameters(&ModelConfig::new(ModelKind::DistMult, k), n_e, n_r).unwrap();
        ok &= matches_two_decimals(c, paper);
        detail.push(format!("DistMult k={k}: {c} vs {paper}M"));
    }
    for (k, paper) in [(200, 5.05), (96, 1.89), (54, 0.95), (28, 0.46), (14, 0.23)] {
        let mut cfg = ModelConfig::new(ModelKind::ConvE, k);
        cfg.entity_bias = true;
        // relations are doubled by the reciprocal augmentation
        let c = count_parameters(&cfg, n_e, 2 * n_r).unwrap();
        let rel = (c as f64 / (paper * 1e6) - 1.0).abs();
        ok &= rel <= 0.05;
        detail.push(format!("ConvE k={k}: {c} vs {paper}M ({:+.1}%)", 100.0 * (c as f64 / (paper * 1e6) - 1.0)));
    }
    report("7", ok, "parameter counts", &detail.join("; "));
    assert!(ok);
}

fn toy_graph() -> KnowledgeGraph {
    let vocab = Vocabulary::new((0..5).map(|i| format!("e{i}")), ["r0", "r1"]);
    let train = vec![
        Triple::new(0, 0, 1),
        Triple::new(2, 0, 3),
        Triple::new(0, 1, 4),
        Triple::new(3, 1, 2),
    ];
    KnowledgeGraph::new(vocab, train.clone(), vec![], train).unwrap()
}

const KINDS: [ModelKind; 4] = [ModelKind::TransE, ModelKind::DistMult, ModelKind::ComplEx, ModelKind::ConvE];

fn small_config(kind: ModelKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, 9);
    cfg.channels = 2;
    cfg.input_dropout = 0.0;
    cfg.feature_dropout = 0.0;
    cfg.hidden_dropout = 0.0;
    cfg.entity_bias = kind == ModelKind::ConvE;
    cfg
}

fn randomised(kind: ModelKind, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&small_config(kind), 5, 4, seed).unwrap();
    let mut rng = rng_from_seed(seed);
    for (name, t) in p.parameters_mut() {
        let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = centre + rng.gen_range(-0.5..0.5);
        }
    }
    p
}

/// Worst relative error between backprop and central differences over every
/// parameter of a small model.
fn full_gradient_error(kind: ModelKind) -> f64 {
    let p = randomised(kind, 3);
    let (s, r) = ([0, 1, 3, 4], [0, 1, 2, 3]);
    let mut rng = rng_from_seed(5);
    let targets: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
    let loss = |p: &ModelParams| {
        let (logits, _) = p.forward(&s, &r, None, Mode::Train, &mut rng_from_seed(0)).unwrap();
        bce_with_logits(logits.data(), &targets).0
    };
    let (logits, cache) = p.forward(&s, &r, None, Mode::Train, &mut rng_from_seed(0)).unwrap();
    let mut analytic = p.clone();
    analytic.zero_grad();
    analytic.backward(cache, bce_with_logits(logits.data(), &targets).1).unwrap();
    let grads: Vec<Vec<f64>> = analytic
        .parameters()
        .into_iter()
        .map(|(_, t)| t.grad().map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let mut plus = p.clone();
            plus.parameters_mut()[pi].1.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.parameters_mut()[pi].1.data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
    }
    worst
}

fn conv_oracle_error() -> f64 {
    let mut rng = rng_from_seed(7);
    let mut worst: f64 = 0.0;
    for [b, cin, h, w, c] in [[1, 1, 6, 6, 2], [3, 1, 8, 5, 4], [2, 2, 3, 3, 1], [2, 1, 20, 20, 32]] {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (x, f, bias) = (draw(b * cin * h * w), draw(c * cin * 9), draw(c));
        let fast = conv2d(
            &Tensor::new(vec![b, cin, h, w], x.clone()).unwrap(),
            &Tensor::new(vec![c, cin, 3, 3], f.clone()).unwrap(),
            &Tensor::new(vec![c], bias.clone()).unwrap(),
        )
        .unwrap();
        let (oh, ow) = (h - 2, w - 2);
        for n in 0..b {
            for o in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias[o];
                        for ic in 0..cin {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    acc += x[((n * cin + ic) * h + i + di) * w + j + dj] * f[((o * cin + ic) * 3 + di) * 3 + dj];
                                }
                            }
                        }
                        worst = worst.max((fast.data()[((n * c + o) * oh + i) * ow + j] - acc).abs());
                    }
                }
            }
        }
    }
    worst
}

/// Filtered ranks against sorting the surviving candidates by score.
fn ranking_oracle_agrees() -> bool {
    let mut rng = rng_from_seed(8);
    (0..500).all(|_| {
        let n = rng.gen_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 4.0).collect();
        let target = rng.gen_range(0..n);
        let mask: Vec<bool> = (0..n).map(|j| j != target && rng.gen_bool(0.3)).collect();
        let mut kept: Vec<(f64, usize)> = (0..n).filter(|&j| !mask[j]).map(|j| (scores[j], j)).collect();
        // best-first with the target placed first (optimistic) or last
        // (pessimistic) among equal scores
        kept.sort_by(|a, b| b.0.total_cmp(&a.0).then((b.1 == target).cmp(&(a.1 == target))));
        let opt = kept.iter().position(|&(_, j)| j == target).unwrap() + 1;
        kept.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1 == target).cmp(&(b.1 == target))));
        let pes = kept.iter().position(|&(_, j)| j == target).unwrap() + 1;
        filtered_rank(&scores, target, &mask, TieMode::Optimistic) == opt
            && filtered_rank(&scores, target, &mask, TieMode::Pessimistic) == pes
    })
}

fn memorises(kind: ModelKind) -> bool {
    let kg = toy_graph().add_reciprocals().unwrap();
    let mut cfg = ModelConfig::new(kind, 16);
    cfg.channels = 4;
    cfg.input_dropout = 0.0;
    cfg.feature_dropout = 0.0;
    cfg.hidden_dropout = 0.0;
    let mut p = ModelParams::init(&cfg, kg.n_entities(), kg.n_relations(), 1).unwrap();
    let tc = TrainConfig {
        lr: 0.01,
        epochs: 200,
        label_smoothing: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&kg, &mut p, &tc).unwrap();
    evaluate(&out.best, &kg, Split::Train, &EvalOptions::default()).unwrap().metrics.hits1 == 1.0
}

fn one_to_n_gap(kind: ModelKind) -> f64 {
    let p = randomised(kind, 11);
    let (s, r) = ([0, 2, 4], [1, 3, 0]);
    let batched = p.score_objects(&s, &r).unwrap();
    let single = LinkScorer::score_objects(&OneToOne(&p), &s, &r).unwrap();
    batched.data().iter().zip(&single).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// A scorer whose outputs go through a strictly increasing map.
struct Transformed<'a>(&'a ModelParams);

impl LinkScorer for Transformed<'_> {
    fn n_entities(&self) -> usize {
        self.0.n_entities()
    }

    fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.score_objects(s, r)?.data().iter().map(|v| 5.0 * v.tanh() + v * v * v).collect())
    }

    fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.score_subjects(r, o)?.data().iter().map(|v| 5.0 * v.tanh() + v * v * v).collect())
    }
}

fn monotone_invariant(kind: ModelKind) -> bool {
    let kg = toy_graph().add_reciprocals().unwrap();
    let mut cfg = small_config(kind);
    cfg.entity_bias = false;
    let p = ModelParams::init(&cfg, kg.n_entities(), kg.n_relations(), 2).unwrap();
    let opts = EvalOptions::default();
    let a = evaluate(&p, &kg, Split::Test, &opts).unwrap();
    let b = evaluate(&Transformed(&p), &kg, Split::Test, &opts).unwrap();
    a.ranks == b.ranks && a.metrics == b.metrics
}

#[test]
fn c08_property_substitutes() {
    let grad = KINDS.map(full_gradient_error).into_iter().fold(0.0, f64::max);
    let conv = conv_oracle_error();
    let ranks = ranking_oracle_agrees();
    let memo: Vec<ModelKind> = KINDS.into_iter().filter(|&k| !memorises(k)).collect();
    let gap = KINDS.map(one_to_n_gap).into_iter().fold(0.0, f64::max);
    let mono = KINDS.into_iter().all(monotone_invariant);
    let pass = grad < 1e-4 && conv <= 1e-12 && ranks && memo.is_empty() && gap <= 1e-10 && mono;
    report(
        "8",
        pass,
        "property substitutes",
        &format!(
            "(a) grad rel err {grad:.1e}; (b) conv2d err {conv:.1e}, rank oracle {ranks}; (c) memorisation failures {memo:?}; (d) 1-N vs 1-1 gap {gap:.1e}; (e) monotone invariance {mono}"
        ),
    );
    assert!(pass);
}

#[test]
fn c09_one_to_n_throughput() {
    let _timed = timed();
    let n_e = 500;
    let mut rng = rng_from_seed(9);
    let mut triple = || Triple::new(rng.gen_range(0..n_e), rng.gen_range(0..10), rng.gen_range(0..n_e));
    let train: Vec<Triple> = (0..5000).map(|_| triple()).collect();
    let test: Vec<Triple> = (0..5000).map(|_| triple()).collect();
    let vocab = Vocabulary::new((0..n_e).map(|i| format!("e{i:03}")), (0..10).map(|i| format!("r{i}")));
    let kg = KnowledgeGraph::new(vocab, train, vec![], test).unwrap().add_reciprocals().unwrap();
    assert!(kg.test().len() >= 2 * 4900);

    let mut cfg = ModelConfig::new(ModelKind::ConvE, 32);
    cfg.channels = 8;
    let p = ModelParams::init(&cfg, kg.n_entities(), kg.n_relations(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    kgelab::models::write_checkpoint(&path, &p, kg.vocab().hash(), &ConfigMap::new()).unwrap();
    let p = kgelab::models::read_checkpoint(&path).unwrap().params;

    let opts = EvalOptions::default();
    let start = Instant::now();
    let fast = evaluate(&p, &kg, Split::Test, &opts).unwrap();
    let t_fast = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let slow = evaluate(&OneToOne(&p), &kg, Split::Test, &opts).unwrap();
    let t_slow = start.elapsed().as_secs_f64();
    let speedup = t_slow / t_fast;
    let pass = speedup >= 10.0 && fast.ranks == slow.ranks;
    report(
        "9",
        pass,
        "1-N evaluation throughput",
        &format!("{} test triples: 1-N {t_fast:.2}s, 1-1 {t_slow:.2}s, speedup {speedup:.0}x (need >= 10x), ranks identical {}", fast.n_triples, fast.ranks == slow.ranks),
    );
    assert!(pass);
}

/// Three layers of entities. Plain relations only point from one layer to
/// the next and are split 80/10/10 at random. Each planted pair adds a
/// forward relation and its exact reverse; a fifth of the pairs lose one
/// direction to valid or test while the other stays in train.
fn synthetic_with_inverses(seed: u64) -> KnowledgeGraph {
    let layer = 150;
    let mut rng = rng_from_seed(seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut held = |t: Triple, rng: &mut kgelab::Rng, train: &mut Vec<Triple>| match rng.gen_range(0..10) {
        0 => valid.push(t),
        1 => test.push(t),
        _ => train.push(t),
    };
    let mut rel = 0;
    for _ in 0..4 {
        let l = rng.gen_range(0..2);
        for _ in 0..rng.gen_range(300..900) {
            let t = Triple::new(l * layer + rng.gen_range(0..layer), rel, (l + 1) * layer + rng.gen_range(0..layer));
            held(t, &mut rng, &mut train);
        }
        rel += 1;
    }
    let mut out = Vec::new();
    for _ in 0..3 {
        let l = rng.gen_range(0..2);
        for _ in 0..rng.gen_range(300..900) {
            let (s, o) = (l * layer + rng.gen_range(0..layer), (l + 1) * layer + rng.gen_range(0..layer));
            let (fwd, back) = (Triple::new(s, rel, o), Triple::new(o, rel + 1, s));
            if rng.gen_bool(0.8) {
                train.extend([fwd, back]);
            } else {
                let (gone, kept) = if rng.gen_bool(0.5) { (fwd, back) } else { (back, fwd) };
                train.push(kept);
                out.push(gone);
            }
        }
        rel += 2;
    }
    for (i, t) in out.into_iter().enumerate() {
        if i % 2 == 0 { valid.push(t) } else { test.push(t) }
    }
    train.shuffle(&mut rng);
    let vocab = Vocabulary::new((0..3 * layer).map(|i| format!("e{i:03}")), (0..rel).map(|i| format!("r{i:02}")));
    KnowledgeGraph::new(vocab, train, valid, test).unwrap()
}

#[test]
fn c10_robust_derivation_self_consistency() {
    let mut ok = true;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let kg = synthetic_with_inverses(seed);
        let rules = detect_inverse_relations(&kg).unwrap();
        let before = leakage_report(&kg).unwrap().leakage;
        let (out, audit) = derive_robust_dataset(&kg, &rules, SymmetricPolicy::Drop).unwrap();
        let remined = detect_inverse_relations(&out).unwrap();
        let mrr = evaluate_inverse_model(&remined, &out, Split::Test, seed).unwrap().report.metrics.mrr;
        let chance = harmonic(out.n_entities()) / out.n_entities() as f64;
        let good = rules.len() == 6 && audit.dropped_relations.len() == 3 && remined.is_empty() && mrr <= 2.0 * chance;
        ok &= good;
        detail.push(format!(
            "seed {seed}: {} rules, leakage {before:.2}, dropped {}, re-mined {}, MRR {mrr:.4} vs chance {chance:.4}",
            rules.len(),
            audit.dropped_relations.len(),
            remined.len()
        ));
    }
    report("10", ok, "robust derivation self-consistency", &detail.join("; "));
    assert!(ok);
}

/// Reference values quoted for the analysis section. These are printed for
/// comparison and not asserted: no WN18RR files are available, and the
/// published PageRank means depend on conventions the text leaves open.
#[test]
fn reference_values() {
    let Some(wn18) = load("wn18") else {
        writeln!(std::io::stdout().lock(), "reference FAIL  data/wn18 not present").unwrap();
        return;
    };
    let rules = detect_inverse_relations(&wn18).unwrap();
    for policy in [SymmetricPolicy::Drop, SymmetricPolicy::Keep] {
        let (out, audit) = derive_robust_dataset(&wn18, &rules, policy).unwrap();
        let total: usize = audit.triples_after.iter().sum();
        let pass = out.n_relations() == 11 && (total as f64 / 93_003.0 - 1.0).abs() <= 0.05;
        writeln!(
            std::io::stdout().lock(),
            "reference {}  robust WN18 ({policy}): {} relations, {total} triples (reference 11 relations, 93003 triples +- 5%)",
            if pass { "PASS" } else { "FAIL" },
            out.n_relations()
        )
        .unwrap();
    }
    for (name, paper) in [("wn18", 0.125e-3), ("countries_s1", 1.711e-3)] {
        let kg = load(name).unwrap();
        let c = pagerank(&kg, DAMPING, TOLERANCE, MAX_ITER).unwrap();
        let rel = c.mean_test_pagerank / paper - 1.0;
        writeln!(
            std::io::stdout().lock(),
            "reference {}  mean test PageRank {name}: {:.4}e-3 (by occurrence {:.4}e-3), reference {:.4}e-3 +- 20%",
            if rel.abs() <= 0.2 { "PASS" } else { "FAIL" },
            1e3 * c.mean_test_pagerank,
            1e3 * c.mean_test_pagerank_by_occurrence,
            1e3 * paper
        )
        .unwrap();
    }
}
