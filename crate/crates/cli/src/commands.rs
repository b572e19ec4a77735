use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use serde::Serialize;
use sha2::{Digest, Sha256};

use kgelab::config::ConfigMap;
use kgelab::data::{load_dataset, write_dataset, KnowledgeGraph, Split};
use kgelab::eval::{countries_auc_pr, evaluate as rank_split, EvalOptions, TieMode};
use kgelab::graph::{derive_indegree_variant, derive_robust_dataset, pagerank, relation_indegree, IndegreeMode, SymmetricPolicy};
use kgelab::inverse::{detect_with, evaluate_inverse_model, leakage_with, DetectOptions};
use kgelab::models::{read_checkpoint, write_checkpoint, ModelConfig, ModelParams};
use kgelab::training::{train as run_train, Regime, StopMetric, TrainConfig, TrainStatus};

use crate::manifest::{write_file, RunManifest};
use crate::{CliError, CliResult, GlobalArgs};

const DATASET_KEY: &str = "dataset";
const GRID_PREFIX: &str = "grid.";

fn train_keys() -> Vec<&'static str> {
    let mut k = vec![DATASET_KEY];
    k.extend(ModelConfig::KEYS);
    k.extend(TrainConfig::KEYS);
    k
}

/// Config file, then `--set` overrides, then `--seed`.
fn load_config(g: &GlobalArgs) -> CliResult<ConfigMap> {
    let mut cfg = match &g.config {
        Some(p) => ConfigMap::load(p).map_err(|e| match e {
            kgelab::Error::Io { .. } => CliError::config(e.to_string()),
            other => other.into(),
        })?,
        None => ConfigMap::new(),
    };
    for s in &g.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("seed", seed);
    }
    Ok(cfg)
}

fn seed_of(cfg: &ConfigMap) -> CliResult<u64> {
    Ok(cfg.get_or("seed", 0u64)?)
}

fn dataset_dir(arg: Option<&PathBuf>, cfg: &ConfigMap) -> CliResult<PathBuf> {
    match (arg, cfg.raw(DATASET_KEY)) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(p)) => Ok(PathBuf::from(p)),
        (None, None) => Err(CliError::config("no dataset given (set `dataset=DIR` or pass --dataset)")),
    }
}

fn load(dir: &Path) -> CliResult<KnowledgeGraph> {
    if !dir.is_dir() {
        return Err(CliError::data(format!("dataset directory {} not found", dir.display())));
    }
    let (kg, _) = load_dataset(dir)?;
    Ok(kg)
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

fn config_hash(cfg: &ConfigMap) -> String {
    let digest = Sha256::digest(cfg.to_string().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
struct RunSummary {
    dir: PathBuf,
    overrides: BTreeMap<String, String>,
    metric: StopMetric,
    best_valid: Option<f64>,
    best_epoch: Option<usize>,
    test_mrr: Option<f64>,
    test_auc_pr: Option<f64>,
    status: String,
}

/// One full training run under `out`.
fn train_run(cfg: &ConfigMap, config_path: Option<&Path>, out: &Path) -> CliResult<RunSummary> {
    cfg.check_known(&train_keys())?;
    let dataset = dataset_dir(None, cfg)?;
    let model_cfg = ModelConfig::from_config_map(cfg)?;
    let train_cfg = TrainConfig::from_config_map(cfg)?;
    let base = load(&dataset)?;
    let kg = match train_cfg.regime {
        Regime::OneToN => base.add_reciprocals()?,
        Regime::OneToOne => base,
    };
    let mut params = ModelParams::init(&model_cfg, kg.n_entities(), kg.n_relations(), train_cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} ({} entities, {} relations)",
        model_cfg.kind,
        params.n_parameters(),
        dataset.display(),
        kg.n_entities(),
        kg.n_relations()
    );
    let outcome = run_train(&kg, &mut params, &train_cfg)?;

    let mut resolved = model_cfg.to_config_map();
    resolved.extend(&train_cfg.to_config_map());
    resolved.set(DATASET_KEY, dataset.display());
    let mut manifest = RunManifest::new("train", config_path, train_cfg.seed);
    manifest.resolved = resolved.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    manifest.dataset = Some(dataset.clone());
    manifest.dataset_checksum = Some(kg.checksum());

    let mut meta = ConfigMap::new();
    meta.set("reciprocal", kg.is_reciprocal());
    meta.set(DATASET_KEY, dataset.display());
    let ckpt = out.join("model.ckpt");
    write_checkpoint(&ckpt, &outcome.best, kg.vocab().hash(), &meta)?;
    manifest.artifact("checkpoint", &ckpt);
    let log_path = out.join("runlog.jsonl");
    outcome.log.write_jsonl(&log_path)?;
    manifest.artifact("run_log", &log_path);
    let cfg_path = out.join("resolved.cfg");
    write_file(&cfg_path, &resolved.to_string())?;
    manifest.artifact("resolved_config", &cfg_path);

    let evals = outcome.log.evaluations();
    let best_epoch = outcome.log.best_epoch();
    let best_valid = best_epoch.and_then(|b| evals.iter().find(|e| e.0 == b).map(|e| e.1));
    let mut summary = RunSummary {
        dir: out.to_path_buf(),
        overrides: BTreeMap::new(),
        metric: train_cfg.metric,
        best_valid,
        best_epoch,
        test_mrr: None,
        test_auc_pr: None,
        status: format!("{:?}", outcome.status),
    };
    if !kg.test().is_empty() {
        let mut report = rank_split(&outcome.best, &kg, Split::Test, &EvalOptions::default())?;
        if train_cfg.metric == StopMetric::AucPr {
            report.auc_pr = Some(countries_auc_pr(&outcome.best, &kg, Split::Test)?);
        }
        summary.test_mrr = Some(report.mrr());
        summary.test_auc_pr = report.auc_pr;
        let path = out.join("report_test.json");
        write_file(&path, &report.to_json(false))?;
        manifest.artifact("report", &path);
        println!("{report}");
    }
    if let TrainStatus::Diverged(msg) = &outcome.status {
        manifest.status = format!("diverged: {msg}");
    }
    manifest.write(out)?;
    match outcome.status {
        TrainStatus::Diverged(msg) => Err(CliError::other(format!(
            "training diverged ({msg}); last good checkpoint kept at {}",
            ckpt.display()
        ))),
        _ => Ok(summary),
    }
}

pub fn train(g: &GlobalArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let s = train_run(&cfg, g.config.as_deref(), &g.out)?;
    if let (Some(v), Some(e)) = (s.best_valid, s.best_epoch) {
        println!("best valid {} {v:.4} at epoch {e}", s.metric);
    }
    println!("artifacts in {}", g.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Include per-triple ranks in the report file.
    #[arg(long)]
    pub per_triple: bool,
    /// Also report Countries AUC-PR over `locatedIn` region queries.
    #[arg(long)]
    pub countries: bool,
    #[arg(long, default_value = "optimistic")]
    pub tie: TieMode,
    /// Raw instead of filtered ranks.
    #[arg(long)]
    pub raw: bool,
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> CliResult<()> {
    let ck = read_checkpoint(&a.checkpoint).map_err(|e| match e {
        kgelab::Error::Io { .. } => CliError::data(e.to_string()),
        other => other.into(),
    })?;
    let dataset = match (&a.dataset, ck.meta.raw(DATASET_KEY)) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(CliError::config("checkpoint records no dataset; pass --dataset")),
    };
    let mut kg = load(&dataset)?;
    if ck.meta.get_or("reciprocal", false)? {
        kg = kg.add_reciprocals()?;
    }
    if kg.vocab().hash() != ck.vocab_hash {
        return Err(CliError::mismatch(format!(
            "checkpoint {} was trained on a different vocabulary than {}",
            a.checkpoint.display(),
            dataset.display()
        )));
    }
    let opts = EvalOptions {
        tie: a.tie,
        filtered: !a.raw,
        ..EvalOptions::default()
    };
    let mut report = rank_split(&ck.params, &kg, a.split, &opts)?;
    if a.countries {
        report.auc_pr = Some(countries_auc_pr(&ck.params, &kg, a.split)?);
    }
    println!("{report}");
    let path = g.out.join(format!("report_{}.json", a.split));
    write_file(&path, &report.to_json(a.per_triple))?;
    let mut m = RunManifest::new("evaluate", g.config.as_deref(), 0);
    m.resolved = BTreeMap::from([
        ("checkpoint".into(), a.checkpoint.display().to_string()),
        ("split".into(), a.split.to_string()),
        ("per_triple".into(), a.per_triple.to_string()),
        ("countries".into(), a.countries.to_string()),
        ("tie".into(), a.tie.to_string()),
        ("filtered".into(), (!a.raw).to_string()),
    ]);
    m.dataset = Some(dataset);
    m.dataset_checksum = Some(kg.checksum());
    m.artifact("report", &path);
    m.write(&g.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Relations with fewer train triples never form rules.
    #[arg(long, default_value_t = 2)]
    pub min_support: usize,
}

pub fn audit(g: &GlobalArgs, a: &AuditArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let seed = seed_of(&cfg)?;
    let dataset = dataset_dir(a.dataset.as_ref(), &cfg)?;
    let kg = load(&dataset)?;
    let rules = detect_with(
        &kg,
        &DetectOptions {
            min_support: a.min_support,
            threshold: None,
        },
    )?;
    let leakage = leakage_with(&rules, &kg);
    print!("{leakage}");
    let mut m = RunManifest::new("audit", g.config.as_deref(), seed);
    m.resolved = BTreeMap::from([("min_support".into(), a.min_support.to_string()), ("seed".into(), seed.to_string())]);
    m.dataset = Some(dataset);
    m.dataset_checksum = Some(kg.checksum());
    let rules_path = g.out.join("rules.tsv");
    write_file(&rules_path, &rules.to_tsv(kg.vocab()))?;
    m.artifact("rules", &rules_path);
    let leak_path = g.out.join("leakage.json");
    write_file(&leak_path, &to_json(&leakage))?;
    m.artifact("leakage", &leak_path);
    println!("detected pairs {}", rules.len());
    if !kg.test().is_empty() {
        let inv = evaluate_inverse_model(&rules, &kg, Split::Test, seed)?;
        println!("{inv}");
        let path = g.out.join("inverse_model.json");
        write_file(&path, &to_json(&inv))?;
        m.artifact("inverse_model", &path);
    }
    m.write(&g.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = kgelab::graph::DAMPING)]
    pub damping: f64,
    #[arg(long, default_value_t = kgelab::graph::TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = kgelab::graph::MAX_ITER)]
    pub max_iter: usize,
}

/// Entities printed one per line when the graph is at most this large.
const PRINT_LIMIT: usize = 50;

pub fn analyze(g: &GlobalArgs, a: &AnalyzeArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let dataset = dataset_dir(a.dataset.as_ref(), &cfg)?;
    let kg = load(&dataset)?;
    let report = pagerank(&kg, a.damping, a.tol, a.max_iter)?;
    println!("{report}");
    let vocab = kg.vocab();
    if kg.n_entities() <= PRINT_LIMIT {
        for (e, v) in report.pagerank.iter().enumerate() {
            println!("{}\t{v:.6}", vocab.entity(e));
        }
    }
    let mut m = RunManifest::new("analyze", g.config.as_deref(), 0);
    m.resolved = BTreeMap::from([
        ("damping".into(), a.damping.to_string()),
        ("tol".into(), a.tol.to_string()),
        ("max_iter".into(), a.max_iter.to_string()),
    ]);
    m.dataset = Some(dataset);
    m.dataset_checksum = Some(kg.checksum());
    let pr: String = report
        .pagerank
        .iter()
        .enumerate()
        .map(|(e, v)| format!("{}\t{v:.12e}\n", vocab.entity(e)))
        .collect();
    let pr_path = g.out.join("pagerank.tsv");
    write_file(&pr_path, &pr)?;
    m.artifact("pagerank", &pr_path);
    let indeg: String = relation_indegree(&kg)
        .iter()
        .map(|(&(o, r), c)| format!("{}\t{}\t{c}\n", vocab.entity(o), vocab.relation(r)))
        .collect();
    let in_path = g.out.join("indegree.tsv");
    write_file(&in_path, &indeg)?;
    m.artifact("indegree", &in_path);
    let path = g.out.join("centrality.json");
    write_file(&path, &to_json(&report))?;
    m.artifact("centrality", &path);
    m.write(&g.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// `robust`, `drop-high` or `drop-low`.
    #[arg(long, default_value = "robust")]
    pub mode: String,
    /// Indegree quantile for the drop-high/drop-low variants.
    #[arg(long, default_value_t = 0.9)]
    pub quantile: f64,
    /// What to do with self-inverse (symmetric) relations.
    #[arg(long, default_value = "drop")]
    pub symmetric: SymmetricPolicy,
    #[arg(long, default_value_t = 2)]
    pub min_support: usize,
}

pub fn derive(g: &GlobalArgs, a: &DeriveArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let dataset = dataset_dir(a.dataset.as_ref(), &cfg)?;
    let kg = load(&dataset)?;
    let (out, audit) = if a.mode == "robust" {
        let rules = detect_with(
            &kg,
            &DetectOptions {
                min_support: a.min_support,
                threshold: None,
            },
        )?;
        derive_robust_dataset(&kg, &rules, a.symmetric)?
    } else {
        let mode: IndegreeMode = a.mode.parse()?;
        derive_indegree_variant(&kg, mode, a.quantile)?
    };
    println!("{audit}");
    let mut m = RunManifest::new("derive", g.config.as_deref(), 0);
    m.resolved = BTreeMap::from([
        ("mode".into(), a.mode.clone()),
        ("quantile".into(), a.quantile.to_string()),
        ("symmetric".into(), a.symmetric.to_string()),
        ("min_support".into(), a.min_support.to_string()),
    ]);
    m.dataset = Some(dataset);
    m.dataset_checksum = Some(kg.checksum());
    for p in write_dataset(&out, &g.out)? {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        m.artifact(&name, &p);
    }
    let txt = g.out.join("audit.txt");
    write_file(&txt, &format!("{audit}\n"))?;
    m.artifact("audit", &txt);
    let json = g.out.join("audit.json");
    write_file(&json, &to_json(&audit))?;
    m.artifact("audit_json", &json);
    m.write(&g.out)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Cross product of the `grid.KEY=v1,v2` entries, in key order.
fn grid(cfg: &ConfigMap) -> CliResult<(ConfigMap, Vec<Vec<(String, String)>>)> {
    let mut base = ConfigMap::new();
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (k, v) in cfg.iter() {
        match k.strip_prefix(GRID_PREFIX) {
            Some(key) => {
                let values: Vec<String> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
                if values.is_empty() {
                    return Err(CliError::config(format!("grid `{key}` lists no values")));
                }
                axes.push((key.to_string(), values));
            }
            None => base.set(k, v),
        }
    }
    if axes.is_empty() {
        return Err(CliError::config("sweep grid is empty (add `grid.KEY=v1,v2` entries)"));
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    Ok((base, combos))
}

pub fn sweep(g: &GlobalArgs, a: &SweepArgs) -> CliResult<()> {
    let cfg = load_config(g)?;
    let (base, combos) = grid(&cfg)?;
    let known = train_keys();
    base.check_known(&known)?;
    let runs: Vec<ConfigMap> = combos
        .iter()
        .map(|c| {
            let mut run = base.clone();
            for (k, v) in c {
                run.set(k, v);
            }
            run
        })
        .collect();
    for r in &runs {
        r.check_known(&known)?;
    }
    log::info!("sweep: {} runs", runs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, CliResult<RunSummary>)>> = Mutex::new(Vec::new());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(run) = runs.get(i) else { break };
        let dir = g.out.join("runs").join(config_hash(run));
        let mut r = train_run(run, g.config.as_deref(), &dir);
        if let Ok(s) = &mut r {
            s.overrides = combos[i].iter().cloned().collect();
        }
        results.lock().unwrap().push((i, r));
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, runs.len()) {
            s.spawn(worker);
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|r| r.0);
    let mut summaries = Vec::new();
    for (_, r) in results {
        summaries.push(r?);
    }
    let mut ranked: Vec<&RunSummary> = summaries.iter().collect();
    ranked.sort_by(|x, y| {
        let key = |s: &RunSummary| s.best_valid.unwrap_or(f64::NEG_INFINITY);
        key(y).total_cmp(&key(x))
    });
    for s in &ranked {
        let o: Vec<String> = s.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!(
            "{:<40} valid {} {}",
            o.join(" "),
            s.metric,
            s.best_valid.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    let winner = ranked[0];
    let o: Vec<String> = winner.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("winner: {} ({})", o.join(" "), winner.dir.display());
    let mut m = RunManifest::new("sweep", g.config.as_deref(), seed_of(&base)?);
    m.resolved = cfg.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    for s in &summaries {
        m.artifact(&format!("run_{}", s.dir.file_name().unwrap().to_string_lossy()), &s.dir);
    }
    let path = g.out.join("sweep.json");
    write_file(&path, &to_json(&summaries))?;
    m.artifact("summary", &path);
    m.write(&g.out)?;
    Ok(())
}
