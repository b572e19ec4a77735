//! Losses and the 1-N / 1-1 training loops with early stopping.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::Serialize;

use crate::config::ConfigMap;
use crate::data::{KnowledgeGraph, Split, Triple};
use crate::error::{Error, Result};
use crate::eval::{countries_auc_pr, evaluate, EvalOptions, Metrics};
use crate::models::{ModelParams, Table};
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{l2_renormalize_rows, Mode, OptimizerKind, OptimizerState};

/// `t(1 − ε) + ε/n`.
pub fn smooth_label(t: f64, eps: f64, n: usize) -> f64 {
    t * (1.0 - eps) + eps / n as f64
}

/// Mean binary cross-entropy of probabilities `p` against targets `t`.
pub fn bce_loss(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(t)
        .map(|(&p, &t)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        .sum::<f64>()
        / n
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
/// computed stably from the logits, with its gradient wrt the logits
/// (`(p − t) / len`).
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            // −[t log σ(x) + (1 − t) log(1 − σ(x))]
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            (sigmoid_scalar(x) - t) / n
        })
        .collect();
    (loss / n, grad)
}

/// Mean of `max(0, γ + neg − pos)` with gradients wrt `pos` and `neg`.
pub fn margin_ranking_loss(pos: &[f64], neg: &[f64], gamma: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = pos.len() as f64;
    let mut loss = 0.0;
    let mut gp = vec![0.0; pos.len()];
    let mut gn = vec![0.0; neg.len()];
    for i in 0..pos.len() {
        let v = gamma + neg[i] - pos[i];
        if v > 0.0 {
            loss += v;
            gp[i] = -1.0 / n;
            gn[i] = 1.0 / n;
        }
    }
    (loss / n, gp, gn)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    #[serde(rename = "1-n")]
    OneToN,
    #[serde(rename = "1-1")]
    OneToOne,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1-n" | "1-N" | "one_to_n" => Ok(Self::OneToN),
            "1-1" | "one_to_one" => Ok(Self::OneToOne),
            other => Err(Error::config(format!("unknown regime `{other}`"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::OneToN => "1-n",
            Self::OneToOne => "1-1",
        })
    }
}

/// Validation statistic used for model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    Mrr,
    /// Countries AUC-PR over `locatedIn` region queries.
    AucPr,
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrr" => Ok(Self::Mrr),
            "auc_pr" | "auc-pr" => Ok(Self::AucPr),
            other => Err(Error::config(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mrr => "mrr",
            Self::AucPr => "auc_pr",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every: usize,
    /// Non-improving evaluations tolerated before stopping.
    pub patience: usize,
    pub label_smoothing: f64,
    pub optimizer: OptimizerKind,
    /// Fraction of negative columns kept per 1-N batch; 1.0 scores all.
    pub rho: f64,
    pub margin: f64,
    pub negatives: usize,
    pub seed: u64,
    /// Iterate 1-N batches over training triples instead of unique `(s, r)`.
    pub per_triple: bool,
    pub metric: StopMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::OneToN,
            batch_size: 128,
            lr: 0.001,
            epochs: 100,
            eval_every: 3,
            patience: 5,
            label_smoothing: 0.1,
            optimizer: OptimizerKind::Adam,
            rho: 1.0,
            margin: 1.0,
            negatives: 1,
            seed: 0,
            per_triple: false,
            metric: StopMetric::Mrr,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "regime",
        "batch_size",
        "lr",
        "epochs",
        "eval_every",
        "patience",
        "label_smoothing",
        "optimizer",
        "rho",
        "margin",
        "negatives",
        "seed",
        "per_triple",
        "metric",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.regime == Regime::OneToOne && !(self.margin > 0.0) {
            return Err(Error::config("margin must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        Ok(())
    }

    pub fn to_config_map(&self) -> ConfigMap {
        let mut c = ConfigMap::new();
        c.set("regime", self.regime);
        c.set("batch_size", self.batch_size);
        c.set("lr", self.lr);
        c.set("epochs", self.epochs);
        c.set("eval_every", self.eval_every);
        c.set("patience", self.patience);
        c.set("label_smoothing", self.label_smoothing);
        c.set("optimizer", self.optimizer);
        c.set("rho", self.rho);
        c.set("margin", self.margin);
        c.set("negatives", self.negatives);
        c.set("seed", self.seed);
        c.set("per_triple", self.per_triple);
        c.set("metric", self.metric);
        c
    }

    /// Reads the training keys; 1-1 runs default to AdaGrad.
    pub fn from_config_map(c: &ConfigMap) -> Result<Self> {
        let d = Self::default();
        let regime = c.get_or("regime", d.regime)?;
        let optimizer_default = match regime {
            Regime::OneToN => OptimizerKind::Adam,
            Regime::OneToOne => OptimizerKind::AdaGrad,
        };
        let cfg = Self {
            regime,
            batch_size: c.get_or("batch_size", d.batch_size)?,
            lr: c.get_or("lr", d.lr)?,
            epochs: c.get_or("epochs", d.epochs)?,
            eval_every: c.get_or("eval_every", d.eval_every)?,
            patience: c.get_or("patience", d.patience)?,
            label_smoothing: c.get_or("label_smoothing", d.label_smoothing)?,
            optimizer: c.get_or("optimizer", optimizer_default)?,
            rho: c.get_or("rho", d.rho)?,
            margin: c.get_or("margin", d.margin)?,
            negatives: c.get_or("negatives", d.negatives)?,
            seed: c.get_or("seed", d.seed)?,
            per_triple: c.get_or("per_triple", d.per_triple)?,
            metric: c.get_or("metric", d.metric)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Config {
        values: std::collections::BTreeMap<String, String>,
    },
    Epoch {
        epoch: usize,
        loss: f64,
        steps: usize,
        /// Columns scored per query (1-N) or pairs per epoch (1-1).
        columns: usize,
        seconds: f64,
    },
    Eval {
        epoch: usize,
        metric: StopMetric,
        value: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        ranking: Option<Metrics>,
        best: bool,
        seconds: f64,
    },
    Stop {
        reason: String,
        best_epoch: Option<usize>,
        best_value: Option<f64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    /// `(epoch, value)` of every validation evaluation.
    pub fn evaluations(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { epoch, value, .. } => Some((*epoch, *value)),
                _ => None,
            })
            .collect()
    }

    /// Epoch of the latest evaluation with the highest validation value.
    pub fn best_epoch(&self) -> Option<usize> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Eval { epoch, best: true, .. } => Some(*epoch),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// Loss became non-finite; the best parameters are from the last good
    /// evaluation (or the last finished epoch).
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub best: ModelParams,
    pub status: TrainStatus,
}

struct EarlyStopper {
    best: Option<(usize, f64)>,
    bad: usize,
    patience: usize,
}

impl EarlyStopper {
    /// Records an evaluation; returns whether it becomes the best snapshot.
    /// A tie with the best replaces it but still counts against patience: a
    /// saturated metric (AUC-PR of 1 on a small validation split) would
    /// otherwise freeze the first, least trained snapshot that reached it.
    fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, b)) if value < b || value.is_nan() => {
                self.bad += 1;
                false
            }
            Some((_, b)) if value == b => {
                self.best = Some((epoch, value));
                self.bad += 1;
                true
            }
            _ => {
                self.best = Some((epoch, value));
                self.bad = 0;
                true
            }
        }
    }

    fn exhausted(&self) -> bool {
        self.bad > self.patience
    }
}

fn validation_value(params: &ModelParams, kg: &KnowledgeGraph, metric: StopMetric) -> Result<(f64, Option<Metrics>)> {
    match metric {
        StopMetric::Mrr => {
            let report = evaluate(params, kg, Split::Valid, &EvalOptions::default())?;
            Ok((report.mrr(), Some(report.metrics)))
        }
        StopMetric::AucPr => Ok((countries_auc_pr(params, kg, Split::Valid)?, None)),
    }
}

/// Shared epoch/evaluation/early-stopping driver. `epoch_fn` runs one epoch
/// and returns `(mean loss, steps, columns)`.
fn drive<F>(kg: &KnowledgeGraph, params: &mut ModelParams, cfg: &TrainConfig, mut epoch_fn: F) -> Result<TrainOutcome>
where
    F: FnMut(&mut ModelParams, usize) -> Result<(f64, usize, usize)>,
{
    let mut log = RunLog::default();
    let mut values = params.config.to_config_map();
    values.extend(&cfg.to_config_map());
    log.push(LogRecord::Config {
        values: values.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    });
    let has_valid = !kg.valid().is_empty();
    let mut stopper = EarlyStopper {
        best: None,
        bad: 0,
        patience: cfg.patience,
    };
    let mut best = params.clone();
    let mut status = TrainStatus::Completed;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (loss, steps, columns) = match epoch_fn(params, epoch) {
            Ok(v) => v,
            Err(Error::NonFinite { what, detail }) => {
                status = TrainStatus::Diverged(format!("epoch {epoch}: {what}: {detail}"));
                log::warn!("training diverged at epoch {epoch}: {what}: {detail}");
                break;
            }
            Err(e) => return Err(e),
        };
        log.push(LogRecord::Epoch {
            epoch,
            loss,
            steps,
            columns,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {loss:.6}");
        if !has_valid {
            best = params.clone();
            continue;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let start = Instant::now();
            let (value, ranking) = validation_value(params, kg, cfg.metric)?;
            let improved = stopper.observe(epoch, value);
            if improved {
                best = params.clone();
            }
            log::info!("epoch {epoch}: valid {} {value:.4}{}", cfg.metric, if improved { " *" } else { "" });
            log.push(LogRecord::Eval {
                epoch,
                metric: cfg.metric,
                value,
                ranking,
                best: improved,
                seconds: start.elapsed().as_secs_f64(),
            });
            if stopper.exhausted() {
                status = TrainStatus::EarlyStopped;
                break;
            }
        }
    }
    log.push(LogRecord::Stop {
        reason: match &status {
            TrainStatus::Completed => "max epochs".into(),
            TrainStatus::EarlyStopped => "patience exhausted".into(),
            TrainStatus::Diverged(m) => format!("diverged: {m}"),
        },
        best_epoch: stopper.best.map(|b| b.0),
        best_value: stopper.best.map(|b| b.1),
    });
    Ok(TrainOutcome { log, best, status })
}

fn optimizer_step(opt: &mut OptimizerState, params: &mut ModelParams) -> Result<()> {
    let mut named = params.parameters_mut();
    opt.step(&mut named)?;
    drop(named);
    params.zero_grad();
    Ok(())
}

/// Multi-label training with one `(s, r)` query per row scored against all
/// (or a sampled subset of) entities.
pub fn train_one_to_n(kg: &KnowledgeGraph, params: &mut ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !kg.is_reciprocal() {
        return Err(Error::config("1-N training needs reciprocal relations (add_reciprocals)"));
    }
    if kg.train().is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let mut rng = crate::rng_from_seed(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut queries: Vec<(usize, usize)> = if cfg.per_triple {
        kg.train().iter().map(|t| (t.s, t.r)).collect()
    } else {
        kg.train_index().queries().collect()
    };
    let n = kg.n_entities();
    let index = kg.train_index();
    drive(kg, params, cfg, |params, epoch| {
        queries.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        let mut col_count = 0;
        for (bi, batch) in queries.chunks(cfg.batch_size).enumerate() {
            let s: Vec<usize> = batch.iter().map(|q| q.0).collect();
            let r: Vec<usize> = batch.iter().map(|q| q.1).collect();
            let columns = (cfg.rho < 1.0).then(|| sample_columns(index, batch, n, cfg.rho, &mut rng));
            let c = columns.as_ref().map_or(n, Vec::len);
            // targets over the retained columns, smoothed by their count
            let mut targets = vec![0.0; batch.len() * c];
            for (i, &(qs, qr)) in batch.iter().enumerate() {
                let row = &mut targets[i * c..(i + 1) * c];
                match &columns {
                    None => {
                        for &o in index.objects(qs, qr) {
                            row[o] = 1.0;
                        }
                    }
                    Some(cols) => {
                        let objs = index.objects(qs, qr);
                        for (j, col) in cols.iter().enumerate() {
                            if objs.binary_search(col).is_ok() {
                                row[j] = 1.0;
                            }
                        }
                    }
                }
                for t in row.iter_mut() {
                    *t = smooth_label(*t, cfg.label_smoothing, c);
                }
            }
            let (logits, cache) = params.forward(&s, &r, columns.as_deref(), Mode::Train, &mut rng)?;
            let (loss, grad) = bce_with_logits(logits.data(), &targets);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    detail: format!("epoch {epoch}, batch {bi}: {loss}"),
                });
            }
            params.update_running_stats(&cache);
            params.backward(cache, grad)?;
            optimizer_step(&mut opt, params)?;
            total += loss;
            steps += 1;
            col_count = c;
        }
        Ok((total / steps.max(1) as f64, steps, col_count))
    })
}

/// All positive columns of the batch plus `⌈ρ·n⌉` distinct sampled
/// negatives, in ascending order.
fn sample_columns(
    index: &crate::data::TripleIndex,
    batch: &[(usize, usize)],
    n: usize,
    rho: f64,
    rng: &mut crate::Rng,
) -> Vec<usize> {
    let mut is_pos = vec![false; n];
    for &(s, r) in batch {
        for &o in index.objects(s, r) {
            is_pos[o] = true;
        }
    }
    let negatives: Vec<usize> = (0..n).filter(|&e| !is_pos[e]).collect();
    let want = ((rho * n as f64).ceil() as usize).min(negatives.len());
    let mut cols: Vec<usize> = (0..n).filter(|&e| is_pos[e]).collect();
    cols.extend(index::sample(rng, negatives.len(), want).into_iter().map(|i| negatives[i]));
    cols.sort_unstable();
    cols
}

/// Projects entity rows onto the unit sphere (jointly over real and
/// imaginary parts for complex tables).
pub fn renormalize_entities(params: &mut ModelParams) {
    match &mut params.entity {
        Table::Real(t) => l2_renormalize_rows(t),
        Table::Complex(c) => {
            let k = c.re.cols();
            let (re, im) = (c.re.data_mut(), c.im.data_mut());
            for (a, b) in re.chunks_mut(k).zip(im.chunks_mut(k)) {
                let norm = a.iter().chain(b.iter()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    a.iter_mut().chain(b.iter_mut()).for_each(|v| *v /= norm);
                }
            }
        }
    }
}

/// A uniformly corrupted copy of `t` (subject or object, each with
/// probability 1/2) that differs from `t`.
pub fn corrupt(t: &Triple, n_entities: usize, rng: &mut crate::Rng) -> Triple {
    assert!(n_entities > 1, "cannot corrupt with a single entity");
    loop {
        let e = rng.gen_range(0..n_entities);
        let c = if rng.gen_bool(0.5) {
            Triple::new(e, t.r, t.o)
        } else {
            Triple::new(t.s, t.r, e)
        };
        if c != *t {
            return c;
        }
    }
}

/// Pairwise margin training on individual triples with entity rows kept at
/// unit norm.
pub fn train_one_to_one(kg: &KnowledgeGraph, params: &mut ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if kg.train().is_empty() {
        return Err(Error::data("train split is empty"));
    }
    if kg.n_entities() < 2 {
        return Err(Error::data("need at least two entities to sample negatives"));
    }
    let mut rng = crate::rng_from_seed(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut triples: Vec<Triple> = kg.train().to_vec();
    let n = kg.n_entities();
    renormalize_entities(params);
    drive(kg, params, cfg, |params, epoch| {
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        let mut pairs = 0;
        for (bi, batch) in triples.chunks(cfg.batch_size).enumerate() {
            let mut pos = Vec::with_capacity(batch.len() * cfg.negatives);
            let mut neg = Vec::with_capacity(pos.capacity());
            for t in batch {
                for _ in 0..cfg.negatives.max(1) {
                    pos.push(*t);
                    neg.push(corrupt(t, n, &mut rng));
                }
            }
            let ps = params.triple_scores(&pos)?;
            let ns = params.triple_scores(&neg)?;
            let (loss, gp, gn) = margin_ranking_loss(&ps, &ns, cfg.margin);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    detail: format!("epoch {epoch}, batch {bi}: {loss}"),
                });
            }
            params.triple_backward(&pos, &gp)?;
            params.triple_backward(&neg, &gn)?;
            optimizer_step(&mut opt, params)?;
            renormalize_entities(params);
            total += loss;
            steps += 1;
            pairs += pos.len();
        }
        Ok((total / steps.max(1) as f64, steps, pairs))
    })
}

/// Dispatches on [`TrainConfig::regime`].
pub fn train(kg: &KnowledgeGraph, params: &mut ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.regime {
        Regime::OneToN => train_one_to_n(kg, params, cfg),
        Regime::OneToOne => train_one_to_one(kg, params, cfg),
    }
}
