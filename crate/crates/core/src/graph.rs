//! Centrality and indegree statistics, and derivation of leakage-free and
//! indegree-filtered dataset variants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{KnowledgeGraph, Split, Triple};
use crate::error::{Error, Result};
use crate::inverse::{detect_with, DetectOptions, InverseRuleSet};
use crate::par::*;

pub const DAMPING: f64 = 0.85;
pub const TOLERANCE: f64 = 1e-10;
pub const MAX_ITER: usize = 200;

#[derive(Clone, Debug, Serialize)]
pub struct CentralityReport {
    pub pagerank: Vec<f64>,
    /// Mean PageRank over the distinct entities of the test split.
    pub mean_test_pagerank: f64,
    /// Mean over the subject and object slots of every test triple.
    pub mean_test_pagerank_by_occurrence: f64,
    pub max_pagerank: f64,
    pub damping: f64,
    pub iterations: usize,
    /// L1 change of the last iteration.
    pub residual: f64,
    pub converged: bool,
    pub indegree: IndegreeSummary,
}

impl fmt::Display for CentralityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "pagerank: damping {}, {} iterations, residual {:.3e}{}",
            self.damping,
            self.iterations,
            self.residual,
            if self.converged { "" } else { " (not converged)" }
        )?;
        writeln!(f, "mean test pagerank  {:.4}e-3", 1e3 * self.mean_test_pagerank)?;
        writeln!(f, "  by occurrence     {:.4}e-3", 1e3 * self.mean_test_pagerank_by_occurrence)?;
        writeln!(f, "max pagerank        {:.4}e-3", 1e3 * self.max_pagerank)?;
        write!(f, "{}", self.indegree)
    }
}

/// Power iteration on the collapsed directed graph `s → o` over all splits.
pub fn pagerank(kg: &KnowledgeGraph, damping: f64, tol: f64, max_iter: usize) -> Result<CentralityReport> {
    if !(damping > 0.0 && damping < 1.0) {
        return Err(Error::config(format!("damping must lie in (0, 1), got {damping}")));
    }
    let n = kg.n_entities();
    if n == 0 {
        return Err(Error::data("graph has no entities"));
    }
    let edges: BTreeSet<(usize, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| kg.base_triples(s))
        .map(|t| (t.s, t.o))
        .collect();
    let (pr, iterations, residual) = power_iteration(n, &edges, damping, tol, max_iter);
    let test_nodes: BTreeSet<usize> = kg.base_triples(Split::Test).iter().flat_map(|t| [t.s, t.o]).collect();
    let mean_test_pagerank = if test_nodes.is_empty() {
        0.0
    } else {
        test_nodes.iter().map(|&e| pr[e]).sum::<f64>() / test_nodes.len() as f64
    };
    let test = kg.base_triples(Split::Test);
    let mean_test_pagerank_by_occurrence = if test.is_empty() {
        0.0
    } else {
        test.iter().map(|t| pr[t.s] + pr[t.o]).sum::<f64>() / (2 * test.len()) as f64
    };
    Ok(CentralityReport {
        mean_test_pagerank_by_occurrence,
        max_pagerank: pr.iter().copied().fold(0.0, f64::max),
        pagerank: pr,
        mean_test_pagerank,
        damping,
        iterations,
        residual,
        converged: residual < tol,
        indegree: IndegreeSummary::from_counts(&relation_indegree(kg)),
    })
}

/// Returns `(ranks, iterations, residual)`.
pub fn power_iteration(n: usize, edges: &BTreeSet<(usize, usize)>, damping: f64, tol: f64, max_iter: usize) -> (Vec<f64>, usize, f64) {
    let mut out_deg = vec![0usize; n];
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, o) in edges {
        out_deg[s] += 1;
        incoming[o].push(s);
    }
    let mut pr = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter && residual >= tol {
        let dangling: f64 = (0..n).filter(|&i| out_deg[i] == 0).map(|i| pr[i]).sum();
        let base = (1.0 - damping) / n as f64 + damping * dangling / n as f64;
        let next: Vec<f64> = incoming
            .par_iter()
            .map(|ins| base + damping * ins.iter().map(|&i| pr[i] / out_deg[i] as f64).sum::<f64>())
            .collect();
        residual = next.iter().zip(&pr).map(|(a, b)| (a - b).abs()).sum();
        pr = next;
        iterations += 1;
    }
    (pr, iterations, residual)
}

/// Train-split counts of `(·, r, o)` keyed by `(o, r)`.
pub fn relation_indegree(kg: &KnowledgeGraph) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for t in kg.base_triples(Split::Train) {
        *m.entry((t.o, t.r)).or_insert(0) += 1;
    }
    m
}

/// Largest relation-specific indegree of each entity (0 if never an object).
pub fn max_relation_indegree(kg: &KnowledgeGraph) -> Vec<usize> {
    let mut out = vec![0; kg.n_entities()];
    for ((o, _), c) in relation_indegree(kg) {
        out[o] = out[o].max(c);
    }
    out
}

/// Mean over the non-zero `(o, r)` indegrees.
pub fn mean_relation_indegree(kg: &KnowledgeGraph) -> f64 {
    let m = relation_indegree(kg);
    if m.is_empty() {
        return 0.0;
    }
    m.values().sum::<usize>() as f64 / m.len() as f64
}

/// Nearest-rank quantile of `values` (`q` in `(0, 1]`).
pub fn quantile(values: &[usize], q: f64) -> usize {
    let mut v = values.to_vec();
    v.sort_unstable();
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IndegreeSummary {
    pub pairs: usize,
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
    pub max: usize,
}

impl IndegreeSummary {
    pub fn from_counts(m: &BTreeMap<(usize, usize), usize>) -> Self {
        if m.is_empty() {
            return Self::default();
        }
        let v: Vec<usize> = m.values().copied().collect();
        Self {
            pairs: v.len(),
            mean: v.iter().sum::<usize>() as f64 / v.len() as f64,
            p50: quantile(&v, 0.5),
            p90: quantile(&v, 0.9),
            p99: quantile(&v, 0.99),
            max: *v.iter().max().unwrap(),
        }
    }
}

impl fmt::Display for IndegreeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "relation indegree: {} (o, r) pairs, mean {:.3}, p50 {}, p90 {}, p99 {}, max {}",
            self.pairs, self.mean, self.p50, self.p90, self.p99, self.max
        )
    }
}

/// What to do with a relation detected as its own inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetricPolicy {
    /// Remove the relation like any other inverse pair.
    Drop,
    /// Leave it in place; the output can still contain self-inverse rules.
    Keep,
}

impl FromStr for SymmetricPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(Self::Drop),
            "keep" => Ok(Self::Keep),
            other => Err(Error::config(format!("unknown symmetric policy `{other}`"))),
        }
    }
}

impl fmt::Display for SymmetricPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Drop => "drop",
            Self::Keep => "keep",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DroppedRelation {
    pub relation: String,
    /// The relation it was paired with (itself for symmetric ones).
    pub partner: String,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DerivationAudit {
    pub operation: String,
    pub parameters: BTreeMap<String, String>,
    pub dropped_relations: Vec<DroppedRelation>,
    pub removed_entities: usize,
    pub triples_before: [usize; 3],
    pub triples_after: [usize; 3],
    pub relations_after: usize,
    pub entities_after: usize,
}

impl fmt::Display for DerivationAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "operation   {}", self.operation)?;
        for (k, v) in &self.parameters {
            writeln!(f, "param       {k}={v}")?;
        }
        for d in &self.dropped_relations {
            writeln!(
                f,
                "dropped     {} (paired with {}): train {} valid {} test {}",
                d.relation, d.partner, d.train, d.valid, d.test
            )?;
        }
        writeln!(f, "removed_entities {}", self.removed_entities)?;
        let [a, b, c] = self.triples_before;
        writeln!(f, "before      train {a} valid {b} test {c}")?;
        let [a, b, c] = self.triples_after;
        writeln!(f, "after       train {a} valid {b} test {c}")?;
        write!(f, "result      {} entities, {} relations", self.entities_after, self.relations_after)
    }
}

fn counts(kg: &KnowledgeGraph) -> [usize; 3] {
    Split::ALL.map(|s| kg.base_triples(s).len())
}

/// Marks the victim of every pair in `rules` not already broken.
fn mark_pairs(rules: &InverseRuleSet, train: &[usize], policy: SymmetricPolicy, dropped: &mut BTreeMap<usize, usize>) {
    let mut pairs: Vec<(usize, usize)> = rules
        .rules
        .iter()
        .map(|p| (p.r1.min(p.r2), p.r1.max(p.r2)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    for (a, b) in pairs {
        if a == b {
            if policy == SymmetricPolicy::Drop {
                dropped.insert(a, a);
            }
            continue;
        }
        // a pair is already broken if either side is gone
        if dropped.contains_key(&a) || dropped.contains_key(&b) {
            continue;
        }
        let (victim, keeper) = if train[a] > train[b] { (b, a) } else if train[b] > train[a] { (a, b) } else { (b, a) };
        dropped.insert(victim, keeper);
    }
}

fn per_relation(kg: &KnowledgeGraph, split: Split) -> Vec<usize> {
    let mut c = vec![0; kg.n_base_relations()];
    for t in kg.base_triples(split) {
        c[t.r] += 1;
    }
    c
}

/// Removes, for every detected pair, the relation with fewer train triples
/// (ties: the later id) from all splits.
///
/// Dropping relations shifts the split fractions and hence the detection
/// threshold, so rules are re-mined on the result (formula threshold, same
/// minimum support) and the pass repeats until none remain. Under
/// [`SymmetricPolicy::Keep`] self-pairs are ignored when deciding to repeat.
pub fn derive_robust_dataset(
    kg: &KnowledgeGraph,
    rules: &InverseRuleSet,
    policy: SymmetricPolicy,
) -> Result<(KnowledgeGraph, DerivationAudit)> {
    if kg.is_reciprocal() {
        return Err(Error::config("derive operates on the base graph, not a reciprocal one"));
    }
    let train = per_relation(kg, Split::Train);
    let valid = per_relation(kg, Split::Valid);
    let test = per_relation(kg, Split::Test);
    let mut dropped: BTreeMap<usize, usize> = BTreeMap::new();
    let opts = DetectOptions {
        min_support: rules.min_support,
        threshold: None,
    };
    let mut current = rules.clone();
    let mut rounds = 0;
    let filtered = loop {
        rounds += 1;
        let before = dropped.len();
        mark_pairs(&current, &train, policy, &mut dropped);
        if dropped.len() == kg.n_base_relations() {
            return Err(Error::data("every relation would be dropped"));
        }
        let keep = |t: &&Triple| !dropped.contains_key(&t.r);
        let filter = |s: Split| kg.base_triples(s).iter().filter(keep).copied().collect::<Vec<_>>();
        let splits = (filter(Split::Train), filter(Split::Valid), filter(Split::Test));
        if splits.0.is_empty() || dropped.len() == before {
            break splits;
        }
        let g = KnowledgeGraph::new(kg.vocab().clone(), splits.0.clone(), splits.1.clone(), splits.2.clone())?;
        current = detect_with(&g, &opts)?;
        let pending = current.rules.iter().any(|p| p.r1 != p.r2 || policy == SymmetricPolicy::Drop);
        if !pending {
            break splits;
        }
    };
    let out = KnowledgeGraph::compacted(kg.vocab(), &filtered.0, &filtered.1, &filtered.2)?;
    let vocab = kg.vocab();
    let audit = DerivationAudit {
        operation: "robust".into(),
        parameters: BTreeMap::from([
            ("symmetric".to_string(), policy.to_string()),
            ("threshold".to_string(), format!("{:.6}", rules.threshold)),
            ("rules".to_string(), rules.len().to_string()),
            ("rounds".to_string(), rounds.to_string()),
        ]),
        dropped_relations: dropped
            .iter()
            .map(|(&r, &p)| DroppedRelation {
                relation: vocab.relation(r).to_string(),
                partner: vocab.relation(p).to_string(),
                train: train[r],
                valid: valid[r],
                test: test[r],
            })
            .collect(),
        removed_entities: kg.n_entities() - out.n_entities(),
        triples_before: counts(kg),
        triples_after: counts(&out),
        relations_after: out.n_relations(),
        entities_after: out.n_entities(),
    };
    Ok((out, audit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndegreeMode {
    /// Remove entities above the quantile.
    DropHigh,
    /// Remove entities below the quantile.
    DropLow,
}

impl FromStr for IndegreeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop-high" | "high" => Ok(Self::DropHigh),
            "drop-low" | "low" => Ok(Self::DropLow),
            other => Err(Error::config(format!("unknown indegree mode `{other}`"))),
        }
    }
}

impl fmt::Display for IndegreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DropHigh => "drop-high",
            Self::DropLow => "drop-low",
        })
    }
}

/// Removes entities whose maximum relation-specific indegree lies above
/// (`DropHigh`) or below (`DropLow`) the `q`-quantile over all entities,
/// with every incident triple, then drops valid/test triples whose entities
/// no longer occur in train.
pub fn derive_indegree_variant(kg: &KnowledgeGraph, mode: IndegreeMode, q: f64) -> Result<(KnowledgeGraph, DerivationAudit)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("quantile must lie in (0, 1], got {q}")));
    }
    if kg.is_reciprocal() {
        return Err(Error::config("derive operates on the base graph, not a reciprocal one"));
    }
    let deg = max_relation_indegree(kg);
    let cut = quantile(&deg, q);
    let removed: Vec<bool> = deg
        .iter()
        .map(|&d| match mode {
            IndegreeMode::DropHigh => d > cut,
            IndegreeMode::DropLow => d < cut,
        })
        .collect();
    let alive = |t: &Triple| !removed[t.s] && !removed[t.o];
    let train: Vec<Triple> = kg.base_triples(Split::Train).iter().copied().filter(alive).collect();
    let mut in_train = vec![false; kg.n_entities()];
    let mut rel_in_train = vec![false; kg.n_base_relations()];
    for t in &train {
        in_train[t.s] = true;
        in_train[t.o] = true;
        rel_in_train[t.r] = true;
    }
    let held = |s: Split| -> Vec<Triple> {
        kg.base_triples(s)
            .iter()
            .copied()
            .filter(|t| alive(t) && in_train[t.s] && in_train[t.o] && rel_in_train[t.r])
            .collect()
    };
    if train.is_empty() {
        return Err(Error::data("indegree filter removed every train triple"));
    }
    let out = KnowledgeGraph::compacted(kg.vocab(), &train, &held(Split::Valid), &held(Split::Test))?;
    let audit = DerivationAudit {
        operation: "indegree".into(),
        parameters: BTreeMap::from([
            ("mode".to_string(), mode.to_string()),
            ("quantile".to_string(), q.to_string()),
            ("cut".to_string(), cut.to_string()),
        ]),
        dropped_relations: Vec::new(),
        removed_entities: kg.n_entities() - out.n_entities(),
        triples_before: counts(kg),
        triples_after: counts(&out),
        relations_after: out.n_relations(),
        entities_after: out.n_entities(),
    };
    Ok((out, audit))
}
