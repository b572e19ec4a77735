//! Rule-based inverse-relation model: mine relation pairs where
//! `(s, r1, o)` implies `(o, r2, s)` and rank test triples by inverse
//! witnesses alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::Serialize;

use crate::data::{KnowledgeGraph, Split, Triple, TripleIndex, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{Metrics, RankPair, RankingReport, TieMode};
use crate::par::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InverseRule {
    pub r1: usize,
    pub r2: usize,
    /// Share of `r1` triples whose reverse appears under `r2`.
    pub freq_forward: f64,
    /// Share of `r2` triples whose reverse appears under `r1`.
    pub freq_backward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InverseRuleSet {
    /// Ordered pairs; `(r1, r2)` is present iff `(r2, r1)` is.
    pub rules: Vec<InverseRule>,
    pub threshold: f64,
    pub f_valid: f64,
    pub f_test: f64,
    pub min_support: usize,
}

#[derive(Clone, Debug)]
pub struct DetectOptions {
    /// Relations with fewer train triples never form rules.
    pub min_support: usize,
    /// Overrides `0.99 − (f_v + f_t)`.
    pub threshold: Option<f64>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            min_support: 2,
            threshold: None,
        }
    }
}

impl InverseRuleSet {
    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn contains(&self, r1: usize, r2: usize) -> bool {
        self.rules.iter().any(|p| p.r1 == r1 && p.r2 == r2)
    }

    /// `r2` partners of every `r1`.
    pub fn partners(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for p in &self.rules {
            out.entry(p.r1).or_default().push(p.r2);
        }
        out
    }

    /// One `r1 \t r2 \t freq_forward \t freq_backward` line per rule, with
    /// relation names.
    pub fn to_tsv(&self, vocab: &Vocabulary) -> String {
        self.rules
            .iter()
            .map(|p| {
                format!(
                    "{}\t{}\t{:.6}\t{:.6}\n",
                    vocab.relation(p.r1),
                    vocab.relation(p.r2),
                    p.freq_forward,
                    p.freq_backward
                )
            })
            .collect()
    }

    pub fn write_tsv(&self, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv(vocab)).map_err(|e| Error::io(path, e))
    }
}

/// Mines inverse pairs over the train split with the default options.
pub fn detect_inverse_relations(kg: &KnowledgeGraph) -> Result<InverseRuleSet> {
    detect_with(kg, &DetectOptions::default())
}

pub fn detect_with(kg: &KnowledgeGraph, opts: &DetectOptions) -> Result<InverseRuleSet> {
    let train = kg.base_triples(Split::Train);
    if train.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let n_r = kg.n_base_relations();
    let total = (train.len() + kg.base_triples(Split::Valid).len() + kg.base_triples(Split::Test).len()) as f64;
    let f_valid = kg.base_triples(Split::Valid).len() as f64 / total;
    let f_test = kg.base_triples(Split::Test).len() as f64 / total;
    let threshold = opts.threshold.unwrap_or(0.99 - (f_valid + f_test));

    let mut count = vec![0usize; n_r];
    let mut by_pair: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for t in train {
        count[t.r] += 1;
        by_pair.entry((t.s, t.o)).or_default().push(t.r);
    }
    for (r, &c) in count.iter().enumerate() {
        if c == 0 {
            log::warn!("relation `{}` has no train triples; skipped", kg.vocab().relation(r));
        }
    }
    // co[r1][r2] = #{(s, o) : (s, r1, o) ∧ (o, r2, s)}
    let co: Vec<Vec<usize>> = (0..n_r)
        .into_par_iter()
        .map(|r1| {
            let mut row = vec![0usize; n_r];
            for t in train.iter().filter(|t| t.r == r1) {
                if let Some(rs) = by_pair.get(&(t.o, t.s)) {
                    for &r2 in rs {
                        row[r2] += 1;
                    }
                }
            }
            row
        })
        .collect();

    let min = opts.min_support.max(1);
    let mut rules = Vec::new();
    for r1 in 0..n_r {
        for r2 in 0..n_r {
            if count[r1] < min || count[r2] < min || co[r1][r2] == 0 {
                continue;
            }
            let freq_forward = co[r1][r2] as f64 / count[r1] as f64;
            let freq_backward = co[r1][r2] as f64 / count[r2] as f64;
            if freq_forward >= threshold || freq_backward >= threshold {
                rules.push(InverseRule {
                    r1,
                    r2,
                    freq_forward,
                    freq_backward,
                });
            }
        }
    }
    Ok(InverseRuleSet {
        rules,
        threshold,
        f_valid,
        f_test,
        min_support: min,
    })
}

/// Everything the inverse model may look at: train and valid.
fn known_index(kg: &KnowledgeGraph) -> TripleIndex {
    TripleIndex::build(kg.base_triples(Split::Train).iter().chain(kg.base_triples(Split::Valid)))
}

/// Candidates `x` with an inverse witness for `(s, r, x)`, sorted.
fn object_matches(partners: &BTreeMap<usize, Vec<usize>>, known: &TripleIndex, s: usize, r: usize) -> Vec<usize> {
    let mut m: Vec<usize> = partners
        .get(&r)
        .into_iter()
        .flatten()
        .flat_map(|&r2| known.subjects(r2, s).iter().copied())
        .collect();
    m.sort_unstable();
    m.dedup();
    m
}

/// Candidates `x` with an inverse witness for `(x, r, o)`, sorted.
fn subject_matches(partners: &BTreeMap<usize, Vec<usize>>, known: &TripleIndex, r: usize, o: usize) -> Vec<usize> {
    let mut m: Vec<usize> = partners
        .get(&r)
        .into_iter()
        .flatten()
        .flat_map(|&r2| known.objects(o, r2).iter().copied())
        .collect();
    m.sort_unstable();
    m.dedup();
    m
}

/// Rank of `target` when the `k` matching candidates (after filtering)
/// occupy ranks `1..=k` in random order and the rest follow in random order.
fn draw_rank(matches: &[usize], target: usize, n_e: usize, rng: &mut crate::Rng) -> usize {
    let k = matches.len();
    if k == 0 {
        rng.gen_range(1..=n_e)
    } else if matches.binary_search(&target).is_ok() {
        rng.gen_range(1..=k)
    } else {
        rng.gen_range(k + 1..=n_e.max(k + 1))
    }
}

/// Filtered subject and object ranks of one test triple. `stream` selects an
/// independent random stream under `seed` so that ranks do not depend on
/// evaluation order.
pub fn inverse_model_rank(
    rules: &InverseRuleSet,
    kg: &KnowledgeGraph,
    t: &Triple,
    seed: u64,
    stream: u64,
) -> RankPair {
    let partners = rules.partners();
    let known = known_index(kg);
    rank_one(&partners, &known, kg, t, seed, stream)
}

fn rank_one(
    partners: &BTreeMap<usize, Vec<usize>>,
    known: &TripleIndex,
    kg: &KnowledgeGraph,
    t: &Triple,
    seed: u64,
    stream: u64,
) -> RankPair {
    let all = kg.all_index();
    let n_e = kg.n_entities();
    let mut rng = crate::rng_stream(seed, stream);
    // other known-true answers are not competitors
    let mut objs = object_matches(partners, known, t.s, t.r);
    objs.retain(|&x| x == t.o || !all.contains(&Triple::new(t.s, t.r, x)));
    let mut subs = subject_matches(partners, known, t.r, t.o);
    subs.retain(|&x| x == t.s || !all.contains(&Triple::new(x, t.r, t.o)));
    let rank_o = draw_rank(&objs, t.o, n_e, &mut rng);
    let rank_s = draw_rank(&subs, t.s, n_e, &mut rng);
    RankPair {
        s: t.s,
        r: t.r,
        o: t.o,
        rank_s,
        rank_o,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InverseEvaluation {
    pub seed: u64,
    pub threshold: f64,
    pub n_rules: usize,
    pub report: RankingReport,
}

impl fmt::Display for InverseEvaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "inverse model: {} rules, threshold {:.4}, seed {}", self.n_rules, self.threshold, self.seed)?;
        write!(f, "{}", self.report)
    }
}

/// Ranks every triple of `split` with the inverse model.
pub fn evaluate_inverse_model(rules: &InverseRuleSet, kg: &KnowledgeGraph, split: Split, seed: u64) -> Result<InverseEvaluation> {
    let triples = kg.base_triples(split);
    if triples.is_empty() {
        return Err(Error::data(format!("{split} split is empty")));
    }
    let partners = rules.partners();
    let known = known_index(kg);
    let ranks: Vec<RankPair> = (0..triples.len())
        .into_par_iter()
        .map(|i| rank_one(&partners, &known, kg, &triples[i], seed, i as u64))
        .collect();
    Ok(InverseEvaluation {
        seed,
        threshold: rules.threshold,
        n_rules: rules.len(),
        report: RankingReport {
            split: split.to_string(),
            filter: "filtered (train+valid+test)".into(),
            tie_mode: TieMode::Optimistic,
            subject_queries: "direct".into(),
            n_triples: ranks.len(),
            metrics: Metrics::from_ranks(&ranks),
            auc_pr: None,
            ranks,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationLeakage {
    pub relation: String,
    pub n_test: usize,
    pub n_leaked: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeakageReport {
    pub threshold: f64,
    pub n_rules: usize,
    pub n_test: usize,
    pub n_leaked: usize,
    /// Share of test triples with an inverse witness in train or valid.
    pub leakage: f64,
    pub per_relation: Vec<RelationLeakage>,
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "leakage {:.4} ({} of {} test triples, {} rules, threshold {:.4})",
            self.leakage, self.n_leaked, self.n_test, self.n_rules, self.threshold
        )?;
        for r in &self.per_relation {
            writeln!(f, "  {:<40} {:>6} / {:<6} {:.4}", r.relation, r.n_leaked, r.n_test, r.fraction)?;
        }
        Ok(())
    }
}

/// Mines rules on `kg` and measures how many test triples they expose.
pub fn leakage_report(kg: &KnowledgeGraph) -> Result<LeakageReport> {
    let rules = detect_inverse_relations(kg)?;
    Ok(leakage_with(&rules, kg))
}

pub fn leakage_with(rules: &InverseRuleSet, kg: &KnowledgeGraph) -> LeakageReport {
    let partners = rules.partners();
    let known = known_index(kg);
    let test = kg.base_triples(Split::Test);
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for t in test {
        let leaked = partners
            .get(&t.r)
            .is_some_and(|rs| rs.iter().any(|&r2| known.contains(&Triple::new(t.o, r2, t.s))));
        let e = per.entry(t.r).or_default();
        e.0 += 1;
        e.1 += leaked as usize;
    }
    let n_leaked = per.values().map(|v| v.1).sum();
    LeakageReport {
        threshold: rules.threshold,
        n_rules: rules.len(),
        n_test: test.len(),
        n_leaked,
        leakage: if test.is_empty() { 0.0 } else { n_leaked as f64 / test.len() as f64 },
        per_relation: per
            .into_iter()
            .map(|(r, (n, l))| RelationLeakage {
                relation: kg.vocab().relation(r).to_string(),
                n_test: n,
                n_leaked: l,
                fraction: l as f64 / n as f64,
            })
            .collect(),
    }
}
