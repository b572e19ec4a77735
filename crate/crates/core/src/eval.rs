//! Filtered ranking protocol and AUC-PR.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{KnowledgeGraph, Split, Triple};
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::par::*;

/// Anything that can score `(s, r, ?)` and `(?, r, o)` queries against every
/// entity. Scores are row-major `batch × n_entities`, higher is better.
pub trait LinkScorer: Sync {
    fn n_entities(&self) -> usize;
    fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Vec<f64>>;
    fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Vec<f64>>;
}

impl LinkScorer for ModelParams {
    fn n_entities(&self) -> usize {
        ModelParams::n_entities(self)
    }

    fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Vec<f64>> {
        Ok(ModelParams::score_objects(self, s, r)?.into_data())
    }

    fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Vec<f64>> {
        Ok(ModelParams::score_subjects(self, r, o)?.into_data())
    }
}

/// Scores every candidate as an independent triple, the way a 1-1 model
/// would; used to compare against batched 1-N scoring.
pub struct OneToOne<'a>(pub &'a ModelParams);

impl LinkScorer for OneToOne<'_> {
    fn n_entities(&self) -> usize {
        self.0.n_entities()
    }

    fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_entities();
        let mut out = Vec::with_capacity(s.len() * n);
        for (&s, &r) in s.iter().zip(r) {
            let triples: Vec<Triple> = (0..n).map(|o| Triple::new(s, r, o)).collect();
            out.extend(self.0.score_triples(&triples)?);
        }
        Ok(out)
    }

    fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_entities();
        let mut out = Vec::with_capacity(r.len() * n);
        for (&r, &o) in r.iter().zip(o) {
            let triples: Vec<Triple> = (0..n).map(|s| Triple::new(s, r, o)).collect();
            out.extend(self.0.score_triples(&triples)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Only strictly higher scores push the rank down.
    Optimistic,
    /// Every other candidate with an equal or higher score pushes it down.
    Pessimistic,
}

impl FromStr for TieMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimistic" => Ok(Self::Optimistic),
            "pessimistic" => Ok(Self::Pessimistic),
            other => Err(Error::config(format!("unknown tie mode `{other}`"))),
        }
    }
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Optimistic => "optimistic",
            Self::Pessimistic => "pessimistic",
        })
    }
}

/// `1 + #{j unmasked : scores[j] > scores[target]}` (or `≥` for other
/// candidates in pessimistic mode). `mask[j]` marks candidates removed by
/// filtering; the target itself is never removed.
pub fn filtered_rank(scores: &[f64], target: usize, mask: &[bool], tie: TieMode) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && !mask[j] && beats(v, t, tie))
        .count()
}

fn beats(v: f64, t: f64, tie: TieMode) -> bool {
    match tie {
        TieMode::Optimistic => v > t,
        TieMode::Pessimistic => v >= t,
    }
}

/// Same as [`filtered_rank`] with the filter given as a sorted id list.
fn rank_with_list(scores: &[f64], target: usize, filter: &[usize], tie: TieMode) -> usize {
    let t = scores[target];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && beats(v, t, tie))
        .count();
    let removed = filter
        .iter()
        .filter(|&&j| j != target && beats(scores[j], t, tie))
        .count();
    1 + above - removed
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankPair {
    pub s: usize,
    pub r: usize,
    pub o: usize,
    /// Rank of the true subject among subject corruptions.
    pub rank_s: usize,
    /// Rank of the true object among object corruptions.
    pub rank_o: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    /// Aggregates over both directions of every pair: `2|T|` ranks in total.
    pub fn from_ranks(ranks: &[RankPair]) -> Self {
        let n = 2.0 * ranks.len() as f64;
        let all = || ranks.iter().flat_map(|p| [p.rank_s, p.rank_o]);
        let hits = |k: usize| all().filter(|&r| r <= k).count() as f64 / n;
        Self {
            mr: all().map(|r| r as f64).sum::<f64>() / n,
            mrr: all().map(|r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingReport {
    pub split: String,
    /// Which known triples were removed from the candidate sets.
    pub filter: String,
    pub tie_mode: TieMode,
    /// `reciprocal` (subject queries answered as `(o, r_inv, ?)`) or `direct`.
    pub subject_queries: String,
    pub n_triples: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_pr: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ranks: Vec<RankPair>,
}

impl RankingReport {
    pub fn mrr(&self) -> f64 {
        self.metrics.mrr
    }

    /// JSON text; per-triple ranks only when `with_ranks`.
    pub fn to_json(&self, with_ranks: bool) -> String {
        let mut r = self.clone();
        if !with_ranks {
            r.ranks.clear();
        }
        serde_json::to_string_pretty(&r).expect("report serialises")
    }
}

impl fmt::Display for RankingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.metrics;
        writeln!(f, "split     {} ({} triples, {}, ties {})", self.split, self.n_triples, self.filter, self.tie_mode)?;
        writeln!(f, "MR        {:.2}", m.mr)?;
        writeln!(f, "MRR       {:.4}", m.mrr)?;
        writeln!(f, "Hits@1    {:.2}%", 100.0 * m.hits1)?;
        writeln!(f, "Hits@3    {:.2}%", 100.0 * m.hits3)?;
        write!(f, "Hits@10   {:.2}%", 100.0 * m.hits10)?;
        if let Some(a) = self.auc_pr {
            write!(f, "\nAUC-PR    {a:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub tie: TieMode,
    /// Remove other known triples (train ∪ valid ∪ test) from the candidates.
    pub filtered: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tie: TieMode::Optimistic,
            filtered: true,
            batch_size: 128,
        }
    }
}

/// Ranks every triple of `split` in both directions.
///
/// On a graph with reciprocal relations the subject rank of `(s, r, o)` is
/// the object rank of `(o, r_inv, ?)`; otherwise subjects are corrupted
/// directly through [`LinkScorer::score_subjects`].
pub fn evaluate(scorer: &dyn LinkScorer, kg: &KnowledgeGraph, split: Split, opts: &EvalOptions) -> Result<RankingReport> {
    let triples = kg.base_triples(split);
    if triples.is_empty() {
        return Err(Error::data(format!("{split} split is empty")));
    }
    let n = scorer.n_entities();
    if n != kg.n_entities() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: vec![n],
            rhs: vec![kg.n_entities()],
        });
    }
    let index = kg.all_index();
    let empty: &[usize] = &[];
    let batches: Vec<Result<Vec<RankPair>>> = triples
        .par_chunks(opts.batch_size.max(1))
        .map(|batch| {
            let s: Vec<usize> = batch.iter().map(|t| t.s).collect();
            let r: Vec<usize> = batch.iter().map(|t| t.r).collect();
            let o: Vec<usize> = batch.iter().map(|t| t.o).collect();
            let obj = scorer.score_objects(&s, &r)?;
            let (subj, inv): (Vec<f64>, Option<Vec<usize>>) = match kg.is_reciprocal() {
                true => {
                    let inv: Vec<usize> = r.iter().map(|&r| kg.inverse_relation(r).unwrap()).collect();
                    (scorer.score_objects(&o, &inv)?, Some(inv))
                }
                false => (scorer.score_subjects(&r, &o)?, None),
            };
            Ok(batch
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let (fo, fs) = if opts.filtered {
                        let fs = match &inv {
                            Some(inv) => index.objects(t.o, inv[i]),
                            None => index.subjects(t.r, t.o),
                        };
                        (index.objects(t.s, t.r), fs)
                    } else {
                        (empty, empty)
                    };
                    RankPair {
                        s: t.s,
                        r: t.r,
                        o: t.o,
                        rank_o: rank_with_list(&obj[i * n..(i + 1) * n], t.o, fo, opts.tie),
                        rank_s: rank_with_list(&subj[i * n..(i + 1) * n], t.s, fs, opts.tie),
                    }
                })
                .collect())
        })
        .collect();
    let mut ranks = Vec::with_capacity(triples.len());
    for b in batches {
        ranks.extend(b?);
    }
    Ok(RankingReport {
        split: split.to_string(),
        filter: if opts.filtered { "filtered (train+valid+test)".into() } else { "raw".into() },
        tie_mode: opts.tie,
        subject_queries: if kg.is_reciprocal() { "reciprocal".into() } else { "direct".into() },
        n_triples: ranks.len(),
        metrics: Metrics::from_ranks(&ranks),
        auc_pr: None,
        ranks,
    })
}

/// Area under the precision-recall curve by the step method: the sum over
/// distinct score thresholds (descending) of recall gain times precision.
/// Candidates sharing a score enter together.
pub fn auc_pr(scored: &[(f64, bool)]) -> Result<f64> {
    let positives = scored.iter().filter(|(_, p)| *p).count();
    if positives == 0 {
        return Err(Error::data("AUC-PR needs at least one positive"));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let mut gained = 0;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            gained += sorted[j].1 as usize;
            j += 1;
        }
        tp += gained;
        seen += j - i;
        area += (gained as f64 / positives as f64) * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(area)
}

/// Region entities for the Countries task: objects of `locatedIn` that never
/// appear as its subject (continents rather than subregions).
pub fn countries_regions(kg: &KnowledgeGraph, located_in: usize) -> Vec<usize> {
    let all = || kg.train().iter().chain(kg.valid()).chain(kg.test());
    let mut is_subject = vec![false; kg.n_entities()];
    let mut is_object = vec![false; kg.n_entities()];
    for t in all().filter(|t| t.r == located_in) {
        is_subject[t.s] = true;
        is_object[t.o] = true;
    }
    (0..kg.n_entities()).filter(|&e| is_object[e] && !is_subject[e]).collect()
}

/// Countries AUC-PR on `split`: every country in the split is scored against
/// every region with `locatedIn`; positives are the split's own triples.
/// Scores are pooled over countries before computing the curve.
pub fn countries_auc_pr(scorer: &dyn LinkScorer, kg: &KnowledgeGraph, split: Split) -> Result<f64> {
    let located_in = kg
        .vocab()
        .relation_id("locatedIn")
        .ok_or_else(|| Error::data("countries mode needs a `locatedIn` relation"))?;
    let regions = countries_regions(kg, located_in);
    let held: Vec<Triple> = kg.base_triples(split).iter().filter(|t| t.r == located_in).copied().collect();
    let mut countries: Vec<usize> = held.iter().map(|t| t.s).collect();
    countries.sort_unstable();
    countries.dedup();
    if countries.is_empty() {
        return Err(Error::data(format!("no locatedIn triples in the {split} split")));
    }
    let n = scorer.n_entities();
    let scores = scorer.score_objects(&countries, &vec![located_in; countries.len()])?;
    let mut scored = Vec::with_capacity(countries.len() * regions.len());
    for (i, &c) in countries.iter().enumerate() {
        for &reg in &regions {
            let positive = held.iter().any(|t| t.s == c && t.o == reg);
            scored.push((scores[i * n + reg], positive));
        }
    }
    auc_pr(&scored)
}
