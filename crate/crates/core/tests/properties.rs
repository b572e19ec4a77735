//! Property tests for the tensor core, data layer, scoring functions and
//! the ranking protocol.

use std::collections::BTreeSet;

use kgelab::data::{KnowledgeGraph, Split, Triple, Vocabulary};
use kgelab::eval::{evaluate, EvalOptions, LinkScorer, Metrics, TieMode};
use kgelab::models::{count_parameters, score_complex, score_distmult, ModelConfig, ModelKind, ModelParams};
use kgelab::tensor::ops::conv2d;
use kgelab::tensor::{dropout, BatchNorm, Mode, OptimizerState, Tensor};
use kgelab::{rng_from_seed, Result};
use proptest::prelude::*;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

fn graph(n_e: usize, n_r: usize, train: Vec<Triple>, valid: Vec<Triple>, test: Vec<Triple>) -> KnowledgeGraph {
    KnowledgeGraph::new(Vocabulary::new(names("e", n_e), names("r", n_r)), train, valid, test).unwrap()
}

fn triples(n_e: usize, n_r: usize, max: usize) -> impl Strategy<Value = Vec<Triple>> {
    prop::collection::vec((0..n_e, 0..n_r, 0..n_e).prop_map(|(s, r, o)| Triple::new(s, r, o)), 0..max)
}

/// A random graph with non-empty train and test splits.
fn random_kg() -> impl Strategy<Value = KnowledgeGraph> {
    (3usize..12, 1usize..4).prop_flat_map(|(n_e, n_r)| {
        (triples(n_e, n_r, 30), triples(n_e, n_r, 6), triples(n_e, n_r, 10), (0..n_e, 0..n_r, 0..n_e)).prop_map(
            move |(train, valid, mut test, (s, r, o))| {
                test.push(Triple::new(s, r, o));
                let mut train = train;
                train.push(Triple::new(o, r, s));
                graph(n_e, n_r, train, valid, test)
            },
        )
    })
}

fn naive_conv(x: &[f64], dims: [usize; 4], w: &[f64], c: usize, bias: &[f64]) -> Vec<f64> {
    let [b, cin, h, wd] = dims;
    let (oh, ow) = (h - 2, wd - 2);
    let mut out = vec![0.0; b * c * oh * ow];
    for n in 0..b {
        for o in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for ic in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                acc += x[((n * cin + ic) * h + i + di) * wd + j + dj] * w[((o * cin + ic) * 3 + di) * 3 + dj];
                            }
                        }
                    }
                    out[((n * c + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Scores read from a fixed `n_r × n_e × n_e` table and pushed through a
/// transform, so the same ranking can be replayed under different maps.
struct TableScorer<'a> {
    n: usize,
    table: &'a [f64],
    transform: fn(f64) -> f64,
}

impl TableScorer<'_> {
    fn at(&self, s: usize, r: usize, o: usize) -> f64 {
        (self.transform)(self.table[(r * self.n + s) * self.n + o])
    }
}

impl LinkScorer for TableScorer<'_> {
    fn n_entities(&self) -> usize {
        self.n
    }

    fn score_objects(&self, s: &[usize], r: &[usize]) -> Result<Vec<f64>> {
        Ok(s.iter().zip(r).flat_map(|(&s, &r)| (0..self.n).map(move |o| self.at(s, r, o))).collect())
    }

    fn score_subjects(&self, r: &[usize], o: &[usize]) -> Result<Vec<f64>> {
        Ok(r.iter().zip(o).flat_map(|(&r, &o)| (0..self.n).map(move |s| self.at(s, r, o))).collect())
    }
}

/// Scores drawn from a small set of levels so ties are common.
fn score_table(kg: &KnowledgeGraph) -> impl Strategy<Value = Vec<f64>> {
    let n = kg.n_entities();
    prop::collection::vec((0..6u8).prop_map(|v| v as f64 / 2.0 - 1.0), kg.n_relations() * n * n)
}

fn identity(x: f64) -> f64 {
    x
}

fn cubic_shift(x: f64) -> f64 {
    x * x * x + 3.0 * x - 7.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_loop_oracle(
        b in 1usize..4, cin in 1usize..3, h in 3usize..9, w in 3usize..9, c in 1usize..4, seed in any::<u64>()
    ) {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let x = draw(b * cin * h * w);
        let f = draw(c * cin * 9);
        let bias = draw(c);
        let fast = conv2d(
            &Tensor::new(vec![b, cin, h, w], x.clone()).unwrap(),
            &Tensor::new(vec![c, cin, 3, 3], f.clone()).unwrap(),
            &Tensor::new(vec![c], bias.clone()).unwrap(),
        ).unwrap();
        let slow = naive_conv(&x, [b, cin, h, w], &f, c, &bias);
        prop_assert_eq!(fast.shape(), &[b, c, h - 2, w - 2][..]);
        for (a, e) in fast.data().iter().zip(&slow) {
            prop_assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_mode_layers_are_pure(rows in 1usize..6, cols in 1usize..6, rate in 0.0f64..0.9, seed in any::<u64>()) {
        let x = Tensor::from_fn(vec![rows, cols], |i| (i as f64 * 0.37).sin());
        let (a, _) = dropout(&x, rate, Mode::Eval, &mut rng_from_seed(seed)).unwrap();
        let (b, _) = dropout(&x, rate, Mode::Eval, &mut rng_from_seed(seed.wrapping_add(1))).unwrap();
        prop_assert_eq!(a.data(), x.data());
        prop_assert_eq!(b.data(), x.data());

        let bn = BatchNorm::new(cols);
        let (p, _) = bn.forward(&x, Mode::Eval).unwrap();
        let (q, _) = bn.forward(&x, Mode::Eval).unwrap();
        prop_assert_eq!(p.data(), q.data());
    }

    #[test]
    fn zero_gradient_step_is_a_no_op(values in prop::collection::vec(-5.0f64..5.0, 1..20), adam in any::<bool>()) {
        let mut t = Tensor::new(vec![values.len()], values.clone()).unwrap().with_grad();
        let mut opt = if adam { OptimizerState::adam(0.1) } else { OptimizerState::adagrad(0.1) }.unwrap();
        for _ in 0..3 {
            opt.step(&mut [("w", &mut t)]).unwrap();
        }
        prop_assert_eq!(t.data(), &values[..]);
    }

    #[test]
    fn vocabulary_round_trip(ents in prop::collection::btree_set("[a-z]{1,6}", 1..20), rels in prop::collection::btree_set("[A-Z]{1,4}", 1..5)) {
        let v = Vocabulary::new(ents.iter().cloned(), rels.iter().cloned());
        prop_assert_eq!(v.n_entities(), ents.len());
        for (i, e) in v.entities().iter().enumerate() {
            prop_assert_eq!(v.entity_id(e), Some(i));
            prop_assert_eq!(v.entity(i), e.as_str());
        }
        for (i, r) in v.relations().iter().enumerate() {
            prop_assert_eq!(v.relation_id(r), Some(i));
        }
    }

    #[test]
    fn label_vectors_and_filters(kg in random_kg()) {
        for s in 0..kg.n_entities() {
            for r in 0..kg.n_relations() {
                let ones: BTreeSet<usize> = kg.build_label_vector(s, r).iter().enumerate()
                    .filter(|(_, &v)| v == 1.0).map(|(o, _)| o).collect();
                let truth: BTreeSet<usize> = kg.train().iter().filter(|t| t.s == s && t.r == r).map(|t| t.o).collect();
                prop_assert_eq!(ones, truth);
            }
        }
        for t in kg.test() {
            prop_assert!(!kg.filter_candidates(t.s, t.r, t.o)[t.o]);
            prop_assert!(!kg.filter_subjects(t.r, t.o, t.s)[t.s]);
        }
        for split in [Split::Train, Split::Valid, Split::Test] {
            let unique: BTreeSet<&Triple> = kg.split(split).iter().collect();
            prop_assert_eq!(unique.len(), kg.split(split).len());
        }
    }

    #[test]
    fn reciprocals_double_each_split(kg in random_kg()) {
        let rec = kg.add_reciprocals().unwrap();
        let n = kg.n_relations();
        for split in [Split::Train, Split::Valid, Split::Test] {
            prop_assert_eq!(rec.split(split).len(), 2 * kg.split(split).len());
            let have: BTreeSet<&Triple> = rec.split(split).iter().collect();
            for t in kg.split(split) {
                prop_assert!(have.contains(&Triple::new(t.o, t.r + n, t.s)));
            }
            prop_assert_eq!(rec.base_triples(split), kg.split(split));
        }
    }

    #[test]
    fn parameter_count_matches_tensors(kind in 0usize..4, dim in prop::sample::select(vec![4usize, 6, 9, 12, 16]),
        channels in 1usize..4, n_e in 1usize..30, n_r in 1usize..6, bias in any::<bool>(), bn in any::<[bool; 3]>()) {
        let kind = [ModelKind::TransE, ModelKind::DistMult, ModelKind::ComplEx, ModelKind::ConvE][kind];
        let mut cfg = ModelConfig::new(kind, dim);
        cfg.channels = channels;
        cfg.entity_bias = bias;
        [cfg.bn_input, cfg.bn_conv, cfg.bn_hidden] = bn;
        prop_assume!(cfg.validate().is_ok());
        let params = ModelParams::init(&cfg, n_e, n_r, 0).unwrap();
        let brute: usize = params.parameters().iter().map(|(_, t)| t.len()).sum();
        prop_assert_eq!(count_parameters(&cfg, n_e, n_r).unwrap(), brute);
    }

    #[test]
    fn distmult_symmetry_and_complex_reduction(v in prop::collection::vec(-2.0f64..2.0, 12)) {
        let (s, rest) = v.split_at(4);
        let (r, o) = rest.split_at(4);
        // equal up to the order of the two products
        prop_assert!((score_distmult(s, r, o) - score_distmult(o, r, s)).abs() <= 1e-12);
        let z = [0.0; 4];
        prop_assert!((score_complex((s, &z), (r, &z), (o, &z)) - score_distmult(s, r, o)).abs() <= 1e-12);
    }

    #[test]
    fn ranking_invariants(case in random_kg().prop_flat_map(|kg| { let t = score_table(&kg); (Just(kg), t) })) {
        let (kg, table) = case;
        let n = kg.n_entities();
        for tie in [TieMode::Optimistic, TieMode::Pessimistic] {
            let run = |transform: fn(f64) -> f64, filtered: bool| {
                let scorer = TableScorer { n, table: &table, transform };
                evaluate(&scorer, &kg, Split::Test, &EvalOptions { tie, filtered, batch_size: 3 }).unwrap()
            };
            let base = run(identity, true);
            for f in [cubic_shift as fn(f64) -> f64, sigmoid] {
                let other = run(f, true);
                prop_assert_eq!(&other.ranks, &base.ranks);
                prop_assert_eq!(&other.metrics, &base.metrics);
            }
            let raw = run(identity, false);
            for (f, r) in base.ranks.iter().zip(&raw.ranks) {
                prop_assert!(f.rank_o <= r.rank_o && f.rank_s <= r.rank_s);
                for rank in [f.rank_o, f.rank_s] {
                    prop_assert!(rank >= 1 && rank <= n);
                }
            }
            let m = &base.metrics;
            prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0 && m.mr >= 1.0);
            let all: Vec<f64> = base.ranks.iter().flat_map(|p| [p.rank_s, p.rank_o]).map(|r| 1.0 / r as f64).collect();
            let mrr = all.iter().sum::<f64>() / all.len() as f64;
            prop_assert!((mrr - m.mrr).abs() <= 1e-12);
            prop_assert_eq!(Metrics::from_ranks(&base.ranks), m.clone());
        }
    }
}
