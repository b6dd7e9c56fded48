//! Property tests for the invariants of every module.

use std::collections::BTreeMap;

use proptest::prelude::*;

use taser_core::bm25::{Bm25Params, InvertedIndex};
use taser_core::encoder::Binder;
use taser_core::gumbel::gumbel_softmax_hard;
use taser_core::hybrid::hybrid_rank;
use taser_core::metrics::{aggregate, ndcg, recall_at_k, Aggregation, AnswerMatcher, AnswerSet};
use taser_core::routing::{entropy_regularizer, route_det, route_tok, BlockRouting, BoundRouter};
use taser_core::train::contrastive_loss;
use taser_core::{
    EncoderConfig, Hit, InputKind, Mode, RankedList, Rng, RoutingKind, Run, Tape, TaserEncoder,
    Tensor,
};

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn one_hot_rows(t: &Tensor) -> bool {
    t.data()
        .chunks(t.last_dim())
        .all(|row| row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0)
}

fn list(scores: &[f64]) -> RankedList {
    RankedList::from_hits(
        scores
            .iter()
            .enumerate()
            .map(|(passage, &score)| Hit { passage, score })
            .collect(),
    )
    .unwrap()
}

fn small_encoder(routing: RoutingKind) -> TaserEncoder {
    let mut c = EncoderConfig::toy(20, routing);
    c.d_model = 8;
    c.ffn_inner = 12;
    c.num_heads = 2;
    c.num_blocks = 3;
    c.max_positions = 12;
    TaserEncoder::new(c, &mut Rng::new(7, u64::MAX)).unwrap()
}

fn sequence() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..20, 2..10).prop_map(|mut v| {
        v.insert(0, 2);
        v
    })
}

/// Max-abs gradient of every named parameter after backpropagating a fixed
/// random projection of the CLS vector. A plain sum would be constant, since
/// the top layer norm has unit gain.
fn grad_norms(enc: &TaserEncoder, ids: &[u32], kind: InputKind) -> BTreeMap<String, f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(enc.params(), true);
    let out = enc
        .forward(
            &mut tape,
            &mut binder,
            ids,
            kind,
            Mode::Train,
            &mut Rng::new(0, 1),
        )
        .unwrap();
    let d = enc.config().d_model;
    let mut rng = Rng::new(11, 0);
    let w = tape.constant(tensor(
        &[1, d],
        &(0..d).map(|_| rng.uniform() - 0.5).collect::<Vec<_>>(),
    ));
    let projected = tape.mul(out.cls, w).unwrap();
    let loss = tape.sum(projected);
    tape.backward(loss).unwrap();
    enc.params()
        .ids()
        .map(|id| {
            let g = binder
                .bound()
                .into_iter()
                .find(|(b, _)| *b == id)
                .and_then(|(_, v)| tape.grad(v).cloned());
            let m = g.map_or(0.0, |g| g.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
            (enc.params().name(id).to_string(), m)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_sums_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.0f64..=1e4) {
        let mut rng = Rng::new(seed, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| (rng.uniform() * 2.0 - 1.0) * scale).collect();
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[rows, cols], &data));
        let s = tape.softmax(x, 1);
        for row in tape.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gumbel_hard_is_one_hot_and_deterministic(
        rows in 1usize..5, experts in 1usize..7, seed in any::<u64>(), stream in any::<u64>(), train in any::<bool>()
    ) {
        let mut init = Rng::new(seed, 0);
        let data: Vec<f64> = (0..rows * experts).map(|_| init.uniform() * 6.0 - 3.0).collect();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let draw = || {
            let mut tape = Tape::new();
            let l = tape.leaf(tensor(&[rows, experts], &data));
            let s = gumbel_softmax_hard(&mut tape, l, 1.0, &mut Rng::new(seed, stream), mode).unwrap();
            tape.value(s).clone()
        };
        let a = draw();
        prop_assert!(one_hot_rows(&a));
        prop_assert_eq!(a, draw());
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed, stream), Rng::new(seed, stream));
        for _ in 0..32 {
            prop_assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn det_usage_matches_kinds(kinds in prop::collection::vec(any::<bool>(), 0..200)) {
        let mut usage = [0usize; 2];
        for &q in &kinds {
            usage[route_det(if q { InputKind::Question } else { InputKind::Passage })] += 1;
        }
        let questions = kinds.iter().filter(|&&q| q).count();
        prop_assert_eq!(usage, [questions, kinds.len() - questions]);
    }

    #[test]
    fn entropy_is_bounded(experts in 2usize..9, rows in 1usize..6, seed in any::<u64>(), scale in 0.0f64..100.0) {
        let mut rng = Rng::new(seed, 0);
        let data: Vec<f64> = (0..rows * experts).map(|_| (rng.uniform() - 0.5) * scale).collect();
        let mut tape = Tape::new();
        let logits = tape.leaf(tensor(&[rows, experts], &data));
        let h = entropy_regularizer(&mut tape, &[BlockRouting { block: 0, logits }]).unwrap();
        let h = tape.value(h).item();
        prop_assert!(h >= -1e-12 && h <= (experts as f64).ln() + 1e-12);
    }

    /// The router's gradient is exactly the gradient of the soft path.
    #[test]
    fn router_gradient_follows_soft_path(d in 1usize..5, experts in 2usize..5, rows in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        let mut r = |n: usize| (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect::<Vec<f64>>();
        let (a, c, h, w) = (r(d * experts), r(experts), r(rows * d), r(rows * experts));
        let surrogate = |a: &[f64], c: &[f64]| {
            let mut tape = Tape::new();
            let u = tape.constant(tensor(&[rows, d], &h));
            let a = tape.constant(tensor(&[d, experts], a));
            let z = tape.matmul(u, a).unwrap();
            let c = tape.constant(tensor(&[experts], c));
            let z = tape.add_bias(z, c).unwrap();
            let p = tape.softmax(z, 1);
            let w = tape.constant(tensor(&[rows, experts], &w));
            let y = tape.mul(p, w).unwrap();
            let y = tape.sum(y);
            tape.value(y).item()
        };
        let mut tape = Tape::new();
        let router = BoundRouter {
            weight: tape.leaf(tensor(&[d, experts], &a)),
            bias: tape.leaf(tensor(&[experts], &c)),
        };
        let u = tape.constant(tensor(&[rows, d], &h));
        let routed = route_tok(&mut tape, router, u, 1.0, Mode::Eval, &mut Rng::new(0, 0)).unwrap();
        let wv = tape.constant(tensor(&[rows, experts], &w));
        let y = tape.mul(routed.selection, wv).unwrap();
        let y = tape.sum(y);
        tape.backward(y).unwrap();
        let eps = 1e-6;
        for (var, base, is_weight) in [(router.weight, &a, true), (router.bias, &c, false)] {
            let analytic = tape.grad(var).unwrap().data().to_vec();
            for i in 0..base.len() {
                let (mut up, mut down) = (base.clone(), base.clone());
                up[i] += eps;
                down[i] -= eps;
                let numeric = if is_weight {
                    (surrogate(&up, &c) - surrogate(&down, &c)) / (2.0 * eps)
                } else {
                    (surrogate(&a, &up) - surrogate(&a, &down)) / (2.0 * eps)
                };
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
                prop_assert!((analytic[i] - numeric).abs() / denom < 1e-4, "{} vs {}", analytic[i], numeric);
            }
        }
    }

    #[test]
    fn contrastive_loss_properties(d in 1usize..6, count in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        let mut row = |tape: &mut Tape| {
            let v: Vec<f64> = (0..d).map(|_| rng.uniform() * 4.0 - 2.0).collect();
            tape.constant(tensor(&[1, d], &v))
        };
        let mut tape = Tape::new();
        let q = row(&mut tape);
        let p = row(&mut tape);
        let negs: Vec<_> = (0..count).map(|_| row(&mut tape)).collect();
        let l = contrastive_loss(&mut tape, q, p, &negs).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);

        // negatives whose similarity is effectively −∞
        let mut t = Tape::new();
        let q = t.constant(tensor(&[1, 1], &[1.0]));
        let p = t.constant(tensor(&[1, 1], &[0.5]));
        let far: Vec<_> = (0..count).map(|_| t.constant(tensor(&[1, 1], &[-1e6]))).collect();
        let l = contrastive_loss(&mut t, q, p, &far).unwrap();
        prop_assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn encode_is_order_sensitive(ids in sequence(), seed in any::<u64>()) {
        let enc = small_encoder(RoutingKind::Det);
        let mut shuffled = ids.clone();
        Rng::new(seed, 0).shuffle(&mut shuffled[1..]);
        prop_assume!(shuffled != ids);
        let a = enc.embed(&ids, InputKind::Passage).unwrap();
        let b = enc.embed(&shuffled, InputKind::Passage).unwrap();
        prop_assert_ne!(a, b);
    }

    #[test]
    fn det_experts_receive_only_their_kind(ids in sequence()) {
        let enc = small_encoder(RoutingKind::Det);
        let q = grad_norms(&enc, &ids, InputKind::Question);
        let p = grad_norms(&enc, &ids, InputKind::Passage);
        for (name, gp) in &p {
            let gq = q[name];
            if name.contains("ffn.experts.0.") {
                prop_assert_eq!(*gp, 0.0, "{} from a passage", name);
                prop_assert!(gq > 0.0, "{} from a question", name);
            } else if name.contains("ffn.experts.1.") {
                prop_assert_eq!(gq, 0.0, "{} from a question", name);
                prop_assert!(*gp > 0.0, "{} from a passage", name);
            } else if name.starts_with("blocks.0.ffn.") && name.ends_with("weight") {
                prop_assert!(gq > 0.0 && *gp > 0.0, "shared {} misses a kind", name);
            }
        }
    }

    #[test]
    fn bm25_matches_brute_force_bounds(
        docs in prop::collection::vec(prop::collection::vec(0usize..6, 1..10), 1..15),
        query in prop::collection::vec(0usize..8, 1..5),
        k1 in 0.1f64..2.0,
        b in 0.0f64..=1.0,
    ) {
        let word = |i: usize| format!("w{i}");
        let texts: Vec<String> = docs.iter().map(|d| d.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")).collect();
        let idx = InvertedIndex::build(&texts, Bm25Params { k1, b }).unwrap();
        let q: Vec<String> = query.iter().map(|&i| word(i)).collect();
        for t in &q {
            prop_assert!(idx.idf(t) >= 0.0);
        }
        let top = idx.top_k(&q, docs.len());
        for h in top.hits() {
            prop_assert!(h.score >= 0.0);
            prop_assert_eq!(h.score, idx.score(&q, h.passage).unwrap());
        }
        let touched = (0..docs.len()).filter(|&p| docs[p].iter().any(|w| query.contains(w))).count();
        prop_assert_eq!(top.len(), touched);
    }

    #[test]
    fn bm25_monotone_in_tf(tf in 1usize..20, k1 in 0.1f64..2.0, b in 0.0f64..=1.0) {
        // fixed length and document frequencies; only tf moves
        let doc = |n: usize| {
            let mut w = vec!["t"; n];
            w.resize(21, "pad");
            w.join(" ")
        };
        let params = Bm25Params { k1, b };
        let score = |n: usize| {
            let idx = InvertedIndex::build(&[doc(n), "pad".to_string(), "other".to_string()], params).unwrap();
            idx.score(&["t".to_string()], 0).unwrap()
        };
        prop_assert!(score(tf + 1) >= score(tf));
    }

    #[test]
    fn hybrid_alpha_zero_and_equal_arms(scores in prop::collection::vec(-5.0f64..5.0, 1..20), alpha in 0.0f64..3.0) {
        let dense = list(&scores);
        let fused = hybrid_rank(&dense, &RankedList::default(), 0.0, usize::MAX);
        prop_assert_eq!(fused.ids().collect::<Vec<_>>(), dense.ids().collect::<Vec<_>>());
        let equal = hybrid_rank(&dense, &dense, alpha, usize::MAX);
        prop_assert_eq!(equal.ids().collect::<Vec<_>>(), dense.ids().collect::<Vec<_>>());
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let top = fused.hits()[0].score;
        let bottom = fused.hits()[fused.len() - 1].score;
        if hi > lo {
            prop_assert_eq!((top, bottom), (1.0, 0.0));
        } else {
            prop_assert!(fused.hits().iter().all(|h| h.score == 0.0));
        }
    }

    #[test]
    fn ranking_metrics_bounded_and_scale_invariant(
        scores in prop::collection::vec(-5.0f64..5.0, 1..20),
        grades in prop::collection::vec(0u32..4, 1..20),
        factor in 0.01f64..100.0,
        k in 1usize..25,
    ) {
        let grades: BTreeMap<usize, u32> = grades.into_iter().enumerate().collect();
        let a = list(&scores);
        let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
        let b = list(&scaled);
        let n = ndcg(&a, &grades, k);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
        prop_assert_eq!(n, ndcg(&b, &grades, k));
    }

    #[test]
    fn recall_bounded_monotone_and_full_depth(
        texts in prop::collection::vec(prop::collection::vec(0usize..6, 1..5), 1..12),
        answer in 0usize..8,
        seed in any::<u64>(),
    ) {
        let texts: Vec<String> = texts.iter().map(|t| t.iter().map(|i| format!("x{i}y")).collect::<Vec<_>>().join(" ")).collect();
        let matcher = AnswerMatcher::new(&texts);
        let mut answers = AnswerSet::new();
        let gold = format!("X{answer}Y");
        answers.insert("q", std::slice::from_ref(&gold));
        let mut ids: Vec<usize> = (0..texts.len()).collect();
        Rng::new(seed, 0).shuffle(&mut ids);
        let mut run = Run::new();
        run.insert("q", list(&ids.iter().map(|&i| i as f64).collect::<Vec<_>>()));
        let mut prev = 0.0;
        for k in 1..=texts.len() {
            let r = recall_at_k(&run, &answers, &matcher, k)["q"];
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        let any = texts.iter().any(|t| t.contains(&gold.to_lowercase()));
        prop_assert_eq!(prev, if any { 1.0 } else { 0.0 });
    }

    #[test]
    fn singleton_groups_macro_equals_micro(values in prop::collection::vec(0.0f64..=1.0, 1..30)) {
        let scores: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, &v)| (format!("q{i}"), v)).collect();
        let groups: BTreeMap<String, String> = scores.keys().map(|q| (q.clone(), q.clone())).collect();
        let micro = aggregate(&scores, None, Aggregation::Micro).unwrap();
        let macro_ = aggregate(&scores, Some(&groups), Aggregation::Macro).unwrap();
        prop_assert!((micro - macro_).abs() <= 1e-12);
    }
}
