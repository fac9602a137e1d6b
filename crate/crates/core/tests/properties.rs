use std::sync::Mutex;

use cid_core::backend::{BackendDescriptor, BackendError, ContextQuery, ModelBackend, TableModel};
use cid_core::bias_audit::{render_cell, AuditTally};
use cid_core::distribution::{apply_cid, apply_cid_detailed, argmax_token, delta, top_k_mask, CidParams, ProbDist, TokenId};
use cid_core::engine::{cid_decode, greedy_decode, DecodeJob, DecodeLimits};
use cid_core::perturbation_lab::{
    lambda_star, perturb, LambdaStar, LambdaStarResult, PerturbationTables, PerturbationType, PerturbedPair,
};
use proptest::prelude::*;

fn normalize(w: Vec<f64>) -> Option<ProbDist> {
    let sum: f64 = w.iter().sum();
    if sum <= 1e-3 {
        return None;
    }
    ProbDist::new(w.into_iter().map(|x| x / sum).collect()).ok()
}

fn dist(max_vocab: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0f64..1.0], 2..=max_vocab).prop_filter_map(
        "needs mass",
        normalize,
    )
}

fn dist_pair(max_vocab: usize) -> impl Strategy<Value = (ProbDist, ProbDist)> {
    (2..=max_vocab).prop_flat_map(|n| {
        let one = prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.0f64..1.0], n)
            .prop_filter_map("needs mass", normalize);
        (one.clone(), one)
    })
}

/// A random character-level table model over "abcd" plus EOS.
fn table_model() -> impl Strategy<Value = TableModel> {
    let row = prop::collection::vec(0.0f64..1.0, 5).prop_filter_map("mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 0.0).then(|| w.iter().map(|x| x / s).collect::<Vec<f64>>())
    });
    prop::collection::vec(((0u32..5, 0u32..5), row), 1..20).prop_map(|rows| {
        let vocab = ["</s>", "a", "b", "c", "d"].map(String::from).to_vec();
        let mut m = TableModel::new(vocab, TokenId(0), 2).unwrap();
        for ((a, b), probs) in rows {
            let key: Vec<TokenId> = if a == 0 { vec![TokenId(b)] } else { vec![TokenId(a), TokenId(b)] };
            m.insert(&key, probs).unwrap();
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn output_is_normalized((p, q) in dist_pair(24), lambda in 0.0f64..100.0, k in 1usize..30) {
        if let Ok(out) = apply_cid(&p, &q, CidParams::new(lambda, k).unwrap()) {
            prop_assert!((out.total_mass() - 1.0).abs() <= 1e-9);
            prop_assert!(out.as_slice().iter().all(|&x| x >= 0.0));
            let mask = top_k_mask(&p, k);
            for (t, _) in out.support() {
                prop_assert!(mask.contains(&t));
            }
        }
    }

    #[test]
    fn zero_lambda_is_identity((p, q) in dist_pair(24)) {
        let out = apply_cid(&p, &q, CidParams::new(0.0, p.vocab_size()).unwrap()).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn equal_inputs_are_identity(p in dist(24), lambda in 0.0f64..100.0) {
        let out = apply_cid(&p, &p, CidParams::new(lambda, p.vocab_size()).unwrap()).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_odds_identity((p, q) in dist_pair(24), lambda in 0.0f64..100.0, k in 1usize..30) {
        let Ok(out) = apply_cid(&p, &q, CidParams::new(lambda, k).unwrap()) else { return Ok(()) };
        let d = delta(&p, &q).unwrap();
        let support: Vec<TokenId> = out.support().map(|(t, _)| t).collect();
        for &w1 in &support {
            for &w2 in &support {
                let lhs = out.prob(w1).ln() - out.prob(w2).ln();
                let rhs = p.prob(w1).ln() - p.prob(w2).ln() + lambda * (d.get(w1) - d.get(w2));
                // Below ~1e-300 the tilde values underflow; those tokens are unrepresentable either way.
                if out.prob(w1) > 1e-300 && out.prob(w2) > 1e-300 {
                    prop_assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn directional_effect(base in 0.05f64..0.3, c1 in 0.0f64..0.3, c2 in 0.0f64..0.3, lambda in 0.01f64..50.0) {
        prop_assume!((c1 - c2).abs() > 1e-6);
        let rest = 1.0 - 2.0 * base;
        let p = ProbDist::normalized(vec![base, base, rest]).unwrap();
        let q = ProbDist::normalized(vec![c1, c2, 1.0 - c1 - c2]).unwrap();
        let out = apply_cid(&p, &q, CidParams::new(lambda, 3).unwrap()).unwrap();
        let d = delta(&p, &q).unwrap();
        let (w1, w2) = if d.get(TokenId(0)) > d.get(TokenId(1)) { (TokenId(0), TokenId(1)) } else { (TokenId(1), TokenId(0)) };
        prop_assert!(out.prob(w1) > out.prob(w2));
    }

    #[test]
    fn delta_is_antisymmetric((p, q) in dist_pair(24)) {
        let a = delta(&p, &q).unwrap();
        let b = delta(&q, &p).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert_eq!(*x, -*y);
            prop_assert!((-1.0..=1.0).contains(x));
        }
    }

    #[test]
    fn top_k_is_ranked(p in dist(24), k in 1usize..30) {
        let mask = top_k_mask(&p, k);
        prop_assert_eq!(mask.len(), k.min(p.vocab_size()));
        for w in mask.windows(2) {
            let (a, b) = (p.prob(w[0]), p.prob(w[1]));
            prop_assert!(a > b || (a == b && w[0] < w[1]));
        }
        let worst = p.prob(*mask.last().unwrap());
        for t in 0..p.vocab_size() as u32 {
            let t = TokenId(t);
            if !mask.contains(&t) {
                prop_assert!(p.prob(t) <= worst);
            }
        }
    }

    #[test]
    fn zero_lambda_keeps_argmax((p, q) in dist_pair(24), k in 1usize..30) {
        let out = apply_cid(&p, &q, CidParams::new(0.0, k).unwrap()).unwrap();
        prop_assert_eq!(argmax_token(&out).unwrap(), argmax_token(&p).unwrap());
    }
}

/// Records every query it forwards.
struct Spy {
    inner: TableModel,
    queries: Mutex<Vec<ContextQuery>>,
}

impl ModelBackend for Spy {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.inner.detokenize(tokens)
    }
    fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError> {
        self.queries.lock().unwrap().push(query.clone());
        self.inner.next_token_distribution(query)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contexts_share_the_generated_suffix(m in table_model(), x in "[abcd]{1,4}", y in "[abcd]{1,4}", lambda in 0.0f64..50.0) {
        let spy = Spy { inner: m, queries: Mutex::new(Vec::new()) };
        let job = DecodeJob::new(x.clone(), y.clone(), CidParams::new(lambda, 3).unwrap()).with_limits(DecodeLimits::new(6));
        cid_decode(&spy, &job).unwrap();
        let queries = spy.queries.into_inner().unwrap();
        prop_assert_eq!(queries.len() % 2, 0);
        for step in queries.chunks(2) {
            prop_assert_eq!(&step[0].generated_tokens, &step[1].generated_tokens);
            prop_assert_eq!(step[0].input_tokens.len(), x.len());
            prop_assert_eq!(step[1].input_tokens.len(), y.len());
        }
    }

    #[test]
    fn degeneracies_reproduce_greedy(m in table_model(), x in "[abcd]{1,4}", y in "[abcd]{1,4}", k in 1usize..6) {
        let limits = DecodeLimits::new(8);
        let greedy = greedy_decode(&m, &x, limits, k).unwrap();
        let zero = cid_decode(&m, &DecodeJob::new(x.clone(), y, CidParams::new(0.0, k).unwrap()).with_limits(limits)).unwrap();
        prop_assert_eq!(&zero.generated_tokens, &greedy.generated_tokens);
        for lambda in [1.0, 10.0, 50.0] {
            let same = cid_decode(&m, &DecodeJob::new(x.clone(), x.clone(), CidParams::new(lambda, k).unwrap()).with_limits(limits)).unwrap();
            prop_assert_eq!(&same.generated_tokens, &greedy.generated_tokens);
        }
    }

    #[test]
    fn trace_recomputes(m in table_model(), x in "[abcd]{1,4}", y in "[abcd]{1,4}", lambda in 0.0f64..50.0) {
        let r = cid_decode(&m, &DecodeJob::new(x, y, CidParams::new(lambda, 5).unwrap()).with_limits(DecodeLimits::new(6))).unwrap();
        for s in &r.trace {
            prop_assert!((s.recompute_p_tilde(lambda) - s.p_tilde_chosen).abs() <= 1e-9);
        }
    }

    #[test]
    fn decoding_is_deterministic_across_threads(m in table_model(), x in "[abcd]{1,4}", y in "[abcd]{1,4}") {
        let job = DecodeJob::new(x, y, CidParams::new(7.0, 4).unwrap()).with_limits(DecodeLimits::new(6));
        let here = cid_decode(&m, &job).unwrap();
        let there = std::thread::scope(|s| s.spawn(|| cid_decode(&m, &job).unwrap()).join().unwrap());
        prop_assert_eq!(here, there);
    }
}

fn grid() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]
}

proptest! {
    #[test]
    fn lambda_star_membership(sims in prop::collection::vec(-1.0f64..=1.0, 8), tau in 0.0f64..1.0) {
        let sweep = LambdaStarResult {
            pair: PerturbedPair::new("a", "b", PerturbationType::Typo).unwrap(),
            grid: grid(),
            sims: sims.clone(),
            tau: None,
            lambda_star: None,
            continuations: vec![],
        };
        let r = lambda_star(sweep, tau).unwrap();
        match r.lambda_star.unwrap() {
            LambdaStar::Reached(l) => {
                let i = grid().iter().position(|&g| g == l).expect("lambda* is a grid point");
                prop_assert!(sims[i] < tau);
                prop_assert!(sims[..i].iter().all(|&s| s >= tau));
            }
            LambdaStar::NotReached => prop_assert!(sims.iter().all(|&s| s >= tau)),
        }
    }

    #[test]
    fn perturbation_is_seeded(words in prop::collection::vec("[a-z]{2,8}", 2..8), seed in any::<u64>()) {
        let text = words.join(" ");
        let tables = PerturbationTables::builtin();
        for kind in [PerturbationType::Typo, PerturbationType::LetterDuplication, PerturbationType::Punctuation] {
            let a = perturb(&text, &kind, &tables, seed);
            let b = perturb(&text, &kind, &tables, seed);
            prop_assert_eq!(&a, &b);
            if let Ok(pair) = a {
                prop_assert_ne!(&pair.perturbed, &text);
            }
        }
    }

    #[test]
    fn letter_duplication_is_invertible(words in prop::collection::vec("[a-z]{2,8}", 1..6), seed in any::<u64>()) {
        let text = words.join(" ");
        let pair = perturb(&text, &PerturbationType::LetterDuplication, &PerturbationTables::builtin(), seed).unwrap();
        let p: Vec<char> = pair.perturbed.chars().collect();
        prop_assert_eq!(p.len(), text.chars().count() + 1);
        let restored = (0..p.len() - 1).filter(|&i| p[i] == p[i + 1]).any(|i| {
            let mut q = p.clone();
            q.remove(i);
            q.into_iter().collect::<String>() == text
        });
        prop_assert!(restored);
    }

    #[test]
    fn tally_merge_order_is_irrelevant(items in prop::collection::vec(("[abc]{1,3}", 1usize..5), 0..20)) {
        let mut forward = AuditTally::new(0.0, "g");
        let mut backward = AuditTally::new(0.0, "g");
        for (t, n) in &items {
            let mut one = AuditTally::new(0.0, "g");
            one.add(t.clone(), *n);
            forward.merge(&one);
        }
        for (t, n) in items.iter().rev() {
            backward.add(t.clone(), *n);
        }
        prop_assert_eq!(&forward, &backward);
        prop_assert_eq!(forward.total(), items.iter().map(|(_, n)| n).sum::<usize>());
        prop_assert_eq!(render_cell(&forward.counts, None), render_cell(&backward.counts, None));
    }
}

#[test]
fn detailed_output_agrees_with_plain() {
    let p = ProbDist::new(vec![0.5, 0.3, 0.2]).unwrap();
    let q = ProbDist::new(vec![0.2, 0.3, 0.5]).unwrap();
    let params = CidParams::new(1.0, 3).unwrap();
    assert_eq!(apply_cid_detailed(&p, &q, params).unwrap().dist, apply_cid(&p, &q, params).unwrap());
}
