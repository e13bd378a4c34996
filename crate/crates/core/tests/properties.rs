use std::collections::BTreeSet;

use ctes_core::eval::{rank_by_score, rank_metrics};
use ctes_core::hashindex::{
    bit_balance, compute_code, hash_objective, mean_abs_correlation, Coder, Coupling, HashIndex,
    HashNet, HashProfile, HashScheme, HashWeights,
};
use ctes_core::mtpp::{lognormal_log_density, MtppConfig, MtppModel};
use ctes_core::parallel::Workers;
use ctes_core::quadrature::GaussLegendre;
use ctes_core::relevance::{
    categorical_kl, fisher_kernel, lognormal_kl, FisherConfig, RelevanceModel, ScoreMode,
};
use ctes_core::seq::{sequence_from_json, sequence_to_json};
use ctes_core::synth::split_queries;
use ctes_core::unwarp::{unwarp_time, UnwarpConfig, UnwarpNet};
use ctes_core::EventSequence;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_sequence(max_len: usize, vocab: usize) -> impl Strategy<Value = EventSequence> {
    prop::collection::vec((0.01f64..2.0, 0..vocab), 1..=max_len).prop_flat_map(|steps| {
        (Just(steps), 0.0f64..1.0).prop_map(|(steps, tail)| {
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut marks = Vec::new();
            for (gap, m) in &steps {
                t += gap;
                times.push(t);
                marks.push(*m);
            }
            EventSequence::from_parts("s", &times, &marks, t + tail + 1e-3).unwrap()
        })
    })
}

fn small_net(seed: u64) -> UnwarpNet {
    let cfg = UnwarpConfig {
        hidden: 6,
        quad_nodes: 16,
        ..UnwarpConfig::default()
    };
    UnwarpNet::random(cfg, 5.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small_model(seed: u64) -> RelevanceModel {
    let mtpp = MtppModel::new(MtppConfig {
        dim: 6,
        vocab: 3,
        max_len: 12,
        dropout: 0.0,
        seed,
        ..MtppConfig::default()
    })
    .unwrap();
    let unwarp = UnwarpNet::identity(
        UnwarpConfig {
            hidden: 4,
            quad_nodes: 8,
            ..UnwarpConfig::default()
        },
        10.0,
    )
    .unwrap();
    RelevanceModel::new(
        ScoreMode::SelfAttn,
        mtpp,
        unwarp,
        FisherConfig::default(),
        0.0,
    )
    .unwrap()
}

/// Brute-force metrics straight from their definitions: AP as the mean
/// over relevant items of precision at their rank (zero when unranked),
/// NDCG against the best achievable ordering of the same gains.
fn oracle(hits: &[bool], total_relevant: usize, k: usize) -> (f64, f64, f64) {
    let mut ap = 0.0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            let prefix_hits = hits[..=i].iter().filter(|&&x| x).count();
            ap += prefix_hits as f64 / (i + 1) as f64;
        }
    }
    ap /= total_relevant as f64;
    let rr = hits
        .iter()
        .position(|&h| h)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64);
    let gain = |i: usize| std::f64::consts::LN_2 / ((i + 2) as f64).ln();
    let dcg: f64 = (0..hits.len().min(k)).filter(|&i| hits[i]).map(gain).sum();
    let mut ideal_hits = vec![true; total_relevant];
    ideal_hits.resize(total_relevant.max(k), false);
    let idcg: f64 = (0..k).filter(|&i| ideal_hits[i]).map(gain).sum();
    (ap, rr, if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[test]
fn metrics_match_brute_force_on_every_short_list() {
    let mut checked = 0;
    for n in 1..=6usize {
        for mask in 0u32..(1 << n) {
            for absent in 0..=2usize {
                let hits: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let in_list = hits.iter().filter(|&&h| h).count();
                if in_list + absent == 0 {
                    continue;
                }
                let ranked: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
                let mut relevant: BTreeSet<String> = (0..n)
                    .filter(|&i| hits[i])
                    .map(|i| format!("d{i}"))
                    .collect();
                relevant.extend((0..absent).map(|j| format!("missing{j}")));
                let ks = [1, 3, 5, 10];
                let got = rank_metrics(&ranked, &relevant, &ks).unwrap();
                for &k in &ks {
                    let (ap, rr, ndcg) = oracle(&hits, relevant.len(), k);
                    assert!(
                        (got.ap - ap).abs() < 1e-12,
                        "{hits:?}: AP {} vs {ap}",
                        got.ap
                    );
                    assert!((got.rr - rr).abs() < 1e-12, "{hits:?}: RR");
                    assert!(
                        (got.ndcg[&k] - ndcg).abs() < 1e-12,
                        "{hits:?} k={k}: {} vs {ndcg}",
                        got.ndcg[&k]
                    );
                }
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 3 * 126 - 6);
}

#[test]
fn quadrature_integrates_polynomials_up_to_degree_eight() {
    let rule = GaussLegendre::new(5);
    for degree in 0..=8i32 {
        let f = |x: f64| x.powi(degree) - 0.5 * x.powi(degree / 2);
        let anti = |x: f64| {
            x.powi(degree + 1) / (degree + 1) as f64
                - 0.5 * x.powi(degree / 2 + 1) / (degree / 2 + 1) as f64
        };
        let (a, b) = (-0.7, 1.9);
        let exact = anti(b) - anti(a);
        assert!(
            (rule.integrate(a, b, f) - exact).abs() < 1e-10,
            "degree {degree}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unwarping_is_monotone_and_anchored(seed in 0u64..1000, a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let net = small_net(seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(unwarp_time(&net, 0.0).unwrap().abs() < 1e-12);
        prop_assert!(unwarp_time(&net, lo).unwrap() <= unwarp_time(&net, hi).unwrap());
    }

    #[test]
    fn unwarped_sequences_stay_valid(seed in 0u64..1000, seq in arb_sequence(10, 3)) {
        let net = small_net(seed);
        let u = ctes_core::unwarp::unwarp_sequence(&net, &seq).unwrap();
        prop_assert_eq!(u.marks(), seq.marks());
        prop_assert!(u.times().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(u.horizon() >= *u.times().last().unwrap());
    }

    #[test]
    fn fisher_vectors_are_unit_and_kernel_bounded(seed in 0u64..50, a in arb_sequence(8, 3), b in arb_sequence(8, 3)) {
        let mut model = small_model(seed);
        model.refresh_fisher_stats(&[&a, &b], Workers::ONE).unwrap();
        let va = model.fisher_vector(&a, None).unwrap();
        let vb = model.fisher_vector(&b, None).unwrap();
        let norm: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-10);
        prop_assert!((fisher_kernel(&va, &va).unwrap() - 1.0).abs() < 1e-10);
        prop_assert!(fisher_kernel(&va, &vb).unwrap().abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn lognormal_density_is_normalized(mu in -2.0f64..2.0, s in 0.2f64..1.5) {
        // Substituting x = e^y turns the density into a Gaussian in y.
        let rule = GaussLegendre::new(64);
        let (lo, hi) = (mu - 10.0 * s, mu + 10.0 * s);
        let steps = 20;
        let width = (hi - lo) / steps as f64;
        let total: f64 = (0..steps)
            .map(|i| {
                let a = lo + i as f64 * width;
                rule.integrate(a, a + width, |y| (lognormal_log_density(y.exp(), mu, s) + y).exp())
            })
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-3, "integral {}", total);
    }

    #[test]
    fn divergences_are_nonnegative_and_vanish_on_identity(
        mu1 in -3.0f64..3.0, s1 in 0.05f64..3.0, mu2 in -3.0f64..3.0, s2 in 0.05f64..3.0,
        p in prop::collection::vec(0.01f64..1.0, 4), q in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| { let t: f64 = v.iter().sum(); v.iter().map(|x| x / t).collect::<Vec<_>>() };
        let (p, q) = (norm(&p), norm(&q));
        prop_assert!(lognormal_kl(mu1, s1, mu2, s2) >= 0.0);
        prop_assert!(lognormal_kl(mu1, s1, mu1, s1).abs() < 1e-10);
        prop_assert!(categorical_kl(&p, &q) >= -1e-15);
        prop_assert!(categorical_kl(&p, &p).abs() < 1e-10);
    }

    #[test]
    fn codes_are_signs_and_flip_under_negation(v in prop::collection::vec(-1.0f64..1.0, 6), seed in 0u64..100) {
        prop_assume!(v.iter().all(|x| x.abs() > 1e-6));
        let coder = Coder::random_hyperplanes(6, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let code = compute_code(&v, &coder).unwrap();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
        let flipped = compute_code(&neg, &coder).unwrap();
        prop_assert!(code.iter().all(|&b| b == 1 || b == -1));
        prop_assert!(code.iter().zip(&flipped).all(|(a, b)| *a == -*b));
        prop_assert_eq!(compute_code(&scaled, &coder).unwrap(), code);
    }

    #[test]
    fn every_id_lands_in_exactly_one_bucket_per_table(
        codes in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 10), 1..30),
        tables in 1usize..4, bits in 1usize..6, seed in 0u64..100,
    ) {
        let mut index = HashIndex::new(HashScheme::RandomHyperplane, 10, HashProfile { tables, bits }, seed).unwrap();
        let codes: Vec<Vec<i8>> = codes.iter().map(|c| c.iter().map(|&b| if b { 1 } else { -1 }).collect()).collect();
        for (i, c) in codes.iter().enumerate() {
            index.assign_buckets(&format!("x{i}"), c).unwrap();
        }
        for table in &index.tables {
            let filed: usize = table.buckets.values().map(|ids| ids.len()).sum();
            prop_assert_eq!(filed, codes.len());
        }
        // A stored code always retrieves its own id.
        for (i, c) in codes.iter().enumerate() {
            let id = format!("x{i}");
            let found = index.lookup_candidates(c).unwrap().contains(&id);
            prop_assert!(found, "{} missing", id);
        }
    }

    #[test]
    fn hash_objective_terms_are_bounded(emb in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 2..12), seed in 0u64..50) {
        let net = HashNet::random(5, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // Soft code entries lie in (-1, 1): per code, at most R for the
        // balance and saturation sums and 2 for the normalized pair sum.
        let n = emb.len() as f64;
        for (coupling, max_decorrelation) in [(Coupling::Pooled, 2.0 * n), (Coupling::PerPair, 2.0)] {
            let o = hash_objective(&net, &emb, &HashWeights::default(), coupling).unwrap();
            prop_assert!((0.0..=4.0 + 1e-12).contains(&o.balance));
            prop_assert!((0.0..=4.0 + 1e-12).contains(&o.saturation));
            prop_assert!(o.decorrelation >= 0.0 && o.decorrelation <= max_decorrelation + 1e-12);
            let [a, b, c] = HashWeights::default().0;
            prop_assert!((o.total - (a * o.balance + b * o.saturation + c * o.decorrelation)).abs() < 1e-12);
        }
    }

    #[test]
    fn code_statistics_are_in_range(codes in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 6), 2..20)) {
        let codes: Vec<Vec<i8>> = codes.iter().map(|c| c.iter().map(|&b| if b { 1 } else { -1 }).collect()).collect();
        let bal = bit_balance(&codes);
        let corr = mean_abs_correlation(&codes);
        prop_assert!((0.0..=1.0).contains(&bal));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&corr));
    }

    #[test]
    fn ranking_is_a_sorted_permutation(scores in prop::collection::vec(-5i32..5, 1..20)) {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("c{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let ranked = rank_by_score(&refs, &scores).unwrap();
        prop_assert_eq!(ranked.len(), ids.len());
        for w in ranked.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        let got: BTreeSet<&String> = ranked.iter().map(|(id, _)| id).collect();
        prop_assert_eq!(got.len(), ids.len());
    }

    #[test]
    fn splits_partition_the_queries(n in 3usize..80, seed in 0u64..1000) {
        let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        let split = split_queries(&ids, [0.5, 0.1, 0.4], seed).unwrap();
        let mut all: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        prop_assert_eq!(all.len(), n);
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split_queries(&ids, [0.5, 0.1, 0.4], seed).unwrap(), split);
    }

    #[test]
    fn sequences_round_trip_through_json(seq in arb_sequence(20, 7)) {
        let back = sequence_from_json(&sequence_to_json(&seq)).unwrap();
        prop_assert_eq!(back, seq);
    }
}
