use ctes_core::mtpp::{MtppConfig, MtppModel};
use ctes_core::parallel::Workers;
use ctes_core::relevance::{FisherConfig, RelevanceModel, ScoreMode};
use ctes_core::synth::{generate, split_queries, GeneratorConfig, WarpConfig, DEFAULT_SPLIT};
use ctes_core::train::{
    assign_combined, combined_params, query_gradient, train, PassOptions, TrainConfig, TrainSplit,
    Trainable,
};
use ctes_core::unwarp::{UnwarpConfig, UnwarpNet};
use ctes_core::EventSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_model(mode: ScoreMode, seed: u64) -> RelevanceModel {
    let mtpp = MtppModel::new(MtppConfig {
        dim: 4,
        vocab: 3,
        max_len: 8,
        dropout: 0.0,
        seed,
        ..MtppConfig::default()
    })
    .unwrap();
    let unwarp = UnwarpNet::random(
        UnwarpConfig {
            hidden: 3,
            quad_nodes: 8,
            ..UnwarpConfig::default()
        },
        3.0,
        &mut ChaCha8Rng::seed_from_u64(seed + 1),
    )
    .unwrap();
    RelevanceModel::new(mode, mtpp, unwarp, FisherConfig::default(), 0.3).unwrap()
}

fn random_seq(id: &str, len: usize, rng: &mut ChaCha8Rng) -> EventSequence {
    let mut t = 0.0;
    let mut times = Vec::new();
    let mut marks = Vec::new();
    for _ in 0..len {
        t += 0.1 + rng.random::<f64>();
        times.push(t);
        marks.push(rng.random_range(0..3));
    }
    EventSequence::from_parts(id, &times, &marks, t + 0.5).unwrap()
}

fn opts(margin: f64) -> PassOptions {
    PassOptions {
        margin,
        trainable: Trainable::ALL,
        dropout_seed: None,
        workers: Workers::ONE,
    }
}

#[test]
fn a_small_gradient_step_lowers_the_ranking_loss() {
    for mode in [
        ScoreMode::SelfAttn,
        ScoreMode::CrossAttn,
        ScoreMode::HashNsr,
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = micro_model(mode, 9);
        let query = random_seq("q", 4, &mut rng);
        let cands: Vec<EventSequence> = (0..4)
            .map(|i| random_seq(&format!("c{i}"), 3 + i, &mut rng))
            .collect();
        let refs: Vec<&EventSequence> = cands.iter().collect();
        model.refresh_fisher_stats(&refs, Workers::ONE).unwrap();
        let pairs = [(0, 2), (0, 3), (1, 2), (1, 3)];
        let before = query_gradient(&model, &query, &refs, &pairs, &opts(2.0)).unwrap();
        assert!(before.active_pairs > 0);
        let grad: Vec<f64> = before.mtpp.iter().chain(&before.unwarp).copied().collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut params = combined_params(&model);
        let moved: Vec<f64> = params
            .flatten()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - 1e-4 * g / norm)
            .collect();
        params.assign_flat(&moved).unwrap();
        let mut stepped = model.clone();
        assign_combined(&mut stepped, &params).unwrap();
        let after = query_gradient(&stepped, &query, &refs, &pairs, &opts(2.0)).unwrap();
        assert!(
            after.loss < before.loss,
            "{mode}: {} -> {}",
            before.loss,
            after.loss
        );
    }
}

#[test]
fn zero_margin_and_correct_order_give_zero_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = micro_model(ScoreMode::CrossAttn, 2);
    let query = random_seq("q", 4, &mut rng);
    let cands: Vec<EventSequence> = (0..5)
        .map(|i| random_seq(&format!("c{i}"), 2 + i, &mut rng))
        .collect();
    let refs: Vec<&EventSequence> = cands.iter().collect();
    model.refresh_fisher_stats(&refs, Workers::ONE).unwrap();
    let scores: Vec<f64> = cands
        .iter()
        .map(|c| model.relevance_score(&query, c).unwrap().s)
        .collect();
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Every pair puts the higher-scored candidate first.
    let pairs: Vec<(usize, usize)> = (0..order.len())
        .flat_map(|i| (i + 1..order.len()).map(move |j| (i, j)))
        .map(|(i, j)| (order[i], order[j]))
        .filter(|&(p, n)| scores[p] > scores[n])
        .collect();
    assert!(!pairs.is_empty());
    let g = query_gradient(&model, &query, &refs, &pairs, &opts(0.0)).unwrap();
    assert_eq!(g.hinge, 0.0);
    assert_eq!(g.active_pairs, 0);
    let reversed: Vec<(usize, usize)> = pairs.iter().map(|&(p, n)| (n, p)).collect();
    let g = query_gradient(&model, &query, &refs, &reversed, &opts(0.0)).unwrap();
    assert_eq!(g.active_pairs, reversed.len());
    assert!(g.hinge > 0.0);
}

fn tiny_benchmark() -> GeneratorConfig {
    GeneratorConfig {
        n_base: 6,
        subseqs_per_base: (5, 5),
        mean_len: 8,
        max_len: 64,
        seed: 13,
        ..GeneratorConfig::default()
    }
}

fn run_training(workers: usize) -> (RelevanceModel, String) {
    let ds = generate(&tiny_benchmark()).unwrap().dataset;
    let split = split_queries(&ds.query_ids(), DEFAULT_SPLIT, 1).unwrap();
    let mtpp = MtppModel::new(MtppConfig {
        dim: 6,
        max_len: 64,
        seed: 4,
        ..MtppConfig::default()
    })
    .unwrap();
    let unwarp = UnwarpNet::identity(
        UnwarpConfig {
            hidden: 4,
            quad_nodes: 8,
            noise: true,
            ..UnwarpConfig::default()
        },
        ds.global_horizon(),
    )
    .unwrap();
    let model = RelevanceModel::new(
        ScoreMode::CrossAttn,
        mtpp,
        unwarp,
        FisherConfig::default(),
        0.01,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        negatives: 6,
        max_pairs: 20,
        val_negatives: Some(10),
        workers,
        seed: 21,
        ..TrainConfig::default()
    };
    let tsplit = TrainSplit {
        train: split.train,
        val: split.val,
        checkpoint_dir: None,
    };
    let (model, history) = train(model, &ds, &tsplit, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 2);
    (model, serde_json::to_string(&history).unwrap())
}

#[test]
fn training_is_bit_reproducible_across_runs_and_worker_counts() {
    let (m1, h1) = run_training(1);
    let (m2, h2) = run_training(1);
    let (m3, h3) = run_training(3);
    assert_eq!(h1, h2);
    assert_eq!(h1, h3);
    let bits = |m: &RelevanceModel| {
        combined_params(m)
            .flatten()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&m1), bits(&m2));
    assert_eq!(bits(&m1), bits(&m3));
}

#[test]
fn affine_warp_doubles_the_mean_gap() {
    let mean_gap = 0.2;
    let cfg = GeneratorConfig {
        n_base: 12,
        subseqs_per_base: (4, 4),
        mean_len: 300,
        max_len: 512,
        mean_gap,
        rate_spread: 1.0,
        gap_shape: (0.3, 0.3),
        warp: WarpConfig {
            scale: (2.0, 2.0),
            shift: (0.0, 0.0),
            power: None,
        },
        seed: 17,
        ..GeneratorConfig::default()
    };
    let ds = generate(&cfg).unwrap().dataset;
    let mut pooled = (0.0, 0usize);
    let mut checked = 0;
    for seq in ds.corpus.values().chain(ds.queries.values()) {
        if seq.len() < 200 {
            continue;
        }
        let gaps = seq.inter_arrivals();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(
            (mean / (2.0 * mean_gap) - 1.0).abs() < 0.1,
            "{}: mean gap {mean}",
            seq.id()
        );
        pooled.0 += gaps.iter().sum::<f64>();
        pooled.1 += gaps.len();
        checked += 1;
    }
    assert!(
        checked >= 10,
        "only {checked} windows of length 200 or more"
    );
    let overall = pooled.0 / pooled.1 as f64;
    assert!(
        (overall / (2.0 * mean_gap) - 1.0).abs() < 0.03,
        "pooled mean gap {overall}"
    );
}
