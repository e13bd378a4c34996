use ctes_core::mtpp::{MtppConfig, MtppModel};
use ctes_core::parallel::Workers;
use ctes_core::relevance::{FisherConfig, RelevanceModel, ScoreMode};
use ctes_core::train::{
    assign_combined, combined_params, query_gradient, query_objective_graph, PassOptions, Trainable,
};
use ctes_core::unwarp::{UnwarpConfig, UnwarpNet};
use ctes_core::EventSequence;
use ctes_diff::{grad_of_grad, gradient, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_model(mode: ScoreMode, seed: u64) -> RelevanceModel {
    let mtpp = MtppModel::new(MtppConfig {
        dim: 4,
        vocab: 3,
        max_len: 4,
        blocks: 2,
        dropout: 0.0,
        time_scale: 1.0,
        seed,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let unwarp = UnwarpNet::random(
        UnwarpConfig {
            hidden: 3,
            quad_nodes: 8,
            ..UnwarpConfig::default()
        },
        1.0,
        &mut rng,
    )
    .unwrap();
    let fisher = FisherConfig {
        include: vec![String::new()],
        ..FisherConfig::default()
    };
    RelevanceModel::new(mode, mtpp, unwarp, fisher, 0.3).unwrap()
}

fn two_event_seq(id: &str, rng: &mut ChaCha8Rng) -> EventSequence {
    let t1 = 0.2 + rng.random::<f64>();
    let t2 = t1 + 0.2 + rng.random::<f64>();
    let marks = [rng.random_range(0..3), rng.random_range(0..3)];
    EventSequence::from_parts(id, &[t1, t2], &marks, t2 + 0.5 * rng.random::<f64>()).unwrap()
}

struct Instance {
    model: RelevanceModel,
    query: EventSequence,
    cands: Vec<EventSequence>,
    pairs: Vec<(usize, usize)>,
}

fn instance(mode: ScoreMode, seed: u64) -> Instance {
    let mut model = micro_model(mode, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query = two_event_seq("q", &mut rng);
    let cands: Vec<EventSequence> = (0..3)
        .map(|i| two_event_seq(&format!("c{i}"), &mut rng))
        .collect();
    let refs: Vec<&EventSequence> = cands.iter().collect();
    model.refresh_fisher_stats(&refs, Workers::ONE).unwrap();
    Instance {
        model,
        query,
        cands,
        pairs: vec![(0, 1), (0, 2)],
    }
}

/// A margin large enough that every pair stays active under small moves.
const MARGIN: f64 = 5.0;

fn full_objective(inst: &Instance, params: &ParamStore) -> (f64, Vec<f64>) {
    let refs: Vec<&EventSequence> = inst.cands.iter().collect();
    gradient(params, |g, vars| {
        query_objective_graph(
            &inst.model,
            g,
            vars,
            &inst.query,
            &refs,
            &inst.pairs,
            MARGIN,
        )
        .unwrap()
    })
    .unwrap()
}

fn decomposed(inst: &Instance) -> (f64, Vec<f64>) {
    let refs: Vec<&EventSequence> = inst.cands.iter().collect();
    let opts = PassOptions {
        margin: MARGIN,
        trainable: Trainable::ALL,
        dropout_seed: None,
        workers: Workers::ONE,
    };
    let g = query_gradient(&inst.model, &inst.query, &refs, &inst.pairs, &opts).unwrap();
    let mut flat = g.mtpp;
    flat.extend(g.unwarp);
    (g.loss, flat)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

#[test]
fn decomposed_gradient_matches_single_graph() {
    for mode in [
        ScoreMode::SelfAttn,
        ScoreMode::CrossAttn,
        ScoreMode::HashNsr,
    ] {
        for seed in 0..3 {
            let inst = instance(mode, seed);
            let params = combined_params(&inst.model);
            let (lf, gf) = full_objective(&inst, &params);
            let (ld, gd) = decomposed(&inst);
            assert!(
                (lf - ld).abs() < 1e-10 * lf.abs().max(1.0),
                "{mode} loss {lf} vs {ld}"
            );
            let err = rel_err(&gd, &gf);
            assert!(err < 1e-9, "{mode} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for mode in [
        ScoreMode::SelfAttn,
        ScoreMode::CrossAttn,
        ScoreMode::HashNsr,
    ] {
        let inst = instance(mode, 7);
        let params = combined_params(&inst.model);
        let (_, g) = decomposed(&inst);
        let base = params.flatten();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Directional derivatives along random unit directions.
        for _ in 0..4 {
            let dir: Vec<f64> = (0..base.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|x| x / norm).collect();
            let eval = |h: f64| {
                let mut p = params.clone();
                let moved: Vec<f64> = base.iter().zip(&dir).map(|(x, d)| x + h * d).collect();
                p.assign_flat(&moved).unwrap();
                let mut m = inst.model.clone();
                assign_combined(&mut m, &p).unwrap();
                let shifted = Instance {
                    model: m,
                    query: inst.query.clone(),
                    cands: inst.cands.clone(),
                    pairs: inst.pairs.clone(),
                };
                decomposed(&shifted).0
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let err = (fd - an).abs() / an.abs().max(1e-6);
            assert!(
                err < 1e-3,
                "{mode}: directional derivative {an} vs finite difference {fd}"
            );
        }
    }
}

#[test]
fn hessian_vector_products_match_gradient_differences() {
    for mode in [ScoreMode::SelfAttn, ScoreMode::CrossAttn] {
        let inst = instance(mode, 21);
        let params = combined_params(&inst.model);
        let refs: Vec<&EventSequence> = inst.cands.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dir: Vec<f64> = (0..params.num_values())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let hv = grad_of_grad(
            &params,
            |g, vars| {
                query_objective_graph(
                    &inst.model,
                    g,
                    vars,
                    &inst.query,
                    &refs,
                    &inst.pairs,
                    MARGIN,
                )
                .unwrap()
            },
            &dir,
        )
        .unwrap();
        let base = params.flatten();
        let grad_at = |h: f64| {
            let mut p = params.clone();
            let moved: Vec<f64> = base.iter().zip(&dir).map(|(x, d)| x + h * d).collect();
            p.assign_flat(&moved).unwrap();
            full_objective(&inst, &p).1
        };
        let h = 1e-5;
        let (gp, gm) = (grad_at(h), grad_at(-h));
        let fd: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        let err = rel_err(&hv, &fd);
        assert!(err < 1e-3, "{mode}: HVP relative error {err:e}");
    }
}
