//! Pairwise ranking training for the relevance models.
//!
//! Every training query is paired with its positives and a fresh sample of
//! negatives each epoch; the objective is the hinge loss over those pairs
//! plus the unwarping penalty and an L2 term. Gradients reach the MTPP
//! parameters through the Fisher vectors themselves, which are gradients of
//! log-likelihoods, so the ranking gradient is a second-order quantity.
//!
//! The gradient of one query's hinge terms is assembled pass by pass rather
//! than from one graph over all its candidates. With `a_c` the signed count
//! of active pairs in which candidate `c` appears (negative `+1`, positive
//! `-1`), the hinge part is `Σ_c a_c s(q, c)`, and the kernel part of its
//! gradient splits into one query pass that differentiates `v_q · Σ_c a_c
//! v_c` and one pass per candidate that differentiates `a_c v_c · v_q`, with
//! the other side held fixed. Unwarped query times enter every pass as a
//! leaf; their accumulated gradient is pushed through the unwarper at the
//! end. [`query_objective_graph`] builds the same objective as a single
//! graph for verification.

use std::io::Write;
use std::path::{Path, PathBuf};

use ctes_diff::{flatten_values, AdamConfig, AdamState, Graph, ParamStore, ParamVars, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::eval::{evaluate_protocol, fnv1a, ProtocolConfig, PROTOCOL_NEGATIVES};
use crate::mtpp::{GraphSeq, MtppModel};
use crate::parallel::{try_par_map, Workers};
use crate::relevance::{
    kl_sum_graph, pair_horizon, sim_u, sim_u_graph, ModelScorer, RelevanceModel, ScoreMode,
};
use crate::seq::{Dataset, Event, EventSequence};
use crate::unwarp::{noise_shift, unbiasedness_penalty, unwarp_sequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimization {
    /// MTPP and unwarper trained jointly on the ranking loss.
    EndToEnd,
    /// Maximum likelihood for the MTPP, then the ranking loss for the
    /// unwarper with the MTPP frozen.
    Staged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Queries per optimizer step.
    pub batch_size: usize,
    /// Negatives sampled per query and epoch.
    pub negatives: usize,
    /// Pairs kept per query and epoch.
    pub max_pairs: usize,
    pub mode: ScoreMode,
    pub optimization: Optimization,
    pub seed: u64,
    pub l2: f64,
    pub dropout: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Negatives per validation query; `None` uses the evaluation protocol's
    /// count.
    pub val_negatives: Option<usize>,
    /// Likelihood epochs before the ranking stage in staged mode.
    pub mle_epochs: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            gamma: 0.01,
            lr: 1e-3,
            epochs: 20,
            batch_size: 16,
            negatives: 100,
            max_pairs: 2000,
            mode: ScoreMode::CrossAttn,
            optimization: Optimization::EndToEnd,
            seed: 0,
            l2: 1e-3,
            dropout: 0.2,
            patience: 5,
            val_negatives: None,
            mle_epochs: 10,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be nonnegative", self.margin));
        }
        if self.negatives == 0 || self.batch_size == 0 || self.max_pairs == 0 {
            return bad("negatives, batch_size and max_pairs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0) || !self.gamma.is_finite() {
            return bad("lr must be positive, l2 nonnegative and gamma finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.workers == 0 || self.val_negatives == Some(0) {
            return bad("workers and val_negatives must be positive".into());
        }
        Ok(())
    }

    pub fn workers(&self) -> Workers {
        Workers::new(self.workers).unwrap_or(Workers::ONE)
    }
}

/// `max(0, s_neg − s_pos + δ)`.
pub fn hinge_rank_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub mtpp: bool,
    pub unwarp: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        mtpp: true,
        unwarp: true,
    };
}

/// Settings for one query's objective.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    pub margin: f64,
    pub trainable: Trainable,
    /// Seeds per-pass dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    pub workers: Workers,
}

/// One query's hinge-plus-penalty value and its gradient, split into the
/// MTPP and unwarper parts in flattening order.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGradient {
    pub loss: f64,
    pub hinge: f64,
    pub active_pairs: usize,
    pub mtpp: Vec<f64>,
    pub unwarp: Vec<f64>,
}

/// The unwarped query as graph inputs: event times `[n, 1]` and horizon.
struct QueryVars<'g> {
    seq: GraphSeq<'g>,
    horizon: Var<'g>,
}

impl<'g> QueryVars<'g> {
    /// `z` holds the `n` unwarped times followed by the unwarped horizon.
    fn new(z: Var<'g>, marks: &[usize]) -> Self {
        let n = marks.len();
        Self {
            seq: GraphSeq::new(z.slice_rows(0, n), marks),
            horizon: z.slice_rows(n, n + 1),
        }
    }
}

fn pass_rng(seed: Option<u64>, salt: &str) -> Option<ChaCha8Rng> {
    seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ fnv1a(salt)))
}

fn as_dyn(rng: &mut Option<ChaCha8Rng>) -> Option<&mut dyn RngCore> {
    rng.as_mut().map(|r| r as &mut dyn RngCore)
}

/// Fisher vector of the query, self-conditioned in cross modes.
fn query_vector_graph<'g>(
    model: &RelevanceModel,
    mvars: &ParamVars<'g>,
    q: &QueryVars<'g>,
    create_graph: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var<'g>> {
    let ctx = model.mode.is_cross().then_some(&q.seq);
    model.fisher_vector_graph(mvars, &q.seq, ctx, create_graph, rng)
}

fn corpus_vector_graph<'g>(
    model: &RelevanceModel,
    mvars: &ParamVars<'g>,
    c: &EventSequence,
    q: &QueryVars<'g>,
    create_graph: bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var<'g>> {
    let graph = q.horizon.graph();
    let target = GraphSeq::constant(graph, c);
    let ctx = model.mode.is_cross().then_some(&q.seq);
    model.fisher_vector_graph(mvars, &target, ctx, create_graph, rng)
}

/// Negated per-step divergence between `c` and the query, both conditioned
/// on the query.
fn kl_score_graph<'g>(
    model: &RelevanceModel,
    mvars: &ParamVars<'g>,
    c: &EventSequence,
    q: &QueryVars<'g>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var<'g>> {
    let graph = q.horizon.graph();
    let k = q.seq.len().min(c.len());
    let target = GraphSeq::constant(graph, c);
    let reborrow = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
    let hc = model
        .mtpp
        .encode_graph(mvars, &target, Some(&q.seq), k + 1, reborrow)?;
    let hq = model
        .mtpp
        .encode_graph(mvars, &q.seq, Some(&q.seq), k + 1, rng)?;
    let p = model.mtpp.heads_graph(mvars, hc);
    let r = model.mtpp.heads_graph(mvars, hq);
    Ok(-kl_sum_graph(&p, &r, k))
}

/// Unwarped times and horizon of `q`, with the optional noise draw.
fn unwarped_inputs(
    model: &RelevanceModel,
    q: &EventSequence,
    noise: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>> {
    let mut times = q.times();
    times.push(q.horizon());
    let mut z = model.unwarp.unwarp_times(&times)?;
    if let Some(rng) = noise {
        if model.unwarp.config().noise {
            let eta: f64 = Normal::new(0.0, model.unwarp.config().sigma)
                .expect("validated sigma")
                .sample(rng);
            let shift = noise_shift(eta, z.iter().copied().fold(f64::INFINITY, f64::min));
            z.iter_mut().for_each(|x| *x += shift);
        }
    }
    Ok(z)
}

fn sequence_from_z(q: &EventSequence, z: &[f64]) -> Result<EventSequence> {
    let n = q.len();
    let events = q
        .events()
        .iter()
        .zip(z)
        .map(|(e, &t)| Event::new(t, e.mark))
        .collect();
    EventSequence::new(q.id(), events, z[n])
}

/// Hinge loss, penalty and decomposed gradient for one query.
///
/// `pairs` index into `candidates` as `(positive, negative)`.
pub fn query_gradient(
    model: &RelevanceModel,
    query: &EventSequence,
    candidates: &[&EventSequence],
    pairs: &[(usize, usize)],
    opts: &PassOptions,
) -> Result<QueryGradient> {
    let n = query.len();
    let marks = query.marks();
    let mut noise_rng = pass_rng(opts.dropout_seed, &format!("noise:{}", query.id()));
    let z = unwarped_inputs(model, query, noise_rng.as_mut())?;
    let uq = sequence_from_z(query, &z)?;
    let q_salt = format!("q:{}", query.id());
    let c_salt = |c: &EventSequence| format!("c:{}:{}", query.id(), c.id());
    let fisher_mode = model.mode != ScoreMode::HashNsr;

    // Forward values.
    let v_q: Option<Vec<f64>> = if fisher_mode {
        let graph = Graph::new();
        let mvars = model
            .mtpp
            .params()
            .bind_where(&graph, |n| model.fisher.selects(n));
        let qv = QueryVars::new(graph.constant(Tensor::matrix(n + 1, 1, z.clone())), &marks);
        let mut rng = pass_rng(opts.dropout_seed, &q_salt);
        let v = query_vector_graph(model, &mvars, &qv, false, as_dyn(&mut rng))?;
        graph.check_finite()?;
        Some(v.value().data().to_vec())
    } else {
        None
    };
    let values: Vec<(f64, Option<Vec<f64>>)> =
        try_par_map(candidates, opts.workers, |c| -> Result<_> {
            let graph = Graph::new();
            let mvars = model
                .mtpp
                .params()
                .bind_where(&graph, |n| model.fisher.selects(n));
            let qv = QueryVars::new(graph.constant(Tensor::matrix(n + 1, 1, z.clone())), &marks);
            let mut rng = pass_rng(opts.dropout_seed, &c_salt(c));
            let base = match &v_q {
                Some(vq) => {
                    let v = corpus_vector_graph(model, &mvars, c, &qv, false, as_dyn(&mut rng))?;
                    graph.check_finite()?;
                    let v = v.value().data().to_vec();
                    (vq.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>(), Some(v))
                }
                None => {
                    let g = kl_score_graph(model, &mvars, c, &qv, as_dyn(&mut rng))?;
                    graph.check_finite()?;
                    (g.item(), None)
                }
            };
            let sim = sim_u(&uq, c, pair_horizon(&uq, c))?.sim_u;
            Ok((base.0 + model.gamma * sim, base.1))
        })?;

    let mut coeff = vec![0.0; candidates.len()];
    let mut hinge = 0.0;
    let mut active_pairs = 0;
    for &(p, m) in pairs {
        let l = hinge_rank_loss(values[p].0, values[m].0, opts.margin);
        if l > 0.0 {
            hinge += l;
            active_pairs += 1;
            coeff[p] -= 1.0;
            coeff[m] += 1.0;
        }
    }
    let penalty = unbiasedness_penalty(&model.unwarp, query.horizon())?;
    let mut out = QueryGradient {
        loss: hinge + penalty,
        hinge,
        active_pairs,
        mtpp: vec![0.0; model.mtpp.params().num_values()],
        unwarp: vec![0.0; model.unwarp.params().num_values()],
    };
    let Trainable {
        mtpp: want_theta,
        unwarp: want_phi,
    } = opts.trainable;
    if !want_theta && !want_phi {
        return Ok(out);
    }
    let mut grad_z = vec![0.0; n + 1];
    let active: Vec<usize> = (0..candidates.len()).filter(|&i| coeff[i] != 0.0).collect();

    // Query pass: kernel against the weighted corpus vectors plus SIM_U.
    {
        let graph = Graph::new();
        let mvars = model
            .mtpp
            .params()
            .bind_where(&graph, |n| want_theta || model.fisher.selects(n));
        let zv = if want_phi {
            graph.param(Tensor::matrix(n + 1, 1, z.clone()))
        } else {
            graph.constant(Tensor::matrix(n + 1, 1, z.clone()))
        };
        let qv = QueryVars::new(zv, &marks);
        let mut total: Option<Var> = None;
        if let Some(vq) = &v_q {
            let mut w = vec![0.0; vq.len()];
            for &i in &active {
                let vc = values[i].1.as_ref().expect("fisher value");
                w.iter_mut().zip(vc).for_each(|(a, b)| *a += coeff[i] * b);
            }
            let mut rng = pass_rng(opts.dropout_seed, &q_salt);
            let v = query_vector_graph(model, &mvars, &qv, true, as_dyn(&mut rng))?;
            total = Some(v.dot(graph.constant(Tensor::vector(w))));
        }
        if want_phi && model.gamma != 0.0 {
            for &i in &active {
                let s = sim_u_graph(qv.seq.times, &marks, qv.horizon, candidates[i])
                    .scale(coeff[i] * model.gamma);
                total = Some(match total {
                    Some(t) => t + s,
                    None => s,
                });
            }
        }
        if let Some(total) = total {
            let mut xs = if want_theta { mvars.all() } else { Vec::new() };
            if want_phi {
                xs.push(zv);
            }
            let grads = graph.grad(total, &xs, false);
            graph.check_finite()?;
            let mut flat = flatten_values(&grads);
            if want_phi {
                let gz = flat.split_off(flat.len() - (n + 1));
                grad_z.iter_mut().zip(gz).for_each(|(a, b)| *a += b);
            }
            if want_theta {
                out.mtpp.iter_mut().zip(flat).for_each(|(a, b)| *a += b);
            }
        }
    }

    // Candidate passes.
    let theta_needed = want_theta;
    let z_needed = want_phi && model.mode.is_cross();
    if theta_needed || z_needed {
        let parts: Vec<(Vec<f64>, Vec<f64>)> =
            try_par_map(&active, opts.workers, |&i| -> Result<_> {
                let c = candidates[i];
                let graph = Graph::new();
                let mvars = model
                    .mtpp
                    .params()
                    .bind_where(&graph, |n| theta_needed || model.fisher.selects(n));
                let zv = if z_needed {
                    graph.param(Tensor::matrix(n + 1, 1, z.clone()))
                } else {
                    graph.constant(Tensor::matrix(n + 1, 1, z.clone()))
                };
                let qv = QueryVars::new(zv, &marks);
                let mut rng = pass_rng(opts.dropout_seed, &c_salt(c));
                let scalar = match &v_q {
                    Some(vq) => corpus_vector_graph(model, &mvars, c, &qv, true, as_dyn(&mut rng))?
                        .dot(graph.constant(Tensor::vector(vq.clone())))
                        .scale(coeff[i]),
                    None => {
                        kl_score_graph(model, &mvars, c, &qv, as_dyn(&mut rng))?.scale(coeff[i])
                    }
                };
                let mut xs = if theta_needed {
                    mvars.all()
                } else {
                    Vec::new()
                };
                if z_needed {
                    xs.push(zv);
                }
                let grads = graph.grad(scalar, &xs, false);
                graph.check_finite()?;
                let mut flat = flatten_values(&grads);
                let gz = if z_needed {
                    flat.split_off(flat.len() - (n + 1))
                } else {
                    Vec::new()
                };
                Ok((flat, gz))
            })?;
        for (gt, gz) in parts {
            if theta_needed {
                out.mtpp.iter_mut().zip(gt).for_each(|(a, b)| *a += b);
            }
            grad_z.iter_mut().zip(gz).for_each(|(a, b)| *a += b);
        }
    }

    // Unwarper pass: pull the time gradient back and add the penalty.
    if want_phi {
        let graph = Graph::new();
        let uvars = model.unwarp.params().bind(&graph);
        let mut times = query.times();
        times.push(query.horizon());
        let zg = model.unwarp.unwarp_graph(&graph, &uvars, &times, None);
        let total = zg.dot(graph.constant(Tensor::matrix(n + 1, 1, grad_z)))
            + model.unwarp.penalty_graph(&graph, &uvars, query.horizon());
        let grads = graph.grad(total, &uvars.all(), false);
        graph.check_finite()?;
        out.unwarp = flatten_values(&grads);
    }
    Ok(out)
}

/// MTPP and unwarper parameters in one store under `mtpp.` and `unwarp.`.
pub fn combined_params(model: &RelevanceModel) -> ParamStore {
    let mut p = ParamStore::new();
    p.extend_prefixed("mtpp.", model.mtpp.params());
    p.extend_prefixed("unwarp.", model.unwarp.params());
    p
}

/// Writes a combined store back into `model`.
pub fn assign_combined(model: &mut RelevanceModel, params: &ParamStore) -> Result<()> {
    model.mtpp.set_params(params.strip_prefix("mtpp."))?;
    model.unwarp.set_params(params.strip_prefix("unwarp."))?;
    Ok(())
}

/// One query's hinge terms and penalty as a single graph over a combined
/// store bound in `vars` (no dropout).
pub fn query_objective_graph<'g>(
    model: &RelevanceModel,
    graph: &'g Graph,
    vars: &ParamVars<'g>,
    query: &EventSequence,
    candidates: &[&EventSequence],
    pairs: &[(usize, usize)],
    margin: f64,
) -> Result<Var<'g>> {
    let mvars = vars.scoped("mtpp.");
    let uvars = vars.scoped("unwarp.");
    let mut times = query.times();
    times.push(query.horizon());
    let z = model.unwarp.unwarp_graph(graph, &uvars, &times, None);
    let marks = query.marks();
    let qv = QueryVars::new(z, &marks);
    let v_q = match model.mode {
        ScoreMode::HashNsr => None,
        _ => Some(query_vector_graph(model, &mvars, &qv, true, None)?),
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let base = match v_q {
            Some(vq) => corpus_vector_graph(model, &mvars, c, &qv, true, None)?.dot(vq),
            None => kl_score_graph(model, &mvars, c, &qv, None)?,
        };
        let sim = sim_u_graph(qv.seq.times, &marks, qv.horizon, c);
        scores.push(base + sim.scale(model.gamma));
    }
    let mut total = model.unwarp.penalty_graph(graph, &uvars, query.horizon());
    for &(p, m) in pairs {
        total = total + (scores[m] - scores[p]).add_scalar(margin).relu();
    }
    Ok(total)
}

/// One epoch's summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `likelihood` or `ranking`.
    pub stage: String,
    /// Mean objective per optimizer step.
    pub loss: f64,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, detail: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Validation MAP of the model entering the ranking stage.
    pub initial_val_map: f64,
    pub best_val_map: f64,
    /// Epoch whose parameters were kept; 0 means the starting point of the
    /// ranking stage.
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl History {
    /// `epoch,loss,val_map`; missing validation values are left empty.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "epoch,loss,val_map")?;
        for r in &self.epochs {
            let v = r.val_map.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{v}", r.epoch, r.loss)?;
        }
        Ok(())
    }
}

/// Query ids plus the checkpoint location for [`train`].
#[derive(Clone, Debug, Default)]
pub struct TrainSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Directory receiving `best.json` at each validation improvement.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Validation MAP of `model` on `ids`.
pub fn validation_map(
    model: &RelevanceModel,
    dataset: &Dataset,
    ids: &[String],
    cfg: &TrainConfig,
) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let corpus: Vec<&EventSequence> = dataset.corpus.values().collect();
    let scorer = ModelScorer::with_corpus_cache(model, &corpus, cfg.workers())?;
    let protocol = ProtocolConfig {
        negatives: cfg.val_negatives.unwrap_or(PROTOCOL_NEGATIVES),
        seed: cfg.seed,
        workers: Workers::ONE,
        ..ProtocolConfig::default()
    };
    Ok(evaluate_protocol(&scorer, dataset, ids, &protocol)?.map())
}

/// Pairs for one query: all positives crossed with sampled negatives, then
/// subsampled to `max_pairs`.
fn sample_pairs(
    dataset: &Dataset,
    qid: &str,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<String>, Vec<(usize, usize)>)> {
    let labels = dataset
        .labels
        .get(qid)
        .ok_or_else(|| CoreError::Input(format!("training query {qid} has no labels")))?;
    let negs: Vec<&String> = labels.negatives.iter().collect();
    let picked: Vec<&String> = index::sample(rng, negs.len(), cfg.negatives.min(negs.len()))
        .into_iter()
        .map(|i| negs[i])
        .collect();
    let pos: Vec<&String> = labels.positives.iter().collect();
    let mut ids: Vec<String> = pos.iter().map(|s| s.to_string()).collect();
    ids.extend(picked.iter().map(|s| s.to_string()));
    let np = pos.len();
    let mut pairs: Vec<(usize, usize)> = (0..np)
        .flat_map(|p| (0..picked.len()).map(move |m| (p, np + m)))
        .collect();
    if pairs.len() > cfg.max_pairs {
        let mut keep = index::sample(rng, pairs.len(), cfg.max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|i| pairs[i]).collect();
    }
    Ok((ids, pairs))
}

fn with_dropout(mtpp: &MtppModel, dropout: f64) -> Result<MtppModel> {
    let mut config = mtpp.config().clone();
    config.dropout = dropout;
    MtppModel::from_params(config, mtpp.params().clone())
}

fn l2_gradient(params: &ParamStore, trainable: Trainable, l2: f64, grad: &mut [f64]) -> f64 {
    let mut penalty = 0.0;
    let mut offset = 0;
    for (name, t) in params.iter() {
        let on = if name.starts_with("mtpp.") {
            trainable.mtpp
        } else {
            trainable.unwarp
        };
        if on {
            for (g, x) in grad[offset..offset + t.len()].iter_mut().zip(t.data()) {
                *g += 2.0 * l2 * x;
                penalty += l2 * x * x;
            }
        }
        offset += t.len();
    }
    penalty
}

fn save_best(dir: &Path, model: &RelevanceModel, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut model = model.clone();
    model.mtpp = with_dropout(&model.mtpp, config.dropout)?;
    crate::bundle::save_model(&dir.join("best.json"), &model)
}

/// Trains `model` on the split and returns the best-validation parameters.
///
/// The model's mode and `γ` are overwritten from `cfg`. A non-finite loss
/// or gradient stops training and returns the last kept parameters.
pub fn train(
    mut model: RelevanceModel,
    dataset: &Dataset,
    split: &TrainSplit,
    cfg: &TrainConfig,
) -> Result<(RelevanceModel, History)> {
    cfg.validate()?;
    for q in &split.train {
        match dataset.labels.positives(q) {
            Some(p) if !p.is_empty() => {}
            _ => {
                return Err(CoreError::Input(format!(
                    "training query {q} has no positives"
                )))
            }
        }
        if !dataset.queries.contains_key(q) {
            return Err(CoreError::Input(format!("unknown training query {q}")));
        }
    }
    if split.train.is_empty() {
        return Err(CoreError::Input("no training queries".into()));
    }
    model.mode = cfg.mode;
    model.gamma = cfg.gamma;
    model.mtpp = with_dropout(&model.mtpp, cfg.dropout)?;
    let workers = cfg.workers();
    let corpus: Vec<&EventSequence> = dataset.corpus.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::new();

    let trainable = match cfg.optimization {
        Optimization::EndToEnd => Trainable::ALL,
        Optimization::Staged => {
            let loss = likelihood_stage(
                &mut model,
                dataset,
                &split.train,
                cfg,
                &mut rng,
                &mut epochs,
            )?;
            if let Some(detail) = loss {
                let history = History {
                    initial_val_map: 0.0,
                    best_val_map: 0.0,
                    best_epoch: 0,
                    epochs,
                    stop: StopReason::Diverged { epoch: 0, detail },
                };
                return Ok((finish(model, cfg)?, history));
            }
            Trainable {
                mtpp: false,
                unwarp: true,
            }
        }
    };

    let eval_model = |m: &RelevanceModel| -> Result<f64> {
        let mut frozen = m.clone();
        frozen.mtpp = with_dropout(&m.mtpp, 0.0)?;
        validation_map(&frozen, dataset, &split.val, cfg)
    };
    model.refresh_fisher_stats(&corpus, workers)?;
    let initial_val_map = eval_model(&model)?;
    if let Some(last) = epochs.last_mut() {
        last.val_map = Some(initial_val_map);
    }
    let mut best = (initial_val_map, 0usize, model.clone());
    if let Some(dir) = &split.checkpoint_dir {
        save_best(dir, &model, cfg)?;
    }
    let mut params = combined_params(&model);
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let offset_unwarp = model.mtpp.params().num_values();
    let mut stale = 0;
    let mut stop = StopReason::Completed;
    let first_epoch = epochs.len() + 1;
    'epochs: for e in 0..cfg.epochs {
        let epoch = first_epoch + e;
        if e > 0 {
            model.refresh_fisher_stats(&corpus, workers)?;
        }
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.num_values()];
            let mut loss = 0.0;
            for qid in batch {
                let (ids, pairs) = sample_pairs(dataset, qid, cfg, &mut rng)?;
                let cands: Vec<&EventSequence> = ids.iter().map(|id| &dataset.corpus[id]).collect();
                let opts = PassOptions {
                    margin: cfg.margin,
                    trainable,
                    dropout_seed: (cfg.dropout > 0.0).then(|| rng.next_u64()),
                    workers,
                };
                let g = match query_gradient(&model, &dataset.queries[qid], &cands, &pairs, &opts) {
                    Ok(g) => g,
                    Err(CoreError::Diff(err)) => {
                        stop = StopReason::Diverged {
                            epoch,
                            detail: err.to_string(),
                        };
                        break 'epochs;
                    }
                    Err(err) => return Err(err),
                };
                loss += g.loss;
                grad[..offset_unwarp]
                    .iter_mut()
                    .zip(&g.mtpp)
                    .for_each(|(a, b)| *a += b);
                grad[offset_unwarp..]
                    .iter_mut()
                    .zip(&g.unwarp)
                    .for_each(|(a, b)| *a += b);
            }
            loss += l2_gradient(&params, trainable, cfg.l2, &mut grad);
            if !loss.is_finite() || adam.step(&mut params, &grad).is_err() {
                stop = StopReason::Diverged {
                    epoch,
                    detail: format!("non-finite loss or gradient (loss {loss})"),
                };
                break 'epochs;
            }
            assign_combined(&mut model, &params)?;
            epoch_loss += loss;
            steps += 1;
        }
        model.refresh_fisher_stats(&corpus, workers)?;
        let val_map = eval_model(&model)?;
        epochs.push(EpochRecord {
            epoch,
            stage: "ranking".into(),
            loss: epoch_loss / steps.max(1) as f64,
            val_map: Some(val_map),
        });
        if val_map > best.0 {
            best = (val_map, epoch, model.clone());
            stale = 0;
            if let Some(dir) = &split.checkpoint_dir {
                save_best(dir, &model, cfg)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let history = History {
        epochs,
        initial_val_map,
        best_val_map: best.0,
        best_epoch: best.1,
        stop,
    };
    Ok((finish(best.2, cfg)?, history))
}

/// Dropout is a training-time setting; returned models keep the configured
/// rate so that resumed training behaves alike, and inference never applies
/// it.
fn finish(model: RelevanceModel, cfg: &TrainConfig) -> Result<RelevanceModel> {
    let mut model = model;
    model.mtpp = with_dropout(&model.mtpp, cfg.dropout)?;
    Ok(model)
}

/// Maximum likelihood for the MTPP. Self mode fits corpus sequences on
/// their own; cross modes fit each training query's positives conditioned
/// on the unwarped query. Returns a description on divergence.
fn likelihood_stage(
    model: &mut RelevanceModel,
    dataset: &Dataset,
    train_ids: &[String],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epochs: &mut Vec<EpochRecord>,
) -> Result<Option<String>> {
    let items: Vec<(&EventSequence, Option<EventSequence>)> = if model.mode.is_cross() {
        let mut v = Vec::new();
        for q in train_ids {
            let uq = unwarp_sequence(&model.unwarp, &dataset.queries[q])?;
            for p in dataset.labels.positives(q).into_iter().flatten() {
                v.push((&dataset.corpus[p], Some(uq.clone())));
            }
        }
        v
    } else {
        dataset.corpus.values().map(|c| (c, None)).collect()
    };
    let mut adam = AdamState::new(
        model.mtpp.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let workers = cfg.workers();
    let batch = cfg.batch_size.max(1);
    for e in 0..cfg.mle_epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch) {
            let seeds: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.next_u64())).collect();
            let parts = try_par_map(&seeds, workers, |&(i, seed)| -> Result<(f64, Vec<f64>)> {
                let (target, ctx) = &items[i];
                let graph = Graph::new();
                let vars = model.mtpp.params().bind(&graph);
                let t = GraphSeq::constant(&graph, target);
                let c = ctx.as_ref().map(|c| GraphSeq::constant(&graph, c));
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let drop = (cfg.dropout > 0.0).then_some(&mut r as &mut dyn RngCore);
                let ll = model
                    .mtpp
                    .log_likelihood_graph(&vars, &t, c.as_ref(), drop)?;
                let grads = graph.grad(ll, &vars.all(), false);
                Ok((ll.item(), flatten_values(&grads)))
            });
            let parts = match parts {
                Ok(p) => p,
                Err(CoreError::Diff(err)) => return Ok(Some(err.to_string())),
                Err(err) => return Err(err),
            };
            let scale = -1.0 / chunk.len() as f64;
            let mut grad = vec![0.0; model.mtpp.params().num_values()];
            let mut loss = 0.0;
            for (ll, g) in parts {
                loss += scale * ll;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
            let mut params = model.mtpp.params().clone();
            if !loss.is_finite() || adam.step(&mut params, &grad).is_err() {
                return Ok(Some(format!("non-finite likelihood loss {loss}")));
            }
            model.mtpp.set_params(params)?;
            total += loss;
            steps += 1;
        }
        epochs.push(EpochRecord {
            epoch: e + 1,
            stage: "likelihood".into(),
            loss: total / steps.max(1) as f64,
            val_map: None,
        });
    }
    Ok(None)
}
