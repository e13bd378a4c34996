//! Relevance scores between a query and a corpus sequence.
//!
//! The net score adds a Fisher kernel (cosine of preconditioned
//! log-likelihood gradients) to `γ` times a model-independent similarity
//! computed on the unwarped query. The KL variant replaces the kernel by the
//! negated divergence between corpus-conditioned and query-conditioned
//! next-event distributions.

use std::collections::BTreeMap;
use std::io::Write;

use ctes_diff::{flatten_vars, Graph, ParamVars, Tensor, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::Scorer;
use crate::mtpp::{EventDistribution, GraphSeq, Heads, MtppModel};
use crate::parallel::{try_par_map, Workers};
use crate::seq::EventSequence;
use crate::unwarp::{unwarp_sequence, UnwarpNet};

/// Which relevance model scores a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreMode {
    /// Self-attention likelihoods; corpus vectors do not depend on the query.
    #[serde(rename = "selfattn")]
    SelfAttn,
    /// Corpus likelihoods conditioned on the unwarped query.
    #[serde(rename = "crossattn")]
    CrossAttn,
    /// Cross-attention model scored by negated KL divergence.
    #[serde(rename = "hash_nsr")]
    HashNsr,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::SelfAttn => "selfattn",
            ScoreMode::CrossAttn => "crossattn",
            ScoreMode::HashNsr => "hash_nsr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "selfattn" => Ok(ScoreMode::SelfAttn),
            "crossattn" => Ok(ScoreMode::CrossAttn),
            "hash_nsr" => Ok(ScoreMode::HashNsr),
            other => Err(CoreError::Argument(format!(
                "unknown mode `{other}` (expected selfattn, crossattn or hash_nsr)"
            ))),
        }
    }

    /// Whether the corpus side is conditioned on the query.
    pub fn is_cross(self) -> bool {
        !matches!(self, ScoreMode::SelfAttn)
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    Identity,
    EmpiricalDiagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    /// Name prefixes of the MTPP parameters that span the gradient vector.
    /// An empty prefix selects every parameter.
    pub include: Vec<String>,
    pub mode: FisherMode,
    pub damping: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            include: vec!["ffn.".into(), "mark_head.".into(), "time_head.".into()],
            mode: FisherMode::EmpiricalDiagonal,
            damping: 1e-4,
        }
    }
}

impl FisherConfig {
    pub fn selects(&self, name: &str) -> bool {
        self.include.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn validate(&self, model: &MtppModel) -> Result<()> {
        if !(self.damping >= 1e-8 && self.damping.is_finite()) {
            return Err(CoreError::Config(format!(
                "Fisher damping {} must be at least 1e-8",
                self.damping
            )));
        }
        if !model.params().names().any(|n| self.selects(n)) {
            return Err(CoreError::Config(
                "Fisher parameter subset selects nothing".into(),
            ));
        }
        Ok(())
    }
}

/// Model-independent similarity of an unwarped query and a corpus sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimU {
    pub delta_t: f64,
    pub delta_x: f64,
    pub sim_u: f64,
}

/// `max(T_q, T_c)` for an unwarped query and a corpus sequence.
pub fn pair_horizon(unwarped_q: &EventSequence, c: &EventSequence) -> f64 {
    unwarped_q.horizon().max(c.horizon())
}

/// Aligned time and mark mismatch over the common prefix, plus tail terms
/// `T - t_i` and a length penalty for the surplus events of the longer
/// sequence.
pub fn sim_u(unwarped_q: &EventSequence, c: &EventSequence, horizon: f64) -> Result<SimU> {
    let latest = unwarped_q
        .events()
        .last()
        .map(|e| e.time)
        .unwrap_or(0.0)
        .max(c.events().last().map(|e| e.time).unwrap_or(0.0));
    if !(horizon >= latest) {
        return Err(CoreError::Domain(format!(
            "horizon {horizon} precedes event time {latest}"
        )));
    }
    let (q, c) = (unwarped_q.events(), c.events());
    let k = q.len().min(c.len());
    let mut delta_t: f64 = q.iter().zip(c).map(|(a, b)| (a.time - b.time).abs()).sum();
    let longer = if q.len() > k { q } else { c };
    delta_t += longer[k..].iter().map(|e| horizon - e.time).sum::<f64>();
    let mismatches = q.iter().zip(c).filter(|(a, b)| a.mark != b.mark).count();
    let delta_x = (mismatches + q.len().abs_diff(c.len())) as f64;
    Ok(SimU {
        delta_t,
        delta_x,
        sim_u: -delta_t - delta_x,
    })
}

/// [`sim_u`] with differentiable unwarped query times (`[n, 1]`) and
/// unwarped query horizon (one element), using `T = max(T_q, T_c)`.
pub fn sim_u_graph<'g>(
    q_times: Var<'g>,
    q_marks: &[usize],
    q_horizon: Var<'g>,
    c: &EventSequence,
) -> Var<'g> {
    let graph = q_times.graph();
    let nq = q_marks.len();
    let nc = c.len();
    let k = nq.min(nc);
    let c_times = c.times();
    let aligned =
        q_times.slice_rows(0, k) - graph.constant(Tensor::matrix(k, 1, c_times[..k].to_vec()));
    let mut delta_t = aligned.abs().sum();
    let horizon = if q_horizon.item() >= c.horizon() {
        q_horizon.reshape(&[])
    } else {
        graph.scalar(c.horizon())
    };
    if nq > k {
        let tail = q_times.slice_rows(k, nq).sum();
        delta_t = delta_t + horizon.scale((nq - k) as f64) - tail;
    } else if nc > k {
        let tail: f64 = c_times[k..].iter().sum();
        delta_t = delta_t + horizon.scale((nc - k) as f64).add_scalar(-tail);
    }
    let c_marks = c.marks();
    let mismatches = q_marks.iter().zip(&c_marks).filter(|(a, b)| a != b).count();
    let delta_x = (mismatches + nq.abs_diff(nc)) as f64;
    (-delta_t).add_scalar(-delta_x)
}

pub fn fisher_kernel(v_q: &[f64], v_c: &[f64]) -> Result<f64> {
    if v_q.len() != v_c.len() {
        return Err(CoreError::Dimension {
            expected: v_q.len(),
            got: v_c.len(),
        });
    }
    Ok(v_q.iter().zip(v_c).map(|(a, b)| a * b).sum())
}

/// `KL(LN(μ1, s1) ‖ LN(μ2, s2))`.
pub fn lognormal_kl(mu1: f64, s1: f64, mu2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (mu1 - mu2).powi(2)) / (2.0 * s2 * s2) - 0.5
}

pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Divergence between two next-event distributions (time and mark parts).
pub fn step_kl(p: &EventDistribution, q: &EventDistribution) -> f64 {
    lognormal_kl(p.mu, p.s, q.mu, q.s) + categorical_kl(&p.mark_probs, &q.mark_probs)
}

/// Per-row divergence between two sets of heads over rows `1..=k`, summed.
pub fn kl_sum_graph<'g>(p: &Heads<'g>, q: &Heads<'g>, k: usize) -> Var<'g> {
    let rows = |v: Var<'g>| v.slice_rows(1, k + 1);
    let (mu1, s1, lm1) = (rows(p.mu), rows(p.s), rows(p.log_marks));
    let (mu2, s2, lm2) = (rows(q.mu), rows(q.s), rows(q.log_marks));
    let inv_s2 = s2.powf(-1.0);
    let ratio = s1 * inv_s2;
    let diff = (mu1 - mu2) * inv_s2;
    let time = (ratio.square() + diff.square()).scale(0.5) - ratio.ln();
    let mark = (lm1.exp() * (lm1 - lm2)).sum();
    time.sum().add_scalar(-0.5 * k as f64) + mark
}

/// Scores for one query–corpus pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub corpus_id: String,
    pub kappa: Option<f64>,
    pub delta_t: f64,
    pub delta_x: f64,
    pub sim_u: f64,
    pub s: f64,
    pub g_kl: Option<f64>,
}

pub const SCORE_CSV_HEADER: &str = "query_id,corpus_id,kappa,delta_t,delta_x,s,g_kl";

impl ScoreRecord {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.query_id,
            self.corpus_id,
            opt(self.kappa),
            self.delta_t,
            self.delta_x,
            self.s,
            opt(self.g_kl)
        )
    }
}

pub fn write_score_csv(out: &mut impl Write, records: &[ScoreRecord]) -> std::io::Result<()> {
    writeln!(out, "{SCORE_CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// A query after the work that every pair shares: unwarping and, depending
/// on the mode, its Fisher vector or its self-conditioned distributions.
#[derive(Clone, Debug)]
pub struct PreparedQuery {
    pub original: EventSequence,
    pub unwarped: EventSequence,
    pub vector: Option<Vec<f64>>,
    pub self_dists: Option<Vec<EventDistribution>>,
}

/// An MTPP, an unwarper and the scoring settings that combine them.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceModel {
    pub mode: ScoreMode,
    pub mtpp: MtppModel,
    pub unwarp: UnwarpNet,
    pub fisher: FisherConfig,
    /// Empirical second moments of the raw gradients, in subset order.
    pub fisher_diag: Option<Vec<f64>>,
    pub gamma: f64,
}

impl RelevanceModel {
    pub fn new(
        mode: ScoreMode,
        mtpp: MtppModel,
        unwarp: UnwarpNet,
        fisher: FisherConfig,
        gamma: f64,
    ) -> Result<Self> {
        fisher.validate(&mtpp)?;
        if !gamma.is_finite() {
            return Err(CoreError::Config(format!(
                "gamma must be finite, got {gamma}"
            )));
        }
        Ok(Self {
            mode,
            mtpp,
            unwarp,
            fisher,
            fisher_diag: None,
            gamma,
        })
    }

    /// Number of entries of a Fisher vector.
    pub fn fisher_dim(&self) -> usize {
        self.mtpp
            .params()
            .iter()
            .filter(|(n, _)| self.fisher.selects(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Gradient of the log-likelihood with respect to the selected
    /// parameters, in flattening order.
    pub fn fisher_gradient(
        &self,
        seq: &EventSequence,
        context: Option<&EventSequence>,
    ) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let vars = self
            .mtpp
            .params()
            .bind_where(&graph, |n| self.fisher.selects(n));
        let target = GraphSeq::constant(&graph, seq);
        let ctx = context.map(|c| GraphSeq::constant(&graph, c));
        let ll = self
            .mtpp
            .log_likelihood_graph(&vars, &target, ctx.as_ref(), None)?;
        let subset = vars.select(|n| self.fisher.selects(n));
        let grads = graph.grad(ll, &subset, false);
        graph.check_finite()?;
        Ok(ctes_diff::flatten_values(&grads))
    }

    /// Per-coordinate preconditioner `1 / sqrt(I_ii + ε)`.
    pub fn preconditioner(&self) -> Vec<f64> {
        let n = self.fisher_dim();
        match (&self.fisher.mode, &self.fisher_diag) {
            (FisherMode::EmpiricalDiagonal, Some(diag)) => diag
                .iter()
                .map(|d| 1.0 / (d + self.fisher.damping).sqrt())
                .collect(),
            _ => vec![1.0; n],
        }
    }

    /// Preconditions and normalizes a raw gradient.
    pub fn normalize(&self, gradient: &[f64]) -> Result<Vec<f64>> {
        let pre = self.preconditioner();
        if pre.len() != gradient.len() {
            return Err(CoreError::Dimension {
                expected: pre.len(),
                got: gradient.len(),
            });
        }
        let scaled: Vec<f64> = gradient.iter().zip(&pre).map(|(g, p)| g * p).collect();
        unit(scaled)
    }

    pub fn fisher_vector(
        &self,
        seq: &EventSequence,
        context: Option<&EventSequence>,
    ) -> Result<Vec<f64>> {
        self.normalize(&self.fisher_gradient(seq, context)?)
    }

    /// Re-estimates the empirical diagonal from `seqs`. In cross modes each
    /// sequence is conditioned on itself.
    pub fn refresh_fisher_stats(
        &mut self,
        seqs: &[&EventSequence],
        workers: Workers,
    ) -> Result<()> {
        if self.fisher.mode != FisherMode::EmpiricalDiagonal {
            self.fisher_diag = None;
            return Ok(());
        }
        if seqs.is_empty() {
            return Err(CoreError::Argument(
                "Fisher statistics need at least one sequence".into(),
            ));
        }
        let cross = self.mode.is_cross();
        let grads = try_par_map(seqs, workers, |s| {
            self.fisher_gradient(s, cross.then_some(*s))
        })?;
        let mut diag = vec![0.0; self.fisher_dim()];
        for g in &grads {
            for (d, x) in diag.iter_mut().zip(g) {
                *d += x * x;
            }
        }
        let n = grads.len() as f64;
        diag.iter_mut().for_each(|d| *d /= n);
        self.fisher_diag = Some(diag);
        Ok(())
    }

    pub fn prepare_query(&self, q: &EventSequence) -> Result<PreparedQuery> {
        let unwarped = unwarp_sequence(&self.unwarp, q)?;
        let (vector, self_dists) = match self.mode {
            ScoreMode::SelfAttn => (Some(self.fisher_vector(&unwarped, None)?), None),
            ScoreMode::CrossAttn => (Some(self.fisher_vector(&unwarped, Some(&unwarped))?), None),
            ScoreMode::HashNsr => {
                let rows = unwarped.len() + 1;
                (
                    None,
                    Some(self.mtpp.distributions(&unwarped, Some(&unwarped), rows)?),
                )
            }
        };
        Ok(PreparedQuery {
            original: q.clone(),
            unwarped,
            vector,
            self_dists,
        })
    }

    /// Fisher vector of a corpus sequence as seen by `query` (the query is
    /// ignored in self mode).
    pub fn corpus_vector(&self, c: &EventSequence, query: &PreparedQuery) -> Result<Vec<f64>> {
        match self.mode {
            ScoreMode::SelfAttn => self.fisher_vector(c, None),
            _ => self.fisher_vector(c, Some(&query.unwarped)),
        }
    }

    /// Negated sum of per-step divergences between `c`'s and the query's
    /// next-event distributions, both conditioned on the unwarped query.
    pub fn kl_score(&self, query: &PreparedQuery, c: &EventSequence) -> Result<f64> {
        let q_dists = match &query.self_dists {
            Some(d) => d.clone(),
            None => {
                let u = &query.unwarped;
                self.mtpp.distributions(u, Some(u), u.len() + 1)?
            }
        };
        let k = query.unwarped.len().min(c.len());
        let c_dists = self.mtpp.distributions(c, Some(&query.unwarped), k + 1)?;
        let total: f64 = (1..=k).map(|r| step_kl(&c_dists[r], &q_dists[r])).sum();
        Ok(-total)
    }

    /// Scores a pair. `cached` may hold the corpus vector in self mode.
    pub fn score(
        &self,
        query: &PreparedQuery,
        c: &EventSequence,
        cached: Option<&[f64]>,
    ) -> Result<ScoreRecord> {
        let horizon = pair_horizon(&query.unwarped, c);
        let sim = sim_u(&query.unwarped, c, horizon)?;
        let (kappa, g_kl, base) = match self.mode {
            ScoreMode::HashNsr => {
                let g = self.kl_score(query, c)?;
                (None, Some(g), g)
            }
            _ => {
                let v_q = query.vector.as_deref().expect("prepared Fisher query");
                let kappa = match cached {
                    Some(v_c) => fisher_kernel(v_q, v_c)?,
                    None => fisher_kernel(v_q, &self.corpus_vector(c, query)?)?,
                };
                (Some(kappa), None, kappa)
            }
        };
        Ok(ScoreRecord {
            query_id: query.original.id().to_string(),
            corpus_id: c.id().to_string(),
            kappa,
            delta_t: sim.delta_t,
            delta_x: sim.delta_x,
            sim_u: sim.sim_u,
            s: base + self.gamma * sim.sim_u,
            g_kl,
        })
    }

    pub fn relevance_score(&self, q: &EventSequence, c: &EventSequence) -> Result<ScoreRecord> {
        self.score(&self.prepare_query(q)?, c, None)
    }

    /// Differentiable Fisher vector of `target` with respect to `vars`
    /// (the MTPP scope). `create_graph` keeps it differentiable in every
    /// parameter that the likelihood depends on.
    pub fn fisher_vector_graph<'g>(
        &self,
        mtpp_vars: &ParamVars<'g>,
        target: &GraphSeq<'g>,
        context: Option<&GraphSeq<'g>>,
        create_graph: bool,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var<'g>> {
        let graph = target.times.graph();
        let ll = self
            .mtpp
            .log_likelihood_graph(mtpp_vars, target, context, dropout)?;
        let subset = mtpp_vars.select(|n| self.fisher.selects(n));
        let grads = graph.grad(ll, &subset, create_graph);
        let flat = flatten_vars(graph, &grads);
        let pre = graph.constant(Tensor::vector(self.preconditioner()));
        let scaled = flat * pre;
        let norm = scaled.norm();
        if !(norm.item() > 1e-12) {
            return Err(CoreError::DegenerateEmbedding { norm: norm.item() });
        }
        Ok(scaled.mul_scalar(norm.powf(-1.0)))
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(CoreError::DegenerateEmbedding { norm });
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Scores candidates with a [`RelevanceModel`], optionally from cached
/// self-mode corpus vectors.
pub struct ModelScorer<'a> {
    model: &'a RelevanceModel,
    cache: Option<BTreeMap<String, Vec<f64>>>,
    workers: Workers,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a RelevanceModel, workers: Workers) -> Self {
        Self {
            model,
            cache: None,
            workers,
        }
    }

    /// Precomputes corpus vectors in self mode; other modes ignore `corpus`.
    pub fn with_corpus_cache(
        model: &'a RelevanceModel,
        corpus: &[&EventSequence],
        workers: Workers,
    ) -> Result<Self> {
        let mut scorer = Self::new(model, workers);
        if model.mode == ScoreMode::SelfAttn {
            let vectors = try_par_map(corpus, workers, |c| model.fisher_vector(c, None))?;
            scorer.cache = Some(
                corpus
                    .iter()
                    .map(|c| c.id().to_string())
                    .zip(vectors)
                    .collect(),
            );
        }
        Ok(scorer)
    }

    pub fn model(&self) -> &RelevanceModel {
        self.model
    }

    pub fn score_records(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<ScoreRecord>> {
        let prepared = self.model.prepare_query(query)?;
        try_par_map(candidates, self.workers, |c| {
            let cached = self
                .cache
                .as_ref()
                .and_then(|m| m.get(c.id()))
                .map(Vec::as_slice);
            self.model.score(&prepared, c, cached)
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn score_candidates(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<f64>> {
        Ok(self
            .score_records(query, candidates)?
            .into_iter()
            .map(|r| r.s)
            .collect())
    }
}

/// Ranks by the model-independent similarity alone, after an optional
/// unwarping of the query.
pub struct SimUScorer<'a> {
    pub unwarp: Option<&'a UnwarpNet>,
}

impl Scorer for SimUScorer<'_> {
    fn score_candidates(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<f64>> {
        let q = match self.unwarp {
            Some(net) => unwarp_sequence(net, query)?,
            None => query.clone(),
        };
        candidates
            .iter()
            .map(|c| Ok(sim_u(&q, c, pair_horizon(&q, c))?.sim_u))
            .collect()
    }
}

/// Fisher vector of `seq` under `model`, self-conditioned or conditioned on
/// `context`.
pub fn fisher_vector(
    model: &RelevanceModel,
    seq: &EventSequence,
    context: Option<&EventSequence>,
) -> Result<Vec<f64>> {
    model.fisher_vector(seq, context)
}

pub fn relevance_score(
    model: &RelevanceModel,
    q: &EventSequence,
    c: &EventSequence,
) -> Result<ScoreRecord> {
    model.relevance_score(q, c)
}

pub fn kl_relevance(model: &RelevanceModel, q: &EventSequence, c: &EventSequence) -> Result<f64> {
    let unwarped = unwarp_sequence(&model.unwarp, q)?;
    let prepared = PreparedQuery {
        original: q.clone(),
        unwarped,
        vector: None,
        self_dists: None,
    };
    model.kl_score(&prepared, c)
}
