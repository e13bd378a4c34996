//! Attention-based marked temporal point process.
//!
//! A sequence is scored one event at a time. The state before event `r + 1`
//! is built from the first `r` events (plus a learned start row standing in
//! for the empty prefix): event embeddings pass through stacked attention
//! blocks, a position-wise feed-forward layer, and a running sum over the
//! prefix. Two heads read the state: a log-normal density for the next
//! inter-arrival time and a softmax over the next mark.
//!
//! Attention runs in one of two modes. Without a context sequence the prefix
//! attends causally to itself. With a context, every prefix row attends to
//! all events of the context instead, which makes the likelihood of the
//! target depend on the context.

use std::rc::Rc;

use ctes_diff::{Graph, ParamStore, ParamVars, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seq::{EventSequence, DEFAULT_MAX_LEN};

/// Lower bound added to the softplus of the scale output.
pub const SCALE_FLOOR: f64 = 1e-4;

const MASKED: f64 = -1e30;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtppConfig {
    pub dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub dropout: f64,
    /// Multiplies absolute times and gaps before they enter the input layer.
    pub time_scale: f64,
    pub seed: u64,
}

impl Default for MtppConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            vocab: 5,
            max_len: DEFAULT_MAX_LEN,
            blocks: 2,
            dropout: 0.2,
            time_scale: 1.0,
            seed: 0,
        }
    }
}

impl MtppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(CoreError::Config(
                "mtpp dim, vocab and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(CoreError::Config(format!(
                "time_scale must be positive, got {}",
                self.time_scale
            )));
        }
        Ok(())
    }
}

/// Conditional distribution of the next event.
#[derive(Clone, Debug, PartialEq)]
pub struct EventDistribution {
    /// Log-normal location of the next inter-arrival time.
    pub mu: f64,
    /// Log-normal scale, always positive.
    pub s: f64,
    pub mark_probs: Vec<f64>,
}

impl EventDistribution {
    pub fn log_density(&self, gap: f64, mark: usize) -> f64 {
        lognormal_log_density(gap, self.mu, self.s) + self.mark_probs[mark].ln()
    }
}

pub fn lognormal_log_density(x: f64, mu: f64, s: f64) -> f64 {
    let z = (x.ln() - mu) / s;
    -x.ln() - s.ln() - HALF_LN_2PI - 0.5 * z * z
}

/// Event times and marks of one sequence inside a graph. Times are a
/// `[n, 1]` column so that unwarped query times can carry gradients.
#[derive(Clone, Debug)]
pub struct GraphSeq<'g> {
    pub times: Var<'g>,
    pub marks: Rc<[usize]>,
}

impl<'g> GraphSeq<'g> {
    pub fn constant(graph: &'g Graph, seq: &EventSequence) -> Self {
        Self {
            times: graph.constant(Tensor::matrix(seq.len(), 1, seq.times())),
            marks: seq.marks().into(),
        }
    }

    pub fn new(times: Var<'g>, marks: &[usize]) -> Self {
        assert_eq!(
            times.shape(),
            vec![marks.len(), 1],
            "times must be an [n, 1] column"
        );
        Self {
            times,
            marks: marks.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// Gaps `t_i - t_{i-1}` with `t_0 = 0`, as a column.
    pub fn gaps(&self) -> Var<'g> {
        let n = self.len();
        if n == 1 {
            return self.times;
        }
        self.times - self.times.slice_rows(0, n - 1).pad_rows(1, n)
    }
}

/// Outputs of the two heads for every prefix row.
#[derive(Clone, Copy, Debug)]
pub struct Heads<'g> {
    pub mu: Var<'g>,
    pub s: Var<'g>,
    pub log_marks: Var<'g>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtppModel {
    config: MtppConfig,
    params: ParamStore,
}

impl MtppModel {
    /// Random initialization from `config.seed`.
    pub fn new(config: MtppConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let v = config.vocab;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("w_mark", normal_tensor(&[v, d], 1.0, &mut rng));
        p.insert("w_time", normal_tensor(&[d], 1.0, &mut rng));
        p.insert("w_dt", normal_tensor(&[d], 1.0, &mut rng));
        p.insert("b_in", Tensor::zeros(&[d]));
        p.insert("pos", normal_tensor(&[config.max_len, d], 0.1, &mut rng));
        p.insert("start", normal_tensor(&[d], 1.0, &mut rng));
        for b in 0..config.blocks {
            for m in ["ws", "wk", "wv"] {
                p.insert(
                    format!("attn{b}.{m}"),
                    normal_tensor(&[d, d], inv_sqrt_d, &mut rng),
                );
            }
        }
        p.insert("ffn.w_in", normal_tensor(&[d], 1.0, &mut rng));
        p.insert("ffn.b_in", Tensor::full(&[d], 0.1));
        p.insert("ffn.w_out", normal_tensor(&[d], 0.1, &mut rng));
        p.insert("ffn.b_out", Tensor::zeros(&[d]));
        p.insert(
            "time_head.w",
            normal_tensor(&[2, d], 0.1 * inv_sqrt_d, &mut rng),
        );
        p.insert(
            "time_head.b",
            Tensor::vector(vec![0.0, (std::f64::consts::E - 1.0).ln()]),
        );
        p.insert(
            "mark_head.w",
            normal_tensor(&[v, d], 0.1 * inv_sqrt_d, &mut rng),
        );
        p.insert("mark_head.b", Tensor::zeros(&[v]));
        Ok(Self { config, params: p })
    }

    pub fn from_params(config: MtppConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        let expected: Vec<(&str, &[usize])> = reference
            .params
            .iter()
            .map(|(k, t)| (k, t.shape()))
            .collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(k, t)| (k, t.shape())).collect();
        if expected != got {
            return Err(CoreError::Config(
                "mtpp parameters do not match the configured architecture".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MtppConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        *self = Self::from_params(self.config.clone(), params)?;
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(CoreError::DegenerateInput("empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(CoreError::Capacity {
                len: n,
                cap: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Input embeddings plus position embeddings, `[n, D]`.
    pub fn embed_graph<'g>(&self, vars: &ParamVars<'g>, seq: &GraphSeq<'g>) -> Result<Var<'g>> {
        let n = seq.len();
        self.check_len(n)?;
        let d = self.config.dim;
        let c = self.config.time_scale;
        let marks = vars.get("w_mark").gather_rows(Rc::clone(&seq.marks));
        let t = seq
            .times
            .scale(c)
            .matmul(vars.get("w_time").reshape(&[1, d]));
        let dt = seq
            .gaps()
            .scale(c)
            .matmul(vars.get("w_dt").reshape(&[1, d]));
        let y = (marks + t + dt).add_row(vars.get("b_in"));
        Ok(y + vars.get("pos").slice_rows(0, n))
    }

    /// One attention layer: every target row attends to the source rows.
    /// With `causal`, source and target must coincide and row `j` only sees
    /// rows `i <= j`.
    pub fn attend_graph<'g>(
        &self,
        vars: &ParamVars<'g>,
        block: usize,
        source: Var<'g>,
        target: Var<'g>,
        causal: bool,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let m = source.shape()[0];
        let n = target.shape()[0];
        if m == 0 {
            return Err(CoreError::Attention("empty source sequence".into()));
        }
        if causal && m != n {
            return Err(CoreError::Attention(format!(
                "causal attention needs equal source and target lengths, got {m} and {n}"
            )));
        }
        let graph = source.graph();
        let s = target.matmul(vars.get(&format!("attn{block}.ws")));
        let k = source.matmul(vars.get(&format!("attn{block}.wk")));
        let v = source.matmul(vars.get(&format!("attn{block}.wv")));
        let mut logits = s.matmul(k.t()).scale(1.0 / (self.config.dim as f64).sqrt());
        if causal {
            let mut mask = vec![0.0; n * n];
            for j in 0..n {
                for i in j + 1..n {
                    mask[j * n + i] = MASKED;
                }
            }
            logits = logits + graph.constant(Tensor::matrix(n, n, mask));
        }
        let weights = logits.softmax_rows();
        Ok((weights.matmul(v), weights))
    }

    /// Running prefix states `h̄_0 .. h̄_{rows-1}` of `target`.
    ///
    /// Row 0 is the state before the first event. `rows` is at most
    /// `target.len() + 1`.
    pub fn encode_graph<'g>(
        &self,
        vars: &ParamVars<'g>,
        target: &GraphSeq<'g>,
        context: Option<&GraphSeq<'g>>,
        rows: usize,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var<'g>> {
        let n = target.len();
        assert!(
            rows >= 1 && rows <= n + 1,
            "prefix rows {rows} for length {n}"
        );
        let d = self.config.dim;
        let graph = target.times.graph();
        let start = vars.get("start").reshape(&[1, d]);
        let mut x = if rows == 1 {
            self.check_len(n)?;
            start
        } else {
            let emb = self.embed_graph(vars, target)?;
            start.concat_rows(emb.slice_rows(0, rows - 1))
        };
        let source = match context {
            Some(ctx) => Some(self.embed_graph(vars, ctx)?),
            None => None,
        };
        for b in 0..self.config.blocks {
            let (h, _) = match source {
                Some(src) => self.attend_graph(vars, b, src, x, false)?,
                None => self.attend_graph(vars, b, x, x, true)?,
            };
            let h = match dropout.as_deref_mut() {
                Some(rng) => h.dropout(self.config.dropout, rng),
                None => h,
            };
            x = x + h;
        }
        let f = x
            .mul_row(vars.get("ffn.w_in"))
            .add_row(vars.get("ffn.b_in"))
            .relu()
            .mul_row(vars.get("ffn.w_out"))
            .add_row(vars.get("ffn.b_out"));
        let mut lower = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..=i {
                lower[i * rows + j] = 1.0;
            }
        }
        Ok(graph.constant(Tensor::matrix(rows, rows, lower)).matmul(f))
    }

    pub fn heads_graph<'g>(&self, vars: &ParamVars<'g>, hbar: Var<'g>) -> Heads<'g> {
        let graph = hbar.graph();
        let time = hbar
            .matmul(vars.get("time_head.w").t())
            .add_row(vars.get("time_head.b"));
        let pick = |j: usize| {
            let mut e = vec![0.0; 2];
            e[j] = 1.0;
            time.matmul(graph.constant(Tensor::matrix(2, 1, e)))
        };
        let mu = pick(0);
        let s = pick(1).softplus().add_scalar(SCALE_FLOOR);
        let logits = hbar
            .matmul(vars.get("mark_head.w").t())
            .add_row(vars.get("mark_head.b"));
        Heads {
            mu,
            s,
            log_marks: logits.log_softmax_rows(),
        }
    }

    /// `Σ_i [log LN(t_i - t_{i-1}; μ_i, s_i) + log m_i(x_i)]`.
    pub fn log_likelihood_graph<'g>(
        &self,
        vars: &ParamVars<'g>,
        target: &GraphSeq<'g>,
        context: Option<&GraphSeq<'g>>,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var<'g>> {
        let n = target.len();
        let hbar = self.encode_graph(vars, target, context, n, dropout)?;
        let heads = self.heads_graph(vars, hbar);
        let graph = hbar.graph();
        let gaps = target.gaps();
        if let Some(bad) = gaps.value().data().iter().find(|g| !(**g > 0.0)) {
            return Err(CoreError::Domain(format!(
                "nonpositive inter-arrival time {bad}"
            )));
        }
        let log_gap = gaps.ln();
        let z = (log_gap - heads.mu) * heads.s.powf(-1.0);
        let time_ll = -(log_gap + heads.s.ln() + z.square().scale(0.5)).sum()
            - graph.scalar(HALF_LN_2PI * n as f64);
        let v = self.config.vocab;
        let mut onehot = vec![0.0; n * v];
        for (i, &m) in target.marks.iter().enumerate() {
            onehot[i * v + m] = 1.0;
        }
        let mark_ll = (heads.log_marks * graph.constant(Tensor::matrix(n, v, onehot))).sum();
        Ok(time_ll + mark_ll)
    }

    /// Next-event distributions for prefix rows `0..rows`.
    pub fn distributions(
        &self,
        target: &EventSequence,
        context: Option<&EventSequence>,
        rows: usize,
    ) -> Result<Vec<EventDistribution>> {
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let t = GraphSeq::constant(&graph, target);
        let c = context.map(|c| GraphSeq::constant(&graph, c));
        let hbar = self.encode_graph(&vars, &t, c.as_ref(), rows, None)?;
        let heads = self.heads_graph(&vars, hbar);
        graph.check_finite()?;
        Ok(heads_to_distributions(&heads))
    }

    /// Input embeddings of `seq` with position embeddings added.
    pub fn embed_events(&self, seq: &EventSequence) -> Result<Tensor> {
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let y = self.embed_graph(&vars, &GraphSeq::constant(&graph, seq))?;
        Ok(y.value().as_ref().clone())
    }

    /// One attention layer of `block` on plain tensors; returns the outputs
    /// and the attention weights.
    pub fn attend(
        &self,
        block: usize,
        source: &Tensor,
        target: &Tensor,
        causal: bool,
    ) -> Result<(Tensor, Tensor)> {
        if block >= self.config.blocks {
            return Err(CoreError::Argument(format!("no attention block {block}")));
        }
        if source.shape().first() == Some(&0) || source.is_empty() {
            return Err(CoreError::Attention("empty source sequence".into()));
        }
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let (h, w) = self.attend_graph(
            &vars,
            block,
            graph.constant(source.clone()),
            graph.constant(target.clone()),
            causal,
        )?;
        Ok((h.value().as_ref().clone(), w.value().as_ref().clone()))
    }

    /// Distribution of the next event from attention outputs `h_1..h_r`
    /// (one row each).
    pub fn next_event_distribution(&self, h_prefix: &Tensor) -> Result<EventDistribution> {
        let (r, d) = h_prefix.dims2();
        if r == 0 || d != self.config.dim {
            return Err(CoreError::Dimension {
                expected: self.config.dim,
                got: d,
            });
        }
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let h = graph.constant(h_prefix.clone());
        let f = h
            .mul_row(vars.get("ffn.w_in"))
            .add_row(vars.get("ffn.b_in"))
            .relu()
            .mul_row(vars.get("ffn.w_out"))
            .add_row(vars.get("ffn.b_out"));
        let hbar = f.sum_rows().reshape(&[1, d]);
        let heads = self.heads_graph(&vars, hbar);
        graph.check_finite()?;
        Ok(heads_to_distributions(&heads).remove(0))
    }
}

fn heads_to_distributions(heads: &Heads<'_>) -> Vec<EventDistribution> {
    let mu = heads.mu.value();
    let s = heads.s.value();
    let lm = heads.log_marks.value();
    (0..mu.len())
        .map(|i| EventDistribution {
            mu: mu.data()[i],
            s: s.data()[i],
            mark_probs: lm.row(i).iter().map(|x| x.exp()).collect(),
        })
        .collect()
}

/// Log-likelihood of `target`, self-conditioned or conditioned on `context`.
pub fn log_likelihood(
    model: &MtppModel,
    target: &EventSequence,
    context: Option<&EventSequence>,
) -> Result<f64> {
    let graph = Graph::new();
    let vars = model.params.bind_where(&graph, |_| false);
    let t = GraphSeq::constant(&graph, target);
    let c = context.map(|c| GraphSeq::constant(&graph, c));
    let ll = model.log_likelihood_graph(&vars, &t, c.as_ref(), None)?;
    graph.check_finite()?;
    Ok(ll.item())
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MtppConfig {
        MtppConfig {
            dim: 4,
            vocab: 3,
            max_len: 16,
            seed: 3,
            ..MtppConfig::default()
        }
    }

    fn seq(times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::from_parts("s", times, marks, times.last().unwrap() + 1.0).unwrap()
    }

    fn zeroed(model: &MtppModel) -> ParamStore {
        model.params().zeros_like()
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let mut m = MtppModel::new(tiny()).unwrap();
        m.set_params(zeroed(&m)).unwrap();
        let y = m.embed_events(&seq(&[0.5, 1.5], &[0, 2])).unwrap();
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_event_embedding() {
        let mut m = MtppModel::new(tiny()).unwrap();
        let mut p = zeroed(&m);
        p.get_mut("w_time").unwrap().data_mut()[0] = 1.0;
        p.get_mut("w_dt").unwrap().data_mut()[0] = 1.0;
        m.set_params(p).unwrap();
        let y = m.embed_events(&seq(&[1.0], &[0])).unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn positions_matter() {
        let m = MtppModel::new(tiny()).unwrap();
        let s = seq(&[0.5, 1.5], &[1, 1]);
        let before = m.embed_events(&s).unwrap();
        let mut swapped = m.clone();
        let mut p = m.params().clone();
        let pos = p.get_mut("pos").unwrap();
        let (r0, r1) = (pos.row(0).to_vec(), pos.row(1).to_vec());
        pos.data_mut()[..4].copy_from_slice(&r1);
        pos.data_mut()[4..8].copy_from_slice(&r0);
        swapped.set_params(p).unwrap();
        assert_ne!(before, swapped.embed_events(&s).unwrap());
    }

    #[test]
    fn capacity_is_enforced() {
        let m = MtppModel::new(MtppConfig {
            max_len: 2,
            ..tiny()
        })
        .unwrap();
        let s = seq(&[0.1, 0.2, 0.3], &[0, 0, 0]);
        assert!(matches!(
            log_likelihood(&m, &s, None),
            Err(CoreError::Capacity { len: 3, cap: 2 })
        ));
    }

    #[test]
    fn single_source_attention_returns_its_value() {
        let m = MtppModel::new(tiny()).unwrap();
        let src = Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let tgt = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let (h, w) = m.attend(0, &src, &tgt, false).unwrap();
        let v = src.matmul(m.params().tensor("attn0.wv"));
        for j in 0..3 {
            assert_eq!(w.row(j), &[1.0]);
            for (a, b) in h.row(j).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_source_is_rejected() {
        let m = MtppModel::new(tiny()).unwrap();
        let err = m.attend(
            0,
            &Tensor::matrix(0, 4, vec![]),
            &Tensor::matrix(1, 4, vec![0.0; 4]),
            false,
        );
        assert!(matches!(err, Err(CoreError::Attention(_))));
    }

    #[test]
    fn zero_query_matrix_averages_values() {
        let mut m = MtppModel::new(tiny()).unwrap();
        let mut p = m.params().clone();
        *p.get_mut("attn0.ws").unwrap() = Tensor::zeros(&[4, 4]);
        m.set_params(p).unwrap();
        let src = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5]);
        let (h, _) = m.attend(0, &src, &src, false).unwrap();
        let v = src.matmul(m.params().tensor("attn0.wv"));
        for c in 0..4 {
            let mean = 0.5 * (v.row(0)[c] + v.row(1)[c]);
            assert!((h.row(0)[c] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_time_head_gives_softplus_zero() {
        let mut m = MtppModel::new(tiny()).unwrap();
        let mut p = m.params().clone();
        *p.get_mut("time_head.w").unwrap() = Tensor::zeros(&[2, 4]);
        *p.get_mut("time_head.b").unwrap() = Tensor::zeros(&[2]);
        *p.get_mut("mark_head.w").unwrap() = Tensor::zeros(&[3, 4]);
        m.set_params(p).unwrap();
        let h = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]);
        let dist = m.next_event_distribution(&h).unwrap();
        assert_eq!(dist.mu, 0.0);
        assert!((dist.s - (2f64.ln() + SCALE_FLOOR)).abs() < 1e-15);
        for p in &dist.mark_probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_event_likelihood_matches_start_distribution() {
        let m = MtppModel::new(tiny()).unwrap();
        let s = seq(&[0.7], &[2]);
        let dist = &m.distributions(&s, None, 1).unwrap()[0];
        let expect = lognormal_log_density(0.7, dist.mu, dist.s) + dist.mark_probs[2].ln();
        assert!((log_likelihood(&m, &s, None).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn likelihood_is_sum_of_step_terms() {
        let m = MtppModel::new(tiny()).unwrap();
        let s = seq(&[0.2, 0.5, 1.4, 1.5], &[0, 1, 1, 2]);
        let ctx = seq(&[0.3, 0.9], &[2, 0]);
        for context in [None, Some(&ctx)] {
            let dists = m.distributions(&s, context, 4).unwrap();
            let gaps = s.inter_arrivals();
            let expect: f64 = dists
                .iter()
                .zip(gaps.iter().zip(s.marks()))
                .map(|(d, (&g, x))| d.log_density(g, x))
                .sum();
            assert!((log_likelihood(&m, &s, context).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let m = MtppModel::new(tiny()).unwrap();
        let a = seq(&[0.2, 0.5, 1.4, 1.5], &[0, 1, 1, 2]);
        let b = seq(&[0.2, 0.5, 1.1, 1.9], &[0, 1, 2, 0]);
        let da = m.distributions(&a, None, 5).unwrap();
        let db = m.distributions(&b, None, 5).unwrap();
        // Rows 0..=2 only see events 1 and 2, which are shared.
        for r in 0..3 {
            assert_eq!(da[r], db[r]);
        }
        assert_ne!(da[3], db[3]);
    }

    #[test]
    fn cross_mode_depends_on_context() {
        let m = MtppModel::new(tiny()).unwrap();
        let s = seq(&[0.2, 0.5], &[0, 1]);
        let q1 = seq(&[0.3, 0.9], &[2, 0]);
        let q2 = seq(&[0.3, 1.1], &[2, 0]);
        let a = log_likelihood(&m, &s, Some(&q1)).unwrap();
        let b = log_likelihood(&m, &s, Some(&q2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mark_probabilities_normalize() {
        let m = MtppModel::new(tiny()).unwrap();
        let s = seq(&[0.2, 0.5, 1.4], &[0, 1, 1]);
        for d in m.distributions(&s, None, 4).unwrap() {
            assert!((d.mark_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.s > 0.0);
        }
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let m = MtppModel::new(tiny()).unwrap();
        let mut p = m.params().clone();
        p.insert("bogus", Tensor::zeros(&[1]));
        assert!(MtppModel::from_params(tiny(), p).is_err());
    }
}
