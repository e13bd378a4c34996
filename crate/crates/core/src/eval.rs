//! Ranking metrics and the sampled-negatives evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::parallel::{try_par_map, Workers};
use crate::seq::{Dataset, EventSequence};

/// Cutoffs reported by default.
pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Negatives sampled per query by the protocol.
pub const PROTOCOL_NEGATIVES: usize = 1000;

/// Scores a batch of candidates against one query; higher is more relevant.
pub trait Scorer: Sync {
    fn score_candidates(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<f64>>;
}

impl<F> Scorer for F
where
    F: Fn(&EventSequence, &EventSequence) -> f64 + Sync,
{
    fn score_candidates(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| self(query, c)).collect())
    }
}

/// Sorts ids by descending score; ties go to the smaller id.
pub fn rank_by_score(ids: &[&str], scores: &[f64]) -> Result<Vec<(String, f64)>> {
    assert_eq!(ids.len(), scores.len());
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(CoreError::Input(format!("score for {} is NaN", ids[i])));
    }
    let mut pairs: Vec<(String, f64)> = ids
        .iter()
        .map(|s| s.to_string())
        .zip(scores.iter().copied())
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub ap: f64,
    pub rr: f64,
    /// NDCG at each requested cutoff.
    pub ndcg: BTreeMap<usize, f64>,
}

/// Average precision (over all relevant items), reciprocal rank and
/// binary-gain NDCG@K of one ranked list.
pub fn rank_metrics(
    ranked: &[String],
    relevant: &BTreeSet<String>,
    ks: &[usize],
) -> Result<RankMetrics> {
    if relevant.is_empty() {
        return Err(CoreError::Input("relevant set is empty".into()));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = ranked.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(CoreError::Input(format!("duplicate id {dup} in ranking")));
    }
    let hits: Vec<bool> = ranked.iter().map(|id| relevant.contains(id)).collect();
    let mut found = 0usize;
    let mut precision_sum = 0.0;
    let mut rr = 0.0;
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            found += 1;
            precision_sum += found as f64 / (i + 1) as f64;
            if rr == 0.0 {
                rr = 1.0 / (i + 1) as f64;
            }
        }
    }
    let ap = precision_sum / relevant.len() as f64;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let ndcg = ks
        .iter()
        .map(|&k| {
            let dcg: f64 = hits
                .iter()
                .take(k)
                .enumerate()
                .filter(|(_, h)| **h)
                .map(|(i, _)| discount(i))
                .sum();
            let ideal: f64 = (0..k.min(relevant.len())).map(discount).sum();
            let value = if ideal > 0.0 { dcg / ideal } else { 0.0 };
            (k, value)
        })
        .collect();
    Ok(RankMetrics { ap, rr, ndcg })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub candidates: usize,
    pub positives: usize,
    #[serde(flatten)]
    pub metrics: RankMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `map`, `mrr` and `ndcg@K` for each cutoff.
    pub metrics: BTreeMap<String, f64>,
    pub ks: Vec<usize>,
    pub per_query: Vec<QueryMetrics>,
    /// Queries left out because they have no positives.
    pub excluded: Vec<String>,
}

impl MetricReport {
    /// Aggregates per-query results as means.
    pub fn from_queries(per_query: Vec<QueryMetrics>, ks: &[usize], excluded: Vec<String>) -> Self {
        let n = per_query.len().max(1) as f64;
        let mut metrics = BTreeMap::new();
        metrics.insert(
            "map".to_string(),
            per_query.iter().map(|q| q.metrics.ap).sum::<f64>() / n,
        );
        metrics.insert(
            "mrr".to_string(),
            per_query.iter().map(|q| q.metrics.rr).sum::<f64>() / n,
        );
        for &k in ks {
            let mean = per_query.iter().map(|q| q.metrics.ndcg[&k]).sum::<f64>() / n;
            metrics.insert(format!("ndcg@{k}"), mean);
        }
        Self {
            metrics,
            ks: ks.to_vec(),
            per_query,
            excluded,
        }
    }

    pub fn map(&self) -> f64 {
        self.metrics["map"]
    }

    pub fn mrr(&self) -> f64 {
        self.metrics["mrr"]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics[&format!("ndcg@{k}")]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "metric,value")?;
        for (k, v) in &self.metrics {
            writeln!(out, "{k},{v}")?;
        }
        Ok(())
    }

    /// One row per query: `query_id,ap`.
    pub fn write_per_query_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "query_id,ap")?;
        for q in &self.per_query {
            writeln!(out, "{},{}", q.query_id, q.metrics.ap)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub ks: Vec<usize>,
    pub negatives: usize,
    pub seed: u64,
    pub workers: Workers,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            negatives: PROTOCOL_NEGATIVES,
            seed: 0,
            workers: Workers::ONE,
        }
    }
}

/// Candidate pool of one query: every positive plus up to `negatives`
/// negatives drawn without replacement. Sorted by id.
pub fn protocol_pool(
    dataset: &Dataset,
    query_id: &str,
    negatives: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let labels = dataset
        .labels
        .get(query_id)
        .ok_or_else(|| CoreError::Input(format!("query {query_id} has no labels")))?;
    let mut negs: Vec<&String> = labels.negatives.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(query_id));
    negs.shuffle(&mut rng);
    negs.truncate(negatives);
    let mut pool: Vec<String> = labels.positives.iter().chain(negs).cloned().collect();
    pool.sort();
    Ok(pool)
}

/// Ranks each query's protocol pool with `scorer` and averages the metrics.
pub fn evaluate_protocol(
    scorer: &dyn Scorer,
    dataset: &Dataset,
    query_ids: &[String],
    config: &ProtocolConfig,
) -> Result<MetricReport> {
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for q in query_ids {
        match dataset.labels.positives(q) {
            Some(p) if !p.is_empty() => included.push(q.clone()),
            _ => excluded.push(q.clone()),
        }
    }
    let per_query = try_par_map(&included, config.workers, |qid| -> Result<QueryMetrics> {
        let query = dataset
            .queries
            .get(qid)
            .ok_or_else(|| CoreError::Input(format!("unknown query {qid}")))?;
        let pool = protocol_pool(dataset, qid, config.negatives, config.seed)?;
        let seqs: Vec<&EventSequence> = pool.iter().map(|id| &dataset.corpus[id]).collect();
        let scores = scorer.score_candidates(query, &seqs)?;
        let ids: Vec<&str> = pool.iter().map(String::as_str).collect();
        let ranked: Vec<String> = rank_by_score(&ids, &scores)?
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        let relevant = dataset.labels.positives(qid).expect("filtered above");
        Ok(QueryMetrics {
            query_id: qid.clone(),
            candidates: pool.len(),
            positives: relevant.len(),
            metrics: rank_metrics(&ranked, relevant, &config.ks)?,
        })
    })?;
    Ok(MetricReport::from_queries(per_query, &config.ks, excluded))
}

/// Stable 64-bit FNV-1a hash, used to derive per-query seeds.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_first_hit() {
        let m = rank_metrics(&ids(&["p", "a", "b"]), &set(&["p"]), &[1, 10]).unwrap();
        assert_eq!((m.ap, m.rr), (1.0, 1.0));
        assert_eq!(m.ndcg[&1], 1.0);
        assert_eq!(m.ndcg[&10], 1.0);
    }

    #[test]
    fn first_hit_at_rank_four() {
        let m = rank_metrics(&ids(&["a", "b", "c", "p"]), &set(&["p"]), &[10]).unwrap();
        assert_eq!(m.rr, 0.25);
    }

    #[test]
    fn alternating_list() {
        let m = rank_metrics(&ids(&["n1", "p1", "n2", "p2"]), &set(&["p1", "p2"]), &[2]).unwrap();
        assert!((m.ap - 0.5).abs() < 1e-15);
        let l3 = 3f64.log2();
        let want = (1.0 / l3) / (1.0 + 1.0 / l3);
        assert!((m.ndcg[&2] - want).abs() < 1e-15);
        assert!((m.ndcg[&2] - 0.3869).abs() < 1e-4);
    }

    #[test]
    fn absent_relevant_items_count_as_zero() {
        let m = rank_metrics(&ids(&["p1", "x"]), &set(&["p1", "p2"]), &[5]).unwrap();
        assert_eq!(m.ap, 0.5);
    }

    #[test]
    fn invalid_inputs() {
        assert!(rank_metrics(&ids(&["a", "a"]), &set(&["a"]), &[1]).is_err());
        assert!(rank_metrics(&ids(&["a"]), &set(&[]), &[1]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let r = rank_by_score(&["c2", "c1", "c3"], &[0.5, 0.5, 0.9]).unwrap();
        let order: Vec<&str> = r.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(order, ["c3", "c1", "c2"]);
        assert!(rank_by_score(&["a"], &[f64::NAN]).is_err());
    }
}
