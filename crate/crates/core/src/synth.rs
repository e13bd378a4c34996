//! Synthetic warped-subsequence datasets, pool-based relevance labels and
//! query splits.
//!
//! Every base sequence is a renewal process with log-normal gaps and a
//! first-order Markov mark chain. Each base spawns a pool of derived
//! sequences: contiguous windows of the base, re-anchored at zero and passed
//! through a random monotone time warp. Members of the same pool are
//! relevant to each other.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seq::{Dataset, Event, EventSequence, QueryLabels, RelevanceLabels, DEFAULT_MAX_LEN};

/// Ranges of the random monotone warp `t -> (shift + scale * t)^power`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpConfig {
    pub scale: (f64, f64),
    pub shift: (f64, f64),
    /// `None` disables the power warp.
    pub power: Option<(f64, f64)>,
}

impl WarpConfig {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            shift: (0.0, 0.0),
            power: None,
        }
    }

    pub fn affine() -> Self {
        Self {
            scale: (0.5, 2.0),
            shift: (0.0, 0.5),
            power: None,
        }
    }

    /// Affine warp followed by a power warp with exponent in `[0.8, 1.25]`.
    pub fn full() -> Self {
        Self {
            power: Some((0.8, 1.25)),
            ..Self::affine()
        }
    }

    fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64), name: &str, min_exclusive: Option<f64>| {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(CoreError::Config(format!(
                    "warp {name} range ({a}, {b}) is invalid"
                )));
            }
            if let Some(m) = min_exclusive {
                if a <= m {
                    return Err(CoreError::Config(format!("warp {name} must exceed {m}")));
                }
            }
            Ok(())
        };
        ordered(self.scale, "scale", Some(0.0))?;
        ordered(self.shift, "shift", None)?;
        if self.shift.0 < 0.0 {
            return Err(CoreError::Config("warp shift must be nonnegative".into()));
        }
        if let Some(p) = self.power {
            ordered(p, "power", Some(0.0))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_base: usize,
    /// Inclusive range of pool sizes (derived sequences per base).
    pub subseqs_per_base: (usize, usize),
    pub mark_vocab: usize,
    pub mean_len: usize,
    /// Mean inter-arrival time shared by the bases (before warping).
    pub mean_gap: f64,
    /// Each base scales its mean gap by a factor drawn log-uniformly from
    /// `[1/rate_spread, rate_spread]`.
    pub rate_spread: f64,
    /// Range of the log-normal shape parameter per base.
    pub gap_shape: (f64, f64),
    /// Concentration of the Dirichlet prior over Markov transition rows.
    pub dirichlet_alpha: f64,
    pub warp: WarpConfig,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_base: 64,
            subseqs_per_base: (17, 17),
            mark_vocab: 5,
            mean_len: 50,
            mean_gap: 0.1,
            rate_spread: 2.0,
            gap_shape: (0.3, 0.8),
            dirichlet_alpha: 0.5,
            warp: WarpConfig::full(),
            max_len: DEFAULT_MAX_LEN,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.n_base < 2 {
            return fail(format!("n_base must be at least 2, got {}", self.n_base));
        }
        if self.mean_len < 4 {
            return fail(format!(
                "mean_len must be at least 4, got {}",
                self.mean_len
            ));
        }
        let (a, b) = self.subseqs_per_base;
        if a > b {
            return fail(format!("subseqs_per_base range ({a}, {b}) is reversed"));
        }
        if a < 2 {
            return fail("every pool needs at least 2 members".into());
        }
        if self.mark_vocab == 0 {
            return fail("mark_vocab must be positive".into());
        }
        if !(self.mean_gap > 0.0 && self.mean_gap.is_finite()) {
            return fail(format!("mean_gap must be positive, got {}", self.mean_gap));
        }
        if !(self.rate_spread >= 1.0) {
            return fail(format!(
                "rate_spread must be at least 1, got {}",
                self.rate_spread
            ));
        }
        let (s0, s1) = self.gap_shape;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return fail(format!("gap_shape range ({s0}, {s1}) is invalid"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return fail("dirichlet_alpha must be positive".into());
        }
        if self.mean_len * 3 / 2 > self.max_len {
            return fail(format!(
                "windows of up to {} events exceed max_len {}",
                self.mean_len * 3 / 2,
                self.max_len
            ));
        }
        self.warp.validate()
    }
}

/// A generated dataset together with the bases and pools it came from.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub bases: Vec<EventSequence>,
    /// Base id -> ids of the derived sequences (query included).
    pub pools: BTreeMap<String, Vec<String>>,
    /// Derived sequence id -> (base id, index of its first event in the base).
    pub origins: BTreeMap<String, (String, usize)>,
}

pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Dataset> {
    generate(config).map(|s| s.dataset)
}

pub fn generate(config: &GeneratorConfig) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = config.mark_vocab;
    let max_window = config.mean_len * 3 / 2;
    let min_window = (config.mean_len / 2).max(2);
    // One spare event past the longest window provides its horizon.
    let base_len = max_window * 2 + 1;

    let mut bases = Vec::with_capacity(config.n_base);
    let mut pools = BTreeMap::new();
    let mut origins = BTreeMap::new();
    let mut derived = Vec::new();

    for b in 0..config.n_base {
        let base_id = format!("b{b:04}");
        let spread = config.rate_spread.ln();
        let factor = if spread > 0.0 {
            rng.random_range(-spread..=spread).exp()
        } else {
            1.0
        };
        let shape = rng.random_range(config.gap_shape.0..=config.gap_shape.1);
        let mean = config.mean_gap * factor;
        // E[LogNormal(mu, s)] = exp(mu + s^2 / 2).
        let gaps = LogNormal::new(mean.ln() - 0.5 * shape * shape, shape)
            .map_err(|e| CoreError::Config(e.to_string()))?;
        let transitions = dirichlet_rows(vocab, config.dirichlet_alpha, &mut rng)?;

        let mut events = Vec::with_capacity(base_len);
        let mut t = 0.0;
        let mut mark = rng.random_range(0..vocab);
        for _ in 0..base_len {
            t += gaps.sample(&mut rng);
            events.push(Event::new(t, mark));
            mark = sample_categorical(&transitions[mark], &mut rng);
        }
        let horizon = t + gaps.sample(&mut rng);
        let base = EventSequence::new(base_id.clone(), events, horizon)?;

        let pool_size = rng.random_range(config.subseqs_per_base.0..=config.subseqs_per_base.1);
        let mut members = Vec::with_capacity(pool_size);
        for k in 0..pool_size {
            let id = format!("s{b:04}_{k:03}");
            let len = rng.random_range(min_window..=max_window);
            let start = rng.random_range(0..base_len - len);
            let warp = draw_warp(&config.warp, &mut rng);
            let seq = derive_window(&base, start, len, &warp, &id)?;
            origins.insert(id.clone(), (base_id.clone(), start));
            members.push(id);
            derived.push(seq);
        }
        pools.insert(base_id, members);
        bases.push(base);
    }

    let (query_ids, _corpus_ids, labels) = derive_relevance_labels(&pools, rng.random())?;
    let query_set: BTreeSet<&String> = query_ids.iter().collect();
    let (queries, corpus): (Vec<_>, Vec<_>) = derived
        .into_iter()
        .partition(|s| query_set.contains(&s.id().to_string()));
    let dataset = Dataset::new(corpus, queries, labels, vocab, config.max_len)?;
    Ok(Synthetic {
        dataset,
        bases,
        pools,
        origins,
    })
}

#[derive(Clone, Copy, Debug)]
struct Warp {
    scale: f64,
    shift: f64,
    power: f64,
}

impl Warp {
    fn apply(&self, t: f64) -> f64 {
        (self.shift + self.scale * t).powf(self.power)
    }
}

fn draw_warp(cfg: &WarpConfig, rng: &mut ChaCha8Rng) -> Warp {
    // Always consume the same number of draws so that changing a range does
    // not reshuffle the rest of the dataset.
    let mut uniform = |(a, b): (f64, f64)| {
        let u: f64 = rng.random();
        a + (b - a) * u
    };
    let scale = uniform(cfg.scale);
    let shift = uniform(cfg.shift);
    let power = uniform(cfg.power.unwrap_or((1.0, 1.0)));
    Warp {
        scale,
        shift,
        power,
    }
}

/// Window `start..start+len` of `base`, measured from the event before it
/// (or from zero), then warped.
fn derive_window(
    base: &EventSequence,
    start: usize,
    len: usize,
    warp: &Warp,
    id: &str,
) -> Result<EventSequence> {
    let all = base.events();
    let anchor = if start == 0 { 0.0 } else { all[start - 1].time };
    let events = all[start..start + len]
        .iter()
        .map(|e| Event::new(warp.apply(e.time - anchor), e.mark))
        .collect();
    let next = all
        .get(start + len)
        .map(|e| e.time)
        .unwrap_or(base.horizon());
    EventSequence::new(id, events, warp.apply(next - anchor))
}

fn dirichlet_rows(vocab: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| CoreError::Config(e.to_string()))?;
    Ok((0..vocab)
        .map(|_| {
            let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng).max(1e-300)).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
            row
        })
        .collect())
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws one query per pool; the rest of its pool are its positives and the
/// non-query members of every other pool its negatives.
///
/// Returns `(query ids, corpus ids, labels)`.
pub fn derive_relevance_labels(
    pools: &BTreeMap<String, Vec<String>>,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>, RelevanceLabels)> {
    if let Some((base, members)) = pools.iter().find(|(_, m)| m.len() < 2) {
        return Err(CoreError::Labeling(format!(
            "pool {base} has {} member(s); at least 2 are required",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(pools.len());
    let mut remainders = Vec::with_capacity(pools.len());
    for members in pools.values() {
        let pick = rng.random_range(0..members.len());
        queries.push(members[pick].clone());
        let rest: BTreeSet<String> = members
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != pick)
            .map(|(_, id)| id.clone())
            .collect();
        remainders.push(rest);
    }
    let corpus: BTreeSet<String> = remainders.iter().flatten().cloned().collect();
    let mut labels = RelevanceLabels::new();
    for (query, positives) in queries.iter().zip(&remainders) {
        let negatives: BTreeSet<String> = corpus.difference(positives).cloned().collect();
        if negatives.is_empty() {
            return Err(CoreError::Labeling(format!(
                "query {query} has no negatives; at least two pools are required"
            )));
        }
        labels.insert(
            query.clone(),
            QueryLabels {
                positives: positives.clone(),
                negatives,
            },
        )?;
    }
    Ok((queries, corpus.into_iter().collect(), labels))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Default train/validation/test proportions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.5, 0.1, 0.4];

/// Shuffles `query_ids` and cuts them by `ratios`.
///
/// Part sizes are `floor(ratio * n)`; the leftover queries go one each to
/// the parts with the largest fractional remainders (earlier parts win
/// ties). Parts with ratio exactly zero stay empty.
pub fn split_queries(query_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<QuerySplit> {
    if ratios.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
        return Err(CoreError::Split(format!(
            "ratios {ratios:?} must be nonnegative"
        )));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::Split(format!("ratios {ratios:?} must sum to 1")));
    }
    let n = query_ids.len();
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < active {
        return Err(CoreError::Split(format!(
            "{n} queries cannot fill {active} partitions"
        )));
    }
    let mut sizes = [0usize; 3];
    let mut fractions = Vec::new();
    for (i, &r) in ratios.iter().enumerate() {
        let exact = r * n as f64;
        sizes[i] = exact.floor() as usize;
        if r > 0.0 {
            fractions.push((exact - exact.floor(), i));
        }
    }
    fractions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut leftover = n - sizes.iter().sum::<usize>();
    for &(_, i) in fractions.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }

    let mut shuffled = query_ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let val = shuffled.split_off(sizes[0]);
    Ok(QuerySplit {
        train: shuffled,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(sizes: &[usize]) -> BTreeMap<String, Vec<String>> {
        sizes
            .iter()
            .enumerate()
            .map(|(p, &n)| {
                (
                    format!("p{p}"),
                    (0..n).map(|k| format!("p{p}_{k}")).collect(),
                )
            })
            .collect()
    }

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            n_base: 3,
            subseqs_per_base: (3, 5),
            mean_len: 10,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn pools_of_three_and_four() {
        let (queries, corpus, labels) = derive_relevance_labels(&pools(&[3, 4]), 1).unwrap();
        assert_eq!(queries.len(), 2);
        assert_eq!(corpus.len(), 5);
        assert_eq!(labels.positives(&queries[0]).unwrap().len(), 2);
        assert_eq!(labels.positives(&queries[1]).unwrap().len(), 3);
    }

    #[test]
    fn single_pool_has_no_negatives() {
        let err = derive_relevance_labels(&pools(&[4]), 1).unwrap_err();
        assert!(matches!(err, CoreError::Labeling(_)));
    }

    #[test]
    fn undersized_pool_is_rejected() {
        assert!(matches!(
            derive_relevance_labels(&pools(&[3, 1]), 1),
            Err(CoreError::Labeling(_))
        ));
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<String> = (0..10).map(|i| format!("q{i}")).collect();
        let s = split_queries(&ids, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 1, 4));
        let all = split_queries(&ids, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((all.train.len(), all.val.len(), all.test.len()), (10, 0, 0));
        assert_eq!(split_queries(&ids, DEFAULT_SPLIT, 3).unwrap(), s);
    }

    #[test]
    fn split_errors() {
        let ids: Vec<String> = (0..2).map(|i| format!("q{i}")).collect();
        assert!(split_queries(&ids, DEFAULT_SPLIT, 0).is_err());
        assert!(split_queries(&ids, [0.5, 0.6, 0.0], 0).is_err());
    }

    #[test]
    fn generator_rejects_bad_config() {
        let bad = [
            GeneratorConfig {
                n_base: 1,
                ..small_config()
            },
            GeneratorConfig {
                mean_len: 3,
                ..small_config()
            },
            GeneratorConfig {
                subseqs_per_base: (5, 3),
                ..small_config()
            },
        ];
        for cfg in bad {
            assert!(matches!(
                generate_synthetic(&cfg),
                Err(CoreError::Config(_))
            ));
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&GeneratorConfig {
            seed: 99,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_warp_yields_exact_windows() {
        let cfg = GeneratorConfig {
            n_base: 2,
            warp: WarpConfig::identity(),
            ..small_config()
        };
        let synth = generate(&cfg).unwrap();
        let bases: BTreeMap<&str, &EventSequence> =
            synth.bases.iter().map(|b| (b.id(), b)).collect();
        let all = synth
            .dataset
            .corpus
            .values()
            .chain(synth.dataset.queries.values());
        for seq in all {
            let (base_id, start) = &synth.origins[seq.id()];
            let base = bases[base_id.as_str()].events();
            let anchor = if *start == 0 {
                0.0
            } else {
                base[start - 1].time
            };
            for (k, e) in seq.events().iter().enumerate() {
                let b = base[start + k];
                assert_eq!(e.mark, b.mark);
                assert!((e.time - (b.time - anchor)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warped_windows_keep_base_order() {
        let synth = generate(&small_config()).unwrap();
        for seq in synth.dataset.corpus.values() {
            let (base_id, start) = &synth.origins[seq.id()];
            let base = synth.bases.iter().find(|b| b.id() == base_id).unwrap();
            let marks: Vec<usize> = base.marks()[*start..*start + seq.len()].to_vec();
            assert_eq!(seq.marks(), marks);
        }
    }

    #[test]
    fn labels_partition_corpus() {
        let ds = generate_synthetic(&small_config()).unwrap();
        let corpus: BTreeSet<String> = ds.corpus.keys().cloned().collect();
        for (_, l) in ds.labels.iter() {
            let union: BTreeSet<String> = l.positives.union(&l.negatives).cloned().collect();
            assert_eq!(union, corpus);
            assert!(l.positives.is_disjoint(&l.negatives));
            assert!(!l.positives.is_empty());
        }
    }
}
