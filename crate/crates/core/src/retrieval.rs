//! Index construction and the three retrieval pipelines: exhaustive
//! scoring, hashed candidates scored in self mode, and hashed candidates
//! reranked by a second model.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::eval::{fnv1a, rank_by_score, Scorer};
use crate::hashindex::{
    bit_balance, compute_code, mean_abs_correlation, train_hash_net, Coder, HashIndex, HashProfile,
    HashScheme, HashTrainConfig, HashTrainReport, Lookup,
};
use crate::parallel::{try_par_map, Workers};
use crate::relevance::{ModelScorer, RelevanceModel, ScoreMode};
use crate::seq::EventSequence;

pub const STORE_FORMAT_VERSION: u32 = 1;

pub const RESULTS_CSV_HEADER: &str = "query_id,rank,corpus_id,score,mode,comparisons";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Exhaustive,
    HashedSelf,
    Telescopic,
}

impl RetrievalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(Self::Exhaustive),
            "hashed_self" | "hashed" => Ok(Self::HashedSelf),
            "telescopic" => Ok(Self::Telescopic),
            other => Err(CoreError::Argument(format!(
                "unknown retrieval mode `{other}` (expected exhaustive, hashed_self or telescopic)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Exhaustive => "exhaustive",
            Self::HashedSelf => "hashed_self",
            Self::Telescopic => "telescopic",
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub scheme: HashScheme,
    pub profile: HashProfile,
    /// Code length; `None` uses the embedding dimension.
    pub code_len: Option<usize>,
    /// Its `seed` is ignored; the index seed drives the hash net too.
    pub hash_train: HashTrainConfig,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            scheme: HashScheme::Learned,
            profile: HashProfile::default(),
            code_len: None,
            hash_train: HashTrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub sequences: usize,
    pub embedding_dim: usize,
    /// Sequences embedded without the Fisher preconditioner.
    pub fallback: Vec<String>,
    pub scheme: HashScheme,
    pub code_len: usize,
    pub tables: usize,
    pub bits: usize,
    pub bit_balance: f64,
    pub mean_abs_correlation: f64,
    pub non_empty_buckets: Vec<usize>,
    pub hash_training: Option<HashTrainReport>,
}

/// Corpus embeddings, the coder that hashed them and the bucket index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexStore {
    pub format_version: u32,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub fallback: BTreeSet<String>,
    pub coder: Coder,
    pub index: HashIndex,
}

impl IndexStore {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn code_of(&self, v: &[f64]) -> Result<Vec<i8>> {
        compute_code(v, &self.coder)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index store serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let store: IndexStore = serde_json::from_str(text).map_err(|source| CoreError::Json {
            context: "index store".into(),
            source,
        })?;
        if store.format_version != STORE_FORMAT_VERSION {
            return Err(CoreError::Config(format!(
                "index store format version {} is not supported (expected {STORE_FORMAT_VERSION})",
                store.format_version
            )));
        }
        // Re-validates the tables.
        HashIndex::from_json(&store.index.to_json())?;
        let ids: BTreeSet<&String> = store.embeddings.keys().collect();
        if ids != store.index.codes.keys().collect()
            || store.fallback.iter().any(|id| !ids.contains(id))
        {
            return Err(CoreError::Input(
                "index store embeddings and codes cover different ids".into(),
            ));
        }
        if store.coder.code_len() != store.index.code_len {
            return Err(CoreError::Dimension {
                expected: store.index.code_len,
                got: store.coder.code_len(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// `model` with its scoring mode forced to self attention.
pub fn self_mode(model: &RelevanceModel) -> RelevanceModel {
    let mut m = model.clone();
    m.mode = ScoreMode::SelfAttn;
    m
}

/// Self-mode Fisher vector; a degenerate preconditioned gradient falls back
/// to the plain normalized gradient. The flag marks the fallback.
pub fn index_embedding(model: &RelevanceModel, seq: &EventSequence) -> Result<(Vec<f64>, bool)> {
    let grad = model.fisher_gradient(seq, None)?;
    match model.normalize(&grad) {
        Ok(v) => Ok((v, false)),
        Err(CoreError::DegenerateEmbedding { .. }) => {
            let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(CoreError::DegenerateEmbedding { norm });
            }
            Ok((grad.iter().map(|x| x / norm).collect(), true))
        }
        Err(e) => Err(e),
    }
}

/// Self-mode embeddings of a corpus, in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEmbeddings {
    pub ids: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    pub fallback: BTreeSet<String>,
    pub dim: usize,
}

pub fn embed_corpus(
    corpus: &[&EventSequence],
    model: &RelevanceModel,
    workers: Workers,
) -> Result<CorpusEmbeddings> {
    if corpus.is_empty() {
        return Err(CoreError::Input("cannot index an empty corpus".into()));
    }
    let model = self_mode(model);
    let embedded = try_par_map(corpus, workers, |c| index_embedding(&model, c))?;
    let mut out = CorpusEmbeddings {
        ids: Vec::with_capacity(corpus.len()),
        vectors: Vec::with_capacity(corpus.len()),
        fallback: BTreeSet::new(),
        dim: model.fisher_dim(),
    };
    let mut seen = BTreeSet::new();
    for (c, (v, flagged)) in corpus.iter().zip(embedded) {
        let id = c.id().to_string();
        if !seen.insert(id.clone()) {
            return Err(CoreError::Input(format!("duplicate corpus id {id}")));
        }
        if flagged {
            out.fallback.insert(id.clone());
        }
        out.ids.push(id);
        out.vectors.push(v);
    }
    Ok(out)
}

/// Draws hyperplanes or fits the hash net, per `config.scheme`.
pub fn fit_coder(
    emb: &CorpusEmbeddings,
    config: &IndexConfig,
) -> Result<(Coder, Option<HashTrainReport>)> {
    let code_len = config.code_len.unwrap_or(emb.dim);
    match config.scheme {
        HashScheme::RandomHyperplane => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a("hyperplanes"));
            Ok((
                Coder::random_hyperplanes(emb.dim, code_len, &mut rng)?,
                None,
            ))
        }
        HashScheme::Learned => {
            let cfg = HashTrainConfig {
                code_len: Some(code_len),
                seed: config.seed ^ fnv1a("hash_net"),
                ..config.hash_train.clone()
            };
            let (net, report) = train_hash_net(&emb.vectors, &cfg)?;
            Ok((Coder::Net(net), Some(report)))
        }
    }
}

/// Codes every embedding with `coder` and files it into tables drawn for
/// `profile` from `seed`.
pub fn assemble_index(
    emb: &CorpusEmbeddings,
    coder: Coder,
    profile: HashProfile,
    seed: u64,
    workers: Workers,
) -> Result<(IndexStore, BuildReport)> {
    let mut index = HashIndex::new(coder.scheme(), coder.code_len(), profile, seed)?;
    let codes = try_par_map(&emb.vectors, workers, |v| compute_code(v, &coder))?;
    for (id, code) in emb.ids.iter().zip(&codes) {
        index.assign_buckets(id, code)?;
    }
    let report = BuildReport {
        sequences: emb.ids.len(),
        embedding_dim: emb.dim,
        fallback: emb.fallback.iter().cloned().collect(),
        scheme: coder.scheme(),
        code_len: coder.code_len(),
        tables: index.num_tables,
        bits: index.bits,
        bit_balance: bit_balance(&codes),
        mean_abs_correlation: mean_abs_correlation(&codes),
        non_empty_buckets: index.tables.iter().map(|t| t.buckets.len()).collect(),
        hash_training: None,
    };
    let store = IndexStore {
        format_version: STORE_FORMAT_VERSION,
        embeddings: emb
            .ids
            .iter()
            .cloned()
            .zip(emb.vectors.iter().cloned())
            .collect(),
        fallback: emb.fallback.clone(),
        coder,
        index,
    };
    Ok((store, report))
}

/// Embeds every corpus sequence in self mode, derives codes and files them
/// into the tables.
pub fn build_index(
    corpus: &[&EventSequence],
    model: &RelevanceModel,
    config: &IndexConfig,
    workers: Workers,
) -> Result<(IndexStore, BuildReport)> {
    let emb = embed_corpus(corpus, model, workers)?;
    let (coder, training) = fit_coder(&emb, config)?;
    let (store, mut report) = assemble_index(&emb, coder, config.profile, config.seed, workers)?;
    report.hash_training = training;
    Ok((store, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<(String, f64)>,
    pub mode: RetrievalMode,
    /// Pairs scored to produce `ranked`.
    pub comparisons: usize,
    /// How the candidate set was found; `None` for exhaustive retrieval.
    pub lookup: Option<Lookup>,
}

impl RetrievalResult {
    pub fn write_csv_rows(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (rank, (id, score)) in self.ranked.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                self.query_id,
                rank + 1,
                id,
                score,
                self.mode,
                self.comparisons
            )?;
        }
        Ok(())
    }
}

pub fn write_results_csv(out: &mut impl Write, results: &[RetrievalResult]) -> std::io::Result<()> {
    writeln!(out, "{RESULTS_CSV_HEADER}")?;
    for r in results {
        r.write_csv_rows(out)?;
    }
    Ok(())
}

/// Fraction of query-corpus comparisons avoided.
pub fn reduction_factor(comparisons: usize, corpus_size: usize) -> f64 {
    if corpus_size == 0 {
        return 0.0;
    }
    1.0 - comparisons as f64 / corpus_size as f64
}

/// Read-only view over a corpus, the self-mode model behind the index and an
/// optional reranking model.
pub struct Retriever<'a> {
    corpus: &'a BTreeMap<String, EventSequence>,
    self_model: RelevanceModel,
    store: Option<&'a IndexStore>,
    reranker: Option<&'a RelevanceModel>,
    workers: Workers,
}

impl<'a> Retriever<'a> {
    /// `model` is always used in self mode.
    pub fn new(
        corpus: &'a BTreeMap<String, EventSequence>,
        model: &RelevanceModel,
        workers: Workers,
    ) -> Self {
        Self {
            corpus,
            self_model: self_mode(model),
            store: None,
            reranker: None,
            workers,
        }
    }

    pub fn with_index(mut self, store: &'a IndexStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_reranker(mut self, model: &'a RelevanceModel) -> Self {
        self.reranker = Some(model);
        self
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus.len()
    }

    /// Hashed candidate ids of `query` and how they were found.
    pub fn candidates(&self, query: &EventSequence) -> Result<(BTreeSet<String>, Lookup)> {
        let store = self.require_store()?;
        let prepared = self.self_model.prepare_query(query)?;
        let v = prepared.vector.expect("self mode prepares a vector");
        store.index.lookup_with_fallback(&store.code_of(&v)?)
    }

    pub fn retrieve(
        &self,
        query: &EventSequence,
        k: usize,
        mode: RetrievalMode,
    ) -> Result<RetrievalResult> {
        if k < 1 {
            return Err(CoreError::Argument("K must be at least 1".into()));
        }
        let (ids, lookup): (Vec<String>, Option<Lookup>) = match mode {
            RetrievalMode::Exhaustive => (self.corpus.keys().cloned().collect(), None),
            RetrievalMode::HashedSelf | RetrievalMode::Telescopic => {
                let (set, how) = self.candidates(query)?;
                (set.into_iter().collect(), Some(how))
            }
        };
        let seqs = ids
            .iter()
            .map(|id| {
                self.corpus.get(id).ok_or_else(|| {
                    CoreError::Input(format!("index refers to unknown corpus id {id}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = match mode {
            RetrievalMode::Exhaustive => match self.reranker {
                Some(m) => ModelScorer::new(m, self.workers).score_candidates(query, &seqs)?,
                None => self.self_scores(query, &seqs)?,
            },
            RetrievalMode::HashedSelf => self.self_scores(query, &seqs)?,
            RetrievalMode::Telescopic => {
                let m = self.reranker.ok_or_else(|| {
                    CoreError::Argument("telescopic retrieval needs a reranking model".into())
                })?;
                ModelScorer::new(m, self.workers).score_candidates(query, &seqs)?
            }
        };
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut ranked = rank_by_score(&id_refs, &scores)?;
        ranked.truncate(k);
        Ok(RetrievalResult {
            query_id: query.id().to_string(),
            ranked,
            mode,
            comparisons: ids.len(),
            lookup,
        })
    }

    fn require_store(&self) -> Result<&'a IndexStore> {
        self.store
            .ok_or_else(|| CoreError::Argument("hashed retrieval needs an index".into()))
    }

    /// Self-mode scores, reusing indexed corpus vectors when available.
    fn self_scores(&self, query: &EventSequence, seqs: &[&EventSequence]) -> Result<Vec<f64>> {
        let prepared = self.self_model.prepare_query(query)?;
        try_par_map(seqs, self.workers, |c| {
            let cached = self
                .store
                .and_then(|s| s.embeddings.get(c.id()))
                .map(Vec::as_slice);
            Ok(self.self_model.score(&prepared, c, cached)?.s)
        })
    }
}

/// Wraps one retrieval mode as a [`Scorer`]: candidates outside the
/// retrieved set score `-inf`. Comparisons are not counted here.
pub struct RetrievalScorer<'r, 'a> {
    pub retriever: &'r Retriever<'a>,
    pub mode: RetrievalMode,
}

impl Scorer for RetrievalScorer<'_, '_> {
    fn score_candidates(
        &self,
        query: &EventSequence,
        candidates: &[&EventSequence],
    ) -> Result<Vec<f64>> {
        let result =
            self.retriever
                .retrieve(query, self.retriever.corpus_size().max(1), self.mode)?;
        let scores: BTreeMap<&str, f64> = result
            .ranked
            .iter()
            .map(|(id, s)| (id.as_str(), *s))
            .collect();
        Ok(candidates
            .iter()
            .map(|c| scores.get(c.id()).copied().unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtpp::{MtppConfig, MtppModel};
    use crate::relevance::FisherConfig;
    use crate::synth::{generate, GeneratorConfig};
    use crate::unwarp::{UnwarpConfig, UnwarpNet};
    use crate::Dataset;

    fn fixture(mode: ScoreMode) -> (Dataset, RelevanceModel) {
        let ds = generate(&GeneratorConfig {
            n_base: 4,
            subseqs_per_base: (5, 5),
            mean_len: 8,
            max_len: 64,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .dataset;
        let mtpp = MtppModel::new(MtppConfig {
            dim: 8,
            max_len: 64,
            dropout: 0.0,
            ..MtppConfig::default()
        })
        .unwrap();
        let unwarp = UnwarpNet::identity(
            UnwarpConfig {
                hidden: 4,
                quad_nodes: 8,
                ..UnwarpConfig::default()
            },
            ds.global_horizon(),
        )
        .unwrap();
        let model = RelevanceModel::new(mode, mtpp, unwarp, FisherConfig::default(), 0.01).unwrap();
        (ds, model)
    }

    fn config(scheme: HashScheme, tables: usize, bits: usize) -> IndexConfig {
        IndexConfig {
            scheme,
            profile: HashProfile { tables, bits },
            code_len: Some(8),
            hash_train: HashTrainConfig {
                steps: 20,
                ..HashTrainConfig::default()
            },
            seed: 5,
        }
    }

    fn corpus(ds: &Dataset) -> Vec<&EventSequence> {
        ds.corpus.values().collect()
    }

    #[test]
    fn index_covers_corpus_once_per_table() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        for scheme in [HashScheme::RandomHyperplane, HashScheme::Learned] {
            let (store, report) =
                build_index(&corpus(&ds), &model, &config(scheme, 3, 4), Workers::ONE).unwrap();
            let n = ds.corpus.len();
            assert_eq!(
                (store.len(), store.index.len(), report.sequences),
                (n, n, n)
            );
            for table in &store.index.tables {
                let filed: usize = table.buckets.values().map(BTreeSet::len).sum();
                assert_eq!(filed, n);
            }
            assert!(report.fallback.is_empty());
        }
    }

    #[test]
    fn rebuild_is_bit_identical_and_round_trips() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        let cfg = config(HashScheme::Learned, 2, 3);
        let (a, _) = build_index(&corpus(&ds), &model, &cfg, Workers::ONE).unwrap();
        let (b, _) = build_index(&corpus(&ds), &model, &cfg, Workers::new(3).unwrap()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = IndexStore::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json(), a.to_json());
    }

    #[test]
    fn exhaustive_results_are_sorted_and_truncated() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        let r = Retriever::new(&ds.corpus, &model, Workers::ONE);
        let q = ds.queries.values().next().unwrap();
        let res = r.retrieve(q, 5, RetrievalMode::Exhaustive).unwrap();
        assert_eq!(res.ranked.len(), 5);
        assert_eq!(res.comparisons, ds.corpus.len());
        assert!(res.ranked.windows(2).all(|w| w[0].1 >= w[1].1));
        let all = r.retrieve(q, 1000, RetrievalMode::Exhaustive).unwrap();
        assert_eq!(all.ranked.len(), ds.corpus.len());
        assert_eq!(&all.ranked[..5], &res.ranked[..]);
        assert!(matches!(
            r.retrieve(q, 0, RetrievalMode::Exhaustive),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn single_bucket_index_reproduces_exhaustive_rankings() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        let (cross_ds, cross) = fixture(ScoreMode::CrossAttn);
        assert_eq!(ds, cross_ds);
        let (store, _) = build_index(
            &corpus(&ds),
            &model,
            &config(HashScheme::RandomHyperplane, 1, 0),
            Workers::ONE,
        )
        .unwrap();
        let hashed = Retriever::new(&ds.corpus, &model, Workers::ONE).with_index(&store);
        let plain = Retriever::new(&ds.corpus, &model, Workers::ONE);
        let tele = Retriever::new(&ds.corpus, &model, Workers::ONE)
            .with_index(&store)
            .with_reranker(&cross);
        let cross_only = Retriever::new(&ds.corpus, &model, Workers::ONE).with_reranker(&cross);
        for q in ds.queries.values().take(3) {
            let h = hashed.retrieve(q, 10, RetrievalMode::HashedSelf).unwrap();
            let e = plain.retrieve(q, 10, RetrievalMode::Exhaustive).unwrap();
            assert_eq!(h.ranked, e.ranked);
            assert_eq!(h.comparisons, ds.corpus.len());
            let t = tele.retrieve(q, 10, RetrievalMode::Telescopic).unwrap();
            let x = cross_only
                .retrieve(q, 10, RetrievalMode::Exhaustive)
                .unwrap();
            assert_eq!(t.ranked, x.ranked);
        }
    }

    #[test]
    fn hashed_comparisons_equal_candidate_count() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        let (store, _) = build_index(
            &corpus(&ds),
            &model,
            &config(HashScheme::RandomHyperplane, 2, 4),
            Workers::ONE,
        )
        .unwrap();
        let r = Retriever::new(&ds.corpus, &model, Workers::ONE).with_index(&store);
        for q in ds.queries.values() {
            let (cands, _) = r.candidates(q).unwrap();
            assert!(cands.iter().all(|id| ds.corpus.contains_key(id)));
            let res = r.retrieve(q, 3, RetrievalMode::HashedSelf).unwrap();
            assert_eq!(res.comparisons, cands.len());
            assert_eq!(res.ranked.len(), cands.len().min(3));
            assert!(res.ranked.iter().all(|(id, _)| cands.contains(id)));
            assert_eq!(r.retrieve(q, 3, RetrievalMode::HashedSelf).unwrap(), res);
        }
    }

    #[test]
    fn telescopic_needs_a_reranker() {
        let (ds, model) = fixture(ScoreMode::SelfAttn);
        let (store, _) = build_index(
            &corpus(&ds),
            &model,
            &config(HashScheme::RandomHyperplane, 1, 2),
            Workers::ONE,
        )
        .unwrap();
        let r = Retriever::new(&ds.corpus, &model, Workers::ONE).with_index(&store);
        let q = ds.queries.values().next().unwrap();
        assert!(matches!(
            r.retrieve(q, 3, RetrievalMode::Telescopic),
            Err(CoreError::Argument(_))
        ));
        let bare = Retriever::new(&ds.corpus, &model, Workers::ONE);
        assert!(matches!(
            bare.retrieve(q, 3, RetrievalMode::HashedSelf),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn degenerate_preconditioning_falls_back_and_is_flagged() {
        let (ds, mut model) = fixture(ScoreMode::SelfAttn);
        model.fisher_diag = Some(vec![1e40; model.fisher_dim()]);
        let (v, flagged) = index_embedding(&model, ds.corpus.values().next().unwrap()).unwrap();
        assert!(flagged);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-10);
        let (_, report) = build_index(
            &corpus(&ds),
            &model,
            &config(HashScheme::RandomHyperplane, 1, 2),
            Workers::ONE,
        )
        .unwrap();
        assert_eq!(report.fallback.len(), ds.corpus.len());
    }

    #[test]
    fn results_csv_layout() {
        let res = RetrievalResult {
            query_id: "q1".into(),
            ranked: vec![("c1".into(), 0.9), ("c3".into(), 0.5)],
            mode: RetrievalMode::Exhaustive,
            comparisons: 3,
            lookup: None,
        };
        let mut out = Vec::new();
        write_results_csv(&mut out, &[res]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "query_id,rank,corpus_id,score,mode,comparisons\nq1,1,c1,0.9,exhaustive,3\nq1,2,c3,0.5,exhaustive,3\n"
        );
        assert_eq!(reduction_factor(256, 1024), 0.75);
    }
}
