//! Binary codes over embeddings and a multi-table bucket index.
//!
//! Codes come either from the signs of projections onto random unit
//! hyperplanes or from a small trained network. Each of `M` tables reads `L`
//! fixed bit positions of a code as a big-endian integer and files the id
//! under that bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ctes_diff::{AdamConfig, AdamState, Graph, ParamStore, ParamVars, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashScheme {
    RandomHyperplane,
    Learned,
}

impl HashScheme {
    /// Accepts `rh`/`random_hyperplane` and `learned`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rh" | "random_hyperplane" => Ok(HashScheme::RandomHyperplane),
            "learned" => Ok(HashScheme::Learned),
            other => Err(CoreError::Argument(format!(
                "unknown hash scheme `{other}` (expected rh or learned)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HashScheme::RandomHyperplane => "random_hyperplane",
            HashScheme::Learned => "learned",
        }
    }
}

/// Number of tables `M` and bits per table `L`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashProfile {
    pub tables: usize,
    pub bits: usize,
}

impl HashProfile {
    pub const DESK: HashProfile = HashProfile { tables: 4, bits: 6 };
    pub const LARGE: HashProfile = HashProfile {
        tables: 10,
        bits: 12,
    };

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::DESK),
            "large" => Ok(Self::LARGE),
            other => Err(CoreError::Config(format!(
                "unknown hash profile `{other}` (expected desk or large)"
            ))),
        }
    }
}

impl Default for HashProfile {
    fn default() -> Self {
        Self::DESK
    }
}

/// Weights of the balance, saturation and decorrelation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashWeights(pub [f64; 3]);

impl Default for HashWeights {
    fn default() -> Self {
        HashWeights([0.4, 0.3, 0.3])
    }
}

impl HashWeights {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "hash objective weights {:?} must be nonnegative and sum to 1",
                self.0
            )));
        }
        Ok(())
    }
}

/// One-hidden-layer map from embeddings to pre-sign code values.
///
/// Inputs are shifted by `center` and multiplied by `scale` before the first
/// layer; both are fixed when the net is fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashNet {
    params: ParamStore,
    center: Vec<f64>,
    scale: f64,
}

impl HashNet {
    /// Gaussian weights with variance `1 / fan_in`, zero biases, no input
    /// shift.
    pub fn random(input_dim: usize, code_len: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || code_len == 0 {
            return Err(CoreError::Config(
                "hash net dimensions must be positive".into(),
            ));
        }
        let mut gauss = |n: usize, fan_in: usize| -> Vec<f64> {
            let sd = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        };
        let mut params = ParamStore::new();
        params.insert(
            "w1",
            Tensor::matrix(
                input_dim,
                input_dim,
                gauss(input_dim * input_dim, input_dim),
            ),
        );
        params.insert("b1", Tensor::vector(vec![0.0; input_dim]));
        params.insert(
            "w2",
            Tensor::matrix(input_dim, code_len, gauss(input_dim * code_len, input_dim)),
        );
        params.insert("b2", Tensor::vector(vec![0.0; code_len]));
        Ok(Self {
            params,
            center: vec![0.0; input_dim],
            scale: 1.0,
        })
    }

    /// Identity weights: the code equals the sign of the input.
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CoreError::Config(
                "hash net dimensions must be positive".into(),
            ));
        }
        let eye: Vec<f64> = (0..dim * dim)
            .map(|k| if k / dim == k % dim { 1.0 } else { 0.0 })
            .collect();
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::matrix(dim, dim, eye.clone()));
        params.insert("b1", Tensor::vector(vec![0.0; dim]));
        params.insert("w2", Tensor::matrix(dim, dim, eye));
        params.insert("b2", Tensor::vector(vec![0.0; dim]));
        Ok(Self {
            params,
            center: vec![0.0; dim],
            scale: 1.0,
        })
    }

    pub fn from_parts(params: ParamStore, center: Vec<f64>, scale: f64) -> Result<Self> {
        let net = Self {
            params,
            center,
            scale,
        };
        net.check()?;
        Ok(net)
    }

    fn check(&self) -> Result<()> {
        let d = self.center.len();
        let bad = |what: &str| Err(CoreError::Config(format!("hash net: {what}")));
        for name in ["w1", "b1", "w2", "b2"] {
            if self.params.get(name).is_none() {
                return bad(&format!("missing parameter {name}"));
            }
        }
        if self.params.len() != 4 {
            return bad("unexpected parameters");
        }
        let r = self.params.tensor("b2").len();
        let shapes_ok = self.params.tensor("w1").shape() == [d, d]
            && self.params.tensor("b1").shape() == [d]
            && self.params.tensor("w2").shape() == [d, r]
            && r > 0;
        if !shapes_ok {
            return bad("parameter shapes do not match the input dimension");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("input scale must be positive");
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let old = std::mem::replace(&mut self.params, params);
        if let Err(e) = self.check() {
            self.params = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn input_dim(&self) -> usize {
        self.center.len()
    }

    pub fn code_len(&self) -> usize {
        self.params.tensor("b2").len()
    }

    /// Pre-sign outputs for a batch `x` of shape `[n, input_dim]`.
    pub fn forward_graph<'g>(&self, vars: &ParamVars<'g>, x: Var<'g>) -> Var<'g> {
        let graph = x.graph();
        let n = x.shape()[0];
        let shift = graph.constant(Tensor::vector(self.center.clone()));
        let z = (x - shift.expand_rows(n)).scale(self.scale);
        let h = z.matmul(vars.get("w1")).add_row(vars.get("b1")).tanh();
        h.matmul(vars.get("w2")).add_row(vars.get("b2"))
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(CoreError::Dimension {
                expected: self.input_dim(),
                got: v.len(),
            });
        }
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let x = graph.constant(Tensor::matrix(1, v.len(), v.to_vec()));
        Ok(self.forward_graph(&vars, x).value().data().to_vec())
    }
}

/// Turns embeddings into ±1 codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coder {
    /// Unit normal vectors, one per bit.
    Hyperplanes(Vec<Vec<f64>>),
    Net(HashNet),
}

impl Coder {
    pub fn random_hyperplanes(
        input_dim: usize,
        code_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || code_len == 0 {
            return Err(CoreError::Config(
                "hyperplane dimensions must be positive".into(),
            ));
        }
        let planes = (0..code_len)
            .map(|_| loop {
                let u: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break u.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        Ok(Coder::Hyperplanes(planes))
    }

    pub fn scheme(&self) -> HashScheme {
        match self {
            Coder::Hyperplanes(_) => HashScheme::RandomHyperplane,
            Coder::Net(_) => HashScheme::Learned,
        }
    }

    pub fn code_len(&self) -> usize {
        match self {
            Coder::Hyperplanes(p) => p.len(),
            Coder::Net(n) => n.code_len(),
        }
    }

    /// Pre-sign values.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Coder::Hyperplanes(planes) => planes
                .iter()
                .map(|u| {
                    if u.len() != v.len() {
                        return Err(CoreError::Dimension {
                            expected: u.len(),
                            got: v.len(),
                        });
                    }
                    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
                })
                .collect(),
            Coder::Net(net) => net.forward(v),
        }
    }
}

/// Sign code of `v`; exact zeros map to `+1`.
pub fn compute_code(v: &[f64], coder: &Coder) -> Result<Vec<i8>> {
    if v.iter().all(|x| *x == 0.0) {
        return Err(CoreError::DegenerateInput(
            "cannot hash the zero vector".into(),
        ));
    }
    Ok(coder.project(v)?.into_iter().map(sign_bit).collect())
}

fn sign_bit(x: f64) -> i8 {
    if x < 0.0 {
        -1
    } else {
        1
    }
}

/// How the decorrelation term aggregates code-entry products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `|Σ_c Σ_{i<j} u_i u_j|`: one absolute value over the pooled sum.
    Pooled,
    /// `Σ_{i<j} |mean_c u_i u_j|`: every bit pair is penalized separately.
    #[default]
    PerPair,
}

/// The three objective terms, unweighted, and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HashObjective {
    pub balance: f64,
    pub saturation: f64,
    pub decorrelation: f64,
    pub total: f64,
}

/// Objective over soft codes `u = tanh(Λ(x))` for a batch `x` of shape
/// `[n, d]`. Returns `(total, balance, saturation, decorrelation)`.
pub fn hash_objective_graph<'g>(
    net: &HashNet,
    vars: &ParamVars<'g>,
    x: Var<'g>,
    weights: &HashWeights,
    coupling: Coupling,
) -> (Var<'g>, Var<'g>, Var<'g>, Var<'g>) {
    let n = x.shape()[0] as f64;
    let u = net.forward_graph(vars, x).tanh();
    let r = u.shape()[1];
    let row_sums = u.sum_cols();
    let balance = row_sums.abs().sum().scale(1.0 / n);
    let saturation = (u.abs().add_scalar(-1.0)).abs().sum().scale(1.0 / n);
    let pairs = (r * r.saturating_sub(1) / 2).max(1) as f64;
    let decorrelation = match coupling {
        Coupling::Pooled => {
            // Σ_{i<j} u_i u_j = ((Σ u)² − Σ u²) / 2 per row.
            let pair_sum = (row_sums.square().sum() - u.square().sum()).scale(0.5);
            pair_sum.abs().scale(2.0 / pairs)
        }
        Coupling::PerPair => {
            // Both off-diagonal halves of |uᵀu / n|, twice the i < j sum.
            let gram = u.t().matmul(u).scale(1.0 / n).abs();
            let diag = u.square().sum().scale(1.0 / n);
            (gram.sum() - diag).scale(1.0 / pairs)
        }
    };
    let [e1, e2, e3] = weights.0;
    let total = balance.scale(e1) + saturation.scale(e2) + decorrelation.scale(e3);
    (total, balance, saturation, decorrelation)
}

fn batch<'g>(graph: &'g Graph, embeddings: &[Vec<f64>]) -> Result<Var<'g>> {
    let d = embeddings.first().map(Vec::len).unwrap_or(0);
    if embeddings.iter().any(|v| v.len() != d) {
        return Err(CoreError::Input("embeddings differ in length".into()));
    }
    let data: Vec<f64> = embeddings.iter().flatten().copied().collect();
    Ok(graph.constant(Tensor::matrix(embeddings.len(), d, data)))
}

pub fn hash_objective(
    net: &HashNet,
    embeddings: &[Vec<f64>],
    weights: &HashWeights,
    coupling: Coupling,
) -> Result<HashObjective> {
    weights.validate()?;
    if embeddings.is_empty() {
        return Err(CoreError::Input("hash objective needs embeddings".into()));
    }
    if embeddings[0].len() != net.input_dim() {
        return Err(CoreError::Dimension {
            expected: net.input_dim(),
            got: embeddings[0].len(),
        });
    }
    let graph = Graph::new();
    let vars = net.params.bind_where(&graph, |_| false);
    let x = batch(&graph, embeddings)?;
    let (total, balance, saturation, decorrelation) =
        hash_objective_graph(net, &vars, x, weights, coupling);
    Ok(HashObjective {
        balance: balance.item(),
        saturation: saturation.item(),
        decorrelation: decorrelation.item(),
        total: total.item(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashTrainConfig {
    pub weights: HashWeights,
    pub coupling: Coupling,
    /// Code length `R`; `None` uses the embedding dimension.
    pub code_len: Option<usize>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HashTrainConfig {
    fn default() -> Self {
        Self {
            weights: HashWeights::default(),
            coupling: Coupling::default(),
            code_len: None,
            steps: 400,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashTrainReport {
    /// Objective before each step.
    pub objective: Vec<f64>,
    /// Running minimum of `objective`.
    pub best_so_far: Vec<f64>,
    pub bit_balance: f64,
    pub mean_abs_correlation: f64,
}

/// Full-batch Adam on the hash objective. Inputs are centered on their mean
/// and rescaled to unit average coordinate variance; the lowest-objective
/// parameters are returned.
pub fn train_hash_net(
    embeddings: &[Vec<f64>],
    config: &HashTrainConfig,
) -> Result<(HashNet, HashTrainReport)> {
    config.weights.validate()?;
    if embeddings.len() < 2 {
        return Err(CoreError::Input(
            "hash net training needs at least two embeddings".into(),
        ));
    }
    let d = embeddings[0].len();
    let r = config.code_len.unwrap_or(d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = HashNet::random(d, r, &mut rng)?;
    let n = embeddings.len() as f64;
    let mut center = vec![0.0; d];
    for v in embeddings {
        if v.len() != d {
            return Err(CoreError::Input("embeddings differ in length".into()));
        }
        center.iter_mut().zip(v).for_each(|(c, x)| *c += x / n);
    }
    let var: f64 = embeddings
        .iter()
        .flat_map(|v| v.iter().zip(&center).map(|(x, c)| (x - c).powi(2)))
        .sum::<f64>()
        / (n * d as f64);
    net.center = center;
    net.scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 1.0 };

    let mut adam = AdamState::new(
        &net.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut objective = Vec::with_capacity(config.steps);
    let mut best_so_far = Vec::with_capacity(config.steps);
    let mut best = (f64::INFINITY, net.params.clone());
    for _ in 0..config.steps {
        let graph = Graph::new();
        let vars = net.params.bind(&graph);
        let x = batch(&graph, embeddings)?;
        let (total, ..) = hash_objective_graph(&net, &vars, x, &config.weights, config.coupling);
        let grads = graph.grad(total, &vars.all(), false);
        graph.check_finite()?;
        let value = total.item();
        if value < best.0 {
            best = (value, net.params.clone());
        }
        objective.push(value);
        best_so_far.push(best.0);
        adam.step(&mut net.params, &ctes_diff::flatten_values(&grads))?;
    }
    let final_value = hash_objective(&net, embeddings, &config.weights, config.coupling)?.total;
    if final_value < best.0 {
        best = (final_value, net.params.clone());
    }
    net.params = best.1;
    let codes = embeddings
        .iter()
        .map(|v| Ok(net.forward(v)?.into_iter().map(sign_bit).collect()))
        .collect::<Result<Vec<Vec<i8>>>>()?;
    let report = HashTrainReport {
        objective,
        best_so_far,
        bit_balance: bit_balance(&codes),
        mean_abs_correlation: mean_abs_correlation(&codes),
    };
    Ok((net, report))
}

/// Mean over bits of `|mean_c ζ[i]|`.
pub fn bit_balance(codes: &[Vec<i8>]) -> f64 {
    let Some(r) = codes.first().map(Vec::len) else {
        return 0.0;
    };
    let n = codes.len() as f64;
    (0..r)
        .map(|i| (codes.iter().map(|c| c[i] as f64).sum::<f64>() / n).abs())
        .sum::<f64>()
        / r as f64
}

/// Mean over bit pairs `i < j` of `|mean_c ζ[i] ζ[j]|`.
pub fn mean_abs_correlation(codes: &[Vec<i8>]) -> f64 {
    let Some(r) = codes.first().map(Vec::len) else {
        return 0.0;
    };
    if r < 2 {
        return 0.0;
    }
    let n = codes.len() as f64;
    let mut total = 0.0;
    for i in 0..r {
        for j in i + 1..r {
            let m: f64 = codes.iter().map(|c| (c[i] * c[j]) as f64).sum::<f64>() / n;
            total += m.abs();
        }
    }
    total / (r * (r - 1) / 2) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashTable {
    /// Distinct bit positions, most significant first.
    pub positions: Vec<usize>,
    pub buckets: BTreeMap<u64, BTreeSet<String>>,
}

impl HashTable {
    pub fn bucket_of(&self, code: &[i8]) -> u64 {
        bucket_id(code, &self.positions)
    }
}

/// Reads `code` at `positions` as a big-endian integer with `+1 → 1`.
pub fn bucket_id(code: &[i8], positions: &[usize]) -> u64 {
    positions
        .iter()
        .fold(0u64, |acc, &p| (acc << 1) | u64::from(code[p] > 0))
}

/// How a candidate set was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lookup {
    Exact,
    /// Buckets one bit flip away in each table.
    Hamming1,
    /// Every indexed id.
    Everything,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashIndex {
    pub format_version: u32,
    pub scheme: HashScheme,
    #[serde(rename = "R")]
    pub code_len: usize,
    #[serde(rename = "M")]
    pub num_tables: usize,
    #[serde(rename = "L")]
    pub bits: usize,
    pub seed: u64,
    pub tables: Vec<HashTable>,
    pub codes: BTreeMap<String, Vec<i8>>,
}

impl HashIndex {
    /// Empty index whose tables read `profile.bits` distinct positions drawn
    /// from `seed`.
    pub fn new(
        scheme: HashScheme,
        code_len: usize,
        profile: HashProfile,
        seed: u64,
    ) -> Result<Self> {
        if profile.bits > code_len {
            return Err(CoreError::Config(format!(
                "{} bits per table exceed the code length {code_len}",
                profile.bits
            )));
        }
        if profile.bits > 63 {
            return Err(CoreError::Config("at most 63 bits per table".into()));
        }
        if profile.tables == 0 {
            return Err(CoreError::Config(
                "at least one hash table is required".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = (0..profile.tables)
            .map(|_| HashTable {
                positions: rand::seq::index::sample(&mut rng, code_len, profile.bits).into_vec(),
                buckets: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            format_version: INDEX_FORMAT_VERSION,
            scheme,
            code_len,
            num_tables: profile.tables,
            bits: profile.bits,
            seed,
            tables,
            codes: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn check_code(&self, code: &[i8]) -> Result<()> {
        if code.len() != self.code_len {
            return Err(CoreError::Dimension {
                expected: self.code_len,
                got: code.len(),
            });
        }
        if code.iter().any(|b| *b != 1 && *b != -1) {
            return Err(CoreError::Input(
                "hash codes must contain only +1 and -1".into(),
            ));
        }
        Ok(())
    }

    /// Files `id` in one bucket per table and returns `(table, bucket)`.
    pub fn assign_buckets(&mut self, id: &str, code: &[i8]) -> Result<Vec<(usize, u64)>> {
        self.check_code(code)?;
        if let Some(old) = self.codes.remove(id) {
            for table in &mut self.tables {
                let b = table.bucket_of(&old);
                if let Some(set) = table.buckets.get_mut(&b) {
                    set.remove(id);
                    if set.is_empty() {
                        table.buckets.remove(&b);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(self.tables.len());
        for (t, table) in self.tables.iter_mut().enumerate() {
            let b = table.bucket_of(code);
            table.buckets.entry(b).or_default().insert(id.to_string());
            out.push((t, b));
        }
        self.codes.insert(id.to_string(), code.to_vec());
        Ok(out)
    }

    /// Union over tables of the ids sharing the query's bucket.
    pub fn lookup_candidates(&self, code: &[i8]) -> Result<BTreeSet<String>> {
        self.check_code(code)?;
        let mut out = BTreeSet::new();
        for table in &self.tables {
            if let Some(ids) = table.buckets.get(&table.bucket_of(code)) {
                out.extend(ids.iter().cloned());
            }
        }
        Ok(out)
    }

    /// [`Self::lookup_candidates`], widened to Hamming-distance-1 buckets and
    /// then to every id while the result is empty.
    pub fn lookup_with_fallback(&self, code: &[i8]) -> Result<(BTreeSet<String>, Lookup)> {
        let exact = self.lookup_candidates(code)?;
        if !exact.is_empty() {
            return Ok((exact, Lookup::Exact));
        }
        let mut near = BTreeSet::new();
        for table in &self.tables {
            let b = table.bucket_of(code);
            for bit in 0..table.positions.len() {
                if let Some(ids) = table.buckets.get(&(b ^ (1 << bit))) {
                    near.extend(ids.iter().cloned());
                }
            }
        }
        if !near.is_empty() {
            return Ok((near, Lookup::Hamming1));
        }
        Ok((self.codes.keys().cloned().collect(), Lookup::Everything))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let index: HashIndex = serde_json::from_str(text).map_err(|source| CoreError::Json {
            context: "hash index".into(),
            source,
        })?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(CoreError::Config(format!(
                "hash index format version {} is not supported (expected {INDEX_FORMAT_VERSION})",
                index.format_version
            )));
        }
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<()> {
        if self.tables.len() != self.num_tables {
            return Err(CoreError::Input(
                "hash index table count disagrees with M".into(),
            ));
        }
        for table in &self.tables {
            let distinct: BTreeSet<_> = table.positions.iter().collect();
            if table.positions.len() != self.bits
                || distinct.len() != self.bits
                || table.positions.iter().any(|&p| p >= self.code_len)
            {
                return Err(CoreError::Input("hash table positions are invalid".into()));
            }
            let mut seen = 0;
            for (b, ids) in &table.buckets {
                for id in ids {
                    match self.codes.get(id) {
                        Some(code) if table.bucket_of(code) == *b => seen += 1,
                        _ => {
                            return Err(CoreError::Input(format!(
                                "id {id} is filed in the wrong bucket"
                            )))
                        }
                    }
                }
            }
            if seen != self.codes.len() {
                return Err(CoreError::Input(
                    "hash table does not cover every code".into(),
                ));
            }
        }
        for code in self.codes.values() {
            self.check_code(code)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
