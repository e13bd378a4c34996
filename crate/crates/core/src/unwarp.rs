//! Trainable monotone time unwarping.
//!
//! `U(t) = ∫_0^t u(τ) dτ + η` where `u` is a small feed-forward network with a
//! nonnegative output. The integral is a fixed Gauss–Legendre sum, so `U` is
//! differentiable in the network weights and nondecreasing in `t`.

use ctes_diff::{Graph, ParamStore, ParamVars, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::quadrature::GaussLegendre;
use crate::seq::{Event, EventSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rectifier {
    Softplus,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnwarpConfig {
    pub hidden: usize,
    pub quad_nodes: usize,
    /// Shared scale: noise standard deviation and `1/σ²` penalty weight.
    pub sigma: f64,
    /// Draw `η ~ N(0, σ)` on training forward passes.
    pub noise: bool,
    pub rectifier: Rectifier,
    /// Added to the rectified output so `u` stays bounded away from zero.
    pub floor: f64,
}

impl Default for UnwarpConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            quad_nodes: 32,
            sigma: 1.0,
            noise: false,
            rectifier: Rectifier::Softplus,
            floor: 1e-6,
        }
    }
}

impl UnwarpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.quad_nodes == 0 {
            return Err(CoreError::Config(
                "unwarp hidden width and quadrature order must be positive".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CoreError::Config(format!(
                "unwarp sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.floor >= 0.0) {
            return Err(CoreError::Config("unwarp floor must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnwarpNet {
    params: ParamStore,
    config: UnwarpConfig,
    /// Integrand inputs are `τ / input_scale`.
    input_scale: f64,
    quad: GaussLegendre,
}

impl UnwarpNet {
    /// A net whose integrand is identically 1, so `U(t) = t`.
    pub fn identity(config: UnwarpConfig, input_scale: f64) -> Result<Self> {
        config.validate()?;
        check_scale(input_scale)?;
        let h = config.hidden;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        let mut params = ParamStore::new();
        params.insert("w1", random_matrix(1, h, 1.0, &mut rng));
        params.insert("b1", Tensor::zeros(&[h]));
        params.insert("w2", random_matrix(h, h, 1.0 / (h as f64).sqrt(), &mut rng));
        params.insert("b2", Tensor::zeros(&[h]));
        params.insert("w3", Tensor::zeros(&[h, 1]));
        let target = 1.0 - config.floor;
        let b3 = match config.rectifier {
            Rectifier::Softplus => inverse_softplus(target),
            Rectifier::Relu => target,
        };
        params.insert("b3", Tensor::vector(vec![b3]));
        Self::from_params(config, input_scale, params)
    }

    /// A net with every weight drawn at random.
    pub fn random(config: UnwarpConfig, input_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::identity(config, input_scale)?;
        let h = net.config.hidden;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (name, t) in [
            ("w1", random_matrix(1, h, 2.0, rng)),
            (
                "b1",
                Tensor::vector((0..h).map(|_| normal.sample(rng)).collect()),
            ),
            ("w2", random_matrix(h, h, 1.0 / (h as f64).sqrt(), rng)),
            (
                "b2",
                Tensor::vector((0..h).map(|_| 0.5 * normal.sample(rng)).collect()),
            ),
            ("w3", random_matrix(h, 1, 2.0 / (h as f64).sqrt(), rng)),
            ("b3", Tensor::vector(vec![normal.sample(rng)])),
        ] {
            *net.params.get_mut(name).expect("initialized") = t;
        }
        Ok(net)
    }

    pub fn from_params(config: UnwarpConfig, input_scale: f64, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_scale(input_scale)?;
        let h = config.hidden;
        for (name, shape) in [
            ("w1", vec![1, h]),
            ("b1", vec![h]),
            ("w2", vec![h, h]),
            ("b2", vec![h]),
            ("w3", vec![h, 1]),
            ("b3", vec![1]),
        ] {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(CoreError::Config(format!(
                        "unwarp parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(CoreError::Config(format!(
                        "unwarp parameter {name} is missing"
                    )))
                }
            }
        }
        if params.len() != 6 {
            return Err(CoreError::Config(
                "unwarp parameters contain unexpected entries".into(),
            ));
        }
        let quad = GaussLegendre::new(config.quad_nodes);
        Ok(Self {
            params,
            config,
            input_scale,
            quad,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        *self = Self::from_params(self.config.clone(), self.input_scale, params)?;
        Ok(())
    }

    pub fn config(&self) -> &UnwarpConfig {
        &self.config
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// The integrand evaluated at each of `taus`, as a `[n, 1]` column.
    pub fn integrand_graph<'g>(&self, vars: &ParamVars<'g>, taus: Var<'g>) -> Var<'g> {
        let x = taus.scale(1.0 / self.input_scale);
        let h1 = x.matmul(vars.get("w1")).add_row(vars.get("b1")).tanh();
        let h2 = h1.matmul(vars.get("w2")).add_row(vars.get("b2")).tanh();
        let z = h2.matmul(vars.get("w3")).add_row(vars.get("b3"));
        let rect = match self.config.rectifier {
            Rectifier::Softplus => z.softplus(),
            Rectifier::Relu => z.relu(),
        };
        rect.add_scalar(self.config.floor)
    }

    /// `U(t_i)` for every time as a `[n, 1]` column. `noise` supplies the
    /// training-time draw of `η` when the config enables it.
    pub fn unwarp_graph<'g>(
        &self,
        graph: &'g Graph,
        vars: &ParamVars<'g>,
        times: &[f64],
        noise: Option<&mut dyn rand::RngCore>,
    ) -> Var<'g> {
        let n = times.len();
        let q = self.quad.len();
        let mut taus = Vec::with_capacity(n * q);
        let mut weights = Vec::with_capacity(n * q);
        for &t in times {
            for (x, w) in self.quad.on_interval(0.0, t) {
                taus.push(x);
                weights.push(w);
            }
        }
        let taus = graph.constant(Tensor::matrix(n * q, 1, taus));
        let weights = graph.constant(Tensor::matrix(n * q, 1, weights));
        let u = self.integrand_graph(vars, taus);
        let integral = (u * weights).reshape(&[n, q]).sum_cols().reshape(&[n, 1]);
        match noise {
            Some(rng) if self.config.noise => {
                let normal = Normal::new(0.0, self.config.sigma).expect("validated sigma");
                let lowest = integral
                    .value()
                    .data()
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                integral.add_scalar(noise_shift(normal.sample(rng), lowest))
            }
            _ => integral,
        }
    }

    /// `(1/σ²) ∫_0^T (u(t) − 1)² dt` as a graph scalar.
    pub fn penalty_graph<'g>(
        &self,
        graph: &'g Graph,
        vars: &ParamVars<'g>,
        horizon: f64,
    ) -> Var<'g> {
        let (taus, weights): (Vec<f64>, Vec<f64>) = self.quad.on_interval(0.0, horizon).unzip();
        let q = taus.len();
        let taus = graph.constant(Tensor::matrix(q, 1, taus));
        let weights = graph.constant(Tensor::matrix(q, 1, weights));
        let dev = self.integrand_graph(vars, taus).add_scalar(-1.0);
        (dev.square() * weights)
            .sum()
            .scale(1.0 / (self.config.sigma * self.config.sigma))
    }

    /// The integrand at a single point.
    pub fn integrand(&self, tau: f64) -> f64 {
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let taus = graph.constant(Tensor::matrix(1, 1, vec![tau]));
        self.integrand_graph(&vars, taus).item()
    }

    /// Inference-time `U(t_i)` for every time (no noise).
    pub fn unwarp_times(&self, times: &[f64]) -> Result<Vec<f64>> {
        if let Some(&t) = times.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(CoreError::Domain(format!(
                "cannot unwarp time {t}: times must be finite and nonnegative"
            )));
        }
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let graph = Graph::new();
        let vars = self.params.bind_where(&graph, |_| false);
        let out = self.unwarp_graph(&graph, &vars, times, None);
        graph.check_finite()?;
        Ok(out.value().data().to_vec())
    }
}

/// The shared noise shift `eta`, truncated so that the smallest unwarped
/// time `lowest` keeps at least half its value and the first gap stays
/// positive.
pub fn noise_shift(eta: f64, lowest: f64) -> f64 {
    eta.max(-0.5 * lowest)
}

pub fn unwarp_time(net: &UnwarpNet, t: f64) -> Result<f64> {
    Ok(net.unwarp_times(&[t])?[0])
}

/// Maps every event time and the horizon through `U`; marks are unchanged.
pub fn unwarp_sequence(net: &UnwarpNet, seq: &EventSequence) -> Result<EventSequence> {
    let mut times = seq.times();
    times.push(seq.horizon());
    let mapped = net.unwarp_times(&times)?;
    let horizon = mapped[seq.len()];
    let events = seq
        .events()
        .iter()
        .zip(&mapped)
        .map(|(e, &t)| Event::new(t, e.mark))
        .collect();
    EventSequence::new(seq.id(), events, horizon).map_err(|e| {
        CoreError::Domain(format!(
            "unwarped sequence {} is not strictly increasing: {e}",
            seq.id()
        ))
    })
}

pub fn unbiasedness_penalty(net: &UnwarpNet, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CoreError::Domain(format!(
            "penalty horizon must be positive, got {horizon}"
        )));
    }
    let graph = Graph::new();
    let vars = net.params.bind_where(&graph, |_| false);
    let p = net.penalty_graph(&graph, &vars, horizon);
    graph.check_finite()?;
    Ok(p.item())
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Config(format!(
            "unwarp input scale must be positive, got {scale}"
        )))
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn small() -> UnwarpConfig {
        UnwarpConfig {
            hidden: 8,
            ..UnwarpConfig::default()
        }
    }

    #[test]
    fn identity_integrand() {
        let net = UnwarpNet::identity(UnwarpConfig::default(), 10.0).unwrap();
        assert!((unwarp_time(&net, 5.0).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(unwarp_time(&net, 0.0).unwrap(), 0.0);
        assert!((net.integrand(3.7) - 1.0).abs() < 1e-12);
        assert!(unbiasedness_penalty(&net, 4.0).unwrap() < 1e-20);
    }

    #[test]
    fn negative_time_is_a_domain_error() {
        let net = UnwarpNet::identity(small(), 1.0).unwrap();
        assert!(matches!(unwarp_time(&net, -1.0), Err(CoreError::Domain(_))));
        assert!(matches!(
            unbiasedness_penalty(&net, 0.0),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn zero_integrand_penalty() {
        let cfg = UnwarpConfig {
            rectifier: Rectifier::Relu,
            floor: 0.0,
            ..small()
        };
        let mut net = UnwarpNet::identity(cfg, 1.0).unwrap();
        let mut p = net.params().clone();
        p.get_mut("b3").unwrap().data_mut()[0] = -1.0;
        net.set_params(p).unwrap();
        assert!((unbiasedness_penalty(&net, 2.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_integrand_integrates_to_square() {
        // tanh is linear to O(ε²) near zero, so a tiny first layer and a large
        // readout make u(τ) ≈ 2τ.
        let eps = 1e-5;
        let cfg = UnwarpConfig {
            hidden: 1,
            rectifier: Rectifier::Relu,
            floor: 0.0,
            ..UnwarpConfig::default()
        };
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::matrix(1, 1, vec![eps]));
        params.insert("b1", Tensor::zeros(&[1]));
        params.insert("w2", Tensor::matrix(1, 1, vec![1.0]));
        params.insert("b2", Tensor::zeros(&[1]));
        params.insert("w3", Tensor::matrix(1, 1, vec![2.0 / eps]));
        params.insert("b3", Tensor::zeros(&[1]));
        let net = UnwarpNet::from_params(cfg, 1.0, params).unwrap();
        assert!((unwarp_time(&net, 3.0).unwrap() - 9.0).abs() < 1e-6);
    }

    #[test]
    fn sequence_identity_and_order() {
        let seq = EventSequence::from_parts("a", &[0.5, 1.0, 2.5], &[0, 1, 0], 3.0).unwrap();
        let net = UnwarpNet::identity(small(), 3.0).unwrap();
        let out = unwarp_sequence(&net, &seq).unwrap();
        for (a, b) in out.events().iter().zip(seq.events()) {
            assert!((a.time - b.time).abs() < 1e-12);
            assert_eq!(a.mark, b.mark);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let random = UnwarpNet::random(small(), 3.0, &mut rng).unwrap();
        let out = unwarp_sequence(&random, &seq).unwrap();
        assert_eq!(out.marks(), seq.marks());
    }

    #[test]
    fn noise_only_when_enabled() {
        let net = UnwarpNet::identity(small(), 1.0).unwrap();
        let graph = Graph::new();
        let vars = net.params().bind(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.unwarp_graph(&graph, &vars, &[1.0], Some(&mut rng));
        assert!((out.item() - 1.0).abs() < 1e-12);

        let noisy = UnwarpNet::identity(
            UnwarpConfig {
                noise: true,
                ..small()
            },
            1.0,
        )
        .unwrap();
        let vars = noisy.params().bind(&graph);
        let out = noisy.unwarp_graph(&graph, &vars, &[1.0], Some(&mut rng));
        assert!((out.item() - 1.0).abs() > 1e-9);
    }

    #[test]
    fn noisy_times_stay_nonnegative() {
        let noisy = UnwarpNet::identity(
            UnwarpConfig {
                noise: true,
                ..small()
            },
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let graph = Graph::new();
            let vars = noisy.params().bind(&graph);
            let out = noisy.unwarp_graph(&graph, &vars, &[0.05, 0.5], Some(&mut rng));
            let v = out.value().data().to_vec();
            assert!(v[0] >= 0.025 && v[1] > v[0]);
        }
    }

    #[test]
    fn rejects_foreign_parameters() {
        let mut p = UnwarpNet::identity(small(), 1.0).unwrap().params().clone();
        p.insert("extra", Tensor::zeros(&[1]));
        assert!(UnwarpNet::from_params(small(), 1.0, p).is_err());
    }
}
