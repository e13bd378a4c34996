//! Gauss–Legendre quadrature.

use serde::{Deserialize, Serialize};

/// Nodes and weights of an `n`-point Gauss–Legendre rule on `[-1, 1]`.
///
/// Exact for polynomials of degree `2n - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev-like initial guess for the i-th largest root.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre(n, x);
                let step = p / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes on `[-1, 1]`, ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights rescaled to `[a, b]`.
    pub fn on_interval(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.on_interval(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 5, 16, 32, 64] {
            let q = GaussLegendre::new(n);
            assert!(
                (q.weights().iter().sum::<f64>() - 2.0).abs() < 1e-13,
                "n = {n}"
            );
            assert!(q.weights().iter().all(|&w| w > 0.0));
            assert!(q.nodes().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn three_point_rule_matches_closed_form() {
        let q = GaussLegendre::new(3);
        let r = (0.6f64).sqrt();
        let expect_nodes = [-r, 0.0, r];
        let expect_weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        for i in 0..3 {
            assert!((q.nodes()[i] - expect_nodes[i]).abs() < 1e-15);
            assert!((q.weights()[i] - expect_weights[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_for_degree_2n_minus_1() {
        let q = GaussLegendre::new(4);
        for k in 0..=7 {
            let got = q.integrate(0.0, 2.0, |x| x.powi(k));
            let want = 2f64.powi(k + 1) / (k as f64 + 1.0);
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "degree {k}");
        }
    }
}
