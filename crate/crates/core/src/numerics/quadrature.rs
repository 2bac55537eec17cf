//! Composite Gauss-Legendre quadrature on [0, 1].

use crate::error::{invalid, Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1].
fn gauss_legendre(points: usize) -> Option<(&'static [f64], &'static [f64])> {
    const N1: [f64; 1] = [0.0];
    const W1: [f64; 1] = [2.0];
    const N2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];
    const W2: [f64; 2] = [1.0, 1.0];
    const N3: [f64; 3] = [-0.774_596_669_241_483, 0.0, 0.774_596_669_241_483];
    const W3: [f64; 3] = [
        0.555_555_555_555_555_6,
        0.888_888_888_888_889,
        0.555_555_555_555_555_6,
    ];
    const N4: [f64; 4] = [
        -0.861_136_311_594_052_6,
        -0.339_981_043_584_856_3,
        0.339_981_043_584_856_3,
        0.861_136_311_594_052_6,
    ];
    const W4: [f64; 4] = [
        0.347_854_845_137_453_8,
        0.652_145_154_862_546_1,
        0.652_145_154_862_546_1,
        0.347_854_845_137_453_8,
    ];
    match points {
        1 => Some((&N1, &W1)),
        2 => Some((&N2, &W2)),
        3 => Some((&N3, &W3)),
        4 => Some((&N4, &W4)),
        _ => None,
    }
}

/// Composite rule: `intervals` equal subintervals of [0, 1], each with a
/// `nodes_per_interval`-point Gauss-Legendre rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    intervals: usize,
    nodes_per_interval: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn composite_gauss(intervals: usize, nodes_per_interval: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(invalid("quadrature needs at least one interval"));
        }
        let (ref_nodes, ref_weights) = gauss_legendre(nodes_per_interval).ok_or_else(|| {
            invalid(format!(
                "supported Gauss rules have 1 to 4 nodes, got {nodes_per_interval}"
            ))
        })?;
        let h = 1.0 / intervals as f64;
        let mut nodes = Vec::with_capacity(intervals * nodes_per_interval);
        let mut weights = Vec::with_capacity(intervals * nodes_per_interval);
        for k in 0..intervals {
            let a = k as f64 * h;
            for (t, w) in ref_nodes.iter().zip(ref_weights) {
                nodes.push(a + 0.5 * h * (t + 1.0));
                weights.push(0.5 * h * w);
            }
        }
        Ok(Self {
            intervals,
            nodes_per_interval,
            nodes,
            weights,
        })
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn nodes_per_interval(&self) -> usize {
        self.nodes_per_interval
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_i w_i f(x_i)`; fails on the first node where `f` is not finite.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (&x, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NumericalDomain {
                    value: v,
                    context: format!("at quadrature node {i} (x = {x})"),
                });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Quadrature of values already tabulated on the nodes.
    pub fn integrate_values(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}
