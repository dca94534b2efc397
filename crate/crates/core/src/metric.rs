//! Metric head: projection through the discriminant matrix, the squashing
//! non-linearity, squashed pairwise distances and the margin hinge loss.
//!
//! All functions compose graph primitives, so the whole chain is
//! differentiable end to end. Generic over the element type so the same
//! code runs in 64-bit shadow mode for gradient checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Real;

/// Hinge margin; the triplet loss is `max(0, d1 - d2 + m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub m: f32,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { m: 0.5 }
    }
}

impl MarginConfig {
    pub fn new(m: f32) -> Result<Self> {
        if !m.is_finite() || m < 0.0 {
            return Err(Error::Config(format!("margin must be >= 0, got {m}")));
        }
        Ok(MarginConfig { m })
    }
}

/// Project a `1xf` feature row through the `fxc` discriminant matrix.
pub fn project<T: Real>(g: &mut Graph<T>, feature: NodeId, s: NodeId) -> Result<NodeId> {
    g.matmul(feature, s)
}

/// Squash: `(‖r‖² / (1 + ‖r‖²)) · (r / ‖r‖)`.
///
/// Equivalently `r · ‖r‖ / (1 + ‖r‖²)`, which this builds from graph
/// primitives; the zero vector maps to zero with zero gradient (the
/// removable singularity of the formula).
pub fn squash<T: Real>(g: &mut Graph<T>, r: NodeId) -> Result<NodeId> {
    let norm = g.l2_norm(r);
    let norm_sq = g.mul(norm, norm)?;
    let denom = g.add_scalar(norm_sq, T::one());
    let factor = g.div(norm, denom)?;
    g.scale_by(r, factor)
}

/// `D1 = ‖q_anchor - q_positive‖₂` on already-squashed embeddings.
pub fn positive_distance<T: Real>(
    g: &mut Graph<T>,
    q_anchor: NodeId,
    q_positive: NodeId,
) -> Result<NodeId> {
    let diff = g.sub(q_anchor, q_positive)?;
    Ok(g.l2_norm(diff))
}

/// `D2 = ‖q_anchor - q_negative‖₂` on already-squashed embeddings.
pub fn negative_distance<T: Real>(
    g: &mut Graph<T>,
    q_anchor: NodeId,
    q_negative: NodeId,
) -> Result<NodeId> {
    let diff = g.sub(q_anchor, q_negative)?;
    Ok(g.l2_norm(diff))
}

/// Hinge: `max(0, d1 - d2 + m)`. Gradients w.r.t. both distances are
/// exactly zero whenever `d1 - d2 + m <= 0`.
pub fn triplet_loss<T: Real>(
    g: &mut Graph<T>,
    d1: NodeId,
    d2: NodeId,
    cfg: &MarginConfig,
) -> Result<NodeId> {
    let gap = g.sub(d1, d2)?;
    let shifted = g.add_scalar(gap, T::from_f64_lit(cfg.m as f64));
    Ok(g.relu(shifted))
}

/// Loss and both distances for one triplet of feature rows.
pub struct TripletNodes {
    pub loss: NodeId,
    pub d1: NodeId,
    pub d2: NodeId,
}

/// Full chain for one triplet: project each feature through `s`, squash,
/// take the two distances, apply the hinge.
///
/// Role order follows the anchor/negative/positive convention: `f1` anchor,
/// `f2` negative, `f3` positive.
pub fn triplet_forward<T: Real>(
    g: &mut Graph<T>,
    f1: NodeId,
    f2: NodeId,
    f3: NodeId,
    s: NodeId,
    cfg: &MarginConfig,
) -> Result<TripletNodes> {
    let r1 = project(g, f1, s)?;
    let r2 = project(g, f2, s)?;
    let r3 = project(g, f3, s)?;
    let q1 = squash(g, r1)?;
    let q2 = squash(g, r2)?;
    let q3 = squash(g, r3)?;
    let d1 = positive_distance(g, q1, q3)?;
    let d2 = negative_distance(g, q1, q2)?;
    let loss = triplet_loss(g, d1, d2, cfg)?;
    Ok(TripletNodes { loss, d1, d2 })
}

/// Plain-value squash for inference-time feature transforms; same formula
/// as the graph version.
pub fn squash_values(r: &[f32]) -> Vec<f32> {
    let norm_sq: f32 = r.iter().map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm == 0.0 {
        return vec![0.0; r.len()];
    }
    let factor = norm / (1.0 + norm_sq);
    r.iter().map(|v| v * factor).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn row(g: &mut Graph<f32>, v: &[f32]) -> NodeId {
        g.leaf(Tensor::row(v.to_vec()).unwrap(), false)
    }

    #[test]
    fn margin_validation() {
        assert!(MarginConfig::new(0.0).is_ok());
        assert!(MarginConfig::new(-0.1).is_err());
        assert_eq!(MarginConfig::default().m, 0.5);
    }

    #[test]
    fn project_examples() {
        let mut g = Graph::new();
        let f = row(&mut g, &[1.0, 2.0]);
        let s = g.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            false,
        );
        let r = project(&mut g, f, s).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);

        let f2 = row(&mut g, &[1.0, 1.0, 1.0, 1.0]);
        let s2 = g.leaf(Tensor::filled(vec![4, 2], 0.5), false);
        let r2 = project(&mut g, f2, s2).unwrap();
        assert_eq!(g.value(r2).data(), &[2.0, 2.0]);

        let zero = row(&mut g, &[0.0, 0.0]);
        let r3 = project(&mut g, zero, s).unwrap();
        assert_eq!(g.value(r3).data(), &[0.0, 0.0]);

        let bad = row(&mut g, &[1.0, 2.0, 3.0]);
        assert!(project(&mut g, bad, s).is_err());
    }

    #[test]
    fn squash_exact_values() {
        let mut g = Graph::new();
        let zero = row(&mut g, &[0.0, 0.0, 0.0]);
        let qz = squash(&mut g, zero).unwrap();
        assert_eq!(g.value(qz).data(), &[0.0, 0.0, 0.0]);

        // Unit vector: factor is exactly 1/2.
        let e = row(&mut g, &[1.0, 0.0]);
        let qe = squash(&mut g, e).unwrap();
        let got = g.value(qe).data();
        assert!((got[0] - 0.5).abs() < 1e-6 && got[1].abs() < 1e-6);

        // [3,4]: norm 5 -> scaled by 5/26.
        let v = row(&mut g, &[3.0, 4.0]);
        let qv = squash(&mut g, v).unwrap();
        let got = g.value(qv).data();
        assert!((got[0] - 15.0 / 26.0).abs() < 1e-6, "{got:?}");
        assert!((got[1] - 20.0 / 26.0).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn squash_zero_input_zero_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row(vec![0.0, 0.0]).unwrap(), true);
        let q = squash(&mut g, z).unwrap();
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn distance_examples() {
        let mut g = Graph::new();
        let a = row(&mut g, &[0.5, 0.0]);
        let b = row(&mut g, &[0.0, 0.5]);
        let d = positive_distance(&mut g, a, b).unwrap();
        assert!((g.value(d).item() - 0.5f32.sqrt()).abs() < 1e-6);
        let d_rev = positive_distance(&mut g, b, a).unwrap();
        assert_eq!(g.value(d).item(), g.value(d_rev).item());

        let same = positive_distance(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        let p = row(&mut g, &[0.9, 0.0]);
        let n = row(&mut g, &[-0.9, 0.0]);
        let d2 = negative_distance(&mut g, p, n).unwrap();
        assert!((g.value(d2).item() - 1.8).abs() < 1e-6);
    }

    #[test]
    fn triplet_loss_examples() {
        let cases = [
            (0.2f32, 0.9f32, 0.0f32), // hinge inactive
            (0.4, 0.4, 0.5),          // equal distances -> margin
            (0.7, 0.4, 0.8),
        ];
        for (d1v, d2v, want) in cases {
            let mut g = Graph::new();
            let d1 = g.leaf(Tensor::scalar(d1v), false);
            let d2 = g.leaf(Tensor::scalar(d2v), false);
            let l = triplet_loss(&mut g, d1, d2, &MarginConfig::default()).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn hinge_inactive_region_has_zero_gradient() {
        let mut g = Graph::new();
        let d1 = g.leaf(Tensor::scalar(0.1f32), true);
        let d2 = g.leaf(Tensor::scalar(0.9f32), true);
        let l = triplet_loss(&mut g, d1, d2, &MarginConfig::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(d1).unwrap().data(), &[0.0]);
        assert_eq!(g.grad(d2).unwrap().data(), &[0.0]);
    }

    #[test]
    fn triplet_forward_degenerate_cases() {
        let cfg = MarginConfig::default();
        let s_mat = Tensor::new(vec![3, 2], vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2]).unwrap();

        // Anchor == positive, far negative: zero loss when d2 >= m.
        let mut g = Graph::new();
        let s = g.leaf(s_mat.clone(), false);
        let f1 = row(&mut g, &[1.0, 2.0, 0.5]);
        let f2 = row(&mut g, &[5.0, 0.0, 4.0]);
        let out = triplet_forward(&mut g, f1, f2, f1, s, &cfg).unwrap();
        assert_eq!(g.value(out.d1).item(), 0.0);
        if g.value(out.d2).item() >= cfg.m {
            assert_eq!(g.value(out.loss).item(), 0.0);
        }

        // All three identical: both distances zero, loss == m.
        let mut g = Graph::new();
        let s = g.leaf(s_mat, false);
        let f = row(&mut g, &[1.0, 2.0, 0.5]);
        let out = triplet_forward(&mut g, f, f, f, s, &cfg).unwrap();
        assert_eq!(g.value(out.d1).item(), 0.0);
        assert_eq!(g.value(out.d2).item(), 0.0);
        assert!((g.value(out.loss).item() - cfg.m).abs() < 1e-7);
    }

    #[test]
    fn squash_values_matches_graph_path() {
        let v = [0.3f32, -1.2, 2.0, 0.01];
        let plain = squash_values(&v);
        let mut g = Graph::new();
        let n = row(&mut g, &v);
        let q = squash(&mut g, n).unwrap();
        for (a, b) in plain.iter().zip(g.value(q).data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
