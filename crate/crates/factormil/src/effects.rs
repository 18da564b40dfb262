//! Phase 2: leave-one-group-out counterfactual predictions, KL effect
//! measurement, effect normalization, and semantic factor assignment.
//!
//! For each group k the remaining instances are mean-pooled and re-classified;
//! the KL divergence from the vanilla prediction measures how much group k
//! drives the bag's prediction. The three groups are then named TC / ME / BG
//! in descending effect order.

use serde::{Deserialize, Serialize};

use crate::data::Factor;
use crate::error::{Error, Result};
use crate::metric_grouping::NUM_GROUPS;
use crate::numerics::{kl_divergence, mean_of_rows, Matrix, ProbVector, KL_EPS};

/// Effect assigned to a group that covers the whole bag: the largest finite
/// divergence the smoothing floor admits, ln(1/KL_EPS).
pub fn max_effect() -> f64 {
    (1.0 / KL_EPS).ln()
}

/// Raw divergences and normalized effect weights for the three groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectVector {
    /// Raw KL divergences D_k ≥ 0.
    pub d: [f64; NUM_GROUPS],
    /// Normalized weights, summing to 1.
    pub w: [f64; NUM_GROUPS],
    /// Set when ΣD vanished and the weights fell back to uniform.
    pub fallback_uniform: bool,
}

/// Bijection from semantic factors onto group indices, ordered by effect:
/// w[tc] ≥ w[me] ≥ w[bg].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorMap {
    pub tc: usize,
    pub me: usize,
    pub bg: usize,
}

impl FactorMap {
    /// Semantic factor of a group index.
    pub fn factor_of(&self, group: usize) -> Factor {
        if group == self.tc {
            Factor::Tc
        } else if group == self.me {
            Factor::Me
        } else {
            Factor::Bg
        }
    }
}

/// Rows of `z` not assigned to group `k`, in their original order.
pub fn mask_group(z: &Matrix, assignments: &[usize], k: usize) -> Matrix {
    assert_eq!(z.rows(), assignments.len(), "mask_group: assignment length");
    let rows: Vec<Vec<f64>> = (0..z.rows())
        .filter(|&i| assignments[i] != k)
        .map(|i| z.row(i).to_vec())
        .collect();
    if rows.is_empty() {
        Matrix::zeros(0, z.cols())
    } else {
        Matrix::from_rows(&rows).expect("masked rows share the source shape")
    }
}

/// Vanilla and masked predictions plus the raw per-group divergences.
#[derive(Clone, Debug)]
pub struct GroupEffects {
    pub p_vanilla: ProbVector,
    /// Masked prediction per group; `None` when the group covers the whole
    /// bag and masking leaves nothing to pool.
    pub p_masked: [Option<ProbVector>; NUM_GROUPS],
    pub d: [f64; NUM_GROUPS],
}

/// Computes P_v from the pooled group centroids and, per group, the masked
/// prediction P_k and divergence D_k = D_KL(P_v ‖ P_k).
///
/// The aggregation works on the group level: with centroids m_j over the G
/// non-empty groups, P_v classifies Σ m_j / G and masking group k classifies
/// Σ_{j≠k} m_j / G. Keeping the denominator fixed removes the group's
/// contribution without renormalizing the aggregation, so a group whose
/// centroid carries no signal the head can see leaves the prediction
/// untouched no matter how many instances it holds.
///
/// An empty group changes nothing, so its D_k is exactly 0. A group covering
/// the whole bag leaves nothing to pool and receives [`max_effect`].
pub fn group_effects<F>(classify: F, z: &Matrix, assignments: &[usize]) -> Result<GroupEffects>
where
    F: Fn(&[f64]) -> Result<ProbVector>,
{
    assert_eq!(z.rows(), assignments.len(), "group_effects: assignment length");
    let n = z.rows();
    let centroids: Vec<Option<Vec<f64>>> = (0..NUM_GROUPS)
        .map(|k| {
            let members: Vec<&[f64]> = (0..n)
                .filter(|&i| assignments[i] == k)
                .map(|i| z.row(i))
                .collect();
            if members.is_empty() {
                None
            } else {
                Some(mean_of_rows(&members))
            }
        })
        .collect();
    let non_empty = centroids.iter().flatten().count();
    let dim = z.cols();
    let pool = |skip: Option<usize>| -> Vec<f64> {
        let mut pooled = vec![0.0; dim];
        for (k, centroid) in centroids.iter().enumerate() {
            if skip == Some(k) {
                continue;
            }
            if let Some(m) = centroid {
                for (p, v) in pooled.iter_mut().zip(m) {
                    *p += v;
                }
            }
        }
        for p in pooled.iter_mut() {
            *p /= non_empty as f64;
        }
        pooled
    };
    let p_vanilla = classify(&pool(None))?;

    let mut p_masked: [Option<ProbVector>; NUM_GROUPS] = [None, None, None];
    let mut d = [0.0; NUM_GROUPS];
    for k in 0..NUM_GROUPS {
        let members = assignments.iter().filter(|&&g| g == k).count();
        if members == n {
            d[k] = max_effect();
            continue;
        }
        let p_k = classify(&pool(Some(k)))?;
        if members == 0 {
            // identical pooled input; the divergence is zero by definition
            d[k] = 0.0;
        } else {
            d[k] = kl_divergence(&p_vanilla, &p_k, KL_EPS)?.max(0.0);
        }
        p_masked[k] = Some(p_k);
    }
    Ok(GroupEffects { p_vanilla, p_masked, d })
}

/// w_k = D_k / ΣD_j; a vanished total falls back to uniform weights.
pub fn normalize_effects(d: [f64; NUM_GROUPS]) -> Result<EffectVector> {
    let mut clamped = d;
    for v in &mut clamped {
        if *v < -1e-9 || !v.is_finite() {
            return Err(Error::InvalidInput(format!("negative or non-finite divergence {v}")));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = clamped.iter().sum();
    if total < 1e-12 {
        return Ok(EffectVector {
            d: clamped,
            w: [1.0 / NUM_GROUPS as f64; NUM_GROUPS],
            fallback_uniform: true,
        });
    }
    let mut w = [0.0; NUM_GROUPS];
    for (wk, dk) in w.iter_mut().zip(clamped.iter()) {
        *wk = dk / total;
    }
    Ok(EffectVector { d: clamped, w, fallback_uniform: false })
}

/// Orders the groups by descending weight (ties to the lower group index):
/// largest effect is TC, smallest is BG.
pub fn assign_factors(effects: &EffectVector) -> FactorMap {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        effects.w[b]
            .total_cmp(&effects.w[a])
            .then_with(|| a.cmp(&b))
    });
    FactorMap { tc: order[0], me: order[1], bg: order[2] }
}
