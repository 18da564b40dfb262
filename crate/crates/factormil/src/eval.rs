//! Evaluation: accuracy, weighted F1, macro one-vs-rest AUC, factor-recovery
//! scoring against planted truth, and a brute-force joint-entropy oracle.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metric_grouping::NUM_GROUPS;
use crate::model::{forward, mean_pool_forward, ForwardTrace, LossConfig, ModelParams, PipelineKind};
use crate::numerics::ProbVector;

/// Entry cap for the entropy oracle's probability table.
pub const MAX_JOINT_ENTRIES: usize = 10_000_000;

/// Per-class precision/recall/F1 with its support.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Aggregate evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub num_bags: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub auc_macro_ovr: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion[true][pred]
    pub confusion: Vec<Vec<usize>>,
    /// Mean fraction of instances whose pipeline factor matches the planted
    /// truth; absent when the dataset carries no truth factors.
    pub factor_recovery: Option<f64>,
    pub degenerate_bag_fraction: f64,
    /// Classes skipped by the AUC for lacking positives or negatives.
    pub auc_skipped_classes: Vec<usize>,
}

/// Per-bag evaluation row for CSV export.
#[derive(Clone, Debug)]
pub struct BagEval {
    pub bag_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub w: Option<[f64; NUM_GROUPS]>,
    pub factor_map: Option<crate::effects::FactorMap>,
}

/// Macro one-vs-rest AUC via the Mann-Whitney rank statistic with midranks
/// for ties. Classes without both positives and negatives are skipped and
/// reported; an error is returned only when every class is skipped.
pub fn auc_ovr(
    scores: &[ProbVector],
    labels: &[usize],
    num_classes: usize,
) -> Result<(f64, Vec<usize>)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidInput(format!(
            "auc_ovr: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for class in 0..num_classes {
        let positives = labels.iter().filter(|&&l| l == class).count();
        let negatives = labels.len() - positives;
        if positives == 0 || negatives == 0 {
            skipped.push(class);
            continue;
        }
        // rank the class-c scores with midranks for ties
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].values()[class].total_cmp(&scores[b].values()[class]));
        let mut ranks = vec![0.0; scores.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len()
                && scores[order[j + 1]].values()[class] == scores[order[i]].values()[class]
            {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = midrank;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..labels.len())
            .filter(|&i| labels[i] == class)
            .map(|i| ranks[i])
            .sum();
        let p = positives as f64;
        let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64);
        total += auc;
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(
            "auc_ovr: every class lacks positives or negatives".into(),
        ));
    }
    Ok((total / used as f64, skipped))
}

fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

fn per_class_metrics(confusion: &[Vec<usize>]) -> Vec<ClassMetrics> {
    let num_classes = confusion.len();
    (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..num_classes).map(|l| confusion[l][c]).sum();
            let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics { class: c, precision, recall, f1, support }
        })
        .collect()
}

/// Support-weighted mean of per-class F1 scores; zero-division classes
/// contribute F1 = 0.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "weighted_f1: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let num_classes = preds.iter().chain(labels.iter()).max().unwrap() + 1;
    let confusion = confusion_matrix(preds, labels, num_classes);
    let metrics = per_class_metrics(&confusion);
    let total: usize = metrics.iter().map(|m| m.support).sum();
    Ok(metrics
        .iter()
        .map(|m| m.f1 * m.support as f64 / total as f64)
        .sum())
}

/// Mean over bags of the fraction of instances whose pipeline factor
/// (assignment composed with the factor map) matches the planted truth.
/// Uses the pipeline's own TC/ME/BG naming; no oracle relabeling.
/// Returns `None` when no bag carries truth factors.
pub fn factor_recovery(traces: &[ForwardTrace], ds: &Dataset) -> Result<Option<f64>> {
    if traces.len() != ds.len() {
        return Err(Error::InvalidInput(format!(
            "factor_recovery: {} traces for {} bags",
            traces.len(),
            ds.len()
        )));
    }
    let mut per_bag = Vec::new();
    for (trace, bag) in traces.iter().zip(&ds.bags) {
        let Some(truth) = &bag.truth_factors else { continue };
        let matches = trace
            .grouping
            .assignments
            .iter()
            .zip(truth)
            .filter(|(&g, &t)| trace.factors.factor_of(g) == t)
            .count();
        per_bag.push(matches as f64 / truth.len() as f64);
    }
    if per_bag.is_empty() {
        return Ok(None);
    }
    Ok(Some(per_bag.iter().sum::<f64>() / per_bag.len() as f64))
}

/// Runs the model over a dataset and collects the full report plus per-bag
/// rows for export.
pub fn evaluate_detailed(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &LossConfig,
    pipeline: PipelineKind,
) -> Result<(EvalReport, Vec<BagEval>)> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    if ds.feature_dim != params.encoder.in_dim() {
        return Err(Error::Dimension(format!(
            "dataset feature_dim {} does not match model input dim {}",
            ds.feature_dim,
            params.encoder.in_dim()
        )));
    }
    let mut rows = Vec::with_capacity(ds.len());
    let mut traces: Vec<ForwardTrace> = Vec::new();
    let mut scores = Vec::with_capacity(ds.len());
    let mut preds = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    let mut degenerate = 0usize;

    for bag in &ds.bags {
        let (probs, row) = match pipeline {
            PipelineKind::Full => {
                let trace = forward(params, bag, cfg)?;
                degenerate += usize::from(trace.degenerate());
                let row = BagEval {
                    bag_id: bag.bag_id.clone(),
                    label: bag.label,
                    predicted: trace.predicted(),
                    probs: trace.probs.values().to_vec(),
                    w: Some(trace.effects.w),
                    factor_map: Some(trace.factors),
                };
                let probs = trace.probs.clone();
                traces.push(trace);
                (probs, row)
            }
            PipelineKind::MeanPool => {
                let (probs, _) = mean_pool_forward(params, bag)?;
                let row = BagEval {
                    bag_id: bag.bag_id.clone(),
                    label: bag.label,
                    predicted: probs.argmax(),
                    probs: probs.values().to_vec(),
                    w: None,
                    factor_map: None,
                };
                (probs, row)
            }
        };
        preds.push(row.predicted);
        labels.push(bag.label);
        scores.push(probs);
        rows.push(row);
    }

    let confusion = confusion_matrix(&preds, &labels, ds.num_classes);
    let per_class = per_class_metrics(&confusion);
    let total: usize = per_class.iter().map(|m| m.support).sum();
    let accuracy = (0..ds.num_classes).map(|c| confusion[c][c]).sum::<usize>() as f64 / total as f64;
    let wf1 = per_class
        .iter()
        .map(|m| m.f1 * m.support as f64 / total as f64)
        .sum();
    let (auc, skipped) = auc_ovr(&scores, &labels, ds.num_classes)?;
    let recovery = match pipeline {
        PipelineKind::Full => factor_recovery(&traces, ds)?,
        PipelineKind::MeanPool => None,
    };

    let report = EvalReport {
        dataset: ds.name.clone(),
        num_bags: ds.len(),
        accuracy,
        weighted_f1: wf1,
        auc_macro_ovr: auc,
        per_class,
        confusion,
        factor_recovery: recovery,
        degenerate_bag_fraction: degenerate as f64 / ds.len() as f64,
        auc_skipped_classes: skipped,
    };
    Ok((report, rows))
}

/// Convenience wrapper when per-bag rows are not needed.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    cfg: &LossConfig,
    pipeline: PipelineKind,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(params, ds, cfg, pipeline)?.0)
}

/// Discrete joint distribution over a small product space; the brute-force
/// oracle used for entropy checks.
#[derive(Clone, Debug)]
pub struct JointDistribution {
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(dims: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("joint needs non-empty dimensions".into()));
        }
        let entries: usize = dims.iter().product();
        if entries > MAX_JOINT_ENTRIES {
            return Err(Error::TableTooLarge { entries, cap: MAX_JOINT_ENTRIES });
        }
        if probs.len() != entries {
            return Err(Error::Dimension(format!(
                "joint table needs {} entries, got {}",
                entries,
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidInput("joint entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("joint sums to {sum}, expected 1")));
        }
        Ok(JointDistribution { dims, probs })
    }

    pub fn num_vars(&self) -> usize {
        self.dims.len()
    }

    fn marginals(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.dims.iter().map(|&d| vec![0.0; d]).collect();
        for (flat, &p) in self.probs.iter().enumerate() {
            let mut rem = flat;
            for v in (0..self.dims.len()).rev() {
                let state = rem % self.dims[v];
                rem /= self.dims[v];
                out[v][state] += p;
            }
        }
        out
    }
}

fn entropy_nats(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

const LN_2: f64 = std::f64::consts::LN_2;

/// Entropies of a joint distribution, in bits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntropyGap {
    /// Brute-force joint entropy H(x₁,…,xₙ).
    pub h_joint: f64,
    /// Σᵢ H(xᵢ) over all variables.
    pub sum_marginal: f64,
    /// Weighted grouped entropy H* = Σⱼ wⱼ·Σ_{i∈groupⱼ} H(xᵢ), when a
    /// partition is supplied.
    pub h_star: Option<f64>,
}

/// Brute-force joint and marginal entropies, plus the weighted grouped
/// entropy for an optional 3-way variable partition. Errors if the computed
/// values violate subadditivity (beyond 1e-9), which would indicate a broken
/// table.
pub fn entropy_gap(
    joint: &JointDistribution,
    partition: Option<(&[usize], [f64; NUM_GROUPS])>,
) -> Result<EntropyGap> {
    let h_joint = entropy_nats(&joint.probs) / LN_2;
    let marginals = joint.marginals();
    let marginal_bits: Vec<f64> = marginals.iter().map(|m| entropy_nats(m) / LN_2).collect();
    let sum_marginal: f64 = marginal_bits.iter().sum();
    if h_joint > sum_marginal + 1e-9 {
        return Err(Error::Numerical(format!(
            "subadditivity violated: H_joint {h_joint} > Σ marginals {sum_marginal}"
        )));
    }
    let h_star = match partition {
        None => None,
        Some((groups, weights)) => {
            if groups.len() != joint.num_vars() {
                return Err(Error::Dimension(format!(
                    "partition labels {} for {} variables",
                    groups.len(),
                    joint.num_vars()
                )));
            }
            if groups.iter().any(|&g| g >= NUM_GROUPS) {
                return Err(Error::InvalidInput("partition labels must be in {0,1,2}".into()));
            }
            let wsum: f64 = weights.iter().sum();
            if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (wsum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(
                    "partition weights must be convex coefficients".into(),
                ));
            }
            let mut h = 0.0;
            for j in 0..NUM_GROUPS {
                let group_sum: f64 = groups
                    .iter()
                    .enumerate()
                    .filter(|(_, &g)| g == j)
                    .map(|(i, _)| marginal_bits[i])
                    .sum();
                h += weights[j] * group_sum;
            }
            Some(h)
        }
    };
    Ok(EntropyGap { h_joint, sum_marginal, h_star })
}
