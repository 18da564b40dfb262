//! Trainable parameters (encoder, prediction head, metric factor), the full
//! three-phase forward pass, the training loss, and hand-derived gradients.
//!
//! The loss is cross-entropy on the effect-reweighted bag embedding minus a
//! group-separation term γ·d_reg, where d_reg is the metric distance between
//! the TC-group mean and the mean of everything else. Gradients follow a
//! stop-gradient convention: group assignments and effect weights are treated
//! as constants, the metric factor A receives gradient only through d_reg,
//! and the encoder receives gradient through both paths.

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::effects::{
    assign_factors, group_effects, normalize_effects, EffectVector, FactorMap,
};
use crate::error::{Error, Result};
use crate::metric_grouping::{kmeans_group, metric_distance, GroupingResult, MetricParams, NUM_GROUPS};
use crate::numerics::{mean_of_rows, softmax, Matrix, ProbVector, SeededStream};

/// Floor applied inside the cross-entropy logarithm.
pub const CE_LOG_FLOOR: f64 = 1e-12;

/// Affine map y = Wx + b.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::Dimension(format!(
                "linear layer: {} weight rows vs {} bias entries",
                weights.rows(),
                bias.len()
            )));
        }
        Ok(LinearLayer { weights, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weights.matvec(x)?;
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        Ok(y)
    }
}

/// Shape of a model: input features, encoder width, classes, metric rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub encoder_dim: usize,
    pub num_classes: usize,
    pub rank: usize,
}

/// The complete trainable state: encoder, head, and metric factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: LinearLayer,
    pub head: LinearLayer,
    pub metric: MetricParams,
}

impl ModelParams {
    /// Seeded initialization. The encoder starts as a structure-preserving
    /// partial identity (row i reads input i mod d_in) plus small Gaussian
    /// noise: a random projection at this scale measurably scrambles the
    /// latent geometry the grouping phase depends on, while the substituted
    /// extractor stands in for a pretrained backbone that would start from a
    /// structured representation. Head entries ~ N(0, 1/d), zero biases,
    /// metric factor on the Frobenius sphere.
    pub fn init(dims: &ModelDims, stream: &mut SeededStream) -> Result<Self> {
        let mut enc = Matrix::zeros(dims.encoder_dim, dims.d_in);
        for i in 0..dims.encoder_dim {
            for j in 0..dims.d_in {
                let base = if j == i % dims.d_in { 1.0 } else { 0.0 };
                enc.set(i, j, base + 0.02 * stream.draw_gaussian());
            }
        }
        let encoder = LinearLayer::new(enc, vec![0.0; dims.encoder_dim])?;
        let head_std = (1.0 / dims.encoder_dim as f64).sqrt();
        let head_data: Vec<f64> = (0..dims.num_classes * dims.encoder_dim)
            .map(|_| head_std * stream.draw_gaussian())
            .collect();
        let head = LinearLayer::new(
            Matrix::from_vec(dims.num_classes, dims.encoder_dim, head_data)?,
            vec![0.0; dims.num_classes],
        )?;
        let metric = MetricParams::init(dims.rank, dims.encoder_dim, stream)?;
        Ok(ModelParams { encoder, head, metric })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.encoder.in_dim(),
            encoder_dim: self.encoder.out_dim(),
            num_classes: self.head.out_dim(),
            rank: self.metric.rank(),
        }
    }
}

/// How group weights reweight the bag embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum AggMode {
    /// z_final = Σ_k w_k · mean(group k), weights renormalized over
    /// non-empty groups.
    #[default]
    CentroidWeighted,
    /// z_final = (1/n) Σ_i w_{g(i)} · z_i.
    InstanceWeighted,
}

/// Which forward pass to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Grouping, counterfactual effects, and reweighted aggregation.
    #[default]
    Full,
    /// Plain mean pooling with the same encoder and head (ablation baseline).
    MeanPool,
}

/// Loss hyper-parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub agg_mode: AggMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 0.1, agg_mode: AggMode::CentroidWeighted }
    }
}

/// Everything produced by one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub z: Matrix,
    pub grouping: GroupingResult,
    pub p_vanilla: ProbVector,
    pub p_masked: [Option<ProbVector>; NUM_GROUPS],
    pub effects: EffectVector,
    pub factors: FactorMap,
    pub z_final: Vec<f64>,
    pub probs: ProbVector,
    pub d_reg: f64,
    pub d_reg_degenerate: bool,
}

impl ForwardTrace {
    pub fn predicted(&self) -> usize {
        self.probs.argmax()
    }

    pub fn degenerate(&self) -> bool {
        self.grouping.degenerate() || self.effects.fallback_uniform
    }

    pub fn report(&self, bag_id: &str, label: usize) -> TraceReport {
        TraceReport {
            bag_id: bag_id.to_string(),
            label,
            predicted: self.predicted(),
            assignments: self.grouping.assignments.clone(),
            centroids: (0..self.grouping.centroids.rows())
                .map(|i| self.grouping.centroids.row(i).to_vec())
                .collect(),
            objective_trace: self.grouping.objective_trace.clone(),
            p_vanilla: self.p_vanilla.values().to_vec(),
            p_masked: self
                .p_masked
                .iter()
                .map(|p| p.as_ref().map(|v| v.values().to_vec()))
                .collect(),
            d: self.effects.d,
            w: self.effects.w,
            fallback_uniform: self.effects.fallback_uniform,
            factor_map: self.factors,
            z_final: self.z_final.clone(),
            probs: self.probs.values().to_vec(),
            d_reg: self.d_reg,
            degenerate: self.degenerate(),
        }
    }
}

/// JSON-facing view of a forward trace.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceReport {
    pub bag_id: String,
    pub label: usize,
    pub predicted: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
    pub p_vanilla: Vec<f64>,
    pub p_masked: Vec<Option<Vec<f64>>>,
    pub d: [f64; NUM_GROUPS],
    pub w: [f64; NUM_GROUPS],
    pub fallback_uniform: bool,
    pub factor_map: FactorMap,
    pub z_final: Vec<f64>,
    pub probs: Vec<f64>,
    pub d_reg: f64,
    pub degenerate: bool,
}

/// Per-instance rectified encoding Z = relu(X·Eᵀ + b).
pub fn encode(params: &ModelParams, bag: &Bag) -> Result<Matrix> {
    Ok(encode_preact(params, &bag.features)?.1)
}

fn encode_preact(params: &ModelParams, features: &Matrix) -> Result<(Matrix, Matrix)> {
    if features.cols() != params.encoder.in_dim() {
        return Err(Error::Dimension(format!(
            "encode: encoder expects dim {}, bag has {}",
            params.encoder.in_dim(),
            features.cols()
        )));
    }
    let n = features.rows();
    let d = params.encoder.out_dim();
    let mut pre = Matrix::zeros(n, d);
    let mut z = Matrix::zeros(n, d);
    for i in 0..n {
        let s = params.encoder.apply(features.row(i))?;
        for (j, v) in s.into_iter().enumerate() {
            pre.set(i, j, v);
            z.set(i, j, v.max(0.0));
        }
    }
    Ok((pre, z))
}

/// softmax(head · embedding + bias).
pub fn classify(head: &LinearLayer, embedding: &[f64]) -> Result<ProbVector> {
    softmax(&head.apply(embedding)?)
}

/// Per-group aggregation coefficients β_k with z_final = Σ_k β_k·mean(Z_k).
/// Centroid mode renormalizes the weights over non-empty groups; instance
/// mode scales each weight by the group's share of the bag.
fn group_coefficients(assignments: &[usize], w: &[f64; NUM_GROUPS], agg: AggMode) -> [f64; NUM_GROUPS] {
    let n = assignments.len() as f64;
    let mut sizes = [0usize; NUM_GROUPS];
    for &g in assignments {
        sizes[g] += 1;
    }
    let mut beta = [0.0; NUM_GROUPS];
    match agg {
        AggMode::CentroidWeighted => {
            let total: f64 = (0..NUM_GROUPS).filter(|&k| sizes[k] > 0).map(|k| w[k]).sum();
            if total > 0.0 {
                for k in 0..NUM_GROUPS {
                    if sizes[k] > 0 {
                        beta[k] = w[k] / total;
                    }
                }
            } else {
                // all mass on empty groups: fall back to uniform over the rest
                let non_empty = sizes.iter().filter(|&&s| s > 0).count() as f64;
                for k in 0..NUM_GROUPS {
                    if sizes[k] > 0 {
                        beta[k] = 1.0 / non_empty;
                    }
                }
            }
        }
        AggMode::InstanceWeighted => {
            for k in 0..NUM_GROUPS {
                beta[k] = w[k] * sizes[k] as f64 / n;
            }
        }
    }
    beta
}

/// Effect-reweighted bag embedding.
pub fn reweighted_embedding(
    z: &Matrix,
    assignments: &[usize],
    w: &[f64; NUM_GROUPS],
    agg: AggMode,
) -> Vec<f64> {
    assert!(!assignments.is_empty(), "reweighted_embedding: empty bag");
    let beta = group_coefficients(assignments, w, agg);
    let mut out = vec![0.0; z.cols()];
    for k in 0..NUM_GROUPS {
        if beta[k] == 0.0 {
            continue;
        }
        let members: Vec<&[f64]> = (0..z.rows())
            .filter(|&i| assignments[i] == k)
            .map(|i| z.row(i))
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = mean_of_rows(&members);
        for (o, v) in out.iter_mut().zip(&m) {
            *o += beta[k] * v;
        }
    }
    out
}

/// d_reg = d_A(mean of TC group, mean of the rest). Returns (0, true) when
/// the TC group is empty or covers the whole bag.
pub fn separation_regularizer(
    metric: &MetricParams,
    z: &Matrix,
    assignments: &[usize],
    tc: usize,
) -> Result<(f64, bool)> {
    let tc_rows: Vec<&[f64]> = (0..z.rows())
        .filter(|&i| assignments[i] == tc)
        .map(|i| z.row(i))
        .collect();
    let rest_rows: Vec<&[f64]> = (0..z.rows())
        .filter(|&i| assignments[i] != tc)
        .map(|i| z.row(i))
        .collect();
    if tc_rows.is_empty() || rest_rows.is_empty() {
        return Ok((0.0, true));
    }
    let a = mean_of_rows(&tc_rows);
    let b = mean_of_rows(&rest_rows);
    Ok((metric_distance(metric, &a, &b)?, false))
}

/// Runs the full three-phase pipeline on one bag.
pub fn forward(params: &ModelParams, bag: &Bag, cfg: &LossConfig) -> Result<ForwardTrace> {
    let z = encode(params, bag)?;
    let grouping = kmeans_group(&params.metric, &z)?;
    let ge = group_effects(|e| classify(&params.head, e), &z, &grouping.assignments)?;
    let effects = normalize_effects(ge.d)?;
    let factors = assign_factors(&effects);
    let z_final = reweighted_embedding(&z, &grouping.assignments, &effects.w, cfg.agg_mode);
    let probs = classify(&params.head, &z_final)?;
    let (d_reg, d_reg_degenerate) =
        separation_regularizer(&params.metric, &z, &grouping.assignments, factors.tc)?;
    Ok(ForwardTrace {
        z,
        grouping,
        p_vanilla: ge.p_vanilla,
        p_masked: ge.p_masked,
        effects,
        factors,
        z_final,
        probs,
        d_reg,
        d_reg_degenerate,
    })
}

/// Mean-pooling baseline forward: encode, pool, classify.
pub fn mean_pool_forward(params: &ModelParams, bag: &Bag) -> Result<(ProbVector, Vec<f64>)> {
    let z = encode(params, bag)?;
    let rows: Vec<&[f64]> = (0..z.rows()).map(|i| z.row(i)).collect();
    let pooled = mean_of_rows(&rows);
    let probs = classify(&params.head, &pooled)?;
    Ok((probs, pooled))
}

/// −ln(p[label]), floored for numerical safety.
pub fn cross_entropy(probs: &ProbVector, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs.values()[label].max(CE_LOG_FLOOR).ln())
}

/// The discrete pipeline decisions held fixed during differentiation.
#[derive(Clone, Debug)]
pub struct FrozenStructure {
    pub assignments: Vec<usize>,
    pub w: [f64; NUM_GROUPS],
    pub tc: usize,
}

impl FrozenStructure {
    pub fn of(trace: &ForwardTrace) -> Self {
        FrozenStructure {
            assignments: trace.grouping.assignments.clone(),
            w: trace.effects.w,
            tc: trace.factors.tc,
        }
    }
}

/// Loss recomputed from raw features under a frozen grouping structure.
/// This is the exact objective the analytic gradients differentiate, and the
/// function finite-difference checks probe.
pub fn loss_with_frozen(
    params: &ModelParams,
    features: &Matrix,
    label: usize,
    frozen: &FrozenStructure,
    cfg: &LossConfig,
) -> Result<f64> {
    let (_, z) = encode_preact(params, features)?;
    let z_final = reweighted_embedding(&z, &frozen.assignments, &frozen.w, cfg.agg_mode);
    let probs = classify(&params.head, &z_final)?;
    let ce = cross_entropy(&probs, label)?;
    let (d_reg, _) = separation_regularizer(&params.metric, &z, &frozen.assignments, frozen.tc)?;
    Ok(ce - cfg.gamma * d_reg)
}

/// Gradients for every trainable tensor.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub encoder_w: Matrix,
    pub encoder_b: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub metric_a: Matrix,
}

impl Gradients {
    pub fn zeros(dims: &ModelDims) -> Self {
        Gradients {
            encoder_w: Matrix::zeros(dims.encoder_dim, dims.d_in),
            encoder_b: vec![0.0; dims.encoder_dim],
            head_w: Matrix::zeros(dims.num_classes, dims.encoder_dim),
            head_b: vec![0.0; dims.num_classes],
            metric_a: Matrix::zeros(dims.rank, dims.encoder_dim),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        let acc = |a: &mut [f64], b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        };
        acc(self.encoder_w.data_mut(), other.encoder_w.data());
        acc(&mut self.encoder_b, &other.encoder_b);
        acc(self.head_w.data_mut(), other.head_w.data());
        acc(&mut self.head_b, &other.head_b);
        acc(self.metric_a.data_mut(), other.metric_a.data());
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.encoder_w.data_mut() {
            *v *= c;
        }
        for v in &mut self.encoder_b {
            *v *= c;
        }
        for v in self.head_w.data_mut() {
            *v *= c;
        }
        for v in &mut self.head_b {
            *v *= c;
        }
        for v in self.metric_a.data_mut() {
            *v *= c;
        }
    }
}

fn backward_from_trace(
    params: &ModelParams,
    features: &Matrix,
    pre: &Matrix,
    z: &Matrix,
    frozen: &FrozenStructure,
    probs: &ProbVector,
    z_final: &[f64],
    label: usize,
    cfg: &LossConfig,
) -> Result<Gradients> {
    let dims = params.dims();
    let n = z.rows();
    let mut grads = Gradients::zeros(&dims);

    // softmax + cross-entropy: dL/dlogits = p − onehot(label)
    let mut dlogits: Vec<f64> = probs.values().to_vec();
    dlogits[label] -= 1.0;

    for c in 0..dims.num_classes {
        grads.head_b[c] = dlogits[c];
        for j in 0..dims.encoder_dim {
            grads.head_w.set(c, j, dlogits[c] * z_final[j]);
        }
    }

    // dL/dz_final, then per-instance coefficients from the aggregation rule
    let g_z = params.head.weights.matvec_transpose(&dlogits)?;
    let beta = group_coefficients(&frozen.assignments, &frozen.w, cfg.agg_mode);
    let mut sizes = [0usize; NUM_GROUPS];
    for &g in &frozen.assignments {
        sizes[g] += 1;
    }
    let mut dz = Matrix::zeros(n, dims.encoder_dim);
    for i in 0..n {
        let k = frozen.assignments[i];
        if sizes[k] == 0 {
            continue;
        }
        let alpha = beta[k] / sizes[k] as f64;
        for j in 0..dims.encoder_dim {
            dz.set(i, j, alpha * g_z[j]);
        }
    }

    // d_reg path: only active when the TC group and its complement are both
    // non-empty and the projected separation is non-zero
    let tc_rows: Vec<&[f64]> = (0..n)
        .filter(|&i| frozen.assignments[i] == frozen.tc)
        .map(|i| z.row(i))
        .collect();
    let rest_rows: Vec<&[f64]> = (0..n)
        .filter(|&i| frozen.assignments[i] != frozen.tc)
        .map(|i| z.row(i))
        .collect();
    if cfg.gamma != 0.0 && !tc_rows.is_empty() && !rest_rows.is_empty() {
        let a_mean = mean_of_rows(&tc_rows);
        let r_mean = mean_of_rows(&rest_rows);
        let delta: Vec<f64> = a_mean.iter().zip(&r_mean).map(|(x, y)| x - y).collect();
        let u = params.metric.project(&delta)?;
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            // dL/dA = −γ·u·δᵀ/‖u‖
            for r in 0..dims.rank {
                for j in 0..dims.encoder_dim {
                    grads.metric_a.set(r, j, -cfg.gamma * u[r] * delta[j] / norm);
                }
            }
            // dL/dz_i = ∓γ·Aᵀu/(‖u‖·|group|)
            let t_vec = params.metric.factor().matvec_transpose(&u)?;
            let tc_count = tc_rows.len() as f64;
            let rest_count = rest_rows.len() as f64;
            for i in 0..n {
                let sign_scale = if frozen.assignments[i] == frozen.tc {
                    -cfg.gamma / tc_count
                } else {
                    cfg.gamma / rest_count
                };
                for j in 0..dims.encoder_dim {
                    let v = dz.get(i, j) + sign_scale * t_vec[j] / norm;
                    dz.set(i, j, v);
                }
            }
        }
    }

    // relu backward, then accumulate into the encoder
    for i in 0..n {
        let x = features.row(i);
        for j in 0..dims.encoder_dim {
            if pre.get(i, j) > 0.0 {
                let ds = dz.get(i, j);
                if ds != 0.0 {
                    grads.encoder_b[j] += ds;
                    for (jj, xv) in x.iter().enumerate() {
                        let v = grads.encoder_w.get(j, jj) + ds * xv;
                        grads.encoder_w.set(j, jj, v);
                    }
                }
            }
        }
    }

    Ok(grads)
}

/// Full-pipeline loss and gradients for one bag. Runs the forward pass,
/// freezes the discrete structure it produced, and backpropagates the frozen
/// objective.
pub fn loss_and_grads(
    params: &ModelParams,
    bag: &Bag,
    label: usize,
    cfg: &LossConfig,
) -> Result<(f64, Gradients, ForwardTrace)> {
    let (pre, z) = encode_preact(params, &bag.features)?;
    let grouping = kmeans_group(&params.metric, &z)?;
    let ge = group_effects(|e| classify(&params.head, e), &z, &grouping.assignments)?;
    let effects = normalize_effects(ge.d)?;
    let factors = assign_factors(&effects);
    let z_final = reweighted_embedding(&z, &grouping.assignments, &effects.w, cfg.agg_mode);
    let probs = classify(&params.head, &z_final)?;
    let (d_reg, d_reg_degenerate) =
        separation_regularizer(&params.metric, &z, &grouping.assignments, factors.tc)?;

    let frozen = FrozenStructure {
        assignments: grouping.assignments.clone(),
        w: effects.w,
        tc: factors.tc,
    };
    let ce = cross_entropy(&probs, label)?;
    let loss = ce - cfg.gamma * d_reg;
    let grads = backward_from_trace(
        params, &bag.features, &pre, &z, &frozen, &probs, &z_final, label, cfg,
    )?;
    let trace = ForwardTrace {
        z,
        grouping,
        p_vanilla: ge.p_vanilla,
        p_masked: ge.p_masked,
        effects,
        factors,
        z_final,
        probs,
        d_reg,
        d_reg_degenerate,
    };
    Ok((loss, grads, trace))
}

/// Loss and gradients for the mean-pooling baseline.
pub fn mean_pool_loss_and_grads(
    params: &ModelParams,
    bag: &Bag,
    label: usize,
) -> Result<(f64, Gradients, ProbVector)> {
    let dims = params.dims();
    let (pre, z) = encode_preact(params, &bag.features)?;
    let rows: Vec<&[f64]> = (0..z.rows()).map(|i| z.row(i)).collect();
    let pooled = mean_of_rows(&rows);
    let probs = classify(&params.head, &pooled)?;
    let loss = cross_entropy(&probs, label)?;

    let mut grads = Gradients::zeros(&dims);
    let mut dlogits: Vec<f64> = probs.values().to_vec();
    dlogits[label] -= 1.0;
    for c in 0..dims.num_classes {
        grads.head_b[c] = dlogits[c];
        for j in 0..dims.encoder_dim {
            grads.head_w.set(c, j, dlogits[c] * pooled[j]);
        }
    }
    let g_z = params.head.weights.matvec_transpose(&dlogits)?;
    let inv_n = 1.0 / z.rows() as f64;
    for i in 0..z.rows() {
        let x = bag.features.row(i);
        for j in 0..dims.encoder_dim {
            if pre.get(i, j) > 0.0 {
                let ds = inv_n * g_z[j];
                grads.encoder_b[j] += ds;
                for (jj, xv) in x.iter().enumerate() {
                    let v = grads.encoder_w.get(j, jj) + ds * xv;
                    grads.encoder_w.set(j, jj, v);
                }
            }
        }
    }
    Ok((loss, grads, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn identity_params(d: usize, classes: usize) -> ModelParams {
        ModelParams {
            encoder: LinearLayer::new(Matrix::identity(d), vec![0.0; d]).unwrap(),
            head: LinearLayer::new(Matrix::zeros(classes, d), vec![0.0; classes]).unwrap(),
            metric: MetricParams::new(Matrix::identity(d)).unwrap(),
        }
    }

    fn random_params(dims: &ModelDims, seed: u64) -> ModelParams {
        let mut stream = SeededStream::new(seed);
        ModelParams::init(dims, &mut stream).unwrap()
    }

    fn bag_from_rows(rows: &[Vec<f64>], label: usize) -> Bag {
        Bag::new(Matrix::from_rows(rows).unwrap(), label, "t", None).unwrap()
    }

    #[test]
    fn identity_encoder_passes_non_negative_inputs() {
        let params = identity_params(2, 2);
        let bag = bag_from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0], vec![3.0, 4.0]], 0);
        let z = encode(&params, &bag).unwrap();
        assert_eq!(z, bag.features);
    }

    #[test]
    fn zero_encoder_gives_zero_rows() {
        let mut params = identity_params(2, 2);
        params.encoder = LinearLayer::new(Matrix::zeros(2, 2), vec![0.0; 2]).unwrap();
        let bag = bag_from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-3.0, 4.0]], 0);
        let z = encode(&params, &bag).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let params = identity_params(2, 2);
        let bag = bag_from_rows(&[vec![1.0; 3], vec![2.0; 3], vec![3.0; 3]], 0);
        assert!(matches!(encode(&params, &bag), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_head_is_uniform() {
        let params = identity_params(3, 4);
        let p = classify(&params.head, &[1.0, -2.0, 0.5]).unwrap();
        for v in p.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_two_class_head() {
        let head = LinearLayer::new(
            Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 0.25]).unwrap(),
            vec![0.1, -0.2],
        )
        .unwrap();
        let e = [0.3, 0.7];
        let p = classify(&head, &e).unwrap();
        let l0: f64 = 1.0 * 0.3 - 1.0 * 0.7 + 0.1;
        let l1: f64 = 0.5 * 0.3 + 0.25 * 0.7 - 0.2;
        let z = l0.exp() + l1.exp();
        assert!((p.values()[0] - l0.exp() / z).abs() < 1e-12);
        assert!((p.values()[1] - l1.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn reweighted_embedding_uniform_equals_mean() {
        let z = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 2.0],
            vec![0.0, 1.0],
            vec![2.0, 3.0],
            vec![4.0, 1.0],
            vec![0.0, 5.0],
        ])
        .unwrap();
        let third = 1.0 / 3.0;
        let a = [0usize, 0, 1, 1, 2, 2];
        let zf = reweighted_embedding(&z, &a, &[third; 3], AggMode::CentroidWeighted);
        let rows: Vec<&[f64]> = (0..6).map(|i| z.row(i)).collect();
        let mean = mean_of_rows(&rows);
        for (x, y) in zf.iter().zip(&mean) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reweighted_embedding_single_weight_and_hand_case() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]])
            .unwrap();
        let a = [0usize, 0, 1, 2];
        let zf = reweighted_embedding(&z, &a, &[1.0, 0.0, 0.0], AggMode::CentroidWeighted);
        assert_eq!(zf, vec![1.0, 0.0]);

        // two groups at means (1,0) and (0,1) with weights 0.75/0.25
        let z2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let zf2 = reweighted_embedding(&z2, &[0, 1, 1], &[0.75, 0.25, 0.0], AggMode::CentroidWeighted);
        assert!((zf2[0] - 0.75).abs() < 1e-12 && (zf2[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reweighted_embedding_skips_empty_groups() {
        let z = Matrix::from_rows(&[vec![2.0, 0.0], vec![4.0, 0.0], vec![0.0, 2.0]]).unwrap();
        // weight 0.5 sits on empty group 2 and is renormalized away
        let zf = reweighted_embedding(&z, &[0, 0, 1], &[0.25, 0.25, 0.5], AggMode::CentroidWeighted);
        assert!((zf[0] - 1.5).abs() < 1e-12 && (zf[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn instance_weighted_matches_direct_sum() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 4.0]]).unwrap();
        let a = [0usize, 1, 1];
        let w = [0.6, 0.4, 0.0];
        let zf = reweighted_embedding(&z, &a, &w, AggMode::InstanceWeighted);
        let expect = [
            (0.6 * 1.0 + 0.4 * 3.0 + 0.4 * 0.0) / 3.0,
            (0.6 * 2.0 + 0.4 * 1.0 + 0.4 * 4.0) / 3.0,
        ];
        for (x, y) in zf.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn separation_regularizer_cases() {
        let m = MetricParams::new(Matrix::identity(2)).unwrap();
        let same = Matrix::from_rows(&vec![vec![1.0, 1.0]; 4]).unwrap();
        let (d, degenerate) = separation_regularizer(&m, &same, &[0, 0, 1, 1], 0).unwrap();
        assert_eq!(d, 0.0);
        assert!(!degenerate);

        // TC mean (1,0), rest mean (0,0)
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (d, _) = separation_regularizer(&m, &z, &[0, 1, 1], 0).unwrap();
        assert!((d - 1.0).abs() < 1e-12);

        // scaling A scales d_reg
        let mut scaled = MetricParams::new(Matrix::identity(2)).unwrap();
        scaled.factor_mut().scale_in_place(2.5);
        let (d2, _) = separation_regularizer(&scaled, &z, &[0, 1, 1], 0).unwrap();
        assert!((d2 - 2.5).abs() < 1e-12);

        // degenerate when TC covers the whole bag or is empty
        let (d3, degenerate3) = separation_regularizer(&m, &z, &[0, 0, 0], 0).unwrap();
        assert_eq!((d3, degenerate3), (0.0, true));
        let (d4, degenerate4) = separation_regularizer(&m, &z, &[1, 1, 1], 0).unwrap();
        assert_eq!((d4, degenerate4), (0.0, true));
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let cfg = LossConfig::default();
        let ds = generate_synthetic(&SynthConfig { num_bags: 3, ..SynthConfig::default() }).unwrap();
        let dims = ModelDims { d_in: 16, encoder_dim: 8, num_classes: 3, rank: 4 };
        let params = random_params(&dims, 42);

        let bag = &ds.bags[0];
        let base = forward(&params, bag, &cfg).unwrap();

        let mut stream = SeededStream::new(99);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..bag.num_instances()).collect();
            stream.shuffle(&mut perm);
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| bag.features.row(i).to_vec()).collect();
            let shuffled = Bag::new(Matrix::from_rows(&rows).unwrap(), bag.label, "p", None).unwrap();
            let out = forward(&params, &shuffled, &cfg).unwrap();
            assert_eq!(out.probs, base.probs);
            assert_eq!(out.effects.w, base.effects.w);
            assert_eq!(out.factors, base.factors);
            assert_eq!(out.d_reg.to_bits(), base.d_reg.to_bits());
        }
    }

    #[test]
    fn identical_instance_bag_degenerates_to_single_group() {
        let cfg = LossConfig::default();
        let dims = ModelDims { d_in: 4, encoder_dim: 5, num_classes: 3, rank: 3 };
        let params = random_params(&dims, 7);
        let bag = bag_from_rows(&vec![vec![0.4, -0.2, 1.0, 0.3]; 5], 1);
        let trace = forward(&params, &bag, &cfg).unwrap();
        assert!(trace.grouping.degenerate());
        // the surviving whole-bag group absorbs all the weight
        let k = trace.grouping.assignments[0];
        assert_eq!(trace.effects.w[k], 1.0);
        // probs equal classifying the single instance's encoding
        let z = encode(&params, &bag).unwrap();
        let expect = classify(&params.head, z.row(0)).unwrap();
        for (a, b) in trace.probs.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_decomposition_holds() {
        let cfg = LossConfig { gamma: 0.37, agg_mode: AggMode::CentroidWeighted };
        let ds = generate_synthetic(&SynthConfig { num_bags: 3, ..SynthConfig::default() }).unwrap();
        let dims = ModelDims { d_in: 16, encoder_dim: 6, num_classes: 3, rank: 3 };
        let params = random_params(&dims, 3);
        for bag in &ds.bags {
            let (loss, _, trace) = loss_and_grads(&params, bag, bag.label, &cfg).unwrap();
            let ce = cross_entropy(&trace.probs, bag.label).unwrap();
            assert!((loss + cfg.gamma * trace.d_reg - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_zero_kills_metric_gradient() {
        let cfg = LossConfig { gamma: 0.0, agg_mode: AggMode::CentroidWeighted };
        let ds = generate_synthetic(&SynthConfig { num_bags: 3, ..SynthConfig::default() }).unwrap();
        let dims = ModelDims { d_in: 16, encoder_dim: 6, num_classes: 3, rank: 3 };
        let params = random_params(&dims, 11);
        let (_, grads, _) = loss_and_grads(&params, &ds.bags[0], ds.bags[0].label, &cfg).unwrap();
        assert!(grads.metric_a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_prediction_has_negligible_ce() {
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, 0).unwrap() <= 1e-9);
    }

    fn finite_difference_check(dims: ModelDims, n_instances: usize, seed: u64, agg: AggMode) {
        let cfg = LossConfig { gamma: 0.2, agg_mode: agg };
        let mut stream = SeededStream::new(seed);
        let params = ModelParams::init(&dims, &mut stream).unwrap();
        let rows: Vec<Vec<f64>> = (0..n_instances)
            .map(|_| (0..dims.d_in).map(|_| stream.draw_gaussian()).collect())
            .collect();
        let label = stream.draw_choice(dims.num_classes);
        let bag = bag_from_rows(&rows, label);

        let (loss, grads, trace) = loss_and_grads(&params, &bag, label, &cfg).unwrap();
        let frozen = FrozenStructure::of(&trace);
        let frozen_loss = loss_with_frozen(&params, &bag.features, label, &frozen, &cfg).unwrap();
        assert!((loss - frozen_loss).abs() < 1e-12);

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let check = |mutate: &mut dyn FnMut(&mut ModelParams, f64), analytic: f64, tag: &str| {
            let mut plus = params.clone();
            mutate(&mut plus, h);
            let lp = loss_with_frozen(&plus, &bag.features, label, &frozen, &cfg).unwrap();
            let mut minus = params.clone();
            mutate(&mut minus, -h);
            let lm = loss_with_frozen(&minus, &bag.features, label, &frozen, &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                rel(analytic, fd) < 1e-4,
                "{tag}: analytic {analytic} vs fd {fd}"
            );
        };

        for i in 0..dims.encoder_dim {
            for j in 0..dims.d_in {
                check(
                    &mut |p, eps| {
                        let v = p.encoder.weights.get(i, j) + eps;
                        p.encoder.weights.set(i, j, v);
                    },
                    grads.encoder_w.get(i, j),
                    "encoder_w",
                );
            }
            check(&mut |p, eps| p.encoder.bias[i] += eps, grads.encoder_b[i], "encoder_b");
        }
        for c in 0..dims.num_classes {
            for j in 0..dims.encoder_dim {
                check(
                    &mut |p, eps| {
                        let v = p.head.weights.get(c, j) + eps;
                        p.head.weights.set(c, j, v);
                    },
                    grads.head_w.get(c, j),
                    "head_w",
                );
            }
            check(&mut |p, eps| p.head.bias[c] += eps, grads.head_b[c], "head_b");
        }
        for r in 0..dims.rank {
            for j in 0..dims.encoder_dim {
                check(
                    &mut |p, eps| {
                        let v = p.metric.factor().get(r, j) + eps;
                        p.metric.factor_mut().set(r, j, v);
                    },
                    grads.metric_a.get(r, j),
                    "metric_a",
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_centroid() {
        let dims = ModelDims { d_in: 5, encoder_dim: 6, num_classes: 3, rank: 4 };
        finite_difference_check(dims, 8, 17, AggMode::CentroidWeighted);
    }

    #[test]
    fn gradients_match_finite_differences_instance() {
        let dims = ModelDims { d_in: 4, encoder_dim: 5, num_classes: 2, rank: 3 };
        finite_difference_check(dims, 7, 23, AggMode::InstanceWeighted);
    }

    #[test]
    fn mean_pool_gradients_match_finite_differences() {
        let dims = ModelDims { d_in: 4, encoder_dim: 5, num_classes: 3, rank: 3 };
        let mut stream = SeededStream::new(31);
        let params = ModelParams::init(&dims, &mut stream).unwrap();
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dims.d_in).map(|_| stream.draw_gaussian()).collect())
            .collect();
        let bag = bag_from_rows(&rows, 1);
        let (_, grads, _) = mean_pool_loss_and_grads(&params, &bag, 1).unwrap();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let loss_of = |p: &ModelParams| {
            let (probs, _) = mean_pool_forward(p, &bag).unwrap();
            cross_entropy(&probs, 1).unwrap()
        };
        for i in 0..dims.encoder_dim {
            for j in 0..dims.d_in {
                let mut plus = params.clone();
                let v = plus.encoder.weights.get(i, j) + h;
                plus.encoder.weights.set(i, j, v);
                let mut minus = params.clone();
                let v = minus.encoder.weights.get(i, j) - h;
                minus.encoder.weights.set(i, j, v);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!(rel(grads.encoder_w.get(i, j), fd) < 1e-4);
            }
        }
    }
}
