//! Loss terms and the composite objective.
//!
//! Every loss returns its scalar value together with exact gradients with
//! respect to its direct inputs, so callers can seed network backward
//! passes without re-deriving anything:
//!
//! - [`regression_loss`]: mean L1 or L2 error on predictions
//! - [`ranking_loss`]: binary cross entropy on pair-order probabilities
//! - [`identity_loss`]: self-difference / antisymmetry constraint penalty
//! - [`mmd_loss`]: biased squared maximum mean discrepancy, Gaussian kernel
//! - [`smoothing_loss`]: graph-Laplacian quadratic penalty on predictions
//! - [`composite_loss`]: weighted sum of the above per [`CompositeLossConfig`]

use crate::error::{Error, Result};

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptation {
    None,
    Adversarial,
    Mmd,
}

/// Weights and switches for the composite objective. `alpha` scales the
/// ranking term, `beta` the identity constraint, `gamma` the adaptation
/// term (adversarial or MMD), `sigma_smooth` the Laplacian smoothing term.
#[derive(Debug, Clone, Copy)]
pub struct CompositeLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_smooth: f64,
    pub regression_norm: RegressionNorm,
    pub adaptation: Adaptation,
}

impl Default for CompositeLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.1,
            gamma: 0.1,
            sigma_smooth: 0.0,
            regression_norm: RegressionNorm::L1,
            adaptation: Adaptation::None,
        }
    }
}

impl CompositeLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("sigma_smooth", self.sigma_smooth),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weight {name} must be a nonnegative finite number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian kernel bandwidth: explicit, or the median of pairwise
/// distances over the batch the kernel is applied to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(bandwidth),
        }
    }

    fn resolve(&self, pooled: &[&[f64]]) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(bw) => {
                if !bw.is_finite() || bw <= 0.0 {
                    Err(Error::InvalidConfig(format!(
                        "kernel bandwidth must be positive, got {bw}"
                    )))
                } else {
                    Ok(bw)
                }
            }
            Bandwidth::MedianHeuristic => Ok(median_heuristic_bandwidth(pooled)),
        }
    }
}

/// Median of pairwise Euclidean distances; 1.0 when the median is zero
/// (zero-variance batch) or no pair exists.
pub fn median_heuristic_bandwidth(points: &[&[f64]]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            dists.push(euclidean_sq(points[i], points[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scalar loss plus gradient with respect to one input vector.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean L1 or L2 regression error. The L1 subgradient at an exact tie is 0.
pub fn regression_loss(pred: &[f64], target: &[f64], norm: RegressionNorm) -> Result<LossValue> {
    if pred.is_empty() {
        return Err(Error::EmptyBatch("regression_loss"));
    }
    if pred.len() != target.len() {
        return Err(Error::shape("regression_loss", target.len(), pred.len()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let d = p - t;
        match norm {
            RegressionNorm::L1 => {
                value += d.abs();
                grad.push(sign(d) / n);
            }
            RegressionNorm::L2 => {
                value += d * d;
                grad.push(2.0 * d / n);
            }
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ranking target: 1 when the first item is larger, 0 when smaller,
/// 0.5 at an exact tie.
pub fn rank_target(diff: f64) -> f64 {
    if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        0.0
    } else {
        0.5
    }
}

/// Mean binary cross entropy of probabilities against targets in [0, 1].
/// Probabilities are clamped into `[1e-7, 1 - 1e-7]`; values outside
/// [0, 1] are rejected. Gradients of clamped entries are zero.
pub fn bce_loss(probs: &[f64], targets: &[f64]) -> Result<LossValue> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch("bce_loss"));
    }
    if probs.len() != targets.len() {
        return Err(Error::shape("bce_loss", targets.len(), probs.len()));
    }
    let n = probs.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (&p_raw, &t) in probs.iter().zip(targets) {
        if !p_raw.is_finite() || !(0.0..=1.0).contains(&p_raw) {
            return Err(Error::ProbabilityOutOfRange(p_raw));
        }
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!(
                "BCE target must lie in [0, 1], got {t}"
            )));
        }
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        let clamped = p_raw < PROB_CLAMP || p_raw > 1.0 - PROB_CLAMP;
        grad.push(if clamped {
            0.0
        } else {
            (-t / p + (1.0 - t) / (1.0 - p)) / n
        });
    }
    Ok(LossValue {
        value: value / n,
        grad,
    })
}

/// BCE of predicted pair-order probabilities against `rank_target` of the
/// true age differences.
pub fn ranking_loss(rank_pred: &[f64], age_diff_target: &[f64]) -> Result<LossValue> {
    if rank_pred.len() != age_diff_target.len() {
        return Err(Error::shape(
            "ranking_loss",
            age_diff_target.len(),
            rank_pred.len(),
        ));
    }
    let targets: Vec<f64> = age_diff_target.iter().map(|&d| rank_target(d)).collect();
    bce_loss(rank_pred, &targets)
}

/// Gradients of [`identity_loss`] with respect to each of its five inputs.
#[derive(Debug, Clone)]
pub struct IdentityGrads {
    pub f1_ab: Vec<f64>,
    pub f1_ba: Vec<f64>,
    pub f1_aa: Vec<f64>,
    pub f2_ab: Vec<f64>,
    pub f2_ba: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IdentityLoss {
    pub value: f64,
    pub grads: IdentityGrads,
}

/// Constraint penalty: a copy pair must predict zero difference, swapping
/// a pair must negate the difference, and the two rank probabilities of a
/// swapped pair must sum to one. Label-free, so it applies to target pairs.
///
/// `mean(|f1_aa| + |f1_ab + f1_ba| + |f2_ab + f2_ba - 1|)`
pub fn identity_loss(
    f1_ab: &[f64],
    f1_ba: &[f64],
    f1_aa: &[f64],
    f2_ab: &[f64],
    f2_ba: &[f64],
) -> Result<IdentityLoss> {
    let n = f1_ab.len();
    if n == 0 {
        return Err(Error::EmptyBatch("identity_loss"));
    }
    for (name, v) in [
        ("f1_ba", f1_ba),
        ("f1_aa", f1_aa),
        ("f2_ab", f2_ab),
        ("f2_ba", f2_ba),
    ] {
        if v.len() != n {
            return Err(Error::shape(format!("identity_loss {name}"), n, v.len()));
        }
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grads = IdentityGrads {
        f1_ab: vec![0.0; n],
        f1_ba: vec![0.0; n],
        f1_aa: vec![0.0; n],
        f2_ab: vec![0.0; n],
        f2_ba: vec![0.0; n],
    };
    for i in 0..n {
        value += f1_aa[i].abs();
        grads.f1_aa[i] = sign(f1_aa[i]) / nf;

        let anti = f1_ab[i] + f1_ba[i];
        value += anti.abs();
        let s = sign(anti) / nf;
        grads.f1_ab[i] = s;
        grads.f1_ba[i] = s;

        let comp = f2_ab[i] + f2_ba[i] - 1.0;
        value += comp.abs();
        let s = sign(comp) / nf;
        grads.f2_ab[i] = s;
        grads.f2_ba[i] = s;
    }
    Ok(IdentityLoss {
        value: value / nf,
        grads,
    })
}

#[derive(Debug, Clone)]
pub struct MmdLoss {
    pub value: f64,
    /// Gradient with respect to each source vector.
    pub grad_source: Vec<Vec<f64>>,
    /// Gradient with respect to each target vector.
    pub grad_target: Vec<Vec<f64>>,
    /// The bandwidth actually used (resolved from the heuristic if needed).
    pub bandwidth: f64,
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel
/// `k(x, y) = exp(-|x - y|^2 / (2 bw^2))`:
///
/// `mean k(s, s') + mean k(t, t') - 2 mean k(s, t)`
///
/// The V-statistic is nonnegative by construction; negative rounding dust
/// is truncated to zero. With [`Bandwidth::MedianHeuristic`] the bandwidth
/// is treated as a constant of the batch, not differentiated through.
pub fn mmd_loss(source: &[Vec<f64>], target: &[Vec<f64>], kernel: &KernelConfig) -> Result<MmdLoss> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyBatch("mmd_loss"));
    }
    let dim = source[0].len();
    for v in source.iter().chain(target.iter()) {
        if v.len() != dim {
            return Err(Error::shape("mmd_loss feature dimension", dim, v.len()));
        }
    }
    let pooled: Vec<&[f64]> = source
        .iter()
        .chain(target.iter())
        .map(|v| v.as_slice())
        .collect();
    let bw = kernel.resolve(&pooled)?;
    let inv_two_bw2 = 1.0 / (2.0 * bw * bw);
    let k = |a: &[f64], b: &[f64]| (-euclidean_sq(a, b) * inv_two_bw2).exp();

    let n = source.len() as f64;
    let m = target.len() as f64;
    let mut ss = 0.0;
    for a in source {
        for b in source {
            ss += k(a, b);
        }
    }
    let mut tt = 0.0;
    for a in target {
        for b in target {
            tt += k(a, b);
        }
    }
    let mut st = 0.0;
    for a in source {
        for b in target {
            st += k(a, b);
        }
    }
    let value = (ss / (n * n) + tt / (m * m) - 2.0 * st / (n * m)).max(0.0);

    // d k(x, y) / d x = -k(x, y) (x - y) / bw^2
    let inv_bw2 = 1.0 / (bw * bw);
    let mut grad_source = vec![vec![0.0; dim]; source.len()];
    let mut grad_target = vec![vec![0.0; dim]; target.len()];
    for (a, ga) in source.iter().zip(grad_source.iter_mut()) {
        for b in source {
            let kk = k(a, b) * inv_bw2;
            for d in 0..dim {
                ga[d] += -(2.0 / (n * n)) * kk * (a[d] - b[d]);
            }
        }
        for b in target {
            let kk = k(a, b) * inv_bw2;
            for d in 0..dim {
                ga[d] -= -(2.0 / (n * m)) * kk * (a[d] - b[d]);
            }
        }
    }
    for (b, gb) in target.iter().zip(grad_target.iter_mut()) {
        for a in target {
            let kk = k(b, a) * inv_bw2;
            for d in 0..dim {
                gb[d] += -(2.0 / (m * m)) * kk * (b[d] - a[d]);
            }
        }
        for a in source {
            let kk = k(b, a) * inv_bw2;
            for d in 0..dim {
                gb[d] -= -(2.0 / (n * m)) * kk * (b[d] - a[d]);
            }
        }
    }
    Ok(MmdLoss {
        value,
        grad_source,
        grad_target,
        bandwidth: bw,
    })
}

#[derive(Debug, Clone)]
pub struct SmoothingLoss {
    pub value: f64,
    pub grad_preds: Vec<f64>,
}

/// Graph-Laplacian smoothing over a pooled batch:
///
/// `1/2 sum_ij w_ij (preds_i - preds_j)^2` with
/// `w_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))`,
///
/// equal to `preds' (D - W) preds` with `D` the row-sum diagonal of `W`.
/// Gradient is with respect to the predictions only.
pub fn smoothing_loss(feats: &[Vec<f64>], preds: &[f64], kernel_sigma: f64) -> Result<SmoothingLoss> {
    if feats.is_empty() {
        return Err(Error::EmptyBatch("smoothing_loss"));
    }
    if preds.len() != feats.len() {
        return Err(Error::shape("smoothing_loss", feats.len(), preds.len()));
    }
    if !kernel_sigma.is_finite() || kernel_sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "smoothing kernel sigma must be positive, got {kernel_sigma}"
        )));
    }
    let dim = feats[0].len();
    for v in feats {
        if v.len() != dim {
            return Err(Error::shape("smoothing_loss feature dimension", dim, v.len()));
        }
    }
    let inv_two_sig2 = 1.0 / (2.0 * kernel_sigma * kernel_sigma);
    let n = feats.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let w = (-euclidean_sq(&feats[i], &feats[j]) * inv_two_sig2).exp();
            let d = preds[i] - preds[j];
            value += 0.5 * w * d * d;
            grad[i] += 2.0 * w * d;
        }
    }
    Ok(SmoothingLoss {
        value,
        grad_preds: grad,
    })
}

/// Inputs for the ranking term: pair-order probabilities and the true age
/// differences they are scored against.
#[derive(Debug, Clone)]
pub struct RankInputs {
    pub probs: Vec<f64>,
    pub diff_targets: Vec<f64>,
}

/// Inputs for the adversarial term: discriminator probabilities and true
/// domain labels (0 = source, 1 = target).
#[derive(Debug, Clone)]
pub struct DomainInputs {
    pub probs: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Per-layer feature batches for the MMD term.
#[derive(Debug, Clone)]
pub struct MmdLayerInputs {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MmdInputs {
    pub layers: Vec<MmdLayerInputs>,
    pub kernel: KernelConfig,
}

#[derive(Debug, Clone)]
pub struct IdentityInputs {
    pub f1_ab: Vec<f64>,
    pub f1_ba: Vec<f64>,
    pub f1_aa: Vec<f64>,
    pub f2_ab: Vec<f64>,
    pub f2_ba: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SmoothingInputs {
    pub feats: Vec<Vec<f64>>,
    pub preds: Vec<f64>,
    pub kernel_sigma: f64,
}

/// Batch inputs for [`composite_loss`]. A term's inputs are required
/// exactly when its weight (and, for adaptation, the configured mode)
/// enables it; disabled terms contribute zero and may be `None`.
#[derive(Debug, Clone, Default)]
pub struct CompositeInputs {
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub rank: Option<RankInputs>,
    pub domain: Option<DomainInputs>,
    pub mmd: Option<MmdInputs>,
    pub identity: Option<IdentityInputs>,
    pub smoothing: Option<SmoothingInputs>,
}

/// Unweighted per-term values of the composite objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermValues {
    pub regression: f64,
    pub rank: f64,
    pub adaptation: f64,
    pub identity: f64,
    pub smoothing: f64,
}

impl TermValues {
    pub fn all_finite(&self) -> bool {
        [
            self.regression,
            self.rank,
            self.adaptation,
            self.identity,
            self.smoothing,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Gradients of the weighted composite objective with respect to each
/// term's direct inputs. Weights are already folded in, so these seed
/// backward passes directly.
#[derive(Debug, Clone, Default)]
pub struct CompositeGrads {
    pub predictions: Vec<f64>,
    pub rank_probs: Option<Vec<f64>>,
    pub domain_probs: Option<Vec<f64>>,
    /// Per MMD layer: (source gradients, target gradients).
    pub mmd: Option<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    pub identity: Option<IdentityGrads>,
    pub smoothing_preds: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: f64,
    pub terms: TermValues,
    pub grads: CompositeGrads,
}

/// `L_reg + alpha L_rank + gamma L_adapt + beta L_id + sigma L_smooth`.
pub fn composite_loss(inputs: &CompositeInputs, config: &CompositeLossConfig) -> Result<CompositeLoss> {
    config.validate()?;
    let mut terms = TermValues::default();
    let mut grads = CompositeGrads::default();

    let reg = regression_loss(&inputs.predictions, &inputs.targets, config.regression_norm)?;
    terms.regression = reg.value;
    grads.predictions = reg.grad;
    let mut total = reg.value;

    if config.alpha > 0.0 {
        let rank = inputs.rank.as_ref().ok_or(Error::MissingLossInput("rank"))?;
        let lv = ranking_loss(&rank.probs, &rank.diff_targets)?;
        terms.rank = lv.value;
        total += config.alpha * lv.value;
        grads.rank_probs = Some(lv.grad.iter().map(|g| config.alpha * g).collect());
    }

    if config.gamma > 0.0 {
        match config.adaptation {
            Adaptation::None => {}
            Adaptation::Adversarial => {
                let dom = inputs
                    .domain
                    .as_ref()
                    .ok_or(Error::MissingLossInput("adversarial domain"))?;
                let lv = bce_loss(&dom.probs, &dom.labels)?;
                terms.adaptation = lv.value;
                total += config.gamma * lv.value;
                grads.domain_probs = Some(lv.grad.iter().map(|g| config.gamma * g).collect());
            }
            Adaptation::Mmd => {
                let mmd = inputs.mmd.as_ref().ok_or(Error::MissingLossInput("mmd"))?;
                if mmd.layers.is_empty() {
                    return Err(Error::MissingLossInput("mmd layers"));
                }
                let mut layer_grads = Vec::with_capacity(mmd.layers.len());
                for layer in &mmd.layers {
                    let lv = mmd_loss(&layer.source, &layer.target, &mmd.kernel)?;
                    terms.adaptation += lv.value;
                    let gs = lv
                        .grad_source
                        .into_iter()
                        .map(|g| g.into_iter().map(|v| config.gamma * v).collect())
                        .collect();
                    let gt = lv
                        .grad_target
                        .into_iter()
                        .map(|g| g.into_iter().map(|v| config.gamma * v).collect())
                        .collect();
                    layer_grads.push((gs, gt));
                }
                total += config.gamma * terms.adaptation;
                grads.mmd = Some(layer_grads);
            }
        }
    }

    if config.beta > 0.0 {
        let id = inputs
            .identity
            .as_ref()
            .ok_or(Error::MissingLossInput("identity"))?;
        let lv = identity_loss(&id.f1_ab, &id.f1_ba, &id.f1_aa, &id.f2_ab, &id.f2_ba)?;
        terms.identity = lv.value;
        total += config.beta * lv.value;
        let scale = |v: Vec<f64>| v.into_iter().map(|g| config.beta * g).collect();
        grads.identity = Some(IdentityGrads {
            f1_ab: scale(lv.grads.f1_ab),
            f1_ba: scale(lv.grads.f1_ba),
            f1_aa: scale(lv.grads.f1_aa),
            f2_ab: scale(lv.grads.f2_ab),
            f2_ba: scale(lv.grads.f2_ba),
        });
    }

    if config.sigma_smooth > 0.0 {
        let sm = inputs
            .smoothing
            .as_ref()
            .ok_or(Error::MissingLossInput("smoothing"))?;
        let lv = smoothing_loss(&sm.feats, &sm.preds, sm.kernel_sigma)?;
        terms.smoothing = lv.value;
        total += config.sigma_smooth * lv.value;
        grads.smoothing_preds = Some(
            lv.grad_preds
                .iter()
                .map(|g| config.sigma_smooth * g)
                .collect(),
        );
    }

    Ok(CompositeLoss {
        total,
        terms,
        grads,
    })
}
