//! Training loops and evaluation for every model variant: source-only
//! baselines, DANN- and MMD-adapted models, and their pairwise versions
//! with ranking and identity constraints.
//!
//! Each step draws one source and one target minibatch of equal size,
//! evaluates the composite objective, and routes the returned gradients
//! through the recorded tapes: regression-path parameters update with
//! Adam, the domain discriminator with SGD, and discriminator gradients
//! reach the feature path only through the gradient-reversal layer.
//! Target labels are never read by training; they feed evaluation only.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_pairs, split_train_val, Example, NormalizationMap};
use crate::error::{Error, Result};
use crate::loss::{
    composite_loss, median_heuristic_bandwidth, Adaptation, CompositeInputs, CompositeLossConfig,
    DomainInputs, IdentityInputs, KernelConfig, MmdInputs, MmdLayerInputs, RankInputs,
    SmoothingInputs, TermValues,
};
use crate::model::{
    pair_input, AdaptLayerSet, ForwardPass, LayerLoc, Mode, ModelAssembly, ModelConfig,
};
use crate::net::{GradSeed, Parameters};
use crate::optim::OptimizerState;

const VAL_FRACTION: f64 = 0.2;
const EVAL_PAIR_SEED: u64 = 7919;
const GRADIENT_REVERSAL_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SourceOnly,
    Dann,
    Mmd,
    PairwiseSourceOnly,
    PairwiseDann,
    PairwiseMmd,
}

impl Variant {
    pub fn mode(self) -> Mode {
        match self {
            Variant::SourceOnly | Variant::Dann | Variant::Mmd => Mode::Single,
            _ => Mode::Pairwise,
        }
    }

    pub fn adaptation(self) -> Adaptation {
        match self {
            Variant::SourceOnly | Variant::PairwiseSourceOnly => Adaptation::None,
            Variant::Dann | Variant::PairwiseDann => Adaptation::Adversarial,
            Variant::Mmd | Variant::PairwiseMmd => Adaptation::Mmd,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Dann => "dann",
            Variant::Mmd => "mmd",
            Variant::PairwiseSourceOnly => "pairwise_source_only",
            Variant::PairwiseDann => "pairwise_dann",
            Variant::PairwiseMmd => "pairwise_mmd",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "source_only" => Some(Variant::SourceOnly),
            "dann" => Some(Variant::Dann),
            "mmd" => Some(Variant::Mmd),
            "pairwise_source_only" => Some(Variant::PairwiseSourceOnly),
            "pairwise_dann" => Some(Variant::PairwiseDann),
            "pairwise_mmd" => Some(Variant::PairwiseMmd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: CompositeLossConfig,
    pub adapt_layers: AdaptLayerSet,
    pub normalize_labels: bool,
    /// Epochs of source-only task training before the adaptation and
    /// smoothing terms switch on. 0 trains jointly from scratch.
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        let loss = CompositeLossConfig {
            adaptation: variant.adaptation(),
            ..Default::default()
        };
        Self {
            variant,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            loss,
            adapt_layers: AdaptLayerSet::new(["conv_proxy", "fc1"]).expect("valid defaults"),
            normalize_labels: true,
            pretrain_epochs: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            if self.pretrain_epochs != 0 {
                return Err(Error::InvalidConfig(
                    "pretrain_epochs must be 0 when epochs is 0".into(),
                ));
            }
        } else if self.pretrain_epochs >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "pretrain_epochs {} must be < epochs {}",
                self.pretrain_epochs, self.epochs
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        self.loss.validate()?;
        if self.loss.adaptation != self.variant.adaptation() {
            return Err(Error::InvalidConfig(format!(
                "loss adaptation {:?} does not match variant {}",
                self.loss.adaptation,
                self.variant.as_str()
            )));
        }
        Ok(())
    }
}

/// One evaluated epoch, all values in years.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub source_train_mae: f64,
    pub source_val_mae: f64,
    pub target_mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub rows: Vec<EpochRow>,
}

impl MetricsReport {
    /// Best epoch by source validation MAE. Target labels must not drive
    /// model selection, so target MAE is never consulted.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows.iter().min_by(|a, b| {
            a.source_val_mae
                .partial_cmp(&b.source_val_mae)
                .expect("finite MAE")
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,source_train_mae,source_val_mae,target_mae\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.epoch, r.source_train_mae, r.source_val_mae, r.target_mae
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>14}  {:>12}  {:>12}\n",
            "epoch", "s_train_loss", "s_val_loss", "target_loss"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5}  {:>14.3}  {:>12.3}  {:>12.3}",
                r.epoch, r.source_train_mae, r.source_val_mae, r.target_mae
            );
        }
        if let Some(best) = self.best() {
            let _ = writeln!(
                out,
                "best epoch {} by s_val_loss: s_val {:.3}, target {:.3}",
                best.epoch, best.source_val_mae, best.target_mae
            );
        }
        out
    }
}

/// A source train/validation split plus the unlabeled-for-training target
/// pool, validated for uniform dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source_train: Vec<Example>,
    pub source_val: Vec<Example>,
    pub target: Vec<Example>,
}

impl Dataset {
    /// Splits source 80/20 by seeded shuffle and validates the result.
    pub fn from_domains(source: Vec<Example>, target: Vec<Example>, seed: u64) -> Result<Self> {
        let (source_train, source_val) = split_train_val(&source, VAL_FRACTION, seed)?;
        let ds = Self {
            source_train,
            source_val,
            target,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_train.len() < 2 || self.source_val.is_empty() || self.target.is_empty() {
            return Err(Error::InvalidConfig(
                "dataset needs source train/val and target examples".into(),
            ));
        }
        let dim = self.source_train[0].features.len();
        for e in self
            .source_train
            .iter()
            .chain(&self.source_val)
            .chain(&self.target)
        {
            if e.features.len() != dim {
                return Err(Error::shape(
                    format!("feature dimension of {}", e.id),
                    dim,
                    e.features.len(),
                ));
            }
        }
        for e in self.source_train.iter().chain(&self.source_val) {
            if e.age.is_none() {
                return Err(Error::InvalidConfig(format!(
                    "source example {} is unlabeled",
                    e.id
                )));
            }
        }
        // target labels are hidden from training but the per-epoch target
        // MAE needs something to score against
        if self.target.iter().filter(|e| e.age.is_some()).count() < 2 {
            return Err(Error::InvalidConfig(
                "target MAE reporting needs at least two labeled target examples".into(),
            ));
        }
        Ok(())
    }

    /// Labeled target examples, the only ones evaluation can score.
    pub fn labeled_target(&self) -> Vec<Example> {
        self.target
            .iter()
            .filter(|e| e.age.is_some())
            .cloned()
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.source_train[0].features.len()
    }
}

/// Mean absolute error in years. Single-mode models score absolute ages;
/// pairwise models score predicted differences over a seeded fixed pair
/// set. Labels are required on every example that is scored.
pub fn evaluate_mae(model: &ModelAssembly, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch("evaluate_mae"));
    }
    match model.mode {
        Mode::Single => {
            let mut total = 0.0;
            for e in examples {
                let age = e.age.ok_or_else(|| {
                    Error::InvalidConfig(format!("example {} has no label to evaluate", e.id))
                })?;
                total += (model.predict_single(&e.features)? - age).abs();
            }
            Ok(total / examples.len() as f64)
        }
        Mode::Pairwise => {
            let count = examples.len().clamp(2, 256);
            let pairs = sample_pairs(examples, count, EVAL_PAIR_SEED, true)?;
            let mut total = 0.0;
            for p in &pairs {
                let truth = p.diff.expect("labeled pairs");
                let (pred, _) =
                    model.predict_pair(&examples[p.a].features, &examples[p.b].features)?;
                total += (pred - truth).abs();
            }
            Ok(total / pairs.len() as f64)
        }
    }
}

struct Accum {
    trunk: Parameters,
    regression: Parameters,
    rank: Option<Parameters>,
    disc: Option<Parameters>,
}

impl Accum {
    fn zeros(assembly: &ModelAssembly) -> Self {
        Self {
            trunk: Parameters::zeros_like(&assembly.trunk.spec),
            regression: Parameters::zeros_like(&assembly.regression.spec),
            rank: assembly
                .rank_head
                .as_ref()
                .map(|n| Parameters::zeros_like(&n.spec)),
            disc: assembly
                .discriminator
                .as_ref()
                .map(|n| Parameters::zeros_like(&n.spec)),
        }
    }
}

struct Optimizers {
    trunk: OptimizerState,
    regression: OptimizerState,
    rank: Option<OptimizerState>,
    disc: Option<OptimizerState>,
}

impl Optimizers {
    /// Adam drives the regression path, SGD the adversarial discriminator.
    fn new(assembly: &ModelAssembly, lr: f64) -> Self {
        Self {
            trunk: OptimizerState::adam(lr),
            regression: OptimizerState::adam(lr),
            rank: assembly.rank_head.as_ref().map(|_| OptimizerState::adam(lr)),
            disc: assembly
                .discriminator
                .as_ref()
                .map(|_| OptimizerState::sgd(lr)),
        }
    }
}

/// Gradient seeds for one recorded pass: a scalar on the regression
/// output, an optional scalar on the rank probability, and adaptation
/// seeds on named layers.
#[derive(Default)]
struct PassSeeds {
    out_seed: f64,
    rank_seed: Option<f64>,
    layer_seeds: Vec<(String, Vec<f64>)>,
}

impl PassSeeds {
    fn is_empty(&self) -> bool {
        self.out_seed == 0.0 && self.rank_seed.is_none() && self.layer_seeds.is_empty()
    }
}

/// Backpropagates one pass into the accumulators, threading adaptation
/// seeds into the right network at the right layer.
fn backprop_pass(
    assembly: &ModelAssembly,
    pass: &ForwardPass,
    seeds: PassSeeds,
    accum: &mut Accum,
) -> Result<()> {
    if seeds.is_empty() {
        return Ok(());
    }
    let reg = &assembly.regression;
    let out_idx = reg.spec.num_layers() - 1;
    let mut reg_seeds = vec![GradSeed {
        layer: out_idx,
        grad: vec![seeds.out_seed],
    }];

    if let Some(rank_seed) = seeds.rank_seed {
        let head = assembly
            .rank_head
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("rank gradient without rank head".into()))?;
        let tape = pass
            .rank_tape
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("rank gradient without rank tape".into()))?;
        let (head_grads, fc3_grad) = head.backward(tape, &[rank_seed])?;
        accum
            .rank
            .as_mut()
            .expect("rank accumulator")
            .add_scaled(&head_grads, 1.0)?;
        let fc3_idx = reg.spec.layer_index("fc3").expect("fc3 exists");
        reg_seeds.push(GradSeed {
            layer: fc3_idx,
            grad: fc3_grad,
        });
    }

    let mut trunk_extra: Vec<GradSeed> = Vec::new();
    for (name, grad) in seeds.layer_seeds {
        match assembly.layer_location(&name) {
            Some(LayerLoc::Regression(idx)) => reg_seeds.push(GradSeed { layer: idx, grad }),
            Some(LayerLoc::Trunk(idx)) => trunk_extra.push(GradSeed { layer: idx, grad }),
            None => return Err(Error::UnknownLayer(name)),
        }
    }

    let (reg_grads, trunk_out_grad) = reg.backward_seeded(&pass.reg_tape, &reg_seeds)?;
    accum.regression.add_scaled(&reg_grads, 1.0)?;

    let trunk_last = assembly.trunk.spec.num_layers() - 1;
    let mut trunk_seeds = vec![GradSeed {
        layer: trunk_last,
        grad: trunk_out_grad,
    }];
    trunk_seeds.extend(trunk_extra);
    let (trunk_grads, _) = assembly
        .trunk
        .backward_seeded(&pass.trunk_tape, &trunk_seeds)?;
    accum.trunk.add_scaled(&trunk_grads, 1.0)?;
    Ok(())
}

/// Everything assembled for one optimization step: inputs and passes hold
/// source items first, then target items.
struct StepBatch {
    inputs: Vec<Vec<f64>>,
    passes: Vec<ForwardPass>,
    n_source: usize,
    /// Regression targets in model space for the source items.
    source_targets: Vec<f64>,
    /// True age differences in years for the source pairs (pairwise only).
    source_diffs_years: Option<Vec<f64>>,
}

struct Phase {
    adapt_on: bool,
    smooth_on: bool,
}

fn effective_loss_config(config: &TrainConfig, phase: &Phase) -> CompositeLossConfig {
    let mut loss = config.loss;
    if config.variant.mode() == Mode::Single {
        // rank and identity terms need pairs
        loss.alpha = 0.0;
        loss.beta = 0.0;
    }
    if !phase.adapt_on {
        loss.gamma = 0.0;
    }
    if !phase.smooth_on {
        loss.sigma_smooth = 0.0;
    }
    loss
}

struct StepOutcome {
    total: f64,
    terms: TermValues,
    disc_updated: bool,
}

fn run_step(
    assembly: &ModelAssembly,
    config: &TrainConfig,
    phase: &Phase,
    batch: &StepBatch,
    accum: &mut Accum,
) -> Result<StepOutcome> {
    let loss_cfg = effective_loss_config(config, phase);
    let pairwise = assembly.mode == Mode::Pairwise;
    let n_all = batch.inputs.len();
    let n_source = batch.n_source;

    let mut inputs = CompositeInputs {
        predictions: batch.passes[..n_source]
            .iter()
            .map(|p| p.raw_output)
            .collect(),
        targets: batch.source_targets.clone(),
        ..Default::default()
    };

    if loss_cfg.alpha > 0.0 {
        let probs = batch.passes[..n_source]
            .iter()
            .map(|p| p.rank_prob.ok_or(Error::MissingLossInput("rank head")))
            .collect::<Result<Vec<f64>>>()?;
        inputs.rank = Some(RankInputs {
            probs,
            diff_targets: batch
                .source_diffs_years
                .clone()
                .ok_or(Error::MissingLossInput("pair differences"))?,
        });
    }

    // identity constraint: extra swapped and self passes for every pair
    let mut id_ba_passes: Vec<ForwardPass> = Vec::new();
    let mut id_aa_passes: Vec<ForwardPass> = Vec::new();
    if pairwise && loss_cfg.beta > 0.0 {
        let dim = assembly.feature_dim;
        let mut f1_ab = Vec::with_capacity(n_all);
        let mut f1_ba = Vec::with_capacity(n_all);
        let mut f1_aa = Vec::with_capacity(n_all);
        let mut f2_ab = Vec::with_capacity(n_all);
        let mut f2_ba = Vec::with_capacity(n_all);
        for (input, pass) in batch.inputs.iter().zip(&batch.passes) {
            let (a, b) = input.split_at(dim);
            let ba = assembly.forward_input(&pair_input(b, a))?;
            let aa = assembly.forward_input(&pair_input(a, a))?;
            f1_ab.push(pass.raw_output);
            f1_ba.push(ba.raw_output);
            f1_aa.push(aa.raw_output);
            f2_ab.push(pass.rank_prob.ok_or(Error::MissingLossInput("rank head"))?);
            f2_ba.push(ba.rank_prob.ok_or(Error::MissingLossInput("rank head"))?);
            id_ba_passes.push(ba);
            id_aa_passes.push(aa);
        }
        inputs.identity = Some(IdentityInputs {
            f1_ab,
            f1_ba,
            f1_aa,
            f2_ab,
            f2_ba,
        });
    }

    // adversarial discriminator forward
    let mut disc_tapes: Vec<crate::net::Tape> = Vec::new();
    if phase.adapt_on && loss_cfg.adaptation == Adaptation::Adversarial && loss_cfg.gamma > 0.0 {
        let disc = assembly
            .discriminator
            .as_ref()
            .ok_or(Error::MissingLossInput("discriminator"))?;
        let layers = assembly
            .disc_layers
            .as_ref()
            .ok_or(Error::MissingLossInput("discriminator layers"))?;
        let mut probs = Vec::with_capacity(n_all);
        let mut labels = Vec::with_capacity(n_all);
        for (i, pass) in batch.passes.iter().enumerate() {
            let views = assembly.adapt_feature_views(pass, layers);
            let concat: Vec<f64> = views.iter().flat_map(|v| v.iter().copied()).collect();
            let (out, tape) = disc.forward(&concat)?;
            probs.push(out[0]);
            labels.push(if i < n_source { 0.0 } else { 1.0 });
            disc_tapes.push(tape);
        }
        inputs.domain = Some(DomainInputs { probs, labels });
    }

    if phase.adapt_on && loss_cfg.adaptation == Adaptation::Mmd && loss_cfg.gamma > 0.0 {
        let layers = &config.adapt_layers;
        let mut per_layer = Vec::with_capacity(layers.names().len());
        for (li, _) in layers.names().iter().enumerate() {
            let mut source = Vec::with_capacity(n_source);
            let mut target = Vec::with_capacity(n_all - n_source);
            for (i, pass) in batch.passes.iter().enumerate() {
                let views = assembly.adapt_feature_views(pass, layers);
                let v = views[li].to_vec();
                if i < n_source {
                    source.push(v);
                } else {
                    target.push(v);
                }
            }
            per_layer.push(MmdLayerInputs { source, target });
        }
        inputs.mmd = Some(MmdInputs {
            layers: per_layer,
            kernel: KernelConfig::default(),
        });
    }

    if phase.smooth_on && loss_cfg.sigma_smooth > 0.0 {
        let refs: Vec<&[f64]> = batch.inputs.iter().map(|v| v.as_slice()).collect();
        let sigma = median_heuristic_bandwidth(&refs);
        inputs.smoothing = Some(SmoothingInputs {
            feats: batch.inputs.clone(),
            preds: batch.passes.iter().map(|p| p.raw_output).collect(),
            kernel_sigma: sigma,
        });
    }

    let composite = composite_loss(&inputs, &loss_cfg)?;
    if !composite.total.is_finite() || !composite.terms.all_finite() {
        return Err(Error::NonFinite(format!(
            "composite loss (terms: {:?})",
            composite.terms
        )));
    }

    // discriminator backward: SGD trains the discriminator on the domain
    // loss; its input gradient reaches the feature path only through the
    // gradient-reversal layer (applied after the feature sweep so reversed
    // gradients are exactly -lambda times the unreversed ones)
    let mut adv_seeds_per_item: Vec<Vec<(String, Vec<f64>)>> = vec![Vec::new(); n_all];
    let mut disc_updated = false;
    if let Some(domain_grads) = &composite.grads.domain_probs {
        let disc = assembly.discriminator.as_ref().expect("checked above");
        let layers = assembly.disc_layers.as_ref().expect("checked above");
        for (i, (tape, g)) in disc_tapes.iter().zip(domain_grads).enumerate() {
            let (disc_grads, input_grad) = disc.backward(tape, &[*g])?;
            accum
                .disc
                .as_mut()
                .ok_or(Error::MissingLossInput("discriminator accumulator"))?
                .add_scaled(&disc_grads, 1.0)?;
            let mut offset = 0;
            for name in layers.names() {
                let width = crate::model::adapt_layer_width(name).expect("valid layer");
                adv_seeds_per_item[i]
                    .push((name.clone(), input_grad[offset..offset + width].to_vec()));
                offset += width;
            }
        }
        disc_updated = true;
    }

    // feature-path backward per item
    for (i, pass) in batch.passes.iter().enumerate() {
        let mut seeds = PassSeeds::default();
        if i < n_source {
            seeds.out_seed += composite.grads.predictions[i];
            if let Some(rank_grads) = &composite.grads.rank_probs {
                seeds.rank_seed = Some(rank_grads[i]);
            }
        }
        if let Some(sm) = &composite.grads.smoothing_preds {
            seeds.out_seed += sm[i];
        }
        if let Some(id) = &composite.grads.identity {
            seeds.out_seed += id.f1_ab[i];
            let r = seeds.rank_seed.unwrap_or(0.0) + id.f2_ab[i];
            seeds.rank_seed = Some(r);
        }
        if let Some(mmd_grads) = &composite.grads.mmd {
            for (li, name) in config.adapt_layers.names().iter().enumerate() {
                let (gs, gt) = &mmd_grads[li];
                let grad = if i < n_source {
                    gs[i].clone()
                } else {
                    gt[i - n_source].clone()
                };
                seeds.layer_seeds.push((name.clone(), grad));
            }
        }
        backprop_pass(assembly, pass, seeds, accum)?;

        // adversarial contribution: unreversed sweep, then the reversal
        // scales the whole result by -lambda
        if !adv_seeds_per_item[i].is_empty() {
            let adv_seeds = PassSeeds {
                out_seed: 0.0,
                rank_seed: None,
                layer_seeds: adv_seeds_per_item[i].drain(..).collect(),
            };
            let mut unreversed = Accum::zeros(assembly);
            backprop_pass(assembly, pass, adv_seeds, &mut unreversed)?;
            accum
                .trunk
                .add_scaled(&unreversed.trunk, -GRADIENT_REVERSAL_LAMBDA)?;
            accum
                .regression
                .add_scaled(&unreversed.regression, -GRADIENT_REVERSAL_LAMBDA)?;
        }
    }

    // identity swapped/self passes
    if let Some(id) = &composite.grads.identity {
        for (i, ba) in id_ba_passes.iter().enumerate() {
            let seeds = PassSeeds {
                out_seed: id.f1_ba[i],
                rank_seed: Some(id.f2_ba[i]),
                layer_seeds: Vec::new(),
            };
            backprop_pass(assembly, ba, seeds, accum)?;
        }
        for (i, aa) in id_aa_passes.iter().enumerate() {
            let seeds = PassSeeds {
                out_seed: id.f1_aa[i],
                rank_seed: None,
                layer_seeds: Vec::new(),
            };
            backprop_pass(assembly, aa, seeds, accum)?;
        }
    }

    Ok(StepOutcome {
        total: composite.total,
        terms: composite.terms,
        disc_updated,
    })
}

/// Trains one model per the config. Target labels are read only by the
/// per-epoch evaluation, never by the optimization path.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<(ModelAssembly, MetricsReport)> {
    config.validate()?;
    data.validate()?;
    let mode = config.variant.mode();
    let adaptation = config.variant.adaptation();
    let feature_dim = data.feature_dim();

    let normalization = if config.normalize_labels {
        let labels: Vec<f64> = data
            .source_train
            .iter()
            .map(|e| e.age.expect("validated labels"))
            .collect();
        Some(NormalizationMap::fit(&labels)?)
    } else {
        None
    };

    let rank_head =
        mode == Mode::Pairwise && (config.loss.alpha > 0.0 || config.loss.beta > 0.0);
    let discriminator_for = if adaptation == Adaptation::Adversarial && config.loss.gamma > 0.0 {
        Some(config.adapt_layers.clone())
    } else {
        None
    };
    let mut assembly = ModelAssembly::build(&ModelConfig {
        feature_dim,
        mode,
        rank_head,
        discriminator_for,
        normalization,
        seed: config.seed,
    })?;
    let mut optimizers = Optimizers::new(&assembly, config.learning_rate);
    let mut loop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = MetricsReport::default();
    let mut global_step = 0usize;
    let target_eval = data.labeled_target();

    for epoch in 1..=config.epochs {
        let past_pretrain = epoch > config.pretrain_epochs;
        let phase = Phase {
            adapt_on: past_pretrain && adaptation != Adaptation::None && config.loss.gamma > 0.0,
            smooth_on: past_pretrain && config.loss.sigma_smooth > 0.0,
        };

        let mut order: Vec<usize> = (0..data.source_train.len()).collect();
        order.shuffle(&mut loop_rng);
        let steps = (data.source_train.len() / config.batch_size).max(1);

        for step in 0..steps {
            let start = step * config.batch_size;
            let end = (start + config.batch_size).min(data.source_train.len());
            let source_idx = &order[start..end];

            let batch = match mode {
                Mode::Single => {
                    let mut inputs: Vec<Vec<f64>> = Vec::new();
                    let mut targets = Vec::new();
                    for &i in source_idx {
                        let e = &data.source_train[i];
                        inputs.push(e.features.clone());
                        targets.push(assembly.norm_age(e.age.expect("validated labels")));
                    }
                    let n_source = inputs.len();
                    for _ in 0..n_source {
                        let j = loop_rng.gen_range(0..data.target.len());
                        inputs.push(data.target[j].features.clone());
                    }
                    let passes = inputs
                        .iter()
                        .map(|inp| assembly.forward_input(inp))
                        .collect::<Result<Vec<_>>>()?;
                    StepBatch {
                        inputs,
                        passes,
                        n_source,
                        source_targets: targets,
                        source_diffs_years: None,
                    }
                }
                Mode::Pairwise => {
                    let n_pairs = source_idx.len();
                    let source_pairs =
                        sample_pairs(&data.source_train, n_pairs, loop_rng.gen(), true)?;
                    let target_pairs =
                        sample_pairs(&data.target, n_pairs, loop_rng.gen(), false)?;
                    let mut inputs = Vec::with_capacity(2 * n_pairs);
                    let mut targets = Vec::with_capacity(n_pairs);
                    let mut diffs = Vec::with_capacity(n_pairs);
                    for p in &source_pairs {
                        let a = &data.source_train[p.a];
                        let b = &data.source_train[p.b];
                        inputs.push(pair_input(&a.features, &b.features));
                        let diff = p.diff.expect("labeled source pairs");
                        targets.push(assembly.norm_diff(diff));
                        diffs.push(diff);
                    }
                    for p in &target_pairs {
                        let a = &data.target[p.a];
                        let b = &data.target[p.b];
                        inputs.push(pair_input(&a.features, &b.features));
                    }
                    let passes = inputs
                        .iter()
                        .map(|inp| assembly.forward_input(inp))
                        .collect::<Result<Vec<_>>>()?;
                    StepBatch {
                        inputs,
                        passes,
                        n_source: n_pairs,
                        source_targets: targets,
                        source_diffs_years: Some(diffs),
                    }
                }
            };

            let mut accum = Accum::zeros(&assembly);
            let outcome = run_step(&assembly, config, &phase, &batch, &mut accum).map_err(
                |e| match e {
                    // numeric blowups become divergence diagnostics; other
                    // errors (shape, config) pass through unchanged
                    Error::NonFinite(detail) => Error::TrainingDiverged {
                        step: global_step,
                        detail,
                    },
                    Error::ProbabilityOutOfRange(p) => Error::TrainingDiverged {
                        step: global_step,
                        detail: format!("probability out of range: {p}"),
                    },
                    other => other,
                },
            )?;
            if !outcome.total.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: global_step,
                    detail: format!("non-finite loss (terms: {:?})", outcome.terms),
                });
            }

            optimizers
                .trunk
                .step(&mut assembly.trunk.params, &accum.trunk)?;
            optimizers
                .regression
                .step(&mut assembly.regression.params, &accum.regression)?;
            if let (Some(opt), Some(head), Some(grads)) = (
                optimizers.rank.as_mut(),
                assembly.rank_head.as_mut(),
                accum.rank.as_ref(),
            ) {
                opt.step(&mut head.params, grads)?;
            }
            if outcome.disc_updated {
                if let (Some(opt), Some(disc), Some(grads)) = (
                    optimizers.disc.as_mut(),
                    assembly.discriminator.as_mut(),
                    accum.disc.as_ref(),
                ) {
                    opt.step(&mut disc.params, grads)?;
                }
            }
            global_step += 1;
        }

        let row = EpochRow {
            epoch,
            source_train_mae: evaluate_mae(&assembly, &data.source_train)?,
            source_val_mae: evaluate_mae(&assembly, &data.source_val)?,
            target_mae: evaluate_mae(&assembly, &target_eval)?,
        };
        if !row.source_train_mae.is_finite()
            || !row.source_val_mae.is_finite()
            || !row.target_mae.is_finite()
        {
            return Err(Error::TrainingDiverged {
                step: global_step,
                detail: format!("non-finite metrics at epoch {epoch}"),
            });
        }
        report.rows.push(row);
    }

    Ok((assembly, report))
}

/// One cell of the experiment grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub variant: Variant,
    pub gamma: Option<f64>,
    pub layers: Option<AdaptLayerSet>,
    pub rank: Option<bool>,
}

impl GridCell {
    pub fn label(&self) -> String {
        let mut parts = vec![self.variant.as_str().to_string()];
        match &self.layers {
            Some(set) => parts.push(set.label()),
            None if self.variant.adaptation() != Adaptation::None => parts.push("none".into()),
            None => {}
        }
        if let Some(g) = self.gamma {
            parts.push(format!("gamma={g}"));
        }
        if let Some(r) = self.rank {
            parts.push(if r { "rank".into() } else { "no_rank".into() });
        }
        parts.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub cell: GridCell,
    pub source_val_mae: Option<f64>,
    pub target_mae: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,layers,gamma,rank,source_val_mae,target_mae,status\n");
        for r in &self.rows {
            let layers = match &r.cell.layers {
                Some(set) => set.label(),
                None if r.cell.variant.adaptation() != Adaptation::None => "none".into(),
                None => String::new(),
            };
            let gamma = r.cell.gamma.map(|g| g.to_string()).unwrap_or_default();
            let rank = r
                .cell
                .rank
                .map(|b| b.to_string())
                .unwrap_or_default();
            let sv = r.source_val_mae.map(|v| v.to_string()).unwrap_or_default();
            let tm = r.target_mae.map(|v| v.to_string()).unwrap_or_default();
            let status = match &r.error {
                Some(e) => format!("failed: {e}"),
                None => "ok".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.cell.variant.as_str(),
                layers,
                gamma,
                rank,
                sv,
                tm,
                status
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<44}  {:>12}  {:>12}\n",
            "cell", "s_val_loss", "target_loss"
        );
        for r in &self.rows {
            let (sv, tm) = match (r.source_val_mae, r.target_mae) {
                (Some(s), Some(t)) => (format!("{s:.3}"), format!("{t:.3}")),
                _ => ("failed".into(), "failed".into()),
            };
            let _ = writeln!(out, "{:<44}  {:>12}  {:>12}", r.cell.label(), sv, tm);
        }
        out
    }
}

/// Grid axes. Empty axes fall back to the base config's value.
#[derive(Debug, Clone, Default)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    pub gammas: Vec<f64>,
    /// `None` entries request a no-adaptation row.
    pub layer_sets: Vec<Option<AdaptLayerSet>>,
    pub rank: Vec<bool>,
}

fn grid_cells(base: &TrainConfig, grid: &GridSpec) -> Result<Vec<GridCell>> {
    if grid.variants.is_empty() {
        return Err(Error::InvalidConfig("grid needs at least one variant".into()));
    }
    let mut cells = Vec::new();
    let mut seen = BTreeSet::new();
    for &variant in &grid.variants {
        let adapt = variant.adaptation();
        let layer_axis: Vec<Option<AdaptLayerSet>> = if adapt == Adaptation::None {
            vec![None]
        } else if grid.layer_sets.is_empty() {
            vec![Some(base.adapt_layers.clone())]
        } else {
            grid.layer_sets.clone()
        };
        for layers in &layer_axis {
            let gamma_axis: Vec<Option<f64>> = if adapt == Adaptation::None || layers.is_none() {
                vec![None]
            } else if grid.gammas.is_empty() {
                vec![Some(base.loss.gamma)]
            } else {
                grid.gammas.iter().copied().map(Some).collect()
            };
            for gamma in &gamma_axis {
                let rank_axis: Vec<Option<bool>> = if variant.mode() == Mode::Pairwise {
                    if grid.rank.is_empty() {
                        vec![None]
                    } else {
                        grid.rank.iter().copied().map(Some).collect()
                    }
                } else {
                    vec![None]
                };
                for rank in rank_axis {
                    let cell = GridCell {
                        variant,
                        gamma: *gamma,
                        layers: layers.clone(),
                        rank,
                    };
                    if seen.insert(cell.label()) {
                        cells.push(cell);
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn cell_config(base: &TrainConfig, cell: &GridCell) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.variant = cell.variant;
    cfg.loss.adaptation = cell.variant.adaptation();
    match &cell.layers {
        Some(set) => {
            cfg.adapt_layers = set.clone();
            if let Some(g) = cell.gamma {
                cfg.loss.gamma = g;
            }
        }
        None => {
            // no-adaptation row: the adaptation term is switched off
            cfg.loss.gamma = 0.0;
        }
    }
    if let Some(rank) = cell.rank {
        cfg.loss.alpha = if rank {
            if base.loss.alpha > 0.0 {
                base.loss.alpha
            } else {
                0.3
            }
        } else {
            0.0
        };
    }
    cfg
}

/// Runs every grid cell with the shared seed and data, in `jobs` threads,
/// and returns the comparison table sorted by target MAE (failed cells
/// last). Per-cell failures do not abort the grid.
pub fn run_experiment_grid(
    base: &TrainConfig,
    data: &Dataset,
    grid: &GridSpec,
    jobs: usize,
) -> Result<GridReport> {
    let cells = grid_cells(base, grid)?;
    let jobs = jobs.max(1).min(cells.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<GridRow>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= cells.len() {
                    break;
                }
                let cell = &cells[idx];
                let cfg = cell_config(base, cell);
                let row = match train(&cfg, data) {
                    Ok((_, report)) => match report.best() {
                        Some(best) => GridRow {
                            cell: cell.clone(),
                            source_val_mae: Some(best.source_val_mae),
                            target_mae: Some(best.target_mae),
                            error: None,
                        },
                        None => GridRow {
                            cell: cell.clone(),
                            source_val_mae: None,
                            target_mae: None,
                            error: Some("empty report".into()),
                        },
                    },
                    Err(e) => GridRow {
                        cell: cell.clone(),
                        source_val_mae: None,
                        target_mae: None,
                        error: Some(e.to_string()),
                    },
                };
                *results[idx].lock().expect("no poisoned cell") = Some(row);
            });
        }
    });

    let mut rows: Vec<GridRow> = results
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned cell").expect("cell ran"))
        .collect();
    rows.sort_by(|a, b| match (a.target_mae, b.target_mae) {
        (Some(x), Some(y)) => x.partial_cmp(&y).expect("finite MAE"),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(GridReport { rows })
}
