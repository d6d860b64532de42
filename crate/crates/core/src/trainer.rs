//! The training loop: batch split and exchange, pseudo, meta and real
//! phases, schedules, the comparison modes, and evaluation.

use std::fmt;
use std::str::FromStr;

use crate::augment_loss::{ClasswiseCovTable, DiagCovariance};
use crate::datakit::{epoch_indices, Batch, Dataset};
use crate::error::{Error, Result};
use crate::metagrad::{ce_batch, isda_batch, meta_gradient, pseudo_step, MetaGradMode};
use crate::networks::{
    classifier_forward, covnet_backward_into, covnet_forward, ClassifierArch, ClassifierParams,
    CovNetArch, CovNetParams, FreezeMask,
};
use crate::numkit::{ParamSet, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    Meta,
    NaiveJoint,
    ClasswiseIsda,
    CeBaseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Meta,
        TrainMode::NaiveJoint,
        TrainMode::ClasswiseIsda,
        TrainMode::CeBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Meta => "meta",
            TrainMode::NaiveJoint => "naive_joint",
            TrainMode::ClasswiseIsda => "classwise_isda",
            TrainMode::CeBaseline => "ce_baseline",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
    Theoretical,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
            LrSchedule::Theoretical => "theoretical",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            LrSchedule::Cosine,
            LrSchedule::Constant,
            LrSchedule::Theoretical,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown schedule `{s}`")))
    }
}

/// Constants of the convergence-theory step sizes
/// `α_t = min{1, k/T}` and `β_t = min{1/L, c/(σ√T)}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub k: f64,
    pub c: f64,
    pub lipschitz: f64,
    pub sigma: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self {
            k: 100.0,
            c: 1.0,
            lipschitz: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda0: f64,
    pub schedule_alpha: f64,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub lr_f: f64,
    pub lr_f_schedule: LrSchedule,
    pub lr_g: f64,
    /// `Constant` or `Theoretical`.
    pub lr_g_schedule: LrSchedule,
    pub meta_update_every: usize,
    /// Leading backbone blocks frozen in the pseudo and meta phases.
    pub freeze_blocks: usize,
    /// Also freeze them in the real update.
    pub freeze_real: bool,
    pub seed: u64,
    pub theory: TheoryConstants,
    pub block_widths: Vec<usize>,
    /// CovNet hidden widths; `None` means one layer of `ceil(D/4)`.
    pub covnet_hidden: Option<Vec<usize>>,
    /// `None` picks by classifier size.
    pub meta_grad_mode: Option<MetaGradMode>,
    /// Metrics are recorded at iteration 0, every `metric_every` iterations
    /// and at the end; 0 records only the first and last rows.
    pub metric_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Meta,
            lambda0: 4.0,
            schedule_alpha: 2.0,
            total_iterations: 3000,
            batch_size: 64,
            lr_f: 0.03,
            lr_f_schedule: LrSchedule::Cosine,
            lr_g: 30.0,
            lr_g_schedule: LrSchedule::Constant,
            meta_update_every: 1,
            freeze_blocks: 0,
            freeze_real: false,
            seed: 0,
            theory: TheoryConstants::default(),
            block_widths: vec![64, 32],
            covnet_hidden: None,
            meta_grad_mode: None,
            metric_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return bad(format!(
                "lambda0 must be finite and non-negative, got {}",
                self.lambda0
            ));
        }
        if !(self.schedule_alpha > 0.0 && self.schedule_alpha.is_finite()) {
            return bad(format!(
                "schedule_alpha must be positive, got {}",
                self.schedule_alpha
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.lr_f >= 0.0 && self.lr_g >= 0.0 && self.lr_f.is_finite() && self.lr_g.is_finite())
        {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.lr_g_schedule == LrSchedule::Cosine {
            return bad("lr_g_schedule must be constant or theoretical".into());
        }
        if self.meta_update_every == 0 {
            return bad("meta_update_every must be at least 1".into());
        }
        if self.freeze_blocks > self.block_widths.len() {
            return bad(format!(
                "cannot freeze {} of {} blocks",
                self.freeze_blocks,
                self.block_widths.len()
            ));
        }
        let theory_used = self.lr_f_schedule == LrSchedule::Theoretical
            || self.lr_g_schedule == LrSchedule::Theoretical;
        let t = self.theory;
        if theory_used
            && ![t.k, t.c, t.lipschitz, t.sigma]
                .iter()
                .all(|v| *v > 0.0 && v.is_finite())
        {
            return bad(format!("theoretical constants must be positive: {t:?}"));
        }
        if let Some(MetaGradMode::FiniteDifference { epsilon_scale }) = self.meta_grad_mode {
            if !(epsilon_scale > 0.0) {
                return bad("epsilon scale must be positive".into());
            }
        }
        Ok(())
    }

    fn pseudo_mask(&self) -> Result<FreezeMask> {
        FreezeMask::new(self.freeze_blocks, self.block_widths.len())
    }

    fn real_mask(&self) -> Result<FreezeMask> {
        if self.freeze_real {
            self.pseudo_mask()
        } else {
            Ok(FreezeMask::none())
        }
    }
}

/// `(t/T)^α · λ₀`.
pub fn lambda_at(t: usize, total: usize, lambda0: f64, schedule_alpha: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument(
            "lambda schedule needs T >= 1".into(),
        ));
    }
    if t > total {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} beyond T = {total}"
        )));
    }
    Ok((t as f64 / total as f64).powf(schedule_alpha) * lambda0)
}

/// Step sizes `(α_t, β_t)` for the classifier and the CovNet.
pub fn lr_at(t: usize, config: &TrainConfig) -> Result<(f64, f64)> {
    let total = config.total_iterations;
    if t > total {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} beyond T = {total}"
        )));
    }
    let th = config.theory;
    let check_theory = || -> Result<()> {
        if [th.k, th.c, th.lipschitz, th.sigma]
            .iter()
            .all(|v| *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "theoretical constants must be positive: {th:?}"
            )))
        }
    };
    let alpha = match config.lr_f_schedule {
        LrSchedule::Cosine => {
            let frac = t as f64 / total.max(1) as f64;
            config.lr_f * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
        LrSchedule::Constant => config.lr_f,
        LrSchedule::Theoretical => {
            check_theory()?;
            (th.k / total as f64).min(1.0)
        }
    };
    let beta = match config.lr_g_schedule {
        LrSchedule::Theoretical => {
            check_theory()?;
            (1.0 / th.lipschitz).min(th.c / (th.sigma * (total as f64).sqrt()))
        }
        _ => config.lr_g,
    };
    Ok((alpha, beta))
}

/// Seeded shuffle, then the first `ceil(B/2)` samples train and the rest
/// form the meta half.
pub fn split_batch(batch: &Batch, rng: &mut RngState) -> Result<(Batch, Batch)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split a batch of {n} into two non-empty halves"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let (a, b) = order.split_at(n.div_ceil(2));
    Ok((batch.select(a), batch.select(b)))
}

/// Index of the largest logit, lowest index among ties.
pub fn predict(params: &ClassifierParams, x: &[f64]) -> Result<usize> {
    let out = classifier_forward(x, params)?;
    let mut best = 0;
    for (j, &z) in out.logits.iter().enumerate() {
        if z > out.logits[best] {
            best = j;
        }
    }
    Ok(best)
}

pub fn evaluate(params: &ClassifierParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        if predict(params, ds.input(i))? == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// `tr(S_between) / (tr(S_within) + 1e-12)` with class-size-weighted
/// between-class scatter.
pub fn scatter_ratio(features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let Some(first) = features.first() else {
        return Err(Error::Empty("features"));
    };
    let d = first.len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::DimensionMismatch("ragged feature list".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    let mut total = vec![0.0; d];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for e in 0..d {
            sums[y][e] += f[e];
            total[e] += f[e];
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidArgument(
            "scatter ratio needs at least two classes".into(),
        ));
    }
    let n = features.len() as f64;
    let grand: Vec<f64> = total.iter().map(|s| s / n).collect();
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let between: f64 = means
        .iter()
        .zip(&counts)
        .map(|(m, &c)| {
            c as f64
                * m.iter()
                    .zip(&grand)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
        })
        .sum();
    let within: f64 = features
        .iter()
        .zip(labels)
        .map(|(f, &y)| {
            f.iter()
                .zip(&means[y])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(between / (within + 1e-12))
}

/// Backbone features of every sample.
pub fn features_of(params: &ClassifierParams, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..ds.len())
        .map(|i| classifier_forward(ds.input(i), params).map(|o| o.feature))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub meta_loss: f64,
    pub test_acc: f64,
    pub mean_cov: f64,
    pub meta_grad_norm_sq: f64,
    pub running_min_grad: f64,
    pub scatter_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub classifier: ClassifierParams,
    pub covnet: CovNetParams,
    /// Present only in class-wise mode.
    pub classwise: Option<ClasswiseCovTable>,
    pub iteration: usize,
    pub rng: RngState,
    pub history: Vec<MetricsRecord>,
    /// Sub-steps in which some augmentation shift hit the clamp.
    pub clamp_hits: u64,
}

const STREAM_INIT_F: u64 = 1;
const STREAM_INIT_G: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_PROBE: u64 = 5;

impl TrainState {
    pub fn init(config: &TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        let rng = RngState::new(config.seed);
        let arch = ClassifierArch {
            input_dim: train.input_dim(),
            block_widths: config.block_widths.clone(),
            num_classes: train.num_classes(),
        };
        let classifier = ClassifierParams::init(&arch, &mut rng.fork(STREAM_INIT_F))?;
        let d = classifier.feature_dim();
        let covnet_arch = match &config.covnet_hidden {
            Some(h) => CovNetArch {
                feature_dim: d,
                hidden_widths: h.clone(),
            },
            None => CovNetArch::default_for(d),
        };
        let covnet = CovNetParams::init(&covnet_arch, &mut rng.fork(STREAM_INIT_G))?;
        let classwise = (config.mode == TrainMode::ClasswiseIsda)
            .then(|| ClasswiseCovTable::new(train.num_classes(), d));
        Ok(Self {
            classifier,
            covnet,
            classwise,
            iteration: 0,
            rng,
            history: Vec::new(),
            clamp_hits: 0,
        })
    }

    fn meta_grad_mode(&self, config: &TrainConfig) -> MetaGradMode {
        config
            .meta_grad_mode
            .unwrap_or_else(|| MetaGradMode::auto(self.classifier.num_params()))
    }
}

fn finite_or<P: ParamSet>(params: &P, phase: &str, t: usize) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{phase} phase produced non-finite parameters at iteration {t}"
        )))
    }
}

fn covnet_diag(covnet: &CovNetParams, feature: &[f64]) -> Result<DiagCovariance> {
    covnet_forward(feature, covnet).map(|(d, _)| d)
}

/// Pseudo, meta and real phases on one (train, meta) pair.
fn meta_cycle(
    state: &mut TrainState,
    config: &TrainConfig,
    train: &Batch,
    meta: &Batch,
    lambda: f64,
    (alpha, beta): (f64, f64),
) -> Result<()> {
    let t = state.iteration;
    let (pseudo, record) = pseudo_step(
        &state.classifier,
        &state.covnet,
        train,
        lambda,
        alpha,
        config.pseudo_mask()?,
    )?;
    finite_or(&pseudo, "pseudo", t)?;
    state.clamp_hits += record.clamped as u64;
    if t % config.meta_update_every == 0 {
        let mg = meta_gradient(state.meta_grad_mode(config), &record, &state.covnet, meta)?;
        state.covnet.axpy_in_place(-beta, &mg.grad)?;
        finite_or(&state.covnet, "meta", t)?;
    }
    let covnet = &state.covnet;
    let eval = isda_batch(
        &state.classifier,
        train,
        lambda,
        config.real_mask()?,
        |_, f| covnet_diag(covnet, f),
    )?;
    state.clamp_hits += eval.clamped as u64;
    state.classifier.axpy_in_place(-alpha, &eval.grads)?;
    finite_or(&state.classifier, "real", t)
}

/// One simultaneous step on the classifier and the CovNet through the
/// augmentation loss.
fn naive_joint_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Batch,
    lambda: f64,
    (alpha, beta): (f64, f64),
) -> Result<()> {
    let t = state.iteration;
    let covnet = &state.covnet;
    let mut tapes = Vec::with_capacity(batch.len());
    let eval = isda_batch(
        &state.classifier,
        batch,
        lambda,
        config.real_mask()?,
        |_, f| {
            let (diag, tape) = covnet_forward(f, covnet)?;
            tapes.push(tape);
            Ok(diag)
        },
    )?;
    let mut g_grad = covnet.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for (tape, d_diag) in tapes.iter().zip(&eval.d_diags) {
        covnet_backward_into(covnet, tape, d_diag, scale, &mut g_grad)?;
    }
    state.clamp_hits += eval.clamped as u64;
    state.classifier.axpy_in_place(-alpha, &eval.grads)?;
    state.covnet.axpy_in_place(-beta, &g_grad)?;
    finite_or(&state.classifier, "joint", t)?;
    finite_or(&state.covnet, "joint", t)
}

fn classwise_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Batch,
    lambda: f64,
    alpha: f64,
) -> Result<()> {
    let t = state.iteration;
    let table = state
        .classwise
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("class-wise mode without a table".into()))?;
    for i in 0..batch.len() {
        let out = classifier_forward(batch.input(i), &state.classifier)?;
        table.update(&out.feature, batch.labels[i])?;
    }
    let table = &*table;
    let eval = isda_batch(
        &state.classifier,
        batch,
        lambda,
        config.real_mask()?,
        |i, _| table.lookup(batch.labels[i]),
    )?;
    state.clamp_hits += eval.clamped as u64;
    state.classifier.axpy_in_place(-alpha, &eval.grads)?;
    finite_or(&state.classifier, "class-wise", t)
}

fn ce_step(state: &mut TrainState, config: &TrainConfig, batch: &Batch, alpha: f64) -> Result<()> {
    let (_, grads) = ce_batch(&state.classifier, batch, config.real_mask()?)?;
    state.classifier.axpy_in_place(-alpha, &grads)?;
    finite_or(&state.classifier, "baseline", state.iteration)
}

/// One training iteration on a split batch. Meta mode runs the three phases
/// on `(first, second)` and again with the halves exchanged; the other modes
/// take one step on each half in the same order, so every mode sees the
/// same sample schedule.
pub fn train_step(
    state: &mut TrainState,
    first: &Batch,
    second: &Batch,
    config: &TrainConfig,
) -> Result<()> {
    if first.is_empty() || second.is_empty() {
        return Err(Error::Empty("half batch"));
    }
    let t = state.iteration;
    let total = config.total_iterations;
    if t >= total {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} is past the configured T = {total}"
        )));
    }
    if (config.mode == TrainMode::ClasswiseIsda) != state.classwise.is_some() {
        return Err(Error::InvalidArgument(format!(
            "state covariance source does not match mode {}",
            config.mode
        )));
    }
    // Iteration t is the (t+1)-th step, so the schedule reaches λ₀ on the last one.
    let lambda = lambda_at(t + 1, total, config.lambda0, config.schedule_alpha)?;
    let rates = lr_at(t, config)?;
    for (a, b) in [(first, second), (second, first)] {
        match config.mode {
            TrainMode::Meta => meta_cycle(state, config, a, b, lambda, rates)?,
            TrainMode::NaiveJoint => naive_joint_step(state, config, a, lambda, rates)?,
            TrainMode::ClasswiseIsda => classwise_step(state, config, a, lambda, rates.0)?,
            TrainMode::CeBaseline => ce_step(state, config, a, rates.0)?,
        }
    }
    state.iteration += 1;
    Ok(())
}

/// The fixed diagnostics batch, pre-split into a pseudo and a meta half.
pub fn probe_batch(train: &Dataset, config: &TrainConfig) -> Result<(Batch, Batch)> {
    let rng = RngState::new(config.seed).fork(STREAM_PROBE);
    let mut pick = rng.fork(0);
    let idx = epoch_indices(
        train.len(),
        config.batch_size.min(train.len()),
        true,
        &mut pick,
    )?;
    split_batch(&train.batch(&idx[0]), &mut rng.fork(1))
}

/// Metrics of the current state. The loss terms and the meta-gradient are
/// measured at `λ₀` and the initial classifier step size, so rows of one run
/// are comparable.
pub fn diagnostics(
    state: &TrainState,
    config: &TrainConfig,
    probe: &(Batch, Batch),
    test: &Dataset,
) -> Result<MetricsRecord> {
    let (first, second) = probe;
    let lambda = config.lambda0;
    let (alpha, _) = lr_at(0, config)?;
    let mask = config.pseudo_mask()?;
    let whole = Batch {
        inputs: {
            let mut rows = first.inputs.data().to_vec();
            rows.extend_from_slice(second.inputs.data());
            crate::numkit::Matrix::from_vec(first.len() + second.len(), first.inputs.cols(), rows)?
        },
        labels: first.labels.iter().chain(&second.labels).copied().collect(),
    };
    let train_loss = match (&config.mode, &state.classwise) {
        (TrainMode::CeBaseline, _) => ce_batch(&state.classifier, &whole, mask)?.0,
        (TrainMode::ClasswiseIsda, Some(table)) => {
            isda_batch(&state.classifier, &whole, lambda, mask, |i, _| {
                table.lookup(whole.labels[i])
            })?
            .loss
        }
        _ => {
            isda_batch(&state.classifier, &whole, lambda, mask, |_, f| {
                covnet_diag(&state.covnet, f)
            })?
            .loss
        }
    };
    let mut cov_sum = 0.0;
    for i in 0..whole.len() {
        let out = classifier_forward(whole.input(i), &state.classifier)?;
        cov_sum += covnet_diag(&state.covnet, &out.feature)?.mean();
    }
    let (_, record) = pseudo_step(&state.classifier, &state.covnet, first, lambda, alpha, mask)?;
    let mg = meta_gradient(state.meta_grad_mode(config), &record, &state.covnet, second)?;
    let norm = mg.grad.norm_sq();
    let running_min = state
        .history
        .last()
        .map_or(norm, |r| r.running_min_grad.min(norm));
    let feats = features_of(&state.classifier, test)?;
    let record = MetricsRecord {
        iteration: state.iteration,
        train_loss,
        meta_loss: mg.meta_loss,
        test_acc: evaluate(&state.classifier, test)?,
        mean_cov: cov_sum / whole.len() as f64,
        meta_grad_norm_sq: norm,
        running_min_grad: running_min,
        scatter_ratio: scatter_ratio(&feats, &test.labels)?,
    };
    let values = [
        record.train_loss,
        record.meta_loss,
        record.mean_cov,
        record.meta_grad_norm_sq,
        record.scatter_ratio,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "diagnostics at iteration {}",
            state.iteration
        )));
    }
    Ok(record)
}

fn check_datasets(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if train.input_dim() != test.input_dim() || train.num_classes() != test.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "train is {}-dimensional with {} classes, test {}-dimensional with {}",
            train.input_dim(),
            train.num_classes(),
            test.input_dim(),
            test.num_classes()
        )));
    }
    for ds in [train, test] {
        if let Some(&label) = ds.labels.iter().find(|&&l| l >= ds.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: ds.num_classes(),
            });
        }
    }
    Ok(())
}

/// Seeded epoch sampler: batches of the configured size, short tail dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: RngState,
    n: usize,
    batch_size: usize,
    epoch: u64,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(config: &TrainConfig, n: usize) -> Result<Self> {
        if config.batch_size > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds dataset size {n}",
                config.batch_size
            )));
        }
        Ok(Self {
            rng: RngState::new(config.seed).fork(STREAM_EPOCH),
            n,
            batch_size: config.batch_size,
            epoch: 0,
            queue: Vec::new().into_iter(),
        })
    }

    pub fn next_indices(&mut self) -> Result<Vec<usize>> {
        if let Some(b) = self.queue.next() {
            return Ok(b);
        }
        let mut rng = self.rng.fork(self.epoch);
        self.epoch += 1;
        self.queue = epoch_indices(self.n, self.batch_size, true, &mut rng)?.into_iter();
        Ok(self
            .queue
            .next()
            .expect("batch size <= n gives a full batch"))
    }
}

/// The split rng of iteration `t`.
pub fn split_rng(config: &TrainConfig, t: usize) -> RngState {
    RngState::new(config.seed).fork(STREAM_SPLIT).fork(t as u64)
}

fn wants_row(config: &TrainConfig, t: usize) -> bool {
    t == 0
        || t == config.total_iterations
        || (config.metric_every > 0 && t % config.metric_every == 0)
}

/// Calls `observe` after each iteration, before any metrics row is taken.
pub fn run_with<F>(
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    mut observe: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState),
{
    check_datasets(train, test)?;
    let mut state = TrainState::init(config, train)?;
    let mut sampler = BatchSampler::new(config, train.len())?;
    let probe = probe_batch(train, config)?;
    state
        .history
        .push(diagnostics(&state, config, &probe, test)?);
    for t in 0..config.total_iterations {
        let batch = train.batch(&sampler.next_indices()?);
        let (first, second) = split_batch(&batch, &mut split_rng(config, t))?;
        train_step(&mut state, &first, &second, config)?;
        observe(&state);
        if wants_row(config, t + 1) {
            let row = diagnostics(&state, config, &probe, test)?;
            state.history.push(row);
        }
    }
    Ok(state)
}

/// Full training run; the returned state carries the metric history.
pub fn run(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<TrainState> {
    run_with(config, train, test, |_| {})
}
