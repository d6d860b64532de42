//! One-step bilevel machinery.
//!
//! The training objective is the mean augmentation loss over a batch, with
//! each sample's diagonal predicted from its (detached) feature:
//!
//! ```text
//! L_train(θ_f; θ_g) = 1/N Σ_i ℓ(x_i, y_i; σ_i = g(a_i; θ_g), θ_f)
//! θ̃_f(θ_g)          = θ_f − α ∇_θf L_train(θ_f; θ_g)
//! meta-gradient      = ∇_θg L_meta(θ̃_f(θ_g)) = −α (∂²L_train/∂θ_g∂θ_f)ᵀ d,
//!                      d = ∇ L_meta(θ̃_f)
//! ```
//!
//! `L_meta` is plain cross-entropy on a disjoint batch. The mixed term is
//! evaluated two ways: exactly, by differentiating the directional derivative
//! `D_θf ℓ_i[d]` with respect to `σ_i` and pulling the result back through
//! the CovNet; and by central differences of `∇_θg L_train` at `θ_f ± ε d`.

use crate::augment_loss::{
    ce_grad_logits, ce_loss, grads_from_terms, isda_terms, shift_head_grad, DiagCovariance,
    IsdaInput,
};
use crate::datakit::Batch;
use crate::error::{Error, Result};
use crate::networks::{
    classifier_backward_into, classifier_forward, covnet_backward_into, covnet_forward,
    feature_tangent, ClassifierParams, ClassifierTape, CovNetParams, CovNetTape, FreezeMask,
};
use crate::numkit::{dot, param_axpy, ParamSet};

/// Mean loss and gradient of the augmentation loss over a batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    /// Mean gradient with respect to the classifier; frozen blocks are zero.
    pub grads: ClassifierParams,
    /// Per-sample `∂ℓ_i/∂σ_i` (not divided by the batch size).
    pub d_diags: Vec<Vec<f64>>,
    pub tapes: Vec<ClassifierTape>,
    pub clamped: bool,
}

/// Evaluates the augmentation loss of every sample, asking `diag_for` for the
/// diagonal once the sample's feature is known. Reductions run in batch
/// order.
pub fn isda_batch<F>(
    params: &ClassifierParams,
    batch: &Batch,
    lambda: f64,
    mask: FreezeMask,
    mut diag_for: F,
) -> Result<BatchEval>
where
    F: FnMut(usize, &[f64]) -> Result<DiagCovariance>,
{
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / n as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut d_diags = Vec::with_capacity(n);
    let mut tapes = Vec::with_capacity(n);
    let mut clamped = false;
    for i in 0..n {
        let out = classifier_forward(batch.input(i), params)?;
        let diag = diag_for(i, &out.feature)?;
        let inp = IsdaInput {
            feature: &out.feature,
            label: batch.labels[i],
            head_weights: &params.head.weight,
            head_bias: &params.head.bias,
            diag: diag.as_slice(),
            lambda,
        };
        let terms = isda_terms(&inp)?;
        let g = grads_from_terms(&inp, &terms);
        clamped |= g.clamped;
        loss += g.loss;
        // Shift terms do not depend on the feature; they only add a direct
        // head-weight component on top of the logit path.
        classifier_backward_into(
            params,
            &out.tape,
            None,
            g.d_logits(),
            mask,
            scale,
            &mut grads,
        )?;
        if let Some(shift) = shift_head_grad(&inp, &terms) {
            for (gw, sw) in grads.head.weight.data_mut().iter_mut().zip(shift.data()) {
                *gw += scale * sw;
            }
        }
        d_diags.push(g.d_diag);
        tapes.push(out.tape);
    }
    Ok(BatchEval {
        loss: loss * scale,
        grads,
        d_diags,
        tapes,
        clamped,
    })
}

/// Plain cross-entropy on every sample of `batch`: mean loss and gradient.
pub fn ce_batch(
    params: &ClassifierParams,
    batch: &Batch,
    mask: FreezeMask,
) -> Result<(f64, ClassifierParams)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / n as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for i in 0..n {
        let out = classifier_forward(batch.input(i), params)?;
        let label = batch.labels[i];
        loss += ce_loss(&out.logits, label)?;
        let d_logits = ce_grad_logits(&out.logits, label)?;
        classifier_backward_into(params, &out.tape, None, &d_logits, mask, scale, &mut grads)?;
    }
    Ok((loss * scale, grads))
}

/// `params − step · grads`.
pub fn sgd_step<P: ParamSet>(params: &P, grads: &P, step: f64) -> Result<P> {
    param_axpy(params, -step, grads)
}

#[derive(Debug, Clone)]
pub struct RecordedSample {
    pub label: usize,
    pub classifier_tape: ClassifierTape,
    pub diag: DiagCovariance,
    pub covnet_tape: CovNetTape,
}

/// Everything the meta phase needs from a pseudo update.
#[derive(Debug, Clone)]
pub struct PseudoStepRecord {
    pub base_params: ClassifierParams,
    pub train_grads: ClassifierParams,
    pub step_size: f64,
    pub lambda: f64,
    pub frozen: FreezeMask,
    pub samples: Vec<RecordedSample>,
    pub train_loss: f64,
    pub clamped: bool,
}

impl PseudoStepRecord {
    pub fn pseudo_params(&self) -> Result<ClassifierParams> {
        sgd_step(&self.base_params, &self.train_grads, self.step_size)
    }
}

/// The transient update `θ̃_f = θ_f − α ∇_θf L_train(θ_f; θ_g)`. The CovNet
/// only supplies diagonals here; nothing flows back into it.
pub fn pseudo_step(
    params: &ClassifierParams,
    covnet: &CovNetParams,
    batch: &Batch,
    lambda: f64,
    alpha: f64,
    mask: FreezeMask,
) -> Result<(ClassifierParams, PseudoStepRecord)> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size {alpha} is negative"
        )));
    }
    let mut covnet_tapes = Vec::with_capacity(batch.len());
    let mut diags = Vec::with_capacity(batch.len());
    let eval = isda_batch(params, batch, lambda, mask, |_, feature| {
        let (diag, tape) = covnet_forward(feature, covnet)?;
        covnet_tapes.push(tape);
        diags.push(diag.clone());
        Ok(diag)
    })?;
    let pseudo = sgd_step(params, &eval.grads, alpha)?;
    let samples = eval
        .tapes
        .into_iter()
        .zip(diags)
        .zip(covnet_tapes)
        .zip(&batch.labels)
        .map(
            |(((classifier_tape, diag), covnet_tape), &label)| RecordedSample {
                label,
                classifier_tape,
                diag,
                covnet_tape,
            },
        )
        .collect();
    let record = PseudoStepRecord {
        base_params: params.clone(),
        train_grads: eval.grads,
        step_size: alpha,
        lambda,
        frozen: mask,
        samples,
        train_loss: eval.loss,
        clamped: eval.clamped,
    };
    Ok((pseudo, record))
}

/// `∇ L_meta` at the pseudo parameters, restricted to the unfrozen blocks.
pub fn meta_direction(
    record: &PseudoStepRecord,
    meta_batch: &Batch,
) -> Result<(f64, ClassifierParams)> {
    let pseudo = record.pseudo_params()?;
    ce_batch(&pseudo, meta_batch, record.frozen)
}

fn check_record(record: &PseudoStepRecord, covnet: &CovNetParams) -> Result<()> {
    let d = record.base_params.feature_dim();
    if covnet.input_dim() != d || covnet.feature_dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "covnet maps {} -> {}, classifier features have width {d}",
            covnet.input_dim(),
            covnet.feature_dim()
        )));
    }
    if record.samples.is_empty() {
        return Err(Error::Empty("pseudo step record"));
    }
    if record
        .samples
        .iter()
        .any(|s| s.covnet_tape.input().len() != d || s.diag.len() != d)
    {
        return Err(Error::DimensionMismatch(
            "recorded covnet tapes do not match the covnet".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaGradMode {
    Exact,
    FiniteDifference { epsilon_scale: f64 },
}

impl MetaGradMode {
    pub const DEFAULT_EPSILON_SCALE: f64 = 1e-2;
    pub const EXACT_PARAM_LIMIT: usize = 10_000;

    /// Exact for classifiers up to 10⁴ parameters, finite differences above.
    pub fn auto(classifier_params: usize) -> Self {
        if classifier_params <= Self::EXACT_PARAM_LIMIT {
            MetaGradMode::Exact
        } else {
            MetaGradMode::FiniteDifference {
                epsilon_scale: Self::DEFAULT_EPSILON_SCALE,
            }
        }
    }
}

/// Result of a meta-gradient evaluation.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub grad: CovNetParams,
    /// Meta loss at the pseudo parameters.
    pub meta_loss: f64,
}

pub fn meta_gradient(
    mode: MetaGradMode,
    record: &PseudoStepRecord,
    covnet: &CovNetParams,
    meta_batch: &Batch,
) -> Result<MetaGradient> {
    match mode {
        MetaGradMode::Exact => meta_gradient_exact(record, covnet, meta_batch),
        MetaGradMode::FiniteDifference { epsilon_scale } => {
            meta_gradient_fd(record, covnet, meta_batch, epsilon_scale)
        }
    }
}

/// Exact meta-gradient through the one-step unroll.
///
/// Per training sample, with `q_j = ż_j + ṡ_j` the tangent of the shifted
/// logit along `d`, `h_je = (λ/2) v_je²`, and `q̄ = Σ p_k q_k`:
///
/// ```text
/// ∂ D ℓ[d] / ∂σ_e = Σ_j p_j ( h_je (q_j − q̄) + λ v_je v̇_je )
/// ```
///
/// which is then pulled back through the recorded CovNet tape.
pub fn meta_gradient_exact(
    record: &PseudoStepRecord,
    covnet: &CovNetParams,
    meta_batch: &Batch,
) -> Result<MetaGradient> {
    check_record(record, covnet)?;
    let (meta_loss, dir) = meta_direction(record, meta_batch)?;
    let mut grad = covnet.zeros_like();
    let alpha = record.step_size;
    let lambda = record.lambda;
    if alpha == 0.0 || lambda == 0.0 {
        return Ok(MetaGradient { grad, meta_loss });
    }
    let base = &record.base_params;
    let w = &base.head.weight;
    let (c, d) = w.shape();
    let scale = -alpha / record.samples.len() as f64;
    for sample in &record.samples {
        let tape = &sample.classifier_tape;
        let a = tape.feature();
        let y = sample.label;
        let sigma = sample.diag.as_slice();
        let inp = IsdaInput {
            feature: a,
            label: y,
            head_weights: w,
            head_bias: &base.head.bias,
            diag: sigma,
            lambda,
        };
        let terms = isda_terms(&inp)?;
        let a_dot = feature_tangent(base, tape, &dir, record.frozen)?;
        let w_dot = &dir.head.weight;
        let wy = w.row(y);
        let wy_dot = w_dot.row(y);

        let mut q = vec![0.0; c];
        for (j, qj) in q.iter_mut().enumerate() {
            let mut z_dot = dot(w_dot.row(j), a) + dot(w.row(j), &a_dot) + dir.head.bias[j];
            if j != y && !terms.clamped[j] {
                let mut s_dot = 0.0;
                for e in 0..d {
                    let v = w.get(j, e) - wy[e];
                    let v_dot = w_dot.get(j, e) - wy_dot[e];
                    s_dot += sigma[e] * v * v_dot;
                }
                z_dot += lambda * s_dot;
            }
            *qj = z_dot;
        }
        let q_bar = dot(&terms.probs, &q);

        let mut u = vec![0.0; d];
        for j in 0..c {
            if j == y || terms.clamped[j] {
                continue;
            }
            let p = terms.probs[j];
            let dq = q[j] - q_bar;
            for (e, ue) in u.iter_mut().enumerate() {
                let v = w.get(j, e) - wy[e];
                let v_dot = w_dot.get(j, e) - wy_dot[e];
                *ue += p * (0.5 * lambda * v * v * dq + lambda * v * v_dot);
            }
        }
        covnet_backward_into(covnet, &sample.covnet_tape, &u, scale, &mut grad)?;
    }
    Ok(MetaGradient { grad, meta_loss })
}

/// `∇_θg L_train` with the recorded diagonals and CovNet tapes held fixed
/// while the classifier is `params`.
fn covnet_train_grad(
    record: &PseudoStepRecord,
    covnet: &CovNetParams,
    params: &ClassifierParams,
) -> Result<CovNetParams> {
    let mut grad = covnet.zeros_like();
    let scale = 1.0 / record.samples.len() as f64;
    for sample in &record.samples {
        let out = classifier_forward(sample.classifier_tape.input(), params)?;
        let inp = IsdaInput {
            feature: &out.feature,
            label: sample.label,
            head_weights: &params.head.weight,
            head_bias: &params.head.bias,
            diag: sample.diag.as_slice(),
            lambda: record.lambda,
        };
        let terms = isda_terms(&inp)?;
        let g = grads_from_terms(&inp, &terms);
        covnet_backward_into(covnet, &sample.covnet_tape, &g.d_diag, scale, &mut grad)?;
    }
    Ok(grad)
}

/// Central-difference Hessian-vector approximation of the meta-gradient with
/// `ε = epsilon_scale / (‖d‖ + 1e-12)`.
pub fn meta_gradient_fd(
    record: &PseudoStepRecord,
    covnet: &CovNetParams,
    meta_batch: &Batch,
    epsilon_scale: f64,
) -> Result<MetaGradient> {
    check_record(record, covnet)?;
    if !(epsilon_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon scale must be positive, got {epsilon_scale}"
        )));
    }
    let (meta_loss, dir) = meta_direction(record, meta_batch)?;
    let alpha = record.step_size;
    if alpha == 0.0 || record.lambda == 0.0 {
        return Ok(MetaGradient {
            grad: covnet.zeros_like(),
            meta_loss,
        });
    }
    let eps = epsilon_scale / (dir.norm_sq().sqrt() + 1e-12);
    let plus = param_axpy(&record.base_params, eps, &dir)?;
    let minus = param_axpy(&record.base_params, -eps, &dir)?;
    let g_plus = covnet_train_grad(record, covnet, &plus)?;
    let g_minus = covnet_train_grad(record, covnet, &minus)?;
    let mut grad = g_plus;
    grad.axpy_in_place(-1.0, &g_minus)?;
    grad.scale_in_place(-alpha / (2.0 * eps));
    Ok(MetaGradient { grad, meta_loss })
}

/// Worst coordinate-wise relative error between `analytic` and central
/// differences of `probe` around `params`. The denominator is floored at
/// `1e-8`.
pub fn grad_check<P, F>(probe: F, params: &P, analytic: &P, step: f64) -> Result<f64>
where
    P: ParamSet,
    F: Fn(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    crate::numkit::check_congruent(params, analytic)?;
    let base = params.flatten();
    let grad = analytic.flatten();
    let mut probe_params = params.clone();
    let mut eval = |v: &[f64]| -> Result<f64> {
        probe_params.assign_flat(v)?;
        let f = probe(&probe_params);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::NonFinite("gradient-check probe".into()))
        }
    };
    let mut worst: f64 = 0.0;
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + step;
        let fp = eval(&v)?;
        v[i] = base[i] - step;
        let fm = eval(&v)?;
        v[i] = base[i];
        let numeric = (fp - fm) / (2.0 * step);
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
