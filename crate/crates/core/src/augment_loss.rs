//! Cross-entropy, the closed-form implicit augmentation loss with a diagonal
//! covariance, its Monte-Carlo counterpart, and the class-wise running
//! covariance baseline.
//!
//! For a feature `a` with label `y`, head rows `w_j` and biases `b_j`, the
//! augmentation loss is
//!
//! ```text
//! z_j = w_j·a + b_j
//! s_j = (λ/2) Σ_d σ_d (w_{j,d} − w_{y,d})²        (s_y = 0)
//! ℓ   = logsumexp(z + s) − z_y
//! ```
//!
//! which upper-bounds the expected cross-entropy of `a + ε`,
//! `ε ~ N(0, λ·diag(σ))`, and is never below the plain cross-entropy.

use crate::error::{Error, Result};
use crate::numkit::{gaussian_sample, logsumexp, Matrix, RngState};

/// Shift terms above this are clamped before exponentiation. Hitting the
/// clamp means λ or the head weights have diverged.
pub const SHIFT_CLAMP: f64 = 700.0;

/// Diagonal of a per-sample augmentation covariance; entries are `≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagCovariance(Vec<f64>);

impl DiagCovariance {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_diag(&entries)?;
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Sigmoid outputs are positive by construction.
    pub(crate) fn from_sigmoid(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

fn check_diag(entries: &[f64]) -> Result<()> {
    match entries
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
    {
        Some((index, &value)) => Err(Error::NegativeVariance { index, value }),
        None => Ok(()),
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        Err(Error::LabelOutOfRange { label, classes })
    } else {
        Ok(())
    }
}

/// `−log softmax(logits)[label]`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok(logsumexp(logits)? - logits[label])
}

/// `softmax(logits) − onehot(label)`, the gradient of [`ce_loss`].
pub fn ce_grad_logits(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(label, logits.len())?;
    let lse = logsumexp(logits)?;
    let mut g: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    g[label] -= 1.0;
    Ok(g)
}

/// Inputs shared by the closed-form loss, its gradients and the meta-gradient.
#[derive(Debug, Clone, Copy)]
pub struct IsdaInput<'a> {
    pub feature: &'a [f64],
    pub label: usize,
    pub head_weights: &'a Matrix,
    pub head_bias: &'a [f64],
    pub diag: &'a [f64],
    pub lambda: f64,
}

impl IsdaInput<'_> {
    fn validate(&self) -> Result<()> {
        let (c, d) = self.head_weights.shape();
        if self.feature.len() != d || self.head_bias.len() != c || self.diag.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "head {c}x{d}, bias {}, feature {}, diagonal {}",
                self.head_bias.len(),
                self.feature.len(),
                self.diag.len()
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        check_diag(self.diag)?;
        check_label(self.label, c)
    }

    fn augments(&self) -> bool {
        self.lambda > 0.0
    }
}

/// Logits, shift terms and augmented softmax of one sample.
#[derive(Debug, Clone)]
pub(crate) struct IsdaTerms {
    /// Post-clamp shift terms; all zero when no augmentation applies.
    #[cfg_attr(not(test), allow(dead_code))]
    pub shifts: Vec<f64>,
    /// `true` where the shift was clamped, so its derivative is zero.
    pub clamped: Vec<bool>,
    pub probs: Vec<f64>,
    pub loss: f64,
}

impl IsdaTerms {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|c| *c)
    }
}

pub(crate) fn isda_terms(inp: &IsdaInput<'_>) -> Result<IsdaTerms> {
    inp.validate()?;
    let w = inp.head_weights;
    let (c, _) = w.shape();
    let mut logits = w.matvec(inp.feature)?;
    for (z, b) in logits.iter_mut().zip(inp.head_bias) {
        *z += b;
    }
    let mut shifts = vec![0.0; c];
    let mut clamped = vec![false; c];
    if inp.augments() {
        let wy = w.row(inp.label);
        for j in 0..c {
            if j == inp.label {
                continue;
            }
            let quad = w
                .row(j)
                .iter()
                .zip(wy)
                .zip(inp.diag)
                .fold(0.0, |acc, ((wj, wyd), s)| {
                    let v = wj - wyd;
                    acc + s * v * v
                });
            let shift = 0.5 * inp.lambda * quad;
            if shift > SHIFT_CLAMP {
                shifts[j] = SHIFT_CLAMP;
                clamped[j] = true;
            } else {
                shifts[j] = shift;
            }
        }
    }
    let augmented: Vec<f64> = logits.iter().zip(&shifts).map(|(z, s)| z + s).collect();
    let lse = logsumexp(&augmented)?;
    let probs = augmented.iter().map(|v| (v - lse).exp()).collect();
    let loss = lse - logits[inp.label];
    Ok(IsdaTerms {
        shifts,
        clamped,
        probs,
        loss,
    })
}

pub fn isda_loss(inp: &IsdaInput<'_>) -> Result<f64> {
    Ok(isda_terms(inp)?.loss)
}

/// Analytic gradients of [`isda_loss`] together with the loss itself.
#[derive(Debug, Clone, PartialEq)]
pub struct IsdaGradients {
    pub loss: f64,
    pub d_feature: Vec<f64>,
    pub d_head_weights: Matrix,
    pub d_head_bias: Vec<f64>,
    pub d_diag: Vec<f64>,
    /// A shift term hit [`SHIFT_CLAMP`].
    pub clamped: bool,
}

impl IsdaGradients {
    /// Sensitivity at the logits `z_j` (`p_j − δ_{jy}`), i.e. `d_head_bias`.
    pub fn d_logits(&self) -> &[f64] {
        &self.d_head_bias
    }
}

pub fn isda_grads(inp: &IsdaInput<'_>) -> Result<IsdaGradients> {
    let terms = isda_terms(inp)?;
    Ok(grads_from_terms(inp, &terms))
}

pub(crate) fn grads_from_terms(inp: &IsdaInput<'_>, terms: &IsdaTerms) -> IsdaGradients {
    let w = inp.head_weights;
    let (c, d) = w.shape();
    let mut d_logits = terms.probs.clone();
    d_logits[inp.label] -= 1.0;

    let d_feature = w.matvec_t(&d_logits).expect("validated shapes");
    let mut d_head_weights = Matrix::zeros(c, d);
    d_head_weights.add_outer(1.0, &d_logits, inp.feature);
    if let Some(shift) = shift_head_grad(inp, terms) {
        for (g, s) in d_head_weights.data_mut().iter_mut().zip(shift.data()) {
            *g += s;
        }
    }

    let mut d_diag = vec![0.0; d];
    if inp.augments() {
        let wy = w.row(inp.label);
        for j in 0..c {
            if j == inp.label || terms.clamped[j] {
                continue;
            }
            let p = terms.probs[j];
            for (k, dd) in d_diag.iter_mut().enumerate() {
                let v = w.get(j, k) - wy[k];
                *dd += p * 0.5 * inp.lambda * v * v;
            }
        }
    }

    IsdaGradients {
        loss: terms.loss,
        d_feature,
        d_head_weights,
        d_head_bias: d_logits,
        d_diag,
        clamped: terms.any_clamped(),
    }
}

/// Head-weight gradient of the shift terms alone; `None` without
/// augmentation. `s_j` depends on `w_j` and `w_y` through `v_j = w_j − w_y`.
pub(crate) fn shift_head_grad(inp: &IsdaInput<'_>, terms: &IsdaTerms) -> Option<Matrix> {
    if !inp.augments() {
        return None;
    }
    let w = inp.head_weights;
    let (c, d) = w.shape();
    let y = inp.label;
    let wy = w.row(y);
    let mut g = Matrix::zeros(c, d);
    let mut dy = vec![0.0; d];
    for j in 0..c {
        if j == y || terms.clamped[j] {
            continue;
        }
        let p = terms.probs[j];
        let row = g.row_mut(j);
        for k in 0..d {
            let v = w.get(j, k) - wy[k];
            let gk = p * inp.lambda * inp.diag[k] * v;
            row[k] += gk;
            dy[k] -= gk;
        }
    }
    g.row_mut(y).copy_from_slice(&dy);
    Some(g)
}

/// Mean cross-entropy over `samples` features drawn from
/// `N(a, λ·diag(σ))`. This is the explicit estimator the closed form bounds.
pub fn mc_isda_loss(inp: &IsdaInput<'_>, samples: usize, rng: &mut RngState) -> Result<f64> {
    inp.validate()?;
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "Monte-Carlo sample count must be positive".into(),
        ));
    }
    let var: Vec<f64> = inp.diag.iter().map(|s| inp.lambda * s).collect();
    let mut mean = 0.0;
    for m in 0..samples {
        let a = gaussian_sample(inp.feature, &var, rng)?;
        let mut logits = inp.head_weights.matvec(&a)?;
        for (z, b) in logits.iter_mut().zip(inp.head_bias) {
            *z += b;
        }
        let l = ce_loss(&logits, inp.label)?;
        mean += (l - mean) / (m + 1) as f64;
    }
    Ok(mean)
}

/// Per-class streaming feature statistics.
///
/// Sums are kept exactly as accumulated, and the squared-deviation totals use
/// the Welford recurrence `S += (x − μ_old)(x − μ_new)`. Variances are read
/// with the population convention `S / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClasswiseCovTable {
    dim: usize,
    counts: Vec<u64>,
    sums: Vec<Vec<f64>>,
    sq_devs: Vec<Vec<f64>>,
}

impl ClasswiseCovTable {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            dim,
            counts: vec![0; classes],
            sums: vec![vec![0.0; dim]; classes],
            sq_devs: vec![vec![0.0; dim]; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn mean(&self, class: usize) -> Result<Vec<f64>> {
        check_label(class, self.num_classes())?;
        let n = self.counts[class];
        if n == 0 {
            return Ok(vec![0.0; self.dim]);
        }
        Ok(self.sums[class].iter().map(|s| s / n as f64).collect())
    }

    pub fn update(&mut self, feature: &[f64], label: usize) -> Result<()> {
        check_label(label, self.num_classes())?;
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "table tracks {} dimensions, feature has {}",
                self.dim,
                feature.len()
            )));
        }
        let n_old = self.counts[label];
        let n_new = n_old + 1;
        let sums = &mut self.sums[label];
        let devs = &mut self.sq_devs[label];
        for k in 0..self.dim {
            let mean_old = if n_old == 0 {
                0.0
            } else {
                sums[k] / n_old as f64
            };
            sums[k] += feature[k];
            let mean_new = sums[k] / n_new as f64;
            devs[k] += (feature[k] - mean_old) * (feature[k] - mean_new);
        }
        self.counts[label] = n_new;
        Ok(())
    }

    /// Population variance diagonal of `label`; zero until two samples arrive.
    pub fn lookup(&self, label: usize) -> Result<DiagCovariance> {
        check_label(label, self.num_classes())?;
        let n = self.counts[label];
        if n <= 1 {
            return Ok(DiagCovariance::zeros(self.dim));
        }
        Ok(DiagCovariance(
            self.sq_devs[label]
                .iter()
                .map(|s| (s / n as f64).max(0.0))
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_head() -> (Matrix, Vec<f64>) {
        (
            Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            vec![0.0, 0.0],
        )
    }

    fn toy<'a>(w: &'a Matrix, b: &'a [f64], diag: &'a [f64], lambda: f64) -> IsdaInput<'a> {
        IsdaInput {
            feature: &[0.5],
            label: 0,
            head_weights: w,
            head_bias: b,
            diag,
            lambda,
        }
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let two = ce_loss(&[0.5, -0.5], 0).unwrap();
        assert!((two - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((two - 0.313_262).abs() < 1e-6);
        assert!(ce_loss(&[1000.0, 0.0], 0).unwrap() <= 1e-12);
        assert_eq!(
            ce_loss(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        );
    }

    #[test]
    fn isda_hand_example() {
        let (w, b) = toy_head();
        let loss = isda_loss(&toy(&w, &b, &[1.0], 2.0)).unwrap();
        // Shift for class 1 is (2/2)·(−2)²·1 = 4, so ℓ = ln(1 + e³).
        assert!((loss - (1.0 + 3.0f64.exp()).ln()).abs() < 1e-14);
        assert!((loss - 3.048_587).abs() < 1e-6);

        let ce = ce_loss(&[0.5, -0.5], 0).unwrap();
        assert_eq!(isda_loss(&toy(&w, &b, &[1.0], 0.0)).unwrap(), ce);
        assert_eq!(isda_loss(&toy(&w, &b, &[0.0], 2.0)).unwrap(), ce);
    }

    #[test]
    fn isda_errors() {
        let (w, b) = toy_head();
        assert!(matches!(
            isda_loss(&toy(&w, &b, &[1.0], -1.0)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            isda_loss(&toy(&w, &b, &[-0.1], 1.0)),
            Err(Error::NegativeVariance { .. })
        ));
        let mut inp = toy(&w, &b, &[1.0], 1.0);
        inp.label = 5;
        assert!(matches!(
            isda_loss(&inp),
            Err(Error::LabelOutOfRange { .. })
        ));
        inp.label = 0;
        inp.diag = &[1.0, 1.0];
        assert!(matches!(isda_loss(&inp), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn own_class_shift_is_zero() {
        let mut rng = RngState::new(2);
        let w = Matrix::from_vec(
            3,
            4,
            (0..12).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
        )
        .unwrap();
        let inp = IsdaInput {
            feature: &[0.1, 0.2, 0.3, 0.4],
            label: 1,
            head_weights: &w,
            head_bias: &[0.0; 3],
            diag: &[0.5; 4],
            lambda: 5.0,
        };
        let t = isda_terms(&inp).unwrap();
        assert_eq!(t.shifts[1], 0.0);
        assert!(t.shifts[0] > 0.0 && t.shifts[2] > 0.0);
    }

    #[test]
    fn clamp_is_flagged() {
        let w = Matrix::from_rows(&[vec![100.0], vec![-100.0]]).unwrap();
        let b = [0.0, 0.0];
        let inp = IsdaInput {
            feature: &[0.0],
            label: 0,
            head_weights: &w,
            head_bias: &b,
            diag: &[1.0],
            lambda: 1.0,
        };
        let g = isda_grads(&inp).unwrap();
        assert!(g.clamped);
        assert!(g.loss.is_finite());
        assert!((g.loss - SHIFT_CLAMP).abs() < 1e-9);
    }

    #[test]
    fn diag_gradient_vanishes_without_lambda() {
        let (w, b) = toy_head();
        let g = isda_grads(&toy(&w, &b, &[0.7], 0.0)).unwrap();
        assert_eq!(g.d_diag, vec![0.0]);
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn isda_grads_match_finite_differences() {
        let mut rng = RngState::new(31);
        for _ in 0..40 {
            let c = 2 + rng.below(4);
            let d = 1 + rng.below(8);
            let w = Matrix::from_vec(
                c,
                d,
                (0..c * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
            )
            .unwrap();
            let b: Vec<f64> = (0..c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let s: Vec<f64> = (0..d).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            let lambda = rng.uniform_range(0.0, 5.0);
            let label = rng.below(c);
            let eval = |a: &[f64], w: &Matrix, b: &[f64], s: &[f64]| {
                isda_loss(&IsdaInput {
                    feature: a,
                    label,
                    head_weights: w,
                    head_bias: b,
                    diag: s,
                    lambda,
                })
                .unwrap()
            };
            let g = isda_grads(&IsdaInput {
                feature: &a,
                label,
                head_weights: &w,
                head_bias: &b,
                diag: &s,
                lambda,
            })
            .unwrap();
            let h = 1e-6;
            let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);
            for k in 0..d {
                let num = central(&|e| {
                    let mut a2 = a.clone();
                    a2[k] += e;
                    eval(&a2, &w, &b, &s)
                });
                assert!(rel(g.d_feature[k], num) < 1e-4);
                let num = central(&|e| {
                    let mut s2 = s.clone();
                    s2[k] += e;
                    eval(&a, &w, &b, &s2)
                });
                assert!(rel(g.d_diag[k], num) < 1e-4);
                assert!(g.d_diag[k] >= 0.0);
            }
            for j in 0..c {
                let num = central(&|e| {
                    let mut b2 = b.clone();
                    b2[j] += e;
                    eval(&a, &w, &b2, &s)
                });
                assert!(rel(g.d_head_bias[j], num) < 1e-4);
                for k in 0..d {
                    let num = central(&|e| {
                        let mut w2 = w.clone();
                        w2.set(j, k, w.get(j, k) + e);
                        eval(&a, &w2, &b, &s)
                    });
                    assert!(rel(g.d_head_weights.get(j, k), num) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn mc_without_variance_is_ce() {
        let (w, b) = toy_head();
        let ce = ce_loss(&[0.5, -0.5], 0).unwrap();
        let mut rng = RngState::new(1);
        for m in [1, 7, 1000] {
            assert_eq!(
                mc_isda_loss(&toy(&w, &b, &[0.0], 2.0), m, &mut rng).unwrap(),
                ce
            );
        }
        assert!(mc_isda_loss(&toy(&w, &b, &[1.0], 2.0), 0, &mut rng).is_err());
    }

    #[test]
    fn mc_single_draw_reproducible() {
        let (w, b) = toy_head();
        let inp = toy(&w, &b, &[1.0], 2.0);
        let x = mc_isda_loss(&inp, 1, &mut RngState::new(99)).unwrap();
        let y = mc_isda_loss(&inp, 1, &mut RngState::new(99)).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn classwise_two_samples() {
        let mut t = ClasswiseCovTable::new(2, 2);
        assert_eq!(t.lookup(0).unwrap().as_slice(), &[0.0, 0.0]);
        t.update(&[1.0, 0.0], 0).unwrap();
        assert_eq!(t.lookup(0).unwrap().as_slice(), &[0.0, 0.0]);
        let before = t.clone();
        let class1 = (t.count(1), t.mean(1).unwrap(), t.lookup(1).unwrap());
        t.update(&[3.0, 0.0], 0).unwrap();
        assert_eq!(t.mean(0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(t.lookup(0).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(
            (t.count(1), t.mean(1).unwrap(), t.lookup(1).unwrap()),
            class1
        );
        assert_ne!(t, before);
        let snapshot = t.clone();
        let _ = t.lookup(0).unwrap();
        assert_eq!(t, snapshot);
        assert!(t.update(&[0.0, 0.0], 2).is_err());
        assert!(t.lookup(9).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn isda_never_below_ce(
                c in 2usize..6,
                d in 1usize..6,
                seed in any::<u64>(),
                lambda in 0.0f64..20.0,
            ) {
                let mut rng = RngState::new(seed);
                let w = Matrix::from_vec(c, d, (0..c * d).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
                let b: Vec<f64> = (0..c).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let a: Vec<f64> = (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
                let s: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
                let label = rng.below(c);
                let inp = IsdaInput { feature: &a, label, head_weights: &w, head_bias: &b, diag: &s, lambda };
                let mut logits = w.matvec(&a).unwrap();
                for (z, bb) in logits.iter_mut().zip(&b) { *z += bb; }
                prop_assert!(isda_loss(&inp).unwrap() >= ce_loss(&logits, label).unwrap());
            }

            #[test]
            fn classwise_order_robust(
                stream in prop::collection::vec((prop::collection::vec(-256i32..256, 3), 0usize..3), 1..40),
                seed in any::<u64>(),
            ) {
                // Multiples of 1/64 keep every partial sum exact.
                let samples: Vec<(Vec<f64>, usize)> = stream
                    .into_iter()
                    .map(|(v, c)| (v.into_iter().map(|x| x as f64 / 64.0).collect(), c))
                    .collect();
                let mut shuffled = samples.clone();
                RngState::new(seed).shuffle(&mut shuffled);
                let mut a = ClasswiseCovTable::new(3, 3);
                let mut b = ClasswiseCovTable::new(3, 3);
                for (x, c) in &samples { a.update(x, *c).unwrap(); }
                for (x, c) in &shuffled { b.update(x, *c).unwrap(); }
                for c in 0..3 {
                    prop_assert_eq!(a.mean(c).unwrap(), b.mean(c).unwrap());
                    let (va, vb) = (a.lookup(c).unwrap(), b.lookup(c).unwrap());
                    for (x, y) in va.as_slice().iter().zip(vb.as_slice()) {
                        prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(y.abs()).max(1e-300));
                    }
                }
            }
        }
    }
}
