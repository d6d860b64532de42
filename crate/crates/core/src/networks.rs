//! The classifier (tanh backbone blocks plus a linear head) and the
//! covariance predictor (tanh MLP with a sigmoid output), with hand-written
//! reverse-mode gradients and a forward-mode feature tangent.

use std::io::{BufRead, Write};

use crate::augment_loss::DiagCovariance;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, ParamSet, RngState};

/// Affine map `x ↦ W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut RngState) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.data_mut() {
            *w = rng.uniform_range(-limit, limit);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weight.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        Ok(z)
    }

    fn push_signature(&self, sig: &mut Vec<(usize, usize)>) {
        sig.push(self.weight.shape());
        sig.push((1, self.bias.len()));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Format(format!("unknown activation {other:?}"))),
        }
    }
}

/// Pre-activations are clamped to this magnitude so the sigmoid output stays
/// strictly inside (0, 1) in double precision.
pub const SIGMOID_CLAMP: f64 = 36.0;

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierArch {
    pub input_dim: usize,
    /// Output width of each backbone block, in order.
    pub block_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierArch {
    pub fn feature_dim(&self) -> usize {
        self.block_widths.last().copied().unwrap_or(self.input_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.block_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Backbone blocks `h_{k+1} = tanh(W_k h_k + b_k)` followed by the linear
/// head whose rows are the class weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub blocks: Vec<Dense>,
    pub head: Dense,
}

impl ClassifierParams {
    pub fn init(arch: &ClassifierArch, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.block_widths.len());
        let mut width = arch.input_dim;
        for &w in &arch.block_widths {
            blocks.push(Dense::glorot(width, w, rng));
            width = w;
        }
        let head = Dense::glorot(width, arch.num_classes, rng);
        Ok(Self { blocks, head })
    }

    pub fn from_layers(blocks: Vec<Dense>, head: Dense) -> Result<Self> {
        let p = Self { blocks, head };
        p.check_chain()?;
        Ok(p)
    }

    fn check_chain(&self) -> Result<()> {
        let mut width = self.input_dim();
        for (k, b) in self.blocks.iter().enumerate() {
            if b.input_dim() != width || b.bias.len() != b.output_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "block {k} expects input width {}, chain provides {width}",
                    b.input_dim()
                )));
            }
            width = b.output_dim();
        }
        if self.head.input_dim() != width || self.head.bias.len() != self.head.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "head expects feature width {}, backbone provides {width}",
                self.head.input_dim()
            )));
        }
        Ok(())
    }

    pub fn arch(&self) -> ClassifierArch {
        ClassifierArch {
            input_dim: self.input_dim(),
            block_widths: self.blocks.iter().map(Dense::output_dim).collect(),
            num_classes: self.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks
            .first()
            .map_or(self.head.input_dim(), Dense::input_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.blocks.iter().map(Dense::output_dim));
        widths.push(self.num_classes());
        let mut acts = vec![Activation::Tanh; self.blocks.len()];
        acts.push(Activation::Identity);
        write_params(w, "classifier", &widths, &acts, self)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let (widths, acts, values) = read_params(r, "classifier")?;
        let n = widths.len() - 1;
        if acts[..n - 1].iter().any(|a| *a != Activation::Tanh)
            || acts[n - 1] != Activation::Identity
        {
            return Err(Error::Format(
                "classifier must be tanh blocks and an identity head".into(),
            ));
        }
        let mut layers = layers_for(&widths);
        let head = layers.pop().expect("at least one layer");
        let mut p = Self {
            blocks: layers,
            head,
        };
        p.assign_flat(&values)?;
        Ok(p)
    }
}

impl ParamSet for ClassifierParams {
    fn signature(&self) -> Vec<(usize, usize)> {
        let mut sig = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in &self.blocks {
            b.push_signature(&mut sig);
        }
        self.head.push_signature(&mut sig);
        sig
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in self.blocks.iter().chain(std::iter::once(&self.head)) {
            out.push(b.weight.data());
            out.push(b.bias.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 2);
        for b in self
            .blocks
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
        {
            out.push(b.weight.data_mut());
            out.push(b.bias.as_mut_slice());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovNetArch {
    pub feature_dim: usize,
    pub hidden_widths: Vec<usize>,
}

impl CovNetArch {
    /// One hidden layer of width `ceil(D / 4)`.
    pub fn default_for(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden_widths: vec![feature_dim.div_ceil(4).max(1)],
        }
    }
}

/// Tanh hidden layers and a sigmoid output layer producing one variance per
/// feature coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CovNetParams {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

impl CovNetParams {
    pub fn init(arch: &CovNetArch, rng: &mut RngState) -> Result<Self> {
        if arch.feature_dim == 0 || arch.hidden_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {arch:?}"
            )));
        }
        let mut hidden = Vec::with_capacity(arch.hidden_widths.len());
        let mut width = arch.feature_dim;
        for &w in &arch.hidden_widths {
            hidden.push(Dense::glorot(width, w, rng));
            width = w;
        }
        let output = Dense::glorot(width, arch.feature_dim, rng);
        Ok(Self { hidden, output })
    }

    pub fn zeros(arch: &CovNetArch) -> Self {
        let mut hidden = Vec::new();
        let mut width = arch.feature_dim;
        for &w in &arch.hidden_widths {
            hidden.push(Dense::zeros(width, w));
            width = w;
        }
        Self {
            hidden,
            output: Dense::zeros(width, arch.feature_dim),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.output.input_dim(), Dense::input_dim)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.hidden.iter().map(Dense::output_dim));
        widths.push(self.feature_dim());
        let mut acts = vec![Activation::Tanh; self.hidden.len()];
        acts.push(Activation::Sigmoid);
        write_params(w, "covnet", &widths, &acts, self)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let (widths, acts, values) = read_params(r, "covnet")?;
        let n = widths.len() - 1;
        if acts[..n - 1].iter().any(|a| *a != Activation::Tanh)
            || acts[n - 1] != Activation::Sigmoid
        {
            return Err(Error::Format(
                "covnet must be tanh layers and a sigmoid output".into(),
            ));
        }
        let mut layers = layers_for(&widths);
        let output = layers.pop().expect("at least one layer");
        let mut p = Self {
            hidden: layers,
            output,
        };
        p.assign_flat(&values)?;
        Ok(p)
    }
}

impl ParamSet for CovNetParams {
    fn signature(&self) -> Vec<(usize, usize)> {
        let mut sig = Vec::with_capacity(2 * self.hidden.len() + 2);
        for b in &self.hidden {
            b.push_signature(&mut sig);
        }
        self.output.push_signature(&mut sig);
        sig
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in self.hidden.iter().chain(std::iter::once(&self.output)) {
            out.push(b.weight.data());
            out.push(b.bias.as_slice());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
        {
            out.push(b.weight.data_mut());
            out.push(b.bias.as_mut_slice());
        }
        out
    }
}

/// Number of leading backbone blocks whose gradients are forced to zero.
/// The head is never frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreezeMask {
    frozen_blocks: usize,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(frozen_blocks: usize, total_blocks: usize) -> Result<Self> {
        if frozen_blocks > total_blocks {
            return Err(Error::InvalidArgument(format!(
                "cannot freeze {frozen_blocks} of {total_blocks} blocks"
            )));
        }
        Ok(Self { frozen_blocks })
    }

    pub fn frozen_blocks(&self) -> usize {
        self.frozen_blocks
    }

    pub fn is_frozen(&self, block: usize) -> bool {
        block < self.frozen_blocks
    }

    /// Zeroes the frozen blocks of a classifier-shaped gradient.
    pub fn apply(&self, grads: &mut ClassifierParams) {
        for b in grads.blocks.iter_mut().take(self.frozen_blocks) {
            b.weight.data_mut().fill(0.0);
            b.bias.fill(0.0);
        }
    }
}

/// Activations recorded by [`classifier_forward`]: `acts[0]` is the input,
/// `acts[k]` the output of block `k - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTape {
    acts: Vec<Vec<f64>>,
}

impl ClassifierTape {
    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn feature(&self) -> &[f64] {
        self.acts.last().expect("tape holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub tape: ClassifierTape,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn classifier_forward(x: &[f64], params: &ClassifierParams) -> Result<ClassifierOutput> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "classifier expects input width {}, got {}",
            params.input_dim(),
            x.len()
        )));
    }
    let mut acts = Vec::with_capacity(params.blocks.len() + 1);
    acts.push(x.to_vec());
    for (k, block) in params.blocks.iter().enumerate() {
        let mut h = block.apply(acts.last().expect("non-empty"))?;
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        check_finite(&h, &format!("block {k} activation"))?;
        acts.push(h);
    }
    let tape = ClassifierTape { acts };
    let feature = tape.feature().to_vec();
    let logits = params.head.apply(&feature)?;
    check_finite(&logits, "logits")?;
    Ok(ClassifierOutput {
        feature,
        logits,
        tape,
    })
}

fn check_tape(params: &ClassifierParams, tape: &ClassifierTape) -> Result<()> {
    let ok = tape.acts.len() == params.blocks.len() + 1
        && tape.input().len() == params.input_dim()
        && params
            .blocks
            .iter()
            .zip(&tape.acts[1..])
            .all(|(b, h)| b.output_dim() == h.len());
    if ok {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(
            "classifier tape does not match parameters".into(),
        ))
    }
}

/// Gradient of a scalar loss given its sensitivities at the logits and,
/// optionally, directly at the feature node. Frozen blocks receive exactly
/// zero and backpropagation stops at the first frozen block.
pub fn classifier_backward(
    params: &ClassifierParams,
    tape: &ClassifierTape,
    d_feature: Option<&[f64]>,
    d_logits: &[f64],
    mask: FreezeMask,
) -> Result<ClassifierParams> {
    let mut grads = params.zeros_like();
    classifier_backward_into(params, tape, d_feature, d_logits, mask, 1.0, &mut grads)?;
    Ok(grads)
}

/// Accumulating form of [`classifier_backward`]: `grads += scale · ∂loss/∂θ`.
pub fn classifier_backward_into(
    params: &ClassifierParams,
    tape: &ClassifierTape,
    d_feature: Option<&[f64]>,
    d_logits: &[f64],
    mask: FreezeMask,
    scale: f64,
    grads: &mut ClassifierParams,
) -> Result<()> {
    check_tape(params, tape)?;
    if d_logits.len() != params.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "d_logits has length {}, head has {} classes",
            d_logits.len(),
            params.num_classes()
        )));
    }
    if let Some(df) = d_feature {
        if df.len() != params.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "d_feature has length {}, feature width is {}",
                df.len(),
                params.feature_dim()
            )));
        }
    }
    let feature = tape.feature();
    grads.head.weight.add_outer(scale, d_logits, feature);
    for (g, d) in grads.head.bias.iter_mut().zip(d_logits) {
        *g += scale * d;
    }
    let n = params.blocks.len();
    if n == 0 || mask.is_frozen(n - 1) {
        return Ok(());
    }
    let mut upstream = params.head.weight.matvec_t(d_logits)?;
    if let Some(df) = d_feature {
        for (u, d) in upstream.iter_mut().zip(df) {
            *u += d;
        }
    }
    for k in (0..n).rev() {
        if mask.is_frozen(k) {
            break;
        }
        let h = &tape.acts[k + 1];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(h)
            .map(|(u, hv)| u * (1.0 - hv * hv))
            .collect();
        let g = &mut grads.blocks[k];
        g.weight.add_outer(scale, &delta, &tape.acts[k]);
        for (gb, d) in g.bias.iter_mut().zip(&delta) {
            *gb += scale * d;
        }
        if k > 0 && !mask.is_frozen(k - 1) {
            upstream = params.blocks[k].weight.matvec_t(&delta)?;
        }
    }
    Ok(())
}

/// Forward-mode derivative of the feature along a parameter direction:
/// `d/dε f^b(x; θ + ε·direction)` at `ε = 0`. Frozen blocks contribute no
/// tangent of their own.
pub fn feature_tangent(
    params: &ClassifierParams,
    tape: &ClassifierTape,
    direction: &ClassifierParams,
    mask: FreezeMask,
) -> Result<Vec<f64>> {
    check_tape(params, tape)?;
    let mut tangent = vec![0.0; tape.input().len()];
    for (k, block) in params.blocks.iter().enumerate() {
        let h = &tape.acts[k + 1];
        if mask.is_frozen(k) {
            tangent = vec![0.0; h.len()];
            continue;
        }
        let dir = &direction.blocks[k];
        let mut pre = block.weight.matvec(&tangent)?;
        let from_w = dir.weight.matvec(&tape.acts[k])?;
        for ((p, fw), db) in pre.iter_mut().zip(&from_w).zip(&dir.bias) {
            *p += fw + db;
        }
        tangent = pre
            .iter()
            .zip(h)
            .map(|(p, hv)| p * (1.0 - hv * hv))
            .collect();
    }
    Ok(tangent)
}

/// Activations recorded by [`covnet_forward`]: `acts[0]` is the feature,
/// then each hidden activation, then the sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct CovNetTape {
    acts: Vec<Vec<f64>>,
}

impl CovNetTape {
    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty")
    }
}

pub fn covnet_forward(
    feature: &[f64],
    params: &CovNetParams,
) -> Result<(DiagCovariance, CovNetTape)> {
    if feature.len() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "covnet expects feature width {}, got {}",
            params.input_dim(),
            feature.len()
        )));
    }
    let mut acts = Vec::with_capacity(params.hidden.len() + 2);
    acts.push(feature.to_vec());
    for layer in &params.hidden {
        let mut h = layer.apply(acts.last().expect("non-empty"))?;
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        acts.push(h);
    }
    let mut out = params.output.apply(acts.last().expect("non-empty"))?;
    for v in out.iter_mut() {
        *v = sigmoid(*v);
    }
    check_finite(&out, "covnet output")?;
    acts.push(out.clone());
    Ok((DiagCovariance::from_sigmoid(out), CovNetTape { acts }))
}

pub fn covnet_backward(
    params: &CovNetParams,
    tape: &CovNetTape,
    d_diag: &[f64],
) -> Result<CovNetParams> {
    let mut grads = params.zeros_like();
    covnet_backward_into(params, tape, d_diag, 1.0, &mut grads)?;
    Ok(grads)
}

/// `grads += scale · ∂loss/∂θ_g` given the sensitivity at the diagonal.
pub fn covnet_backward_into(
    params: &CovNetParams,
    tape: &CovNetTape,
    d_diag: &[f64],
    scale: f64,
    grads: &mut CovNetParams,
) -> Result<()> {
    let ok = tape.acts.len() == params.hidden.len() + 2
        && tape.input().len() == params.input_dim()
        && tape.output().len() == params.feature_dim()
        && d_diag.len() == params.feature_dim();
    if !ok {
        return Err(Error::DimensionMismatch(
            "covnet tape or upstream gradient does not match parameters".into(),
        ));
    }
    let n = params.hidden.len();
    let out = tape.output();
    let mut delta: Vec<f64> = d_diag
        .iter()
        .zip(out)
        .map(|(d, s)| d * s * (1.0 - s))
        .collect();
    grads.output.weight.add_outer(scale, &delta, &tape.acts[n]);
    for (g, d) in grads.output.bias.iter_mut().zip(&delta) {
        *g += scale * d;
    }
    let mut upstream = params.output.weight.matvec_t(&delta)?;
    for k in (0..n).rev() {
        let h = &tape.acts[k + 1];
        delta = upstream
            .iter()
            .zip(h)
            .map(|(u, hv)| u * (1.0 - hv * hv))
            .collect();
        let g = &mut grads.hidden[k];
        g.weight.add_outer(scale, &delta, &tape.acts[k]);
        for (gb, d) in g.bias.iter_mut().zip(&delta) {
            *gb += scale * d;
        }
        if k > 0 {
            upstream = params.hidden[k].weight.matvec_t(&delta)?;
        }
    }
    Ok(())
}

const MAGIC_LINE: &str = "metaisda-params v1";

fn write_params<W: Write, P: ParamSet>(
    mut w: W,
    kind: &str,
    widths: &[usize],
    acts: &[Activation],
    params: &P,
) -> Result<()> {
    let widths: Vec<String> = widths.iter().map(usize::to_string).collect();
    let acts: Vec<&str> = acts.iter().map(|a| a.name()).collect();
    writeln!(w, "{MAGIC_LINE}")?;
    writeln!(w, "kind={kind}")?;
    writeln!(w, "widths={}", widths.join(","))?;
    writeln!(w, "activations={}", acts.join(","))?;
    writeln!(w, "count={}", params.num_params())?;
    writeln!(w, "end")?;
    for t in params.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

type Header = (Vec<usize>, Vec<Activation>, Vec<f64>);

fn read_params<R: BufRead>(mut r: R, kind: &str) -> Result<Header> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    };
    if next_line(&mut r)? != MAGIC_LINE {
        return Err(Error::Format("missing parameter header".into()));
    }
    let mut fields = std::collections::BTreeMap::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {l:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::Format(format!("header is missing {k}")))
    };
    if get("kind")? != kind {
        return Err(Error::Format(format!(
            "expected {kind} parameters, found {}",
            get("kind")?
        )));
    }
    let widths = get("widths")?
        .split(',')
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad width {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let acts = get("activations")?
        .split(',')
        .map(Activation::parse)
        .collect::<Result<Vec<_>>>()?;
    if widths.len() < 2 || acts.len() != widths.len() - 1 || widths.contains(&0) {
        return Err(Error::Format("inconsistent widths and activations".into()));
    }
    let count: usize = get("count")?
        .parse()
        .map_err(|_| Error::Format("bad count".into()))?;
    let expected: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if count != expected {
        return Err(Error::Format(format!(
            "count {count} does not match widths ({expected})"
        )));
    }
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated value stream".into()))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((widths, acts, values))
}

fn layers_for(widths: &[usize]) -> Vec<Dense> {
    widths
        .windows(2)
        .map(|w| Dense::zeros(w[0], w[1]))
        .collect()
}
