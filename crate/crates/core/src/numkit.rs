//! Dense row-major matrices, stable reductions and a counter-based RNG.
//!
//! Every reduction here walks its input left to right, so sums are
//! bit-stable from run to run. The RNG is SplitMix64 evaluated at
//! `(seed, counter)`; normal deviates come from the cosine branch of the
//! Box–Muller transform, consuming exactly two 64-bit draws each:
//!
//! ```text
//! u  = ((bits >> 11) + 0.5) * 2^-53          in (0, 1)
//! z  = sqrt(-2 ln u1) * cos(2 pi u2)
//! ```

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "matvec_t: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            for (w, &vc) in self.row_mut(r).iter_mut().zip(v) {
                *w += s * vc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fixed-order dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `log Σ exp(v_i)` with max-shift.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum = values.iter().fold(0.0, |acc, v| acc + (v - max).exp());
    Ok(max + sum.ln())
}

/// Softmax with the same max-shift as [`logsumexp`].
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|v| (v - lse).exp()).collect())
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator: draw `k` of seed `s` is a pure function of
/// `(s, k)`, so streams are portable and can be replayed from any point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent substream keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(mix64(
            self.seed ^ mix64(stream.wrapping_add(0x632b_e59b_d9b4_e019)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(mix64(self.seed).wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the bias is below 2^-64 · n.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher–Yates, back to front.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Uniformly random unit vector.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.standard_normal()).collect();
            let n = norm_sq(&v).sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

/// `mean + sqrt(diag_var) ⊙ z`, `z` standard normal per coordinate.
///
/// Coordinates with zero variance still consume their normal draw, so the
/// stream position after a call depends only on the dimension.
pub fn gaussian_sample(mean: &[f64], diag_var: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
    if mean.len() != diag_var.len() {
        return Err(Error::DimensionMismatch(format!(
            "mean has length {}, variance has length {}",
            mean.len(),
            diag_var.len()
        )));
    }
    if let Some((index, &value)) = diag_var.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeVariance { index, value });
    }
    Ok(mean
        .iter()
        .zip(diag_var)
        .map(|(&m, &v)| {
            let z = rng.standard_normal();
            if v == 0.0 {
                m
            } else {
                m + v.sqrt() * z
            }
        })
        .collect())
}

/// A collection of dense tensors that can be updated elementwise.
///
/// Implementors expose their tensors in a fixed order together with a shape
/// signature; two sets are congruent when their signatures are equal.
pub trait ParamSet: Clone {
    fn signature(&self) -> Vec<(usize, usize)>;
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.signature().iter().map(|(r, c)| r * c).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Overwrites every value from `flat`, in [`ParamSet::flatten`] order.
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn norm_sq(&self) -> f64 {
        self.tensors().iter().fold(0.0, |acc, t| acc + norm_sq(t))
    }

    /// In-place `self += scale · other`.
    fn axpy_in_place(&mut self, scale: f64, other: &Self) -> Result<()> {
        check_congruent(self, other)?;
        if scale == 0.0 {
            return Ok(());
        }
        for (d, g) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in d.iter_mut().zip(g) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    fn scale_in_place(&mut self, scale: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= scale;
            }
        }
    }
}

pub(crate) fn check_congruent<P: ParamSet>(a: &P, b: &P) -> Result<()> {
    let (sa, sb) = (a.signature(), b.signature());
    if sa != sb {
        return Err(Error::DimensionMismatch(format!(
            "parameter sets are not congruent: {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

/// `dst + scale · grad`, elementwise. A zero scale returns `dst` bit-exactly.
pub fn param_axpy<P: ParamSet>(dst: &P, scale: f64, grad: &P) -> Result<P> {
    let mut out = dst.clone();
    out.axpy_in_place(scale, grad)?;
    Ok(out)
}

impl ParamSet for Vec<f64> {
    fn signature(&self) -> Vec<(usize, usize)> {
        vec![(1, self.len())]
    }

    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}
