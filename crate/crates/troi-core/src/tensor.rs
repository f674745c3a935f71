//! Minimal dense tensor type plus the numeric primitives the operators build on.
//!
//! Tensors are row-major and contiguous with rank <= 4; for H x W x C feature
//! maps the channel axis is innermost, so per-position channel vectors are
//! contiguous slices. Every reduction runs in a fixed sequential order, which
//! makes all operations bitwise deterministic.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Result, TroiError};

pub const MAX_RANK: usize = 4;

/// Default guard for L2 normalization of (near-)zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// Scalar type stored in a tensor file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a [`Tensor`]. Implemented for `f32` and `f64`.
///
/// `exp` and `ln` go through `libm` so the same bits come out on every
/// platform; the remaining arithmetic is IEEE-deterministic already.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    /// How far a per-position weight sum may drift from 1 before the
    /// aggregation guard rejects it; scaled to the dtype's rounding.
    const WEIGHT_SUM_TOL: f64;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;
    const WEIGHT_SUM_TOL: f64 = 1e-9;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;
    const WEIGHT_SUM_TOL: f64 = 1e-5;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

/// Dense row-major tensor, rank 1..=4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f64> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let n = dims.iter().product();
        Ok(Tensor {
            dims: dims.to_vec(),
            data: vec![T::ZERO; n],
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_dims(dims)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(TroiError::shape(format!(
                "data length {} does not match dims {:?} (expect {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TroiError::shape(format!(
                "rank {} outside 1..={}",
                dims.len(),
                MAX_RANK
            )));
        }
        if dims.contains(&0) {
            return Err(TroiError::shape(format!("zero extent in dims {dims:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat offset of `[i, j]` in a rank-2 tensor.
    #[inline]
    pub fn off2(&self, i: usize, j: usize) -> usize {
        i * self.dims[1] + j
    }

    /// Flat offset of `[y, x, c]` in a rank-3 tensor.
    #[inline]
    pub fn off3(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.dims[1] + x) * self.dims[2] + c
    }

    /// Flat offset of `[a, b, c, d]` in a rank-4 tensor.
    #[inline]
    pub fn off4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.dims[1] + b) * self.dims[2] + c) * self.dims[3] + d
    }

    /// Contiguous channel vector at spatial position `(y, x)` of an H x W x C tensor.
    #[inline]
    pub fn channel_slice(&self, y: usize, x: usize) -> &[T] {
        let c = self.dims[2];
        let start = (y * self.dims[1] + x) * c;
        &self.data[start..start + c]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reshape without moving data; the element count must match.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor<T>> {
        Tensor::from_vec(dims, self.data.clone())
    }

    /// Largest elementwise |a - b|; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.dims != other.dims {
            return Err(TroiError::shape(format!(
                "max_abs_diff dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Lossy dtype conversion (used only to move between f32 and f64 worlds).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// v / max(||v||, eps). A zero vector maps to the zero vector.
pub fn l2_normalize<T: Element>(v: &[T], eps: T) -> Result<Vec<T>> {
    let mut out = vec![T::ZERO; v.len()];
    l2_normalize_into(v, eps, &mut out)?;
    Ok(out)
}

/// In-place variant of [`l2_normalize`] for hot loops. `out` must match `v` in length.
pub fn l2_normalize_into<T: Element>(v: &[T], eps: T, out: &mut [T]) -> Result<()> {
    debug_assert_eq!(v.len(), out.len());
    if !(eps > T::ZERO) {
        return Err(TroiError::invalid("l2_normalize eps must be > 0"));
    }
    let mut sq = T::ZERO;
    for &x in v {
        sq += x * x;
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TroiError::NonFinite("l2_normalize input".into()));
    }
    let denom = if norm > eps { norm } else { eps };
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x / denom;
    }
    Ok(())
}

/// VJP of [`l2_normalize`] with respect to `v`.
///
/// Below the eps guard the jacobian is taken as zero (the guard region is a
/// measure-zero corner for the inputs this library sees).
pub fn l2_normalize_vjp<T: Element>(v: &[T], eps: T, cotangent: &[T]) -> Result<Vec<T>> {
    if v.len() != cotangent.len() {
        return Err(TroiError::shape(format!(
            "l2_normalize_vjp lengths {} vs {}",
            v.len(),
            cotangent.len()
        )));
    }
    let mut sq = T::ZERO;
    for &x in v {
        sq += x * x;
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TroiError::NonFinite("l2_normalize_vjp input".into()));
    }
    if !(norm > eps) {
        return Ok(vec![T::ZERO; v.len()]);
    }
    // d(v/||v||)^T g = (g - v_hat <v_hat, g>) / ||v||
    let mut dot = T::ZERO;
    for (&x, &g) in v.iter().zip(cotangent) {
        dot += (x / norm) * g;
    }
    let mut out = vec![T::ZERO; v.len()];
    for ((o, &x), &g) in out.iter_mut().zip(v).zip(cotangent) {
        *o = (g - (x / norm) * dot) / norm;
    }
    Ok(out)
}

/// Max-subtracted softmax; weights are positive and sum to 1.
pub fn softmax<T: Element>(scores: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::ZERO; scores.len()];
    softmax_into(scores, &mut out)?;
    Ok(out)
}

/// In-place variant of [`softmax`]. `out` must match `scores` in length.
pub fn softmax_into<T: Element>(scores: &[T], out: &mut [T]) -> Result<()> {
    if scores.is_empty() {
        return Err(TroiError::invalid("softmax of empty score vector"));
    }
    debug_assert_eq!(scores.len(), out.len());
    let mut max = scores[0];
    for &s in &scores[1..] {
        if s > max {
            max = s;
        }
    }
    if !max.is_finite() {
        return Err(TroiError::NonFinite("softmax input".into()));
    }
    let mut sum = T::ZERO;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// VJP of [`softmax`]: grad = w .* (g - <g, w>).
pub fn softmax_vjp<T: Element>(scores: &[T], cotangent: &[T]) -> Result<Vec<T>> {
    if scores.len() != cotangent.len() {
        return Err(TroiError::shape(format!(
            "softmax_vjp lengths {} vs {}",
            scores.len(),
            cotangent.len()
        )));
    }
    let w = softmax(scores)?;
    let mut dot = T::ZERO;
    for (&wi, &gi) in w.iter().zip(cotangent) {
        dot += wi * gi;
    }
    Ok(w.iter()
        .zip(cotangent)
        .map(|(&wi, &gi)| wi * (gi - dot))
        .collect())
}

/// C = A x B for rank-2 tensors (p x q) x (q x r).
///
/// The k-reduction for every output element runs sequentially in increasing k,
/// so results are independent of the loop nest used here.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TroiError::shape(format!(
            "matmul expects rank-2 tensors, got {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (p, q) = (a.dims()[0], a.dims()[1]);
    let (q2, r) = (b.dims()[0], b.dims()[1]);
    if q != q2 {
        return Err(TroiError::shape(format!("matmul inner dims {q} vs {q2}")));
    }
    let mut c = Tensor::zeros(&[p, r])?;
    let ad = a.data();
    let bd = b.data();
    let cd = c.data_mut();
    // i-k-j order with four output rows per pass: unit-stride access on B and
    // C, each B row reused across four rows of A, and each C[i][j] still
    // accumulates over k in increasing order.
    let mut i = 0;
    while i + 4 <= p {
        for k in 0..q {
            let a0 = ad[i * q + k];
            let a1 = ad[(i + 1) * q + k];
            let a2 = ad[(i + 2) * q + k];
            let a3 = ad[(i + 3) * q + k];
            let brow = &bd[k * r..(k + 1) * r];
            let base = i * r;
            for j in 0..r {
                let bv = brow[j];
                cd[base + j] += a0 * bv;
                cd[base + r + j] += a1 * bv;
                cd[base + 2 * r + j] += a2 * bv;
                cd[base + 3 * r + j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < p {
        for k in 0..q {
            let aik = ad[i * q + k];
            let brow = &bd[k * r..(k + 1) * r];
            let crow = &mut cd[i * r..(i + 1) * r];
            for j in 0..r {
                crow[j] += aik * brow[j];
            }
        }
        i += 1;
    }
    Ok(c)
}

/// VJP of [`matmul`]: (dA, dB) = (G B^T, A^T G).
pub fn matmul_vjp<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cotangent: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (p, q) = (a.dims()[0], a.dims()[1]);
    let r = b.dims()[1];
    if cotangent.dims() != [p, r] {
        return Err(TroiError::shape(format!(
            "matmul_vjp cotangent {:?}, expected [{p}, {r}]",
            cotangent.dims()
        )));
    }
    let bt = transpose2(b);
    let at = transpose2(a);
    let da = matmul(cotangent, &bt)?;
    let db = matmul(&at, cotangent)?;
    debug_assert_eq!(da.dims(), [p, q]);
    Ok((da, db))
}

/// Materialized transpose of a rank-2 tensor.
pub fn transpose2<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let (p, q) = (a.dims[0], a.dims[1]);
    let mut out = vec![T::ZERO; p * q];
    let ad = a.data();
    for i in 0..p {
        for j in 0..q {
            out[j * p + i] = ad[i * q + j];
        }
    }
    Tensor {
        dims: vec![q, p],
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_unit_vector_unchanged() {
        let out = l2_normalize(&[1.0, 0.0, 0.0], NORM_EPS).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let out = l2_normalize(&[3.0, 4.0], NORM_EPS).unwrap();
        assert!(vec_close(&out, &[0.6, 0.8], 1e-15));
    }

    #[test]
    fn normalize_zero_vector_stays_zero() {
        let out = l2_normalize(&[0.0, 0.0], NORM_EPS).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(l2_normalize(&[f64::NAN, 1.0], NORM_EPS).is_err());
        assert!(l2_normalize(&[f64::INFINITY], NORM_EPS).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let w = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_singleton_is_one() {
        let w = softmax(&[123.456]).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn softmax_closed_form_ln2() {
        let w = softmax(&[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!(vec_close(&w, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax::<f64>(&[]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap(), a);
    }

    #[test]
    fn matmul_row_sums() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &ones).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_dim_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[4, 2]).unwrap();
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Naive i-j-k reference, written independently of the ikj kernel.
        let mut rng = crate::rng::SplitMix64::new(42);
        let a_data: Vec<f64> = (0..5 * 6).map(|_| rng.next_signed_unit()).collect();
        let b_data: Vec<f64> = (0..6 * 7).map(|_| rng.next_signed_unit()).collect();
        let a = Tensor::from_vec(&[5, 6], a_data.clone()).unwrap();
        let b = Tensor::from_vec(&[6, 7], b_data.clone()).unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += a_data[i * 6 + k] * b_data[k * 7 + j];
                }
                assert_eq!(c.data()[i * 7 + j], acc, "bitwise equal at ({i},{j})");
            }
        }
    }

    #[test]
    fn tensor_rejects_bad_dims() {
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        assert!(Tensor::<f64>::zeros(&[1, 2, 3, 4, 5]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }
}
