//! Dense row-major tensors and the numerical kernels behind the autograd ops.
//!
//! Every kernel sums in a fixed order (row-major, no reassociation), so equal
//! inputs give bit-identical outputs regardless of where they sit in a batch.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point storage type. `f32` is the training precision, `f64` the
/// verification precision used by gradient checks and oracle tests.
pub trait Scalar: Float + Debug + Default + Send + Sync + std::iter::Sum + 'static {
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&v| S::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for j in 0..n {
                c_row[j] = c_row[j] + aip * b_row[j];
            }
        }
    }
}

/// `c[k×n] += aᵀ · d` where `a` is `m×k` and `d` is `m×n`.
pub fn gemm_tn_acc<S: Scalar>(a: &[S], d: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cj, &dj) in c_row.iter_mut().zip(d_row) {
                *cj = *cj + aip * dj;
            }
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<S: Scalar>(x: &[S], r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `c[m×k] += d[m×n] · bᵀ` where `b` is `k×n`.
pub fn gemm_nt_acc<S: Scalar>(d: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    gemm_acc(d, &bt, c, m, n, k);
}

/// Numerically stable softmax of one slice, written into `out`.
pub fn softmax_slice<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
pub const GELU_COEFF: f64 = 0.044715;

/// `tanh(u) = 1 - 2 / (exp(2u) + 1)`; one `exp` instead of libm's `tanh`,
/// exact at both saturations.
#[inline]
fn fast_tanh<S: Scalar>(u: S) -> S {
    let two = S::from_f64(2.0);
    S::one() - two / ((two * u).exp() + S::one())
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_SQRT_2_OVER_PI);
    let a = S::from_f64(GELU_COEFF);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + fast_tanh(inner))
}

#[inline]
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_SQRT_2_OVER_PI);
    let a = S::from_f64(GELU_COEFF);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = fast_tanh(inner);
    let dinner = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let u = i as f64 / 200.0;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert_eq!(fast_tanh(1e3f64), 1.0);
        assert_eq!(fast_tanh(-1e3f64), -1.0);
        assert!(fast_tanh(f64::NAN).is_nan());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·c has shape 3x4 and c·bᵀ has shape 2x3
        let mut tn = vec![0.0; 12];
        gemm_tn_acc(&a, &c, &mut tn, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let mut tn_ref = vec![0.0; 12];
        gemm_acc(&at, &c, &mut tn_ref, 3, 2, 4);
        assert_eq!(tn, tn_ref);
        let mut nt = vec![0.0; 6];
        gemm_nt_acc(&c, &b, &mut nt, 2, 3, 4);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((nt[i * 3 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(10.0f64) - 0.9999546021312976).abs() < 1e-15);
    }
}
