//! Minimal dense complex linear algebra and a radix-2 FFT.
//!
//! Everything here is a pure function on immutable inputs. The FFT supports
//! power-of-two lengths only; callers that need other sizes fall back to
//! dense multiplication with [`dft_matrix`].

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Complex scalar with `f64` components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cpx {
    pub re: f64,
    pub im: f64,
}

impl Cpx {
    pub const ZERO: Cpx = Cpx { re: 0.0, im: 0.0 };
    pub const ONE: Cpx = Cpx { re: 1.0, im: 0.0 };

    #[inline]
    pub fn new(re: f64, im: f64) -> Self {
        Cpx { re, im }
    }

    #[inline]
    pub fn from_polar(r: f64, theta: f64) -> Self {
        Cpx::new(r * theta.cos(), r * theta.sin())
    }

    #[inline]
    pub fn conj(self) -> Self {
        Cpx::new(self.re, -self.im)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Cpx::new(self.re * s, self.im * s)
    }

    #[inline]
    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    #[inline]
    pub fn modulus(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

impl Add for Cpx {
    type Output = Cpx;
    #[inline]
    fn add(self, rhs: Cpx) -> Cpx {
        Cpx::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl Sub for Cpx {
    type Output = Cpx;
    #[inline]
    fn sub(self, rhs: Cpx) -> Cpx {
        Cpx::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl Mul for Cpx {
    type Output = Cpx;
    #[inline]
    fn mul(self, rhs: Cpx) -> Cpx {
        Cpx::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}

impl Neg for Cpx {
    type Output = Cpx;
    #[inline]
    fn neg(self) -> Cpx {
        Cpx::new(-self.re, -self.im)
    }
}

impl AddAssign for Cpx {
    #[inline]
    fn add_assign(&mut self, rhs: Cpx) {
        *self = *self + rhs;
    }
}

impl SubAssign for Cpx {
    #[inline]
    fn sub_assign(&mut self, rhs: Cpx) {
        *self = *self - rhs;
    }
}

impl MulAssign for Cpx {
    #[inline]
    fn mul_assign(&mut self, rhs: Cpx) {
        *self = *self * rhs;
    }
}

/// Dense row-major complex matrix. Shape is fixed at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Cpx>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMat {
            rows,
            cols,
            data: vec![Cpx::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, Cpx::ONE);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Cpx) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Cpx {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: Cpx) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Cpx] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn conj_transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |r, c| self.get(c, r).conj())
    }

    pub fn matmul(&self, other: &CMat) -> Result<CMat> {
        if self.cols != other.rows {
            return Err(Error::InvalidDimension(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = CMat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                for c in 0..other.cols {
                    let v = out.get(r, c) + a * other.get(k, c);
                    out.set(r, c, v);
                }
            }
        }
        Ok(out)
    }

    /// Largest absolute component difference against `other`.
    pub fn max_abs_diff(&self, other: &CMat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).re.abs().max((*a - *b).im.abs()))
            .fold(0.0, f64::max)
    }
}

/// Unitary DFT matrix `Q[j,k] = exp(-2*pi*i*j*k/n) / sqrt(n)`.
pub fn dft_matrix(n: usize) -> Result<CMat> {
    if n == 0 {
        return Err(Error::InvalidDimension(
            "dft_matrix requires n >= 1".into(),
        ));
    }
    let scale = 1.0 / (n as f64).sqrt();
    Ok(CMat::from_fn(n, n, |j, k| {
        // reduce j*k mod n before forming the angle to keep it well-conditioned
        let jk = (j * k) % n;
        let theta = -2.0 * PI * (jk as f64) / (n as f64);
        Cpx::from_polar(scale, theta)
    }))
}

/// Complex matrix-vector product.
pub fn matvec(m: &CMat, x: &[Cpx]) -> Result<Vec<Cpx>> {
    if m.cols != x.len() {
        return Err(Error::InvalidDimension(format!(
            "matvec: matrix is {}x{}, vector has length {}",
            m.rows,
            m.cols,
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let mut acc = Cpx::ZERO;
        for (a, b) in m.row(r).iter().zip(x.iter()) {
            acc += *a * *b;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Precomputed radix-2 FFT of a fixed power-of-two length.
///
/// The forward transform is unnormalized (`X[j] = sum_k x[k] w^(jk)` with
/// `w = exp(-2*pi*i/n)`); the inverse applies the `1/n` factor. The unitary
/// `1/sqrt(n)` convention of [`dft_matrix`] is left to call sites.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    // exp(-2*pi*i*k/n) for k in 0..n/2
    twiddles: Vec<Cpx>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::InvalidDimension(format!(
                "FFT length must be a positive power of two, got {n}; \
                 use dft_matrix for other sizes"
            )));
        }
        let twiddles = (0..n / 2)
            .map(|k| Cpx::from_polar(1.0, -2.0 * PI * (k as f64) / (n as f64)))
            .collect();
        Ok(FftPlan { n, twiddles })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized forward transform.
    pub fn forward(&self, x: &mut [Cpx]) {
        assert_eq!(x.len(), self.n, "FFT plan length mismatch");
        self.transform(x, false);
    }

    /// In-place inverse transform including the `1/n` factor.
    pub fn inverse(&self, x: &mut [Cpx]) {
        assert_eq!(x.len(), self.n, "FFT plan length mismatch");
        self.transform(x, true);
        let s = 1.0 / self.n as f64;
        for v in x.iter_mut() {
            *v = v.scale(s);
        }
    }

    fn transform(&self, x: &mut [Cpx], inverse: bool) {
        let n = self.n;
        if n == 1 {
            return;
        }
        // bit-reversal permutation
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                x.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = x[start + k];
                    let b = x[start + k + half] * w;
                    x[start + k] = a + b;
                    x[start + k + half] = a - b;
                }
            }
            len *= 2;
        }
    }
}

/// Unnormalized forward FFT (power-of-two lengths only).
pub fn fft(x: &[Cpx]) -> Result<Vec<Cpx>> {
    let plan = FftPlan::new(x.len())?;
    let mut out = x.to_vec();
    plan.forward(&mut out);
    Ok(out)
}

/// Inverse FFT with `1/n` normalization (power-of-two lengths only).
pub fn ifft(x: &[Cpx]) -> Result<Vec<Cpx>> {
    let plan = FftPlan::new(x.len())?;
    let mut out = x.to_vec();
    plan.inverse(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_cvec(n: usize, rng: &mut impl Rng) -> Vec<Cpx> {
        (0..n)
            .map(|_| Cpx::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn complex_product_components() {
        let a = Cpx::new(2.0, 3.0);
        let b = Cpx::new(-1.0, 4.0);
        let p = a * b;
        assert_eq!(p.re, -2.0 - 12.0);
        assert_eq!(p.im, 8.0 - 3.0);
    }

    #[test]
    fn dft_one_point_is_identity() {
        let q = dft_matrix(1).unwrap();
        assert_eq!(q.get(0, 0), Cpx::ONE);
    }

    #[test]
    fn dft_two_point_closed_form() {
        let q = dft_matrix(2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for (r, c, want) in [(0, 0, s), (0, 1, s), (1, 0, s), (1, 1, -s)] {
            let got = q.get(r, c);
            assert!((got.re - want).abs() < 1e-15 && got.im.abs() < 1e-15);
        }
    }

    #[test]
    fn dft_zero_is_error() {
        assert!(matches!(dft_matrix(0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn dft_unitarity() {
        for n in [1usize, 2, 4, 8, 16, 64] {
            let q = dft_matrix(n).unwrap();
            let prod = q.conj_transpose().matmul(&q).unwrap();
            let diff = prod.max_abs_diff(&CMat::identity(n));
            assert!(diff < 1e-10, "n={n}: max deviation {diff}");
        }
    }

    #[test]
    fn dft_eight_point_tight_unitarity() {
        let q = dft_matrix(8).unwrap();
        let prod = q.conj_transpose().matmul(&q).unwrap();
        assert!(prod.max_abs_diff(&CMat::identity(8)) < 1e-12);
    }

    #[test]
    fn fft_impulse_and_constant() {
        let impulse = [Cpx::ONE, Cpx::ZERO, Cpx::ZERO, Cpx::ZERO];
        let spectrum = fft(&impulse).unwrap();
        for v in &spectrum {
            assert!((v.re - 1.0).abs() < 1e-15 && v.im.abs() < 1e-15);
        }

        let constant = [Cpx::ONE; 4];
        let spectrum = fft(&constant).unwrap();
        assert!((spectrum[0].re - 4.0).abs() < 1e-15);
        for v in &spectrum[1..] {
            assert!(v.modulus() < 1e-14);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let x = vec![Cpx::ONE; 6];
        let err = fft(&x).unwrap_err();
        assert!(err.to_string().contains("power of two"));
    }

    #[test]
    fn fft_matches_dense_dft() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for n in [1usize, 2, 4, 8, 16, 64] {
            let q = dft_matrix(n).unwrap();
            let scale = (n as f64).sqrt();
            for _ in 0..100 {
                let x = random_cvec(n, &mut rng);
                let via_fft = fft(&x).unwrap();
                let dense = matvec(&q, &x).unwrap();
                for (f, d) in via_fft.iter().zip(dense.iter()) {
                    let want = d.scale(scale);
                    let err = (*f - want).modulus();
                    let denom = want.modulus().max(1e-12);
                    assert!(err / denom < 1e-10 || err < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for n in [1usize, 2, 4, 8, 16, 64] {
            let x = random_cvec(n, &mut rng);
            let back = ifft(&fft(&x).unwrap()).unwrap();
            for (a, b) in x.iter().zip(back.iter()) {
                assert!((*a - *b).modulus() < 1e-10);
            }
        }
    }

    #[test]
    fn matvec_identity_and_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = random_cvec(5, &mut rng);
        let id = CMat::identity(5);
        assert_eq!(matvec(&id, &x).unwrap(), x);

        let z = CMat::zeros(4, 5);
        for v in matvec(&z, &x).unwrap() {
            assert_eq!(v, Cpx::ZERO);
        }
    }

    #[test]
    fn matvec_against_scalar_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let m = CMat::from_fn(3, 3, |_, _| {
            Cpx::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let x = random_cvec(3, &mut rng);
        let got = matvec(&m, &x).unwrap();
        for r in 0..3 {
            let mut want = Cpx::ZERO;
            for c in 0..3 {
                want += m.get(r, c) * x[c];
            }
            assert!((got[r] - want).modulus() < 1e-14);
        }
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = CMat::zeros(3, 4);
        let x = vec![Cpx::ZERO; 3];
        assert!(matches!(
            matvec(&m, &x),
            Err(Error::InvalidDimension(_))
        ));
    }
}
