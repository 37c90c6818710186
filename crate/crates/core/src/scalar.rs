//! Scalar abstraction shared by the tensor and autodiff layers.
//!
//! Everything numeric is generic over [`Scalar`] so that the same model code
//! runs on plain `f64` (training, inference) and on [`Dual`] numbers, which
//! turns a reverse-mode gradient pass into an exact Hessian-vector product.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
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
{
    fn from_f64(v: f64) -> Self;

    /// Primal value. Comparisons (ReLU gates, argmax, masking) use this.
    fn re(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(self) -> bool;

    /// `c = beta * c + a · b` on strided row-major views of shapes
    /// `m×k`, `k×n`, `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        naive_gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn naive_gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    rsa: isize,
    csa: isize,
    b: &[S],
    rsb: isize,
    csb: isize,
    beta: S,
    c: &mut [S],
) {
    if beta == S::zero() {
        c.iter_mut().for_each(|x| *x = S::zero());
    } else if beta != S::one() {
        c.iter_mut().for_each(|x| *x *= beta);
    }
    for i in 0..m {
        for p in 0..k {
            let av = a[(i as isize * rsa + p as isize * csa) as usize];
            let crow = &mut c[i * n..(i + 1) * n];
            for (j, cv) in crow.iter_mut().enumerate() {
                *cv += av * b[(p as isize * rsb + j as isize * csb) as usize];
            }
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c.iter_mut().for_each(|x| *x *= beta);
            return;
        }
        assert!(c.len() >= m * n);
        let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
        let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
        assert!(max_a >= 0 && (max_a as usize) < a.len());
        assert!(max_b >= 0 && (max_b as usize) < b.len());
        // SAFETY: bounds of every strided access were checked above and the
        // output is a dense m×n row-major block.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        Dual::new(self.re * inv, (self.eps * o.re - self.re * o.eps) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps * 0.5 / s)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }
}
