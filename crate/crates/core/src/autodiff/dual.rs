//! Scalar types the tensor engine is generic over.
//!
//! [`Dual`] carries a value and its derivative with respect to a single
//! scalar (the discount logit). Running the reverse-mode tape over `Dual`
//! gives forward-over-reverse: gradients whose tangents are the derivative
//! of the gradient with respect to that scalar.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Real-valued scalar: either a plain `f64` or a [`Dual`].
pub trait Real:
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
    fn from_f64(x: f64) -> Self;
    /// Primal value.
    fn value(self) -> f64;
    /// Derivative part; zero for `f64`.
    fn tangent(self) -> f64;
    /// Drops the derivative part.
    fn detach(self) -> Self {
        Self::from_f64(self.value())
    }
    fn scale(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `c = op(a) * op(b)` with arbitrary strides; `c` is `m x n` row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
    ) -> Vec<Self>;
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: callers pass slices covering the strided extents (checked by the
    // tensor layer before dispatch); `c` is freshly allocated as m x n.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn tangent(self) -> f64 {
        0.0
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
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
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
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
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
    ) -> Vec<Self> {
        dgemm(m, k, n, a, a_strides, b, b_strides)
    }
}

/// Dual number `re + eps * ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }

    /// A variable: unit tangent.
    pub const fn variable(re: f64) -> Self {
        Dual { re, eps: 1.0 }
    }

    pub const fn constant(re: f64) -> Self {
        Dual { re, eps: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.eps * o.re - self.re * o.eps) / (o.re * o.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

fn split(x: &[Dual]) -> (Vec<f64>, Option<Vec<f64>>) {
    let re = x.iter().map(|d| d.re).collect();
    if x.iter().all(|d| d.eps == 0.0) {
        (re, None)
    } else {
        (re, Some(x.iter().map(|d| d.eps).collect()))
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn tangent(self) -> f64 {
        self.eps
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re * c, self.eps * c)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.re.powi(n - 1)
        };
        Dual::new(self.re.powi(n), self.eps * d)
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    /// Product rule over split value/tangent planes; tangent products are
    /// skipped when a side carries no tangent.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
    ) -> Vec<Self> {
        let (av, at) = split(a);
        let (bv, bt) = split(b);
        let cv = dgemm(m, k, n, &av, a_strides, &bv, b_strides);
        let mut ct = vec![0.0; m * n];
        if let Some(at) = &at {
            let p = dgemm(m, k, n, at, a_strides, &bv, b_strides);
            ct.iter_mut().zip(p).for_each(|(c, p)| *c += p);
        }
        if let Some(bt) = &bt {
            let p = dgemm(m, k, n, &av, a_strides, bt, b_strides);
            ct.iter_mut().zip(p).for_each(|(c, p)| *c += p);
        }
        cv.into_iter()
            .zip(ct)
            .map(|(re, eps)| Dual::new(re, eps))
            .collect()
    }
}
