//! Forward-mode dual numbers with a fixed number of tangent directions.
//!
//! The flatness map in [`crate::dynamics`] is written once over [`Real`] and
//! evaluated either on plain `f64` or on `Dual<N>` to get exact directional
//! derivatives with respect to a window of waypoint coordinates.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar operations needed by the flatness map.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
    /// `f(x)` for an externally evaluated scalar field with value `f(x.value)`
    /// and gradient `grad`.
    fn lift(value: f64, grad: &[f64; 3], x: &[Self; 3]) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    fn lift(value: f64, _grad: &[f64; 3], _x: &[Self; 3]) -> Self {
        value
    }
}

/// Value plus `N` directional derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; N] }
    }

    /// Independent variable seeded along direction `i`.
    pub fn variable(re: f64, i: usize) -> Self {
        let mut eps = [0.0; N];
        eps[i] = 1.0;
        Self { re, eps }
    }

    /// `f(self)` given `f(re)` and `f'(re)`.
    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e *= df;
        }
        Self { re: f, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.re, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.re * rhs, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(&self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, 0.5 / s)
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c)
    }
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s)
    }
    fn atan2(self, x: Self) -> Self {
        let r2 = self.re * self.re + x.re * x.re;
        let re = self.re.atan2(x.re);
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (x.re * self.eps[i] - self.re * x.eps[i]) / r2;
        }
        Self { re, eps }
    }
    fn lift(value: f64, grad: &[f64; 3], x: &[Self; 3]) -> Self {
        let mut eps = [0.0; N];
        for (g, xi) in grad.iter().zip(x.iter()) {
            if *g != 0.0 {
                for (e, d) in eps.iter_mut().zip(xi.eps.iter()) {
                    *e += g * d;
                }
            }
        }
        Self { re: value, eps }
    }
}

/// Minimal 3-vector/3×3 helpers over [`Real`]; matrices are row-major arrays.
pub mod v3 {
    use super::Real;

    pub type V3<T> = [T; 3];
    pub type M3<T> = [[T; 3]; 3];

    pub fn cst<T: Real>(v: [f64; 3]) -> V3<T> {
        [T::cst(v[0]), T::cst(v[1]), T::cst(v[2])]
    }

    pub fn values<T: Real>(v: &V3<T>) -> [f64; 3] {
        [v[0].value(), v[1].value(), v[2].value()]
    }

    pub fn add<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn sub<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn scale<T: Real>(a: &V3<T>, s: T) -> V3<T> {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn scale_f<T: Real>(a: &V3<T>, s: f64) -> V3<T> {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn dot<T: Real>(a: &V3<T>, b: &V3<T>) -> T {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross<T: Real>(a: &V3<T>, b: &V3<T>) -> V3<T> {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn norm<T: Real>(a: &V3<T>) -> T {
        dot(a, a).sqrt()
    }

    /// Norm whose derivative at the origin is taken as zero.
    pub fn norm_or_zero<T: Real>(a: &V3<T>) -> T {
        let d = dot(a, a);
        if d.value() <= 0.0 {
            T::cst(0.0)
        } else {
            d.sqrt()
        }
    }

    pub fn normalize<T: Real>(a: &V3<T>) -> V3<T> {
        let n = norm(a);
        [a[0] / n, a[1] / n, a[2] / n]
    }

    /// Matrix with the given columns.
    pub fn from_columns<T: Real>(c0: &V3<T>, c1: &V3<T>, c2: &V3<T>) -> M3<T> {
        [
            [c0[0], c1[0], c2[0]],
            [c0[1], c1[1], c2[1]],
            [c0[2], c1[2], c2[2]],
        ]
    }

    pub fn mat_vec<T: Real>(m: &M3<T>, v: &V3<T>) -> V3<T> {
        [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
    }

    pub fn mat_vec_f<T: Real>(m: &M3<T>, v: &[f64; 3]) -> V3<T> {
        let row = |r: &[T; 3]| r[0] * v[0] + r[1] * v[1] + r[2] * v[2];
        [row(&m[0]), row(&m[1]), row(&m[2])]
    }

    pub fn transpose<T: Real>(m: &M3<T>) -> M3<T> {
        [
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ]
    }

    pub fn mat_mul<T: Real>(a: &M3<T>, b: &M3<T>) -> M3<T> {
        let bt = transpose(b);
        [
            [dot(&a[0], &bt[0]), dot(&a[0], &bt[1]), dot(&a[0], &bt[2])],
            [dot(&a[1], &bt[0]), dot(&a[1], &bt[1]), dot(&a[1], &bt[2])],
            [dot(&a[2], &bt[0]), dot(&a[2], &bt[1]), dot(&a[2], &bt[2])],
        ]
    }

    pub fn mat_cst<T: Real>(m: &nalgebra::Matrix3<f64>) -> M3<T> {
        let mut out = [[T::cst(0.0); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = T::cst(m[(r, c)]);
            }
        }
        out
    }

    pub fn mat_values<T: Real>(m: &M3<T>) -> nalgebra::Matrix3<f64> {
        nalgebra::Matrix3::from_fn(|r, c| m[r][c].value())
    }

    /// Rotation vector of a rotation matrix, differentiable through the
    /// identity (no square root of a vanishing norm).
    pub fn so3_log<T: Real>(r: &M3<T>) -> V3<T> {
        let w = [
            (r[2][1] - r[1][2]) * 0.5,
            (r[0][2] - r[2][0]) * 0.5,
            (r[1][0] - r[0][1]) * 0.5,
        ];
        let s2 = dot(&w, &w);
        let c = (r[0][0] + r[1][1] + r[2][2] - 1.0) * 0.5;
        let factor = if s2.value() < 1e-16 {
            // θ/sinθ ≈ 1 + sin²θ/6 for small θ
            T::cst(1.0) + s2 / 6.0
        } else {
            let s = s2.sqrt();
            s.atan2(c) / s
        };
        scale(&w, factor)
    }
}
