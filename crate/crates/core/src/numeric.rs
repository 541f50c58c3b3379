//! Scalar abstraction shared by the matrix kernels and the closed loop.
//!
//! Everything numeric is generic over [`Real`], implemented for `f64` and for
//! the double-double type [`Dd`]. The filtered Gramians formed by the DREM
//! stage are routinely conditioned worse than `1e15`, which leaves no
//! significant digits in `f64`; the simulation therefore defaults to `Dd`.

use std::cmp::Ordering;
use std::fmt::{self, Debug, Display};
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};
use twofloat::TwoFloat;

/// Double-double scalar (about 32 significant decimal digits).
///
/// Thin wrapper over [`TwoFloat`]. Addition, multiplication and the
/// elementary functions are forwarded; division and reciprocal use a
/// three-term long division, since the upstream quotient keeps only the
/// leading word of `1 / y` and is no better than `f64`.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Dd(TwoFloat);

impl Dd {
    pub fn new(hi: f64) -> Self {
        Dd(<TwoFloat as From<f64>>::from(hi))
    }

    pub fn hi(self) -> f64 {
        self.0.hi()
    }

    pub fn lo(self) -> f64 {
        self.0.lo()
    }

    fn quotient(self, rhs: Self) -> Self {
        let (x, y) = (self.0, rhs.0);
        let yh = y.hi();
        if yh == 0.0 || !yh.is_finite() || !x.hi().is_finite() || x.hi() == 0.0 {
            return Dd(<TwoFloat as From<f64>>::from(x.hi() / yh));
        }
        let q1 = x.hi() / yh;
        let r = x - y * q1;
        let q2 = r.hi() / yh;
        let r = r - y * q2;
        let q3 = r.hi() / yh;
        Dd(TwoFloat::new_add(q1, q2) + q3)
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::new(v)
    }
}

impl Debug for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dd({:e} + {:e})", self.hi(), self.lo())
    }
}

impl Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Display::fmt(&(self.hi() + self.lo()), f)
    }
}

macro_rules! forward_binop {
    ($tr:ident, $m:ident, $atr:ident, $am:ident) => {
        impl $tr for Dd {
            type Output = Dd;
            #[inline]
            fn $m(self, rhs: Dd) -> Dd {
                Dd(self.0.$m(rhs.0))
            }
        }
        impl $atr for Dd {
            #[inline]
            fn $am(&mut self, rhs: Dd) {
                self.0 = self.0.$m(rhs.0);
            }
        }
    };
}

forward_binop!(Add, add, AddAssign, add_assign);
forward_binop!(Sub, sub, SubAssign, sub_assign);
forward_binop!(Mul, mul, MulAssign, mul_assign);

impl Div for Dd {
    type Output = Dd;
    #[inline]
    fn div(self, rhs: Dd) -> Dd {
        self.quotient(rhs)
    }
}

impl DivAssign for Dd {
    #[inline]
    fn div_assign(&mut self, rhs: Dd) {
        *self = self.quotient(rhs);
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, rhs: Dd) -> Dd {
        self - (self / rhs).trunc() * rhs
    }
}

impl RemAssign for Dd {
    fn rem_assign(&mut self, rhs: Dd) {
        *self = *self % rhs;
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd(-self.0)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd(TwoFloat::zero())
    }
    fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd(TwoFloat::one())
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi() + self.lo())
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        <TwoFloat as NumCast>::from(n).map(Dd)
    }
}

macro_rules! forward_unary {
    ($($m:ident),*) => {
        $(
            #[inline]
            fn $m(self) -> Self {
                Dd(Float::$m(self.0))
            }
        )*
    };
}

macro_rules! forward_const {
    ($($m:ident),*) => {
        $(
            fn $m() -> Self {
                Dd(<TwoFloat as Float>::$m())
            }
        )*
    };
}

macro_rules! forward_pred {
    ($($m:ident),*) => {
        $(
            fn $m(self) -> bool {
                Float::$m(self.0)
            }
        )*
    };
}

impl Float for Dd {
    forward_const!(
        nan,
        infinity,
        neg_infinity,
        neg_zero,
        min_value,
        min_positive_value,
        max_value,
        epsilon
    );
    forward_pred!(
        is_nan,
        is_infinite,
        is_finite,
        is_normal,
        is_sign_positive,
        is_sign_negative
    );
    forward_unary!(
        floor, ceil, round, trunc, fract, abs, signum, sqrt, exp, exp2, ln, log2, log10, cbrt, sin,
        cos, tan, asin, acos, atan, exp_m1, ln_1p, sinh, cosh, tanh, asinh, acosh, atanh
    );

    fn classify(self) -> FpCategory {
        Float::classify(self.0)
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dd::one();
        }
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (self.ln() * n).exp()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn max(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Less) => other,
            Some(_) => self,
            None if self.is_nan() => other,
            None => self,
        }
    }
    fn min(self, other: Self) -> Self {
        match self.partial_cmp(&other) {
            Some(Ordering::Greater) => other,
            Some(_) => self,
            None if self.is_nan() => other,
            None => self,
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn atan2(self, other: Self) -> Self {
        Dd(Float::atan2(self.0, other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.0)
    }
}

pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Real for Dd {
    #[inline]
    fn lit(v: f64) -> Self {
        Dd::new(v)
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.hi() + self.lo()
    }
}

/// Euclidean norm of a slice.
pub fn norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn to_f64_vec<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

pub fn from_f64_vec<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}
