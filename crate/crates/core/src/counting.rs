//! Instrumented scalar for operation counting.
//!
//! [`Counted`] wraps an `f64` and bumps a thread-local counter on every
//! arithmetic operation. Running the ordinary generic kernels with
//! `T = Counted` therefore measures the work they actually perform, which
//! is the independent check for the analytic formulas in [`crate::cost`].
//!
//! Comparisons, `abs`, `max`/`min` and conversions are not arithmetic and
//! are never counted. Work is attributed to the [`OpCategory`] that is active
//! on the current thread (see [`scope`]).

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::{DType, Scalar};

/// Where counted work is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpCategory {
    Other = 0,
    /// Linear projections (1x1 maps over channels).
    Projection = 1,
    /// Query-key and attention-value products.
    Spatial = 2,
    /// Logit scaling and softmax.
    Softmax = 3,
}

const N_CATEGORIES: usize = 4;

/// Per-kind operation tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Additions and subtractions.
    pub adds: u64,
    pub muls: u64,
    pub divs: u64,
    pub exps: u64,
    /// Square roots, powers, logarithms and other transcendental calls.
    pub other: u64,
}

impl OpCounts {
    /// Every counted operation, one FLOP each.
    pub fn flops(&self) -> u64 {
        self.adds + self.muls + self.divs + self.exps + self.other
    }

    fn merged(self, o: OpCounts) -> OpCounts {
        OpCounts {
            adds: self.adds + o.adds,
            muls: self.muls + o.muls,
            divs: self.divs + o.divs,
            exps: self.exps + o.exps,
            other: self.other + o.other,
        }
    }
}

/// Snapshot of all categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    counts: [OpCounts; N_CATEGORIES],
}

impl CounterSnapshot {
    pub fn category(&self, cat: OpCategory) -> OpCounts {
        self.counts[cat as usize]
    }

    pub fn total(&self) -> OpCounts {
        self.counts
            .iter()
            .fold(OpCounts::default(), |acc, c| acc.merged(*c))
    }
}

thread_local! {
    static COUNTS: RefCell<[OpCounts; N_CATEGORIES]> = RefCell::new([OpCounts::default(); N_CATEGORIES]);
    static ACTIVE: Cell<OpCategory> = const { Cell::new(OpCategory::Other) };
}

#[derive(Clone, Copy)]
enum Kind {
    Add,
    Mul,
    Div,
    Exp,
    Other,
}

#[inline]
fn bump(kind: Kind) {
    let cat = ACTIVE.with(|a| a.get()) as usize;
    COUNTS.with(|c| {
        let mut c = c.borrow_mut();
        let slot = &mut c[cat];
        match kind {
            Kind::Add => slot.adds += 1,
            Kind::Mul => slot.muls += 1,
            Kind::Div => slot.divs += 1,
            Kind::Exp => slot.exps += 1,
            Kind::Other => slot.other += 1,
        }
    });
}

/// Zero all counters on this thread.
pub fn reset() {
    COUNTS.with(|c| *c.borrow_mut() = [OpCounts::default(); N_CATEGORIES]);
}

pub fn snapshot() -> CounterSnapshot {
    COUNTS.with(|c| CounterSnapshot { counts: *c.borrow() })
}

/// Run `f` with `cat` as the active category, restoring the previous one.
///
/// Cheap enough to call unconditionally from generic kernels; it only has an
/// observable effect when the kernel runs on [`Counted`].
pub fn scope<R>(cat: OpCategory, f: impl FnOnce() -> R) -> R {
    let prev = ACTIVE.with(|a| a.replace(cat));
    let out = f();
    ACTIVE.with(|a| a.set(prev));
    out
}

/// Reset, run `f`, and return its result with the counts it produced.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, CounterSnapshot) {
    reset();
    let out = f();
    (out, snapshot())
}

/// An `f64` that counts its own arithmetic.
#[derive(Clone, Copy, Default, PartialEq, PartialOrd)]
pub struct Counted(pub f64);

impl fmt::Debug for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.0, f)
    }
}

impl fmt::Display for Counted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

macro_rules! counted_binop {
    ($trait:ident, $method:ident, $assign_trait:ident, $assign:ident, $op:tt, $kind:expr) => {
        impl $trait for Counted {
            type Output = Counted;
            #[inline]
            fn $method(self, rhs: Counted) -> Counted {
                bump($kind);
                Counted(self.0 $op rhs.0)
            }
        }
        impl $assign_trait for Counted {
            #[inline]
            fn $assign(&mut self, rhs: Counted) {
                bump($kind);
                self.0 = self.0 $op rhs.0;
            }
        }
    };
}

counted_binop!(Add, add, AddAssign, add_assign, +, Kind::Add);
counted_binop!(Sub, sub, SubAssign, sub_assign, -, Kind::Add);
counted_binop!(Mul, mul, MulAssign, mul_assign, *, Kind::Mul);
counted_binop!(Div, div, DivAssign, div_assign, /, Kind::Div);

impl Rem for Counted {
    type Output = Counted;
    fn rem(self, rhs: Counted) -> Counted {
        bump(Kind::Div);
        Counted(self.0 % rhs.0)
    }
}

impl Neg for Counted {
    type Output = Counted;
    fn neg(self) -> Counted {
        Counted(-self.0)
    }
}

impl Sum for Counted {
    fn sum<I: Iterator<Item = Counted>>(iter: I) -> Counted {
        iter.fold(Counted(0.0), |a, b| a + b)
    }
}

impl Zero for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn is_zero(&self) -> bool {
        self.0 == 0.0
    }
}

impl One for Counted {
    fn one() -> Self {
        Counted(1.0)
    }
}

impl Num for Counted {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Counted)
    }
}

impl ToPrimitive for Counted {
    fn to_i64(&self) -> Option<i64> {
        self.0.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.0)
    }
}

impl FromPrimitive for Counted {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Counted(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Counted(n))
    }
}

impl NumCast for Counted {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Counted)
    }
}

macro_rules! passthrough {
    ($($name:ident),*) => {
        $(
            #[inline]
            fn $name(self) -> Self {
                Counted(self.0.$name())
            }
        )*
    };
}

macro_rules! counted_unary {
    ($kind:expr; $($name:ident),*) => {
        $(
            #[inline]
            fn $name(self) -> Self {
                bump($kind);
                Counted(self.0.$name())
            }
        )*
    };
}

impl Float for Counted {
    fn nan() -> Self {
        Counted(f64::NAN)
    }
    fn infinity() -> Self {
        Counted(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Counted(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Counted(-0.0)
    }
    fn min_value() -> Self {
        Counted(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Counted(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Counted(f64::EPSILON)
    }
    fn max_value() -> Self {
        Counted(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.0.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
    fn is_normal(self) -> bool {
        self.0.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.0.classify()
    }
    fn is_sign_positive(self) -> bool {
        self.0.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.0.is_sign_negative()
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        Float::integer_decode(self.0)
    }

    passthrough!(floor, ceil, round, trunc, fract, abs, signum);

    counted_unary!(Kind::Exp; exp, exp2, exp_m1);
    counted_unary!(Kind::Other; sqrt, cbrt, ln, log2, log10, ln_1p, sin, cos, tan,
        asin, acos, atan, sinh, cosh, tanh, asinh, acosh, atanh);

    fn recip(self) -> Self {
        bump(Kind::Div);
        Counted(self.0.recip())
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        bump(Kind::Mul);
        bump(Kind::Add);
        Counted(self.0.mul_add(a.0, b.0))
    }
    fn powi(self, n: i32) -> Self {
        bump(Kind::Other);
        Counted(self.0.powi(n))
    }
    fn powf(self, n: Self) -> Self {
        bump(Kind::Other);
        Counted(self.0.powf(n.0))
    }
    fn log(self, base: Self) -> Self {
        bump(Kind::Other);
        Counted(self.0.log(base.0))
    }
    fn max(self, other: Self) -> Self {
        Counted(self.0.max(other.0))
    }
    fn min(self, other: Self) -> Self {
        Counted(self.0.min(other.0))
    }
    #[allow(deprecated)]
    fn abs_sub(self, other: Self) -> Self {
        bump(Kind::Add);
        Counted((self.0 - other.0).max(0.0))
    }
    fn hypot(self, other: Self) -> Self {
        bump(Kind::Other);
        Counted(self.0.hypot(other.0))
    }
    fn atan2(self, other: Self) -> Self {
        bump(Kind::Other);
        Counted(self.0.atan2(other.0))
    }
    fn sin_cos(self) -> (Self, Self) {
        bump(Kind::Other);
        let (s, c) = self.0.sin_cos();
        (Counted(s), Counted(c))
    }
}

impl Scalar for Counted {
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        Counted(v)
    }

    fn as_f64(self) -> f64 {
        self.0
    }
}

impl Counted {
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_by_kind_and_category() {
        let ((), snap) = measure(|| {
            let a = Counted(2.0);
            let b = Counted(3.0);
            let _ = a * b + a;
            scope(OpCategory::Softmax, || {
                let _ = (a - b).exp() / b;
            });
            let _ = a.max(b).abs();
        });
        let other = snap.category(OpCategory::Other);
        assert_eq!(other.muls, 1);
        assert_eq!(other.adds, 1);
        let sm = snap.category(OpCategory::Softmax);
        assert_eq!((sm.adds, sm.exps, sm.divs), (1, 1, 1));
        assert_eq!(snap.total().flops(), 5);
    }

    #[test]
    fn scope_restores_previous_category() {
        reset();
        scope(OpCategory::Projection, || {
            scope(OpCategory::Spatial, || {
                let _ = Counted(1.0) * Counted(1.0);
            });
            let _ = Counted(1.0) * Counted(1.0);
        });
        let s = snapshot();
        assert_eq!(s.category(OpCategory::Spatial).muls, 1);
        assert_eq!(s.category(OpCategory::Projection).muls, 1);
    }
}
