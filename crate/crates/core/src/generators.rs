//! Convex generator functions `f: ℝ⁺ → ℝ` with `f(1) = 0`, the building block of every
//! f-divergence in the crate.
//!
//! | name       | f(u)                                     | f′(u)                |
//! |------------|------------------------------------------|----------------------|
//! | `fkl`      | u·ln u                                   | ln u + 1             |
//! | `rkl`      | −ln u                                    | −1/u                 |
//! | `js`       | u·ln(2u/(u+1)) + ln(2/(u+1))             | ln(2u/(u+1))         |
//! | `jeffreys` | (u − 1)·ln u                             | ln u + 1 − 1/u       |
//! | `alpha:a`  | (u^{1−a} − (1−a)u − a) / (a(a−1))        | (1 − u^{−a}) / a     |
//!
//! Every generator can be evaluated either at `u` or at `ln u`. The log-space entry points are
//! what the losses use: density ratios there are differences of log-probabilities, so the
//! ratio itself never has to be formed.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{FpoError, Result};
use crate::scalar::{softplus, Scalar};

/// Requested α at or below this maps to [`Generator::ForwardKl`].
pub const ALPHA_FORWARD_CUTOFF: f64 = 1e-6;
/// Requested α at or above `1 - ALPHA_FORWARD_CUTOFF` maps to [`Generator::ReverseKl`].
pub const ALPHA_REVERSE_CUTOFF: f64 = 1.0 - 1e-6;

/// User-supplied generator. Implement this to plug a new divergence into every loss.
///
/// Only `eval` and `derivative` are required; the log-space variants default to
/// exponentiating their argument.
pub trait GeneratorFn<T: Scalar>: Send + Sync {
    fn name(&self) -> String;

    /// `f(u)` for `u ≥ 0`.
    fn eval(&self, u: T) -> Result<T>;

    /// `f′(u)` for `u > 0`.
    fn derivative(&self, u: T) -> Result<T>;

    fn eval_ln(&self, ln_u: T) -> Result<T> {
        self.eval(ln_u.exp())
    }

    fn derivative_ln(&self, ln_u: T) -> Result<T> {
        self.derivative(ln_u.exp())
    }

    /// `lim_{u→∞} f(u)/u` when finite. Governs terms `q·f(p/q)` as `q → 0`.
    fn recession_slope(&self) -> Option<T> {
        None
    }
}

/// Catalog of shipped generators plus an extension point.
#[derive(Clone)]
pub enum Generator<T: Scalar> {
    ForwardKl,
    ReverseKl,
    JensenShannon,
    Jeffreys,
    /// α-divergence, α strictly inside (0, 1). Build through [`Generator::alpha`].
    Alpha(T),
    Custom(Arc<dyn GeneratorFn<T>>),
}

impl<T: Scalar> Generator<T> {
    /// α-divergence generator.
    ///
    /// Values outside the open interval (0, 1) are rejected. Values within `1e-6` of either
    /// endpoint are served by the matching KL generator, which agrees with the α-generator's
    /// pointwise limit up to an affine term `c·(u − 1)`.
    pub fn alpha(alpha: T) -> Result<Self> {
        if !alpha.is_finite() || alpha <= T::zero() || alpha >= T::one() {
            return Err(FpoError::Domain(format!("alpha must lie in the open interval (0, 1), got {alpha}")));
        }
        if alpha <= T::lit(ALPHA_FORWARD_CUTOFF) {
            Ok(Generator::ForwardKl)
        } else if alpha >= T::lit(ALPHA_REVERSE_CUTOFF) {
            Ok(Generator::ReverseKl)
        } else {
            Ok(Generator::Alpha(alpha))
        }
    }

    pub fn custom(f: impl GeneratorFn<T> + 'static) -> Self {
        Generator::Custom(Arc::new(f))
    }

    /// The five named generators, with α = 0.5 for the α-divergence.
    pub fn named_catalog() -> Vec<Self> {
        vec![
            Generator::ForwardKl,
            Generator::ReverseKl,
            Generator::JensenShannon,
            Generator::Jeffreys,
            Generator::Alpha(T::lit(0.5)),
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Generator::ForwardKl => "fkl".into(),
            Generator::ReverseKl => "rkl".into(),
            Generator::JensenShannon => "js".into(),
            Generator::Jeffreys => "jeffreys".into(),
            Generator::Alpha(a) => format!("alpha:{}", a.as_f64()),
            Generator::Custom(g) => g.name(),
        }
    }

    /// `f(0)` when the generator is finite there.
    pub fn value_at_zero(&self) -> Option<T> {
        match self {
            Generator::ForwardKl => Some(T::zero()),
            Generator::JensenShannon => Some(T::LN_2()),
            Generator::ReverseKl | Generator::Jeffreys | Generator::Alpha(_) => None,
            Generator::Custom(g) => g.eval(T::zero()).ok().filter(|v| v.is_finite()),
        }
    }

    /// `lim_{u→∞} f(u)/u` when finite.
    pub fn recession_slope(&self) -> Option<T> {
        match self {
            Generator::ForwardKl | Generator::Jeffreys => None,
            Generator::ReverseKl => Some(T::zero()),
            Generator::JensenShannon => Some(T::LN_2()),
            Generator::Alpha(a) => Some(T::one() / *a),
            Generator::Custom(g) => g.recession_slope(),
        }
    }

    /// `f(u)`.
    pub fn eval(&self, u: T) -> Result<T> {
        if let Generator::Custom(g) = self {
            return finite(g.eval(u)?, self, u);
        }
        if u.is_nan() || u < T::zero() {
            return Err(self.domain(u));
        }
        if u == T::zero() {
            return self.value_at_zero().ok_or_else(|| self.domain(u));
        }
        let v = self.eval_builtin(u, u.ln(), u - T::one());
        finite(v, self, u)
    }

    /// `f(exp(ln_u))`, with `ln_u = -inf` standing for `u = 0`.
    pub fn eval_ln(&self, ln_u: T) -> Result<T> {
        if let Generator::Custom(g) = self {
            return finite(g.eval_ln(ln_u)?, self, ln_u.exp());
        }
        if ln_u.is_nan() || ln_u == T::infinity() {
            return Err(self.domain(ln_u.exp()));
        }
        if ln_u == T::neg_infinity() {
            return self.eval(T::zero());
        }
        let v = self.eval_builtin(ln_u.exp(), ln_u, ln_u.exp_m1());
        finite(v, self, ln_u.exp())
    }

    /// `f′(u)`.
    pub fn derivative(&self, u: T) -> Result<T> {
        if let Generator::Custom(g) = self {
            return finite(g.derivative(u)?, self, u);
        }
        if u.is_nan() || u <= T::zero() {
            return Err(self.domain(u));
        }
        finite(self.derivative_builtin(u.ln()), self, u)
    }

    /// `f′(exp(ln_u))`.
    pub fn derivative_ln(&self, ln_u: T) -> Result<T> {
        if let Generator::Custom(g) = self {
            return finite(g.derivative_ln(ln_u)?, self, ln_u.exp());
        }
        if !ln_u.is_finite() {
            return Err(self.domain(ln_u.exp()));
        }
        finite(self.derivative_builtin(ln_u), self, ln_u.exp())
    }

    // u > 0, ln_u = ln u, u_m1 = u − 1 (each computed as accurately as the caller can).
    fn eval_builtin(&self, u: T, ln_u: T, u_m1: T) -> T {
        let ln2 = T::LN_2();
        match *self {
            Generator::ForwardKl => u * ln_u,
            Generator::ReverseKl => -ln_u,
            Generator::JensenShannon => {
                // f(u) = u·L + ln 2 − ln(1+u), L = ln(2u/(u+1)) = ln 2 + ln u − ln(1+u)
                if ln_u.abs() < T::lit(0.5) {
                    // near 1 both terms are O(u − 1) and cancel to O((u − 1)²)
                    u * js_slope_near_one(u_m1) - (u_m1 / T::lit(2.0)).ln_1p()
                } else if ln_u > T::zero() {
                    let a = (-ln_u).exp().ln_1p(); // ln(1+u) − ln u
                    u * (ln2 - a) + ln2 - ln_u - a
                } else {
                    let b = softplus(ln_u); // ln(1+u)
                    u * (ln2 + ln_u - b) + ln2 - b
                }
            }
            Generator::Jeffreys => u_m1 * ln_u,
            Generator::Alpha(a) => {
                let one = T::one();
                let num = if a < T::lit(0.5) {
                    u * (-a * ln_u).exp_m1() + a * u_m1
                } else {
                    ((one - a) * ln_u).exp_m1() - (one - a) * u_m1
                };
                num / (a * (a - one))
            }
            Generator::Custom(_) => unreachable!("custom generators dispatch before this point"),
        }
    }

    fn derivative_builtin(&self, ln_u: T) -> T {
        let one = T::one();
        match *self {
            Generator::ForwardKl => ln_u + one,
            Generator::ReverseKl => -(-ln_u).exp(),
            Generator::JensenShannon => {
                if ln_u.abs() < T::lit(0.5) {
                    js_slope_near_one(ln_u.exp_m1())
                } else if ln_u > T::zero() {
                    T::LN_2() - (-ln_u).exp().ln_1p()
                } else {
                    T::LN_2() + ln_u - softplus(ln_u)
                }
            }
            Generator::Jeffreys => ln_u - (-ln_u).exp_m1(),
            Generator::Alpha(a) => -(-a * ln_u).exp_m1() / a,
            Generator::Custom(_) => unreachable!("custom generators dispatch before this point"),
        }
    }

    fn domain(&self, u: T) -> FpoError {
        FpoError::Domain(format!("generator {} is undefined at u = {u}", self.name()))
    }
}

// ln(2u/(u+1)) from u − 1
fn js_slope_near_one<T: Scalar>(u_m1: T) -> T {
    (u_m1 / (T::lit(2.0) + u_m1)).ln_1p()
}

fn finite<T: Scalar>(v: T, g: &Generator<T>, u: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FpoError::NonFinite(format!("{}({u}) = {v}", g.name())))
    }
}

impl<T: Scalar> GeneratorFn<T> for Generator<T> {
    fn name(&self) -> String {
        Generator::name(self)
    }
    fn eval(&self, u: T) -> Result<T> {
        Generator::eval(self, u)
    }
    fn derivative(&self, u: T) -> Result<T> {
        Generator::derivative(self, u)
    }
    fn eval_ln(&self, ln_u: T) -> Result<T> {
        Generator::eval_ln(self, ln_u)
    }
    fn derivative_ln(&self, ln_u: T) -> Result<T> {
        Generator::derivative_ln(self, ln_u)
    }
    fn recession_slope(&self) -> Option<T> {
        Generator::recession_slope(self)
    }
}

/// `f(u) + slope·(u − 1)`: same divergence on the simplex, different generator.
#[derive(Clone)]
pub struct AffineShifted<T: Scalar> {
    pub base: Generator<T>,
    pub slope: T,
}

impl<T: Scalar> GeneratorFn<T> for AffineShifted<T> {
    fn name(&self) -> String {
        format!("{}+{}(u-1)", self.base.name(), self.slope.as_f64())
    }
    fn eval(&self, u: T) -> Result<T> {
        Ok(self.base.eval(u)? + self.slope * (u - T::one()))
    }
    fn derivative(&self, u: T) -> Result<T> {
        Ok(self.base.derivative(u)? + self.slope)
    }
    fn eval_ln(&self, ln_u: T) -> Result<T> {
        Ok(self.base.eval_ln(ln_u)? + self.slope * ln_u.exp_m1())
    }
    fn derivative_ln(&self, ln_u: T) -> Result<T> {
        Ok(self.base.derivative_ln(ln_u)? + self.slope)
    }
    fn recession_slope(&self) -> Option<T> {
        self.base.recession_slope().map(|s| s + self.slope)
    }
}

impl<T: Scalar> fmt::Debug for Generator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Generator({})", self.name())
    }
}

impl<T: Scalar> fmt::Display for Generator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl<T: Scalar> PartialEq for Generator<T> {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Generator::ForwardKl, Generator::ForwardKl)
            | (Generator::ReverseKl, Generator::ReverseKl)
            | (Generator::JensenShannon, Generator::JensenShannon)
            | (Generator::Jeffreys, Generator::Jeffreys) => true,
            (Generator::Alpha(a), Generator::Alpha(b)) => a == b,
            (Generator::Custom(a), Generator::Custom(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl<T: Scalar> FromStr for Generator<T> {
    type Err = FpoError;

    /// Accepts `fkl`, `rkl`, `js`, `jeffreys` and `alpha:<float>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fkl" => Ok(Generator::ForwardKl),
            "rkl" => Ok(Generator::ReverseKl),
            "js" => Ok(Generator::JensenShannon),
            "jeffreys" => Ok(Generator::Jeffreys),
            other => {
                let Some(rest) = other.strip_prefix("alpha:") else {
                    return Err(FpoError::Parse(format!("unknown generator `{other}`")));
                };
                let a: f64 = rest.parse().map_err(|_| FpoError::Parse(format!("bad alpha value `{rest}`")))?;
                Generator::alpha(T::lit(a))
            }
        }
    }
}

/// Parses a comma-separated generator list such as `fkl,rkl,alpha:0.5`.
pub fn parse_generator_list<T: Scalar>(s: &str) -> Result<Vec<Generator<T>>> {
    let out: Vec<Generator<T>> =
        s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(FpoError::Config("empty generator list".into()));
    }
    Ok(out)
}

impl<T: Scalar> Serialize for Generator<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Generator<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of [`check_generator`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidityReport {
    /// |f(1)|.
    pub f_at_one: f64,
    /// Largest positive convexity violation over adjacent grid triples (chord and midpoint tests).
    pub convexity_violation: f64,
    /// Largest |f′ − central difference| / max(|central difference|, 1e-8).
    pub derivative_rel_error: f64,
}

/// Relative step used for the central differences in [`check_generator`].
pub const CHECK_RELATIVE_STEP: f64 = 1e-5;

/// Checks `f(1) = 0`, convexity and the analytic derivative of `gen` over `grid`.
///
/// The grid must be nonempty, strictly increasing, positive and contain 1.
pub fn check_generator<T: Scalar>(gen: &Generator<T>, grid: &[T]) -> Result<ValidityReport> {
    if grid.is_empty() {
        return Err(FpoError::Domain("empty grid".into()));
    }
    if grid.iter().any(|u| !u.is_finite() || *u <= T::zero()) {
        return Err(FpoError::Domain("grid points must be positive and finite".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FpoError::Domain("grid must be strictly increasing".into()));
    }
    if !grid.iter().any(|u| *u == T::one()) {
        return Err(FpoError::Domain("grid must contain 1".into()));
    }

    let f_at_one = gen.eval(T::one())?.abs().as_f64();
    let values: Vec<T> = grid.iter().map(|&u| gen.eval(u)).collect::<Result<_>>()?;

    let mut convexity_violation = 0.0_f64;
    for i in 0..grid.len().saturating_sub(2) {
        let (u1, u2, u3) = (grid[i], grid[i + 1], grid[i + 2]);
        let (f1, f2, f3) = (values[i], values[i + 1], values[i + 2]);
        let chord = ((u3 - u2) * f1 + (u2 - u1) * f3) / (u3 - u1);
        let mid = gen.eval((u1 + u3) / T::lit(2.0))?;
        let mid_chord = (f1 + f3) / T::lit(2.0);
        convexity_violation = convexity_violation.max((f2 - chord).as_f64()).max((mid - mid_chord).as_f64());
    }

    let mut derivative_rel_error = 0.0_f64;
    for &u in grid {
        let h = u * T::lit(CHECK_RELATIVE_STEP);
        // fourth-order stencil: second-order truncation error swamps the floor where f′ = 0
        let near = gen.eval(u + h)? - gen.eval(u - h)?;
        let far = gen.eval(u + h + h)? - gen.eval(u - h - h)?;
        let fd = (T::lit(8.0) * near - far) / (T::lit(12.0) * h);
        let analytic = gen.derivative(u)?;
        let denom = fd.abs().max(T::lit(1e-8));
        derivative_rel_error = derivative_rel_error.max(((analytic - fd).abs() / denom).as_f64());
    }

    Ok(ValidityReport { f_at_one, convexity_violation: convexity_violation.max(0.0), derivative_rel_error })
}

/// `n` points log-spaced over `[lo, hi]`, with the exact value 1 substituted for whichever
/// point lands on it.
pub fn log_grid<T: Scalar>(lo: f64, hi: f64, n: usize) -> Vec<T> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let e = a + (b - a) * t;
            if e.abs() < 1e-12 {
                T::one()
            } else {
                T::lit(10f64.powf(e))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Generator<f64>;

    fn shipped() -> Vec<G> {
        let mut v = G::named_catalog();
        v.push(G::alpha(0.1).unwrap());
        v.push(G::alpha(0.9).unwrap());
        v
    }

    #[test]
    fn spot_values() {
        assert_eq!(G::ForwardKl.eval(1.0).unwrap(), 0.0);
        assert!((G::ReverseKl.eval(std::f64::consts::E).unwrap() + 1.0).abs() < 1e-15);
        let a = G::alpha(0.5).unwrap();
        assert!((a.eval(4.0).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(G::ForwardKl.derivative(1.0).unwrap(), 1.0);
        assert_eq!(G::ReverseKl.derivative(2.0).unwrap(), -0.5);
    }

    #[test]
    fn value_at_one_is_zero() {
        for g in shipped() {
            assert!(g.eval(1.0).unwrap().abs() < 1e-12, "{g}");
            assert!(g.eval_ln(0.0).unwrap().abs() < 1e-12, "{g}");
        }
    }

    #[test]
    fn zero_handling() {
        assert_eq!(G::ForwardKl.eval(0.0).unwrap(), 0.0);
        assert!((G::JensenShannon.eval(0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        for g in [G::ReverseKl, G::Jeffreys, G::alpha(0.3).unwrap()] {
            assert!(matches!(g.eval(0.0), Err(FpoError::Domain(_))), "{g}");
            assert!(matches!(g.eval(-1.0), Err(FpoError::Domain(_))), "{g}");
        }
        for g in shipped() {
            assert!(matches!(g.derivative(0.0), Err(FpoError::Domain(_))), "{g}");
        }
    }

    #[test]
    fn ln_entry_points_agree_with_direct_evaluation() {
        for g in shipped() {
            for &u in &[1e-6, 0.03, 0.7, 1.0, 1.9, 55.0, 3e5] {
                let a = g.eval(u).unwrap();
                let b = g.eval_ln(u.ln()).unwrap();
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{g} u={u}");
                let da = g.derivative(u).unwrap();
                let db = g.derivative_ln(u.ln()).unwrap();
                assert!((da - db).abs() <= 1e-12 * da.abs().max(1.0), "{g} u={u}");
            }
        }
    }

    #[test]
    fn derivative_matches_shifted_central_difference() {
        let h = 1e-6;
        for g in shipped() {
            let fd = (g.eval(1.0 + 2.0 * h).unwrap() - g.eval(1.0).unwrap()) / (2.0 * h);
            let d = g.derivative(1.0 + h).unwrap();
            assert!((d - fd).abs() <= 1e-5 * fd.abs().max(1e-8), "{g}: {d} vs {fd}");
        }
    }

    #[test]
    fn alpha_construction() {
        assert!(matches!(G::alpha(0.0), Err(FpoError::Domain(_))));
        assert!(matches!(G::alpha(1.0), Err(FpoError::Domain(_))));
        assert!(matches!(G::alpha(-0.2), Err(FpoError::Domain(_))));
        assert!(matches!(G::alpha(f64::NAN), Err(FpoError::Domain(_))));
        assert_eq!(G::alpha(1e-7).unwrap(), G::ForwardKl);
        assert_eq!(G::alpha(1.0 - 1e-7).unwrap(), G::ReverseKl);
        assert_eq!(G::alpha(1e-4).unwrap(), G::Alpha(1e-4));
    }

    #[test]
    fn alpha_endpoints_approach_shifted_kl() {
        let near0 = G::alpha(1e-5).unwrap();
        let near1 = G::alpha(1.0 - 1e-5).unwrap();
        for i in 0..=200 {
            let u = 0.1 + 9.9 * i as f64 / 200.0;
            let fkl = u * u.ln() - u + 1.0;
            let rkl = u - 1.0 - u.ln();
            assert!((near0.eval(u).unwrap() - fkl).abs() < 1e-3, "u={u}");
            assert!((near1.eval(u).unwrap() - rkl).abs() < 1e-3, "u={u}");
        }
    }

    #[test]
    fn catalog_passes_validity_checks() {
        let grid = log_grid::<f64>(1e-4, 1e4, 101);
        assert_eq!(grid[50], 1.0);
        for g in shipped() {
            let r = check_generator(&g, &grid).unwrap();
            assert!(r.f_at_one < 1e-12, "{g}: {r:?}");
            assert!(r.convexity_violation < 1e-9, "{g}: {r:?}");
            assert!(r.derivative_rel_error < 1e-5, "{g}: {r:?}");
        }
    }

    #[test]
    fn check_on_unit_grid() {
        let r = check_generator(&G::ReverseKl, &[1.0]).unwrap();
        assert_eq!(r.f_at_one, 0.0);
        assert_eq!(r.convexity_violation, 0.0);
    }

    #[test]
    fn check_rejects_bad_grids() {
        for grid in [vec![], vec![0.5, 2.0], vec![2.0, 1.0], vec![-1.0, 1.0], vec![1.0, 1.0]] {
            assert!(matches!(check_generator(&G::ForwardKl, &grid), Err(FpoError::Domain(_))));
        }
    }

    #[test]
    fn check_detects_a_concave_generator() {
        struct Concave;
        impl GeneratorFn<f64> for Concave {
            fn name(&self) -> String {
                "concave".into()
            }
            fn eval(&self, u: f64) -> Result<f64> {
                Ok(u.ln())
            }
            fn derivative(&self, u: f64) -> Result<f64> {
                Ok(1.0 / u)
            }
        }
        let r = check_generator(&G::custom(Concave), &log_grid(0.1, 10.0, 11)).unwrap();
        assert!(r.convexity_violation > 1e-3);
    }

    #[test]
    fn names_round_trip() {
        for g in shipped() {
            let parsed: G = g.name().parse().unwrap();
            assert_eq!(parsed, g);
        }
        assert_eq!(G::alpha(0.1).unwrap().name(), "alpha:0.1");
        assert!("kl".parse::<G>().is_err());
        assert!("alpha:x".parse::<G>().is_err());
        assert!("alpha:1.5".parse::<G>().is_err());
        let list = parse_generator_list::<f64>("fkl,rkl,js,jeffreys,alpha:0.5").unwrap();
        assert_eq!(list.len(), 5);
    }

    #[test]
    fn affine_shift_changes_values_not_zero() {
        let g = G::custom(AffineShifted { base: G::ForwardKl, slope: 3.0 });
        assert_eq!(g.eval(1.0).unwrap(), 0.0);
        assert!((g.eval(2.0).unwrap() - (2.0 * 2f64.ln() + 3.0)).abs() < 1e-14);
        assert!((g.derivative(2.0).unwrap() - (2f64.ln() + 4.0)).abs() < 1e-14);
    }

    #[test]
    fn recession_slopes_match_large_u_behaviour() {
        for g in shipped() {
            // alpha converges like u^(−a)
            match g.recession_slope() {
                Some(s) => assert!((g.eval(1e300).unwrap() / 1e300 - s).abs() < 1e-3, "{g}"),
                None => assert!(g.eval(1e12).unwrap() / 1e12 > 20.0, "{g}"),
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let g = Generator::<f32>::alpha(0.5).unwrap();
        assert!((g.eval(4.0).unwrap() - 2.0).abs() < 1e-5);
        assert!(Generator::<f32>::JensenShannon.eval(1.0).unwrap().abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nonnegative_above_tangent_at_one(ln_u in -9.0f64..9.0, which in 0usize..7) {
                // convexity with f(1) = 0 puts f above its tangent f′(1)(u − 1)
                let g = &shipped()[which];
                let u = ln_u.exp();
                let tangent = g.derivative(1.0).unwrap() * (u - 1.0);
                prop_assert!(g.eval(u).unwrap() >= tangent - 1e-9 * u.max(1.0));
            }

            #[test]
            fn midpoint_convex(a in -8.0f64..8.0, b in -8.0f64..8.0, which in 0usize..7) {
                let g = &shipped()[which];
                let (u1, u2) = (a.exp(), b.exp());
                let mid = g.eval(0.5 * (u1 + u2)).unwrap();
                let avg = 0.5 * (g.eval(u1).unwrap() + g.eval(u2).unwrap());
                prop_assert!(mid <= avg + 1e-9 * avg.abs().max(1.0));
            }
        }
    }
}
