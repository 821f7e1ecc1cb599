//! Cookie environments for (L,1) excited random walks.
//!
//! A walk on the integers jumps one step right or up to `L` steps left. The
//! first `M` departures from a site use the site-local excitation laws
//! `q_1, ..., q_M` (the cookies); every later departure uses the zero-drift
//! tail law. Probabilities are carried as exact rationals so that the model
//! assumptions (simplexes, zero tail drift, positive cookie drift) and the
//! derived quantities `delta` and `rho` are checked and reported without
//! floating-point slack.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("cannot parse probability {text:?}: {reason}")]
    ParseProb { text: String, reason: String },
    #[error("{law}: jump {jump} outside {{-{l_max}, ..., -1, +1}}")]
    SupportOutOfRange { law: LawName, jump: i64, l_max: usize },
    #[error("{law}: mass at jump {jump} is {mass} (must lie in [0,1])")]
    MassOutOfRange { law: LawName, jump: i64, mass: String },
    #[error("{law}: masses sum to {total}, not 1")]
    SimplexViolation { law: LawName, total: String },
    #[error("tail law has mean {mean}, expected exactly 0")]
    NonzeroTailMean { mean: String },
    #[error("cookie {index} has nonpositive mean {mean}")]
    NonpositiveCookieDrift { index: usize, mean: String },
    #[error("cookie {index} puts mass 1 on the forward jump")]
    DegenerateCookie { index: usize },
    #[error("maximum backward range must be at least 1")]
    ZeroRange,
    #[error("environment needs at least one cookie law")]
    NoCookies,
    #[error("{law}: declared for range {got}, environment has range {expected}")]
    RangeMismatch { law: LawName, got: usize, expected: usize },
    #[error("tail law puts no mass on the forward jump")]
    ZeroForwardMass,
    #[error("delta is negative ({delta}); regime classification requires delta >= 0")]
    NegativeDelta { delta: f64 },
}

/// Which law an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawName {
    Cookie(usize),
    Tail,
}

impl fmt::Display for LawName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LawName::Cookie(i) => write!(f, "cookie {i}"),
            LawName::Tail => write!(f, "tail law"),
        }
    }
}

/// A bundle of validation failures; `validate` reports every violated
/// assumption, not only the first.
#[derive(Debug, Clone, Error)]
pub struct EnvValidation(pub Vec<EnvError>);

impl fmt::Display for EnvValidation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} environment violation(s): ", self.0.len())?;
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Parse a probability literal: an integer (`"1"`), a fraction of integers
/// (`"3/5"`), or a plain decimal (`"0.15"`). Exponents are not accepted; the
/// result is the exact rational named by the literal.
pub fn parse_prob(text: &str) -> Result<BigRational, EnvError> {
    let err = |reason: &str| EnvError::ParseProb { text: text.to_string(), reason: reason.into() };
    let t = text.trim();
    if t.is_empty() {
        return Err(err("empty"));
    }
    if t.len() > 64 {
        return Err(err("longer than 64 characters"));
    }
    let parse_int = |s: &str| -> Result<BigInt, EnvError> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            Err(err("expected unsigned integer digits"))
        } else {
            Ok(s.parse::<BigInt>().expect("digits parse"))
        }
    };
    if let Some((num, den)) = t.split_once('/') {
        let num = parse_int(num.trim())?;
        let den = parse_int(den.trim())?;
        if den.is_zero() {
            return Err(err("zero denominator"));
        }
        return Ok(BigRational::new(num, den));
    }
    if let Some((whole, frac)) = t.split_once('.') {
        let whole = if whole.is_empty() { BigInt::zero() } else { parse_int(whole)? };
        let frac_digits = frac.len() as u32;
        let frac = if frac.is_empty() { BigInt::zero() } else { parse_int(frac)? };
        let den = BigInt::from(10u32).pow(frac_digits);
        return Ok(BigRational::new(whole * &den + frac, den));
    }
    Ok(BigRational::from_integer(parse_int(t)?))
}

fn rational_from_f64(x: f64) -> Option<BigRational> {
    BigRational::from_float(x)
}

/// A probability law on the jump set `{-l_max, ..., -1, +1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpLaw {
    l_max: usize,
    forward: BigRational,
    backward: Vec<BigRational>,
    forward_f: f64,
    backward_f: Vec<f64>,
}

impl JumpLaw {
    /// Build a law from `(jump, mass)` pairs; omitted jumps carry mass zero.
    /// Checks support, mass range, and the exact simplex identity.
    pub fn from_masses(
        l_max: usize,
        name: LawName,
        masses: &BTreeMap<i64, BigRational>,
    ) -> Result<JumpLaw, Vec<EnvError>> {
        let mut errors = Vec::new();
        if l_max == 0 {
            return Err(vec![EnvError::ZeroRange]);
        }
        let mut forward = BigRational::zero();
        let mut backward = vec![BigRational::zero(); l_max];
        for (&jump, mass) in masses {
            let in_range = jump == 1 || (-(l_max as i64)..0).contains(&jump);
            if !in_range {
                errors.push(EnvError::SupportOutOfRange { law: name, jump, l_max });
                continue;
            }
            if mass.is_negative() || mass > &BigRational::one() {
                errors.push(EnvError::MassOutOfRange {
                    law: name,
                    jump,
                    mass: mass.to_string(),
                });
                continue;
            }
            if jump == 1 {
                forward = mass.clone();
            } else {
                backward[(-jump - 1) as usize] = mass.clone();
            }
        }
        let total: BigRational = backward.iter().fold(forward.clone(), |a, b| a + b);
        if !total.is_one() {
            errors.push(EnvError::SimplexViolation { law: name, total: total.to_string() });
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        Ok(JumpLaw::from_parts(l_max, forward, backward))
    }

    fn from_parts(l_max: usize, forward: BigRational, backward: Vec<BigRational>) -> JumpLaw {
        let forward_f = forward.to_f64().expect("probability fits f64");
        let backward_f = backward.iter().map(|p| p.to_f64().expect("probability fits f64")).collect();
        JumpLaw { l_max, forward, backward, forward_f, backward_f }
    }

    /// Build a law from floating masses. Each mass is converted to its exact
    /// dyadic rational; the simplex identity is accepted within `tol` and the
    /// residual is folded into the largest mass so downstream identities are
    /// exact again.
    pub fn from_f64_masses(
        l_max: usize,
        name: LawName,
        masses: &BTreeMap<i64, f64>,
        tol: f64,
    ) -> Result<JumpLaw, Vec<EnvError>> {
        let mut exact = BTreeMap::new();
        let mut errors = Vec::new();
        for (&jump, &mass) in masses {
            match rational_from_f64(mass) {
                Some(r) if (0.0..=1.0).contains(&mass) => {
                    exact.insert(jump, r);
                }
                _ => errors.push(EnvError::MassOutOfRange {
                    law: name,
                    jump,
                    mass: mass.to_string(),
                }),
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        let total: f64 = masses.values().sum();
        if (total - 1.0).abs() > tol {
            return Err(vec![EnvError::SimplexViolation { law: name, total: total.to_string() }]);
        }
        let residual = BigRational::one()
            - exact.values().fold(BigRational::zero(), |a, b| a + b);
        if !residual.is_zero() {
            let largest = exact
                .iter()
                .max_by(|a, b| a.1.cmp(b.1))
                .map(|(k, _)| *k)
                .expect("nonempty law");
            let adjusted = exact.get(&largest).unwrap() + &residual;
            exact.insert(largest, adjusted);
        }
        JumpLaw::from_masses(l_max, name, &exact)
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Mass at jump `+1`.
    pub fn forward(&self) -> &BigRational {
        &self.forward
    }

    /// Mass at jump `-l` for `l` in `1..=l_max`.
    pub fn backward(&self, l: usize) -> &BigRational {
        &self.backward[l - 1]
    }

    pub fn forward_f64(&self) -> f64 {
        self.forward_f
    }

    pub fn backward_f64(&self, l: usize) -> f64 {
        self.backward_f[l - 1]
    }

    /// Exact mean jump `sum_k k * mass(k)`.
    pub fn mean(&self) -> BigRational {
        let mut m = self.forward.clone();
        for (i, p) in self.backward.iter().enumerate() {
            m -= BigRational::from_integer(BigInt::from(i as i64 + 1)) * p;
        }
        m
    }
}

/// Regime of the walk as a function of the total cookie drift `delta`:
/// recurrent for `delta` in `[0,1]`, transient with zero speed on `(1,2]`,
/// ballistic (positive speed) on `(2, inf)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    Recurrent,
    TransientZeroSpeed,
    Ballistic,
}

/// Classify a floating `delta`. Boundary values go to the closed side.
pub fn classify_regime(delta: f64) -> Result<Regime, EnvError> {
    if delta < 0.0 || delta.is_nan() {
        return Err(EnvError::NegativeDelta { delta });
    }
    Ok(if delta <= 1.0 {
        Regime::Recurrent
    } else if delta <= 2.0 {
        Regime::TransientZeroSpeed
    } else {
        Regime::Ballistic
    })
}

/// A validated cookie environment. Construction runs the full assumption
/// check, so every value of this type satisfies: jumps confined to
/// `{-l_max, ..., -1, +1}`, exact simplexes, zero-mean tail with positive
/// forward mass, and cookies with strictly positive drift and `q(+1) < 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CookieEnvironment {
    l_max: usize,
    cookies: Vec<JumpLaw>,
    tail: JumpLaw,
}

impl CookieEnvironment {
    pub fn new(cookies: Vec<JumpLaw>, tail: JumpLaw) -> Result<CookieEnvironment, EnvValidation> {
        let mut errors = Vec::new();
        let l_max = tail.l_max();
        if cookies.is_empty() {
            errors.push(EnvError::NoCookies);
        }
        for (i, c) in cookies.iter().enumerate() {
            let index = i + 1;
            if c.l_max() != l_max {
                errors.push(EnvError::RangeMismatch {
                    law: LawName::Cookie(index),
                    got: c.l_max(),
                    expected: l_max,
                });
                continue;
            }
            let mean = c.mean();
            if !mean.is_positive() {
                errors.push(EnvError::NonpositiveCookieDrift { index, mean: mean.to_string() });
            }
            if c.forward().is_one() {
                errors.push(EnvError::DegenerateCookie { index });
            }
        }
        let tail_mean = tail.mean();
        if !tail_mean.is_zero() {
            errors.push(EnvError::NonzeroTailMean { mean: tail_mean.to_string() });
        }
        if tail.forward().is_zero() {
            errors.push(EnvError::ZeroForwardMass);
        }
        if errors.is_empty() {
            Ok(CookieEnvironment { l_max, cookies, tail })
        } else {
            Err(EnvValidation(errors))
        }
    }

    /// Maximum backward jump `L`.
    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Number of cookies per site `M`.
    pub fn cookies_per_site(&self) -> usize {
        self.cookies.len()
    }

    pub fn cookie(&self, index: usize) -> &JumpLaw {
        &self.cookies[index - 1]
    }

    pub fn tail(&self) -> &JumpLaw {
        &self.tail
    }

    /// Law governing the `visit`-th departure from a site (1-based).
    pub fn law_for_visit(&self, visit: u64) -> &JumpLaw {
        if visit <= self.cookies.len() as u64 {
            &self.cookies[(visit - 1) as usize]
        } else {
            &self.tail
        }
    }

    /// Total cookie drift `delta`, exact.
    pub fn delta(&self) -> BigRational {
        self.cookies.iter().map(JumpLaw::mean).fold(BigRational::zero(), |a, b| a + b)
    }

    pub fn delta_f64(&self) -> f64 {
        self.delta().to_f64().expect("delta fits f64")
    }

    /// Regime classified from the exact `delta` (boundaries exact).
    pub fn regime(&self) -> Regime {
        let delta = self.delta();
        if delta <= BigRational::one() {
            Regime::Recurrent
        } else if delta <= BigRational::from_integer(BigInt::from(2)) {
            Regime::TransientZeroSpeed
        } else {
            Regime::Ballistic
        }
    }

    /// Failure/success odds of the tail law: `rho_l = tail(-l)/tail(+1)`,
    /// exact. Zero tail drift makes `sum_l l * rho_l = 1`.
    pub fn rho(&self) -> Vec<BigRational> {
        (1..=self.l_max).map(|l| self.tail.backward(l) / self.tail.forward()).collect()
    }

    pub fn rho_f64(&self) -> Vec<f64> {
        self.rho().iter().map(|r| r.to_f64().expect("rho fits f64")).collect()
    }

    /// Largest backward jump the tail law actually uses (`L'`). The model
    /// assumptions force at least one backward tail jump, so this is in
    /// `1..=l_max`.
    pub fn tail_range(&self) -> usize {
        (1..=self.l_max)
            .rev()
            .find(|&l| !self.tail.backward(l).is_zero())
            .expect("zero-mean tail has backward mass")
    }

    /// Summary for reports.
    pub fn summary(&self) -> EnvSummary {
        EnvSummary {
            l_max: self.l_max,
            cookies_per_site: self.cookies.len(),
            delta: self.delta_f64(),
            delta_exact: self.delta().to_string(),
            regime: self.regime(),
            rho: self.rho_f64(),
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EnvSummary {
    pub l_max: usize,
    pub cookies_per_site: usize,
    pub delta: f64,
    pub delta_exact: String,
    pub regime: Regime,
    pub rho: Vec<f64>,
}

/// Worked environments used throughout the tests and the command-line
/// examples.
pub mod presets {
    use super::*;

    fn law(l_max: usize, name: LawName, entries: &[(i64, &str)]) -> JumpLaw {
        let masses: BTreeMap<i64, BigRational> =
            entries.iter().map(|(j, p)| (*j, parse_prob(p).expect("literal"))).collect();
        JumpLaw::from_masses(l_max, name, &masses).expect("preset law is valid")
    }

    /// Range-2 tail `{+1: 3/5, -1: 1/5, -2: 1/5}` shared by the examples
    /// below; `rho = (1/3, 1/3)`.
    fn range2_tail() -> JumpLaw {
        law(2, LawName::Tail, &[(1, "3/5"), (-1, "1/5"), (-2, "1/5")])
    }

    fn drifted_cookie(index: usize) -> JumpLaw {
        law(2, LawName::Cookie(index), &[(1, "9/10"), (-1, "1/10")])
    }

    /// L=2, M=3, three cookies of drift 4/5: `delta = 12/5`, ballistic.
    pub fn ballistic_example() -> CookieEnvironment {
        CookieEnvironment::new(
            (1..=3).map(drifted_cookie).collect(),
            range2_tail(),
        )
        .expect("valid preset")
    }

    /// L=2, M=2, two cookies of drift 4/5: `delta = 8/5`, transient with
    /// zero speed.
    pub fn zero_speed_example() -> CookieEnvironment {
        CookieEnvironment::new(
            (1..=2).map(drifted_cookie).collect(),
            range2_tail(),
        )
        .expect("valid preset")
    }

    /// L=1, M=1, single cookie of drift 4/5 over a symmetric tail:
    /// `delta = 4/5`, recurrent.
    pub fn recurrent_example() -> CookieEnvironment {
        CookieEnvironment::new(
            vec![law(1, LawName::Cookie(1), &[(1, "9/10"), (-1, "1/10")])],
            law(1, LawName::Tail, &[(1, "1/2"), (-1, "1/2")]),
        )
        .expect("valid preset")
    }

    /// L=2, M=3, three cookies of drift 2/3: `delta = 2` exactly, the upper
    /// boundary of the zero-speed regime (stationary mean diverges).
    pub fn critical_drift_example() -> CookieEnvironment {
        CookieEnvironment::new(
            (1..=3)
                .map(|i| law(2, LawName::Cookie(i), &[(1, "5/6"), (-1, "1/6")]))
                .collect(),
            range2_tail(),
        )
        .expect("valid preset")
    }
}
