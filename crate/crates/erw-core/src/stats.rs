//! Merge-safe estimators and shared statistical helpers.
//!
//! The parallel harness splits every experiment into per-replica shards and
//! reduces them in a fixed order. `Estimate` is the monoid used for that
//! reduction: its mean and count are *exact* (the sum is carried in a
//! fixed-point superaccumulator, so merging is associative to the bit), and
//! its standard error is within floating round-off of the single-pass value.
//! The module also hosts the two-sample chi-square with cell pooling, a
//! Kolmogorov-Smirnov uniformity check, batch-means standard errors for
//! autocorrelated chain output, and (weighted) least-squares line fits used
//! by the tail-exponent experiments.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("fewer than {needed} points ({got} given)")]
    TooFewPoints { needed: usize, got: usize },
    #[error("log-log fit requires strictly positive data")]
    NonpositiveData,
    #[error("abscissa is degenerate (zero weighted variance)")]
    DegenerateAbscissa,
    #[error("too few usable cells after pooling")]
    DegenerateCells,
    #[error("weights must be positive and match the data length")]
    BadWeights,
}

// ---------------------------------------------------------------------------
// Exact summation
// ---------------------------------------------------------------------------

/// Number of 32-bit limbs covering the full f64 exponent range (bit 0 of limb
/// 0 weighs 2^-1074, the top data bit lands in limb 65) plus carry headroom.
const LIMBS: usize = 68;
/// Pushes allowed between normalizations before an i64 limb could overflow.
const NORMALIZE_EVERY: u32 = 1 << 30;

/// Exact sum of f64 values in a base-2^32 fixed-point accumulator.
///
/// The represented value is `sum(limbs[i] * 2^(32*i - 1074))`. After
/// `normalize` all limbs except the top one lie in `[0, 2^32)`, which is a
/// canonical two's-complement-style form: equal real sums have equal limb
/// states, so `value()` is a function of the mathematical sum alone. That is
/// what makes `Estimate::merge` exactly associative.
#[derive(Clone, Debug)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    pending: u32,
    /// Sum of non-finite inputs (keeps NaN/inf semantics of naive summation).
    special: Option<f64>,
}

impl Default for ExactSum {
    fn default() -> Self {
        ExactSum { limbs: [0; LIMBS], pending: 0, special: None }
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        if !x.is_finite() {
            self.special = Some(self.special.unwrap_or(0.0) + x);
            return;
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, shift) = if biased == 0 {
            (frac, 0usize) // subnormal or zero: frac * 2^-1074
        } else {
            (frac | (1 << 52), (biased - 1) as usize)
        };
        if mant == 0 {
            return;
        }
        let limb = shift / 32;
        let wide = (mant as u128) << (shift % 32);
        for k in 0..3 {
            let part = ((wide >> (32 * k)) & 0xffff_ffff) as i64;
            if part != 0 {
                self.limbs[limb + k] += if negative { -part } else { part };
            }
        }
        self.pending += 1;
        if self.pending >= NORMALIZE_EVERY {
            self.normalize();
        }
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut rhs = other.clone();
        rhs.normalize();
        self.normalize();
        for i in 0..LIMBS {
            self.limbs[i] += rhs.limbs[i];
        }
        self.normalize();
        self.special = match (self.special, rhs.special) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
    }

    fn normalize(&mut self) {
        let mut carry = 0i64;
        for limb in self.limbs.iter_mut().take(LIMBS - 1) {
            let v = *limb + carry;
            carry = v >> 32;
            *limb = v - (carry << 32);
        }
        self.limbs[LIMBS - 1] += carry;
        self.pending = 0;
    }

    /// Correctly rounded value of the exact sum.
    pub fn value(&self) -> f64 {
        let mut work = self.clone();
        work.normalize();
        if let Some(s) = work.special {
            return s;
        }
        let negative = work.limbs[LIMBS - 1] < 0;
        if negative {
            for limb in work.limbs.iter_mut() {
                *limb = -*limb;
            }
            work.normalize();
        }
        let t = match (0..LIMBS).rev().find(|&i| work.limbs[i] != 0) {
            Some(t) => t,
            None => return 0.0,
        };
        debug_assert!(work.limbs[t] >= 0 && (t < LIMBS - 1 || work.limbs[t] < 1 << 32));
        let msb = 32 * t + (63 - (work.limbs[t] as u64).leading_zeros() as usize);
        let base = t.saturating_sub(3);
        let mut window = 0u128;
        for k in 0..4 {
            if base + k <= t {
                window |= (work.limbs[base + k] as u128) << (32 * k);
            }
        }
        let sign = if negative { -1.0 } else { 1.0 };
        if msb <= 52 {
            // Entire sum sits on the subnormal grid; conversion is exact.
            return sign * (window as u64 as f64) * pow2(-1074);
        }
        let p = msb - 52;
        let shift = p - 32 * base;
        debug_assert!(shift >= 1);
        let mut mant = (window >> shift) as u64;
        let round = (window >> (shift - 1)) & 1 == 1;
        let sticky = window & ((1u128 << (shift - 1)) - 1) != 0
            || work.limbs[..base].iter().any(|&v| v != 0);
        let mut p = p as i64;
        if round && (sticky || mant & 1 == 1) {
            mant += 1;
            if mant == 1 << 53 {
                mant >>= 1;
                p += 1;
            }
        }
        let exp = p - 1074;
        if exp > 1023 - 52 {
            return sign * f64::INFINITY;
        }
        sign * (mant as f64) * pow2(exp)
    }

    pub fn is_zero(&self) -> bool {
        let mut work = self.clone();
        work.normalize();
        work.special.is_none() && work.limbs.iter().all(|&v| v == 0)
    }
}

/// 2^k for k in [-1074, 1023], exact.
fn pow2(k: i64) -> f64 {
    debug_assert!((-1074..=1023).contains(&k));
    if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (k + 1074))
    }
}

// ---------------------------------------------------------------------------
// Estimate
// ---------------------------------------------------------------------------

/// Mergeable mean/variance accumulator.
///
/// `merge(a, merge(b, c))` and `merge(merge(a, b), c)` agree exactly in mean
/// and count for any grouping of the same samples; the standard error agrees
/// within floating round-off.
#[derive(Clone, Debug, Default)]
pub struct Estimate {
    sum: ExactSum,
    welford_mean: f64,
    m2: f64,
    count: u64,
}

/// Serialized form of an [`Estimate`] for reports.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct EstimateSummary {
    pub mean: f64,
    pub se: f64,
    pub count: u64,
}

impl Estimate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.welford_mean;
        self.welford_mean += delta / self.count as f64;
        self.m2 += delta * (x - self.welford_mean);
        self.sum.push(x);
    }

    pub fn merge(&mut self, other: &Estimate) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let delta = other.welford_mean - self.welford_mean;
        self.m2 += other.m2 + delta * delta * n1 * n2 / (n1 + n2);
        self.welford_mean += delta * n2 / (n1 + n2);
        self.sum.merge(&other.sum);
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Exact sample mean (one rounding of the exact sum, one division).
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum.value() / self.count as f64
    }

    pub fn sum(&self) -> f64 {
        self.sum.value()
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        self.m2 / (self.count - 1) as f64
    }

    /// Standard error of the mean under independent sampling.
    pub fn se(&self) -> f64 {
        if self.count < 2 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    pub fn summary(&self) -> EstimateSummary {
        EstimateSummary { mean: self.mean(), se: self.se(), count: self.count }
    }
}

impl FromIterator<f64> for Estimate {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        let mut e = Estimate::new();
        for x in iter {
            e.push(x);
        }
        e
    }
}

/// Estimate mean and standard error of a stream of f64 values.
pub fn estimate(values: impl IntoIterator<Item = f64>) -> Estimate {
    values.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Batch means
// ---------------------------------------------------------------------------

/// Batch-means accumulator for autocorrelated series.
///
/// With a planned series length `n` it uses `ceil(sqrt(n))` batches of equal
/// size; the standard error comes from the spread of complete batch means,
/// which absorbs short-range autocorrelation. The overall mean is exact over
/// all pushed samples (trailing partial batch included).
#[derive(Clone, Debug)]
pub struct BatchMeans {
    batch_size: u64,
    cur_sum: f64,
    cur_n: u64,
    batch_means: Vec<f64>,
    total: Estimate,
}

impl BatchMeans {
    pub fn for_total(n: u64) -> Self {
        let n = n.max(1);
        let batches = (n as f64).sqrt().ceil() as u64;
        let batch_size = n.div_ceil(batches);
        BatchMeans {
            batch_size,
            cur_sum: 0.0,
            cur_n: 0,
            batch_means: Vec::with_capacity(batches as usize),
            total: Estimate::new(),
        }
    }

    pub fn push(&mut self, x: f64) {
        self.total.push(x);
        self.cur_sum += x;
        self.cur_n += 1;
        if self.cur_n == self.batch_size {
            self.batch_means.push(self.cur_sum / self.batch_size as f64);
            self.cur_sum = 0.0;
            self.cur_n = 0;
        }
    }

    pub fn count(&self) -> u64 {
        self.total.count()
    }

    pub fn mean(&self) -> f64 {
        self.total.mean()
    }

    pub fn batches(&self) -> usize {
        self.batch_means.len()
    }

    /// Means of the complete batches seen so far. Accumulators built with the
    /// same `for_total` plan share batch boundaries, so rows taken across
    /// several series line up index by index.
    pub fn batch_means(&self) -> &[f64] {
        &self.batch_means
    }

    /// Standard error of the mean from complete batch means.
    pub fn se(&self) -> f64 {
        let b = self.batch_means.len();
        if b < 2 {
            return f64::NAN;
        }
        let mbar = self.batch_means.iter().sum::<f64>() / b as f64;
        let ss = self.batch_means.iter().map(|m| (m - mbar) * (m - mbar)).sum::<f64>();
        (ss / (b as f64 * (b - 1) as f64)).sqrt()
    }

    pub fn summary(&self) -> EstimateSummary {
        EstimateSummary { mean: self.mean(), se: self.se(), count: self.count() }
    }
}

// ---------------------------------------------------------------------------
// Two-sample chi-square
// ---------------------------------------------------------------------------

/// Category counts keyed by a canonical integer vector.
#[derive(Clone, Debug, Default)]
pub struct CellCounts {
    counts: BTreeMap<Vec<u32>, u64>,
    total: u64,
}

impl CellCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: Vec<u32>) {
        *self.counts.entry(key).or_insert(0) += 1;
        self.total += 1;
    }

    /// Add all counts of `other`. Exact and commutative, so parallel
    /// reductions are order-independent.
    pub fn merge(&mut self, other: &CellCounts) {
        for (k, &v) in &other.counts {
            *self.counts.entry(k.clone()).or_insert(0) += v;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub cells_used: usize,
    pub cells_pooled: usize,
    pub n_a: u64,
    pub n_b: u64,
}

/// Two-sample chi-square homogeneity test with small-cell pooling.
///
/// Cells are sorted by combined count (key order breaking ties) and kept
/// while both expected counts stay at or above `min_expected`; the remainder
/// is pooled into one tail cell. Sample sizes may differ; the statistic uses
/// the usual `sqrt(n_b/n_a)` scaling and `cells - 1` degrees of freedom.
pub fn chi_square_two_sample(
    a: &CellCounts,
    b: &CellCounts,
    min_expected: f64,
) -> Result<ChiSquareReport, StatsError> {
    let (na, nb) = (a.total, b.total);
    if na == 0 || nb == 0 {
        return Err(StatsError::EmptySample);
    }
    let mut merged: BTreeMap<&Vec<u32>, (u64, u64)> = BTreeMap::new();
    for (k, &v) in &a.counts {
        merged.entry(k).or_default().0 = v;
    }
    for (k, &v) in &b.counts {
        merged.entry(k).or_default().1 = v;
    }
    let mut cells: Vec<(&Vec<u32>, u64, u64)> =
        merged.into_iter().map(|(k, (ca, cb))| (k, ca, cb)).collect();
    cells.sort_by(|x, y| (y.1 + y.2).cmp(&(x.1 + x.2)).then_with(|| x.0.cmp(y.0)));

    let fa = na as f64 / (na + nb) as f64;
    let fb = nb as f64 / (na + nb) as f64;
    let mut kept: Vec<(u64, u64)> = Vec::new();
    let mut pooled = (0u64, 0u64);
    let mut pooled_cells = 0usize;
    for (_, ca, cb) in &cells {
        let comb = (ca + cb) as f64;
        if comb * fa >= min_expected && comb * fb >= min_expected {
            kept.push((*ca, *cb));
        } else {
            pooled.0 += ca;
            pooled.1 += cb;
            pooled_cells += 1;
        }
    }
    if pooled.0 + pooled.1 > 0 {
        let comb = (pooled.0 + pooled.1) as f64;
        if comb * fa >= min_expected && comb * fb >= min_expected {
            kept.push(pooled);
        } else if let Some(last) = kept.last_mut() {
            last.0 += pooled.0;
            last.1 += pooled.1;
        }
    }
    if kept.len() < 2 {
        return Err(StatsError::DegenerateCells);
    }
    let k = (nb as f64 / na as f64).sqrt();
    let statistic: f64 = kept
        .iter()
        .map(|&(ca, cb)| {
            let (ca, cb) = (ca as f64, cb as f64);
            let d = k * ca - cb / k;
            d * d / (ca + cb)
        })
        .sum();
    let df = kept.len() - 1;
    let dist = ChiSquared::new(df as f64).expect("df >= 1");
    let p_value = 1.0 - dist.cdf(statistic);
    Ok(ChiSquareReport {
        statistic,
        df,
        p_value,
        cells_used: kept.len(),
        cells_pooled: pooled_cells,
        n_a: na,
        n_b: nb,
    })
}

// ---------------------------------------------------------------------------
// Kolmogorov-Smirnov against the uniform law
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test of `samples` against Uniform(0,1), asymptotic p-value
/// with the Stephens small-sample correction. Used to calibrate the p-value
/// distribution of the chi-square harness.
pub fn ks_uniform(samples: &[f64]) -> Result<KsReport, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in KS input"));
    let n = xs.len();
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = x.clamp(0.0, 1.0);
        d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
    }
    let lambda = (nf.sqrt() + 0.12 + 0.11 / nf.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    Ok(KsReport { statistic: d, p_value: p.clamp(0.0, 1.0), n })
}

// ---------------------------------------------------------------------------
// Line fits
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// 95% normal-approximation confidence interval for the slope.
    pub ci95: (f64, f64),
    pub n: usize,
}

const Z_95: f64 = 1.959_963_984_540_054;

/// Weighted least-squares line fit `y ~ intercept + slope * x`.
///
/// Weights are relative; the residual variance is estimated from the data
/// (n - 2 degrees of freedom), so the slope standard error is meaningful
/// whenever the residuals are roughly independent.
pub fn fit_line(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> Result<SlopeFit, StatsError> {
    let n = xs.len();
    if n != ys.len() {
        return Err(StatsError::BadWeights);
    }
    if n < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, got: n });
    }
    let unit = vec![1.0; n];
    let w = match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(StatsError::BadWeights);
            }
            w
        }
        None => &unit[..],
    };
    let sw: f64 = w.iter().sum();
    let xbar = xs.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ybar = ys.iter().zip(w).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - xbar;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (ys[i] - ybar);
    }
    if sxx <= 0.0 {
        return Err(StatsError::DegenerateAbscissa);
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let mut rss = 0.0;
    for i in 0..n {
        let r = ys[i] - intercept - slope * xs[i];
        rss += w[i] * r * r;
    }
    let s2 = rss / (n - 2) as f64;
    let slope_se = (s2 / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
        ci95: (slope - Z_95 * slope_se, slope + Z_95 * slope_se),
        n,
    })
}

/// Least-squares slope of `log y` against `log x`. Rejects nonpositive data.
pub fn loglog_slope(
    points: &[(f64, f64)],
    weights: Option<&[f64]>,
) -> Result<SlopeFit, StatsError> {
    if points.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(StatsError::NonpositiveData);
    }
    let xs: Vec<f64> = points.iter().map(|&(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    fit_line(&xs, &ys, weights)
}
