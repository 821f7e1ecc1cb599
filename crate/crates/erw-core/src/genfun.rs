//! Offspring pgf iteration and transforms of the stationary failure state.
//!
//! The offspring pgf of the tail family is `f_i(s) = s_{i-1} / D(s)` with
//! `D(s) = 1 + sum_l rho_l (1 - s_l)` and `s_0 = 1`. Iterating from `s = 0`
//! in deficit coordinates `w = 1 - f^n(0)` avoids cancellation as the
//! deficits shrink: with `S = sum_l rho_l w_l`,
//!
//! ```text
//! w'_1 = S / (1 + S),    w'_i = (S + w_{i-1}) / (1 + S)  for i >= 2.
//! ```
//!
//! On top of the iteration this module provides the Kolmogorov-type limit
//! `n w^n -> u / beta`, the growth exponent of the product
//! `gamma_n = prod_{k=k0}^n prod_l f^k_l(0)^{-N_l}` (slope `theta`), the
//! scalar transform `E prod_l (1 + l(s-1))^{Y_l}` of the stationary failure
//! state, and the residual of the functional equation that transform
//! satisfies,
//!
//! ```text
//! 1 - G(1/(2-s)) = a(s) (1 - G(s)) + b(s),
//! ```
//!
//! where `a` has a closed form in the environment data and `b` collects
//! corrections from states with fewer failures than cookies.

use crate::branching::{sample_failure_counts, states_up_to, z_step_into, StepRoute};
use crate::env::CookieEnvironment;
use crate::rng::{derive_stream, experiment, StreamKey};
use crate::sampler::EnvSampler;
use crate::spectral::{
    beta_theta, perron_pair, tail_family_mean_matrix, tail_family_sigma, SpectralError,
};
use crate::stats::{fit_line, BatchMeans, Estimate, SlopeFit, StatsError};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenfunError {
    #[error("transform argument s = {s} outside the admissible interval [{min}, 1]")]
    GridOutOfRange { s: f64, min: f64 },
    #[error("need at least {need} iterations, got {got}")]
    TooFewIterations { need: u64, got: u64 },
    #[error("emigrant vector has {got} entries, the environment has {want} types")]
    EmigrantDimension { got: usize, want: usize },
    #[error("extinction deficit underflowed 1e-14 at generation {at}; later iterates are rounding noise")]
    DeficitUnderflow { at: u64 },
    #[error("no fully positive iterate by generation {k0} > jump range {l}")]
    DegenerateStart { k0: u64, l: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

// ---------------------------------------------------------------------------
// Pgf iteration in deficit coordinates
// ---------------------------------------------------------------------------

/// Iterates `w^n = 1 - f^n(0)` componentwise; all arithmetic on positive
/// quantities.
#[derive(Clone, Debug)]
pub struct PgfIterator {
    rho: Vec<f64>,
    w: Vec<f64>,
    scratch: Vec<f64>,
    n: u64,
    underflow_at: Option<u64>,
}

impl PgfIterator {
    pub fn new(env: &CookieEnvironment) -> PgfIterator {
        PgfIterator::from_rho(env.rho_f64())
    }

    pub fn from_rho(rho: Vec<f64>) -> PgfIterator {
        let l = rho.len();
        PgfIterator { rho, w: vec![1.0; l], scratch: vec![0.0; l], n: 0, underflow_at: None }
    }

    pub fn step(&mut self) {
        let s: f64 = self.rho.iter().zip(&self.w).map(|(r, w)| r * w).sum();
        let d = 1.0 + s;
        self.scratch[0] = s / d;
        for i in 1..self.w.len() {
            self.scratch[i] = (s + self.w[i - 1]) / d;
        }
        std::mem::swap(&mut self.w, &mut self.scratch);
        self.n += 1;
        if self.underflow_at.is_none() && self.w.iter().all(|&w| w < 1e-14) {
            self.underflow_at = Some(self.n);
        }
    }

    /// First generation at which every deficit dropped below `1e-14`, if
    /// any; scaled asymptotics past that point are dominated by rounding.
    pub fn underflow_at(&self) -> Option<u64> {
        self.underflow_at
    }

    /// Extinction deficit `1 - f^n_l(0)` per starting type.
    pub fn w(&self) -> &[f64] {
        &self.w
    }

    /// `f^n_l(0)`: extinction probability by generation `n`.
    pub fn f(&self) -> Vec<f64> {
        self.w.iter().map(|w| 1.0 - w).collect()
    }

    pub fn n(&self) -> u64 {
        self.n
    }
}

/// First generation at which every starting type has positive extinction
/// probability (`f^n(0)` strictly positive throughout). For the tail family
/// this equals the jump range: type `l` needs `l` generations.
pub fn first_fully_positive(env: &CookieEnvironment) -> u64 {
    let mut it = PgfIterator::new(env);
    loop {
        it.step();
        if it.w().iter().all(|&w| w < 1.0) {
            return it.n();
        }
    }
}

/// Scaled deficit `n w^n` against its limit `u / beta`.
#[derive(Clone, Debug, Serialize)]
pub struct KolmogorovReport {
    pub n: u64,
    pub scaled: Vec<f64>,
    pub limit: Vec<f64>,
    pub max_rel_err: f64,
}

pub fn kolmogorov_check(env: &CookieEnvironment, n: u64) -> Result<KolmogorovReport, GenfunError> {
    if n < 1 {
        return Err(GenfunError::TooFewIterations { need: 1, got: n });
    }
    let rho = env.rho_f64();
    let pair = perron_pair(&tail_family_mean_matrix(&rho), 1e-12, 1_000_000)?;
    let bt = beta_theta(&tail_family_sigma(&rho), &pair.right, &pair.left, &vec![0.0; rho.len()]);
    let mut it = PgfIterator::new(env);
    for _ in 0..n {
        it.step();
    }
    if let Some(at) = it.underflow_at() {
        return Err(GenfunError::DeficitUnderflow { at });
    }
    let scaled: Vec<f64> = it.w().iter().map(|w| w * n as f64).collect();
    let limit: Vec<f64> = pair.right.iter().map(|u| u / bt.beta).collect();
    let max_rel_err = scaled
        .iter()
        .zip(&limit)
        .map(|(s, l)| ((s - l) / l).abs())
        .fold(0.0f64, f64::max);
    Ok(KolmogorovReport { n, scaled, limit, max_rel_err })
}

/// Least-squares growth exponent of `log gamma_n` against `log n`.
#[derive(Clone, Debug, Serialize)]
pub struct GammaFit {
    pub k0: u64,
    pub n_max: u64,
    pub emigrants: Vec<f64>,
    pub theta_hat: f64,
    pub log_gamma_end: f64,
    pub fit: SlopeFit,
}

/// `log gamma_n = sum_{k=k0}^n sum_l -N_l log f^k_l(0)`, fitted over the
/// window `[n_max/10, n_max]` on a log-log scale. Under criticality the
/// slope estimates `theta = <N, u> / beta`.
pub fn gamma_fit(
    env: &CookieEnvironment,
    emigrants: &[f64],
    n_max: u64,
) -> Result<GammaFit, GenfunError> {
    let l = env.l_max();
    if emigrants.len() != l {
        return Err(GenfunError::EmigrantDimension { got: emigrants.len(), want: l });
    }
    if n_max < 100 {
        return Err(GenfunError::TooFewIterations { need: 100, got: n_max });
    }
    let mut it = PgfIterator::new(env);
    let mut k0 = 0u64;
    let mut log_gamma = 0.0f64;
    let n_lo = n_max / 10;
    let stride = ((n_max - n_lo) / 4096).max(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for n in 1..=n_max {
        it.step();
        if k0 == 0 {
            if it.w().iter().all(|&w| w < 1.0) {
                k0 = n;
            } else if n > l as u64 {
                return Err(GenfunError::DegenerateStart { k0: n, l });
            } else {
                continue;
            }
        }
        for (w, nl) in it.w().iter().zip(emigrants) {
            log_gamma -= nl * (-w).ln_1p();
        }
        if n >= n_lo && (n - n_lo) % stride == 0 {
            xs.push((n as f64).ln());
            ys.push(log_gamma);
        }
    }
    if let Some(at) = it.underflow_at() {
        return Err(GenfunError::DeficitUnderflow { at });
    }
    let fit = fit_line(&xs, &ys, None)?;
    Ok(GammaFit {
        k0,
        n_max,
        emigrants: emigrants.to_vec(),
        theta_hat: fit.slope,
        log_gamma_end: log_gamma,
        fit,
    })
}

// ---------------------------------------------------------------------------
// Transforms of the stationary failure state
// ---------------------------------------------------------------------------

/// Smallest admissible transform argument: `1 + L (s - 1) >= 0`.
pub fn transform_domain_min(l: usize) -> f64 {
    (l as f64 - 1.0) / l as f64
}

fn check_grid(l: usize, grid: &[f64]) -> Result<(), GenfunError> {
    let min = transform_domain_min(l);
    for &s in grid {
        if !(s >= min && s <= 1.0) {
            return Err(GenfunError::GridOutOfRange { s, min });
        }
    }
    Ok(())
}

/// `prod_l (1 + l (s - 1))^{y_l}`.
fn transform_term(s: f64, y: &[u64]) -> f64 {
    let mut v = 1.0;
    for (idx, &c) in y.iter().enumerate() {
        if c > 0 {
            v *= (1.0 + (idx as f64 + 1.0) * (s - 1.0)).powi(c as i32);
        }
    }
    v
}

/// Batch-means rows of chain functionals: the transform at each grid point
/// and the occupation indicator of each listed state, all from one run.
fn chain_transform_batches(
    env: &CookieEnvironment,
    s_points: &[f64],
    low_keys: &[Vec<u32>],
    iterations: u64,
    burn_in: u64,
    key: StreamKey,
) -> (Vec<BatchMeans>, Vec<BatchMeans>) {
    let sampler = EnvSampler::new(env);
    let mut rng = derive_stream(key);
    let l = env.l_max();
    let mut cur = vec![0u64; l];
    let mut next = Vec::new();
    for _ in 0..burn_in {
        z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
        std::mem::swap(&mut cur, &mut next);
    }
    let mut transforms: Vec<BatchMeans> =
        s_points.iter().map(|_| BatchMeans::for_total(iterations)).collect();
    let mut masses: Vec<BatchMeans> =
        low_keys.iter().map(|_| BatchMeans::for_total(iterations)).collect();
    for _ in 0..iterations {
        z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
        std::mem::swap(&mut cur, &mut next);
        for (s, bm) in s_points.iter().zip(transforms.iter_mut()) {
            bm.push(transform_term(*s, &cur));
        }
        for (k, bm) in low_keys.iter().zip(masses.iter_mut()) {
            let hit = k.len() == l && cur.iter().zip(k).all(|(&a, &b)| a == u64::from(b));
            bm.push(f64::from(u8::from(hit)));
        }
    }
    (transforms, masses)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TransformPoint {
    pub s: f64,
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransformReport {
    pub iterations: u64,
    pub burn_in: u64,
    pub points: Vec<TransformPoint>,
}

/// Time-average estimate of `G(s) = E prod_l (1 + l(s-1))^{Y_l}` over the
/// stationary failure chain, batch-means standard errors.
pub fn stationary_transform(
    env: &CookieEnvironment,
    s_grid: &[f64],
    iterations: u64,
    burn_in: u64,
    root_seed: u64,
) -> Result<TransformReport, GenfunError> {
    check_grid(env.l_max(), s_grid)?;
    if iterations < 16 {
        return Err(GenfunError::TooFewIterations { need: 16, got: iterations });
    }
    let key = StreamKey { root_seed, experiment: experiment::Z_STATIONARY, replica: 0 };
    let (transforms, _) = chain_transform_batches(env, s_grid, &[], iterations, burn_in, key);
    let points = s_grid
        .iter()
        .zip(&transforms)
        .map(|(&s, bm)| TransformPoint { s, mean: bm.mean(), se: bm.se() })
        .collect();
    Ok(TransformReport { iterations, burn_in, points })
}

// ---------------------------------------------------------------------------
// Closed form of the coefficient a(s)
// ---------------------------------------------------------------------------

fn rational_from_f64(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite transform argument")
}

/// `E prod_l t_l^{A_l(M-1)}` in exact rationals, with `t_l = 1 + l(s-1)`
/// and `h = 1 / (1 + sum_l rho_l (1 - t_l))`:
/// `prod_{i=1}^{M} [q_i(+1) + sum_l q_i(-l) t_l h]`.
fn exact_cookie_transform(env: &CookieEnvironment, s_rat: &BigRational) -> BigRational {
    let one = BigRational::one();
    let l = env.l_max();
    let t: Vec<BigRational> = (1..=l)
        .map(|i| &one + BigRational::from_integer(i.into()) * (s_rat - &one))
        .collect();
    let rho = env.rho();
    let mut denom = one.clone();
    for (ti, ri) in t.iter().zip(&rho) {
        denom += ri * (&one - ti);
    }
    let h = one.clone() / denom;
    let mut prod = one.clone();
    for i in 1..=env.cookies_per_site() {
        let law = env.cookie(i);
        let mut factor = law.forward().clone();
        for (idx, ti) in t.iter().enumerate() {
            factor += law.backward(idx + 1) * ti * &h;
        }
        prod *= factor;
    }
    prod
}

/// Exact-rational transform of the failure batch before the last cookie
/// success, rounded once at the end.
pub fn closed_form_cookie_transform(env: &CookieEnvironment, s: f64) -> f64 {
    exact_cookie_transform(env, &rational_from_f64(s))
        .to_f64()
        .expect("transform value fits f64")
}

/// `a(s) = 1 / (E prod t^{A(M-1)} * (2-s)^{M-1})`, computed exactly and
/// rounded once. `a(1) = 1` without rounding error.
pub fn closed_form_a(env: &CookieEnvironment, s: f64) -> f64 {
    let s_rat = rational_from_f64(s);
    let prod = exact_cookie_transform(env, &s_rat);
    let two_minus_s = BigRational::from_integer(2.into()) - &s_rat;
    let mut scale = BigRational::one();
    for _ in 1..env.cookies_per_site() {
        scale *= &two_minus_s;
    }
    (BigRational::one() / (prod * scale)).to_f64().expect("coefficient fits f64")
}

// ---------------------------------------------------------------------------
// Functional-equation residual
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FeqPoint {
    pub s: f64,
    pub sigma_s: f64,
    pub g_at_s: f64,
    /// Batch-means standard error of `g_at_s`.
    pub g_se: f64,
    pub g_at_sigma: f64,
    pub a_hat: f64,
    pub a_se: f64,
    pub a_closed: f64,
    pub b_hat: f64,
    /// First-order standard error of `b_hat` alone, treating the occupation
    /// masses and coefficient estimates as independent.
    pub b_se: f64,
    pub residual: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeqReport {
    pub iterations: u64,
    pub burn_in: u64,
    pub a_samples: u64,
    pub low_states: Vec<Vec<u32>>,
    pub points: Vec<FeqPoint>,
    pub max_abs_z: f64,
}

/// Monte Carlo residual of `1 - G(1/(2-s)) = a(s)(1 - G(s)) + b(s)` on a
/// grid of arguments.
///
/// `G` at `s` and at `sigma(s) = 1/(2-s)` comes from one stationary chain
/// (batch means); `a` and the per-state corrections inside `b` come from
/// independent failure-batch samples. The reported standard error combines
/// the batch spread of the chain part with first-order terms for the
/// independently estimated coefficients.
pub fn functional_equation_residual(
    env: &CookieEnvironment,
    s_grid: &[f64],
    iterations: u64,
    burn_in: u64,
    a_samples: u64,
    root_seed: u64,
) -> Result<FeqReport, GenfunError> {
    let l = env.l_max();
    check_grid(l, s_grid)?;
    if iterations < 16 {
        return Err(GenfunError::TooFewIterations { need: 16, got: iterations });
    }
    if a_samples < 16 {
        return Err(GenfunError::TooFewIterations { need: 16, got: a_samples });
    }
    let m = env.cookies_per_site() as u64;
    let low_keys: Vec<Vec<u32>> =
        if m >= 2 { states_up_to(l, m - 2) } else { Vec::new() };

    // Chain part: transforms at s and sigma(s) plus low-state occupation.
    let sigma: Vec<f64> = s_grid.iter().map(|&s| 1.0 / (2.0 - s)).collect();
    let mut s_points: Vec<f64> = s_grid.to_vec();
    s_points.extend_from_slice(&sigma);
    let key = StreamKey { root_seed, experiment: experiment::FEQ_CHAIN, replica: 0 };
    let (transforms, masses) =
        chain_transform_batches(env, &s_points, &low_keys, iterations, burn_in, key);

    // Independent failure-batch samples: A(M-1) for a(s), A(|k|) per low state.
    let sampler = EnvSampler::new(env);
    let n_grid = s_grid.len();
    let mut rng =
        derive_stream(StreamKey { root_seed, experiment: experiment::A_SAMPLES, replica: 0 });
    let mut e_a: Vec<Estimate> = s_grid.iter().map(|_| Estimate::new()).collect();
    for _ in 0..a_samples {
        let a = sample_failure_counts(&sampler, m - 1, StepRoute::Auto, &mut rng);
        for (est, &s) in e_a.iter_mut().zip(s_grid) {
            est.push(transform_term(s, &a));
        }
    }
    let mut e_low: Vec<Vec<Estimate>> = Vec::with_capacity(low_keys.len());
    for (idx, k) in low_keys.iter().enumerate() {
        let total: u64 = k.iter().map(|&x| u64::from(x)).sum();
        let mut rng = derive_stream(StreamKey {
            root_seed,
            experiment: experiment::A_SAMPLES,
            replica: 1 + idx as u64,
        });
        let mut ests: Vec<Estimate> = s_grid.iter().map(|_| Estimate::new()).collect();
        for _ in 0..a_samples {
            let a = sample_failure_counts(&sampler, total, StepRoute::Auto, &mut rng);
            for (est, &s) in ests.iter_mut().zip(s_grid) {
                est.push(transform_term(s, &a));
            }
        }
        e_low.push(ests);
    }

    let mut points = Vec::with_capacity(n_grid);
    let mut max_abs_z = 0.0f64;
    for (gi, &s) in s_grid.iter().enumerate() {
        let two_minus_s = 2.0 - s;
        let bm_s = &transforms[gi];
        let bm_sigma = &transforms[n_grid + gi];
        let e_a_mean = e_a[gi].mean();
        let e_a_se = e_a[gi].se();
        let a_hat = 1.0 / (e_a_mean * two_minus_s.powi(m as i32 - 1));
        let a_se = a_hat * e_a_se / e_a_mean;

        // Shift factor and correction data per low state.
        let shift_factor: Vec<f64> = low_keys
            .iter()
            .map(|k| {
                let shifted: Vec<u64> =
                    (0..l).map(|i| k.get(i + 1).map_or(0, |&x| u64::from(x))).collect();
                transform_term(s, &shifted)
            })
            .collect();
        let pow_k: Vec<f64> = low_keys
            .iter()
            .map(|k| {
                let total: i32 = k.iter().map(|&x| x as i32).sum();
                two_minus_s.powi(-total)
            })
            .collect();
        let ek_mean: Vec<f64> = e_low.iter().map(|ests| ests[gi].mean()).collect();
        let ek_se: Vec<f64> = e_low.iter().map(|ests| ests[gi].se()).collect();
        let pk_mean: Vec<f64> = masses.iter().map(|bm| bm.mean()).collect();

        let b_of = |a: f64, pk: &[f64]| -> f64 {
            let mut b = 1.0 - a;
            for j in 0..low_keys.len() {
                b += pk[j] * shift_factor[j] * (a * ek_mean[j] - pow_k[j]);
            }
            b
        };

        // Point estimate over the full series.
        let g_at_s = bm_s.mean();
        let g_at_sigma = bm_sigma.mean();
        let residual = (1.0 - g_at_sigma) - a_hat * (1.0 - g_at_s) - b_of(a_hat, &pk_mean);

        // Chain variance from aligned per-batch residuals.
        let rows_s = bm_s.batch_means();
        let rows_sigma = bm_sigma.batch_means();
        let nb = rows_s.len();
        let mut r_batch = Vec::with_capacity(nb);
        for bi in 0..nb {
            let pk_b: Vec<f64> = masses.iter().map(|bm| bm.batch_means()[bi]).collect();
            let r = (1.0 - rows_sigma[bi]) - a_hat * (1.0 - rows_s[bi]) - b_of(a_hat, &pk_b);
            r_batch.push(r);
        }
        let rbar = r_batch.iter().sum::<f64>() / nb as f64;
        let chain_var = r_batch.iter().map(|r| (r - rbar) * (r - rbar)).sum::<f64>()
            / (nb as f64 * (nb - 1) as f64);

        // First-order terms for the independent coefficient estimates:
        // dR/da = g_s - sum_k p_k shift_k e_k,  dR/de_k = -a p_k shift_k.
        let mut da = g_at_s;
        for j in 0..low_keys.len() {
            da -= pk_mean[j] * shift_factor[j] * ek_mean[j];
        }
        let mut var = chain_var + da * da * a_se * a_se;
        for j in 0..low_keys.len() {
            let dek = a_hat * pk_mean[j] * shift_factor[j];
            var += dek * dek * ek_se[j] * ek_se[j];
        }
        let se = var.sqrt();
        let z = if residual == 0.0 { 0.0 } else { residual / se };
        max_abs_z = max_abs_z.max(z.abs());

        // Standard error of b_hat alone: db/da = -1 + sum_k p_k shift_k e_k,
        // db/de_k = a p_k shift_k, db/dp_k = shift_k (a e_k - pow_k).
        let mut db_da = -1.0;
        for j in 0..low_keys.len() {
            db_da += pk_mean[j] * shift_factor[j] * ek_mean[j];
        }
        let mut b_var = db_da * db_da * a_se * a_se;
        for j in 0..low_keys.len() {
            let d_ek = a_hat * pk_mean[j] * shift_factor[j];
            let d_pk = shift_factor[j] * (a_hat * ek_mean[j] - pow_k[j]);
            let pk_se = masses[j].se();
            b_var += d_ek * d_ek * ek_se[j] * ek_se[j] + d_pk * d_pk * pk_se * pk_se;
        }

        points.push(FeqPoint {
            s,
            sigma_s: sigma[gi],
            g_at_s,
            g_se: bm_s.se(),
            g_at_sigma,
            a_hat,
            a_se,
            a_closed: closed_form_a(env, s),
            b_hat: b_of(a_hat, &pk_mean),
            b_se: b_var.sqrt(),
            residual,
            se,
            z,
        });
    }
    Ok(FeqReport {
        iterations,
        burn_in,
        a_samples,
        low_states: low_keys,
        points,
        max_abs_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::presets;

    #[test]
    fn iterates_match_hand_values() {
        // rho = (1/3, 1/3): f(0) = (3/5, 0), f^2(0) = (15/22, 9/22).
        let env = presets::ballistic_example();
        let mut it = PgfIterator::new(&env);
        it.step();
        assert!((it.w()[0] - 0.4).abs() < 1e-15);
        assert_eq!(it.w()[1], 1.0, "type 2 cannot die in one generation");
        assert!((it.f()[0] - 0.6).abs() < 1e-15);
        it.step();
        assert!((it.w()[0] - 7.0 / 22.0).abs() < 1e-15);
        assert!((it.w()[1] - 13.0 / 22.0).abs() < 1e-15);
    }

    #[test]
    fn first_positive_generation_equals_range() {
        assert_eq!(first_fully_positive(&presets::ballistic_example()), 2);
        assert_eq!(first_fully_positive(&presets::zero_speed_example()), 2);
        assert_eq!(first_fully_positive(&presets::recurrent_example()), 1);
    }

    #[test]
    fn scaled_deficit_approaches_kolmogorov_limit() {
        let env = presets::ballistic_example();
        let rep = kolmogorov_check(&env, 200_000).unwrap();
        assert!((rep.limit[0] - 1.0).abs() < 1e-9);
        assert!((rep.limit[1] - 2.0).abs() < 1e-9);
        assert!(rep.max_rel_err < 5e-3, "scaled {:?} limit {:?}", rep.scaled, rep.limit);
    }

    #[test]
    fn gamma_growth_exponent_matches_theta() {
        let env = presets::ballistic_example();
        let fit = gamma_fit(&env, &[1.0, 1.0], 100_000).unwrap();
        assert_eq!(fit.k0, 2);
        assert!(
            (fit.theta_hat - 3.0).abs() < 0.06,
            "theta_hat {} fit {:?}",
            fit.theta_hat,
            fit.fit
        );
    }

    #[test]
    fn closed_form_coefficient_is_exact_at_fixed_point() {
        let env = presets::ballistic_example();
        assert_eq!(closed_form_a(&env, 1.0), 1.0);
        assert_eq!(closed_form_cookie_transform(&env, 1.0), 1.0);
        // h telescopes through the ladder identity: the transformed batch
        // factor never exceeds 1 on the admissible interval.
        for s in [0.5, 0.7, 0.9] {
            let e = closed_form_cookie_transform(&env, s);
            assert!(e > 0.0 && e <= 1.0, "E = {e} at s = {s}");
        }
    }

    #[test]
    fn sampled_cookie_transform_matches_closed_form() {
        let env = presets::ballistic_example();
        let sampler = EnvSampler::new(&env);
        let m = env.cookies_per_site() as u64;
        let s = 0.8;
        let mut rng = derive_stream(StreamKey {
            root_seed: 7,
            experiment: experiment::SELFTEST,
            replica: 0,
        });
        let mut est = Estimate::new();
        for _ in 0..300_000 {
            let a = sample_failure_counts(&sampler, m - 1, StepRoute::Auto, &mut rng);
            est.push(transform_term(s, &a));
        }
        let closed = closed_form_cookie_transform(&env, s);
        let gap = (est.mean() - closed).abs();
        assert!(gap < 4.0 * est.se(), "mean {} closed {closed} se {}", est.mean(), est.se());
        assert!(est.se() < 2e-3);
    }

    #[test]
    fn stationary_transform_is_monotone_with_exact_endpoint() {
        let env = presets::ballistic_example();
        let rep = stationary_transform(&env, &[0.6, 0.8, 1.0], 40_000, 1_000, 11).unwrap();
        assert!(rep.points[0].mean < rep.points[1].mean);
        assert!(rep.points[1].mean < rep.points[2].mean);
        assert_eq!(rep.points[2].mean, 1.0, "transform at s = 1 is identically 1");
        assert!(rep.points[0].se > 0.0);
    }

    #[test]
    fn grid_outside_domain_is_rejected() {
        let env = presets::ballistic_example();
        assert!(matches!(
            stationary_transform(&env, &[0.4], 1_000, 10, 1),
            Err(GenfunError::GridOutOfRange { .. })
        ));
        assert!(matches!(
            functional_equation_residual(&env, &[1.2], 1_000, 10, 1_000, 1),
            Err(GenfunError::GridOutOfRange { .. })
        ));
    }

    #[test]
    fn functional_equation_residual_is_small_on_grid() {
        let env = presets::ballistic_example();
        let rep = functional_equation_residual(
            &env,
            &[0.6, 0.75, 0.9, 1.0],
            400_000,
            2_000,
            400_000,
            23,
        )
        .unwrap();
        assert_eq!(rep.low_states, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        for p in &rep.points {
            assert!(
                p.z.abs() <= 4.0,
                "s {} residual {} se {} z {}",
                p.s,
                p.residual,
                p.se,
                p.z
            );
            assert!((p.a_hat - p.a_closed).abs() < 5.0 * p.a_se.max(1e-12));
        }
        let at_one = rep.points.last().unwrap();
        assert_eq!(at_one.residual, 0.0, "fixed point must be exact");
        assert_eq!(at_one.b_hat, 0.0);
        assert_eq!(at_one.a_hat, 1.0);
    }

    #[test]
    fn b_slope_at_one_matches_closed_form() {
        // Decrement expansion of the inhomogeneous term at the fixed point:
        // b(1 - h) = B h + o(h) with
        // B = (delta - 1)
        //   - sum_{|k| <= M-2} P(k) ((delta - 1) - |k| + sum_l l E[A_l(|k|)]).
        // Numeric side: Richardson-extrapolated one-sided slope from b_hat
        // (b(1) = 0 exactly). Closed-form side: Monte Carlo plug-ins for the
        // occupation masses and the low-order failure-count means.
        let env = presets::ballistic_example();
        let h = 0.02;
        let rep = functional_equation_residual(
            &env,
            &[1.0 - 2.0 * h, 1.0 - h],
            400_000,
            40_000,
            400_000,
            31,
        )
        .unwrap();
        let b2h = &rep.points[0];
        let bh = &rep.points[1];
        let numeric = 2.0 * bh.b_hat / h - b2h.b_hat / (2.0 * h);
        let numeric_var = (2.0 / h * bh.b_se).powi(2) + (b2h.b_se / (2.0 * h)).powi(2);

        let chain = crate::branching::estimate_stationary(&env, 400_000, 40_000, 32).unwrap();
        let sampler = EnvSampler::new(&env);
        let m = env.cookies_per_site();
        let mut rng = derive_stream(StreamKey {
            root_seed: 32,
            experiment: experiment::SELFTEST,
            replica: 5,
        });
        // Per low-order parent count m: Monte Carlo mean of sum_l l A_l(m).
        let mut weighted: Vec<Estimate> = (0..=(m - 2)).map(|_| Estimate::new()).collect();
        for _ in 0..400_000 {
            for (total, est) in weighted.iter_mut().enumerate() {
                let a = sample_failure_counts(&sampler, total as u64, StepRoute::Auto, &mut rng);
                let s: u64 = a.iter().enumerate().map(|(l, &c)| (l as u64 + 1) * c).sum();
                est.push(s as f64);
            }
        }
        let delta_minus_1 = env.delta_f64() - 1.0;
        let mut closed = delta_minus_1;
        let mut closed_var = 0.0;
        for st in &chain.low_states {
            let total: usize = st.state.iter().map(|&x| x as usize).sum();
            let inner = delta_minus_1 - total as f64 + weighted[total].mean();
            closed -= st.mass.mean * inner;
            closed_var += (inner * st.mass.se).powi(2)
                + (st.mass.mean * weighted[total].se()).powi(2);
        }
        let se = (numeric_var + closed_var).sqrt();
        assert!(
            (numeric - closed).abs() <= 3.0 * se,
            "numeric {numeric} closed {closed} se {se}"
        );
        // Differentiating the fixed-point equation at s = 1 forces the
        // slope to vanish whenever the stationary weighted mean is finite
        // (drift 12/5 here), so both estimates must sit near zero.
        assert!(
            closed.abs() <= 3.0 * closed_var.sqrt() + 1e-3,
            "closed-form slope {closed} should vanish"
        );
    }
}
