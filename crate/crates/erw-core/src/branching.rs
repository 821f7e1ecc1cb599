//! The multi-type branching chain hidden in the walk's backward jumps.
//!
//! Reading the crossing ledger of a trajectory at levels `n-1, n-2, ..., 0`
//! yields a Markov chain `Z` on `Z_+^L`: given `Z = z` with `m = |z|`, the
//! next state is the typed count of failures before the `(m+1)`-st success
//! in a sequence of right-jump trials (cookie laws first, then the tail
//! law), plus the type shift `(z_2, ..., z_L, 0)`. This module implements
//! that chain with two interchangeable sampling routes, exact first-moment
//! formulas, stationary-law estimation with batch-means errors, the speed
//! formula read off the stationary law, and the distributional comparison
//! between walk ledgers and chain trajectories.

use crate::env::{CookieEnvironment, Regime};
use crate::rng::{derive_stream, experiment, StreamKey};
use crate::sampler::EnvSampler;
use crate::stats::{
    chi_square_two_sample, BatchMeans, CellCounts, ChiSquareReport, EstimateSummary, StatsError,
};
use crate::walk::run_to_level;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BranchingError {
    #[error("state total {total} below {needed}; the tail-batch decomposition does not apply")]
    StateTooSmall { total: u64, needed: u64 },
    #[error("need at least {needed} iterations (got {got})")]
    TooFewIterations { needed: u64, got: u64 },
    #[error("chi-square failed: {0}")]
    Stats(#[from] StatsError),
}

/// How to draw the failure-count vector `A(m)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRoute {
    /// Literal trial-by-trial simulation.
    Direct,
    /// `A(M-1)` by trials, then `m - M + 1` geometric/multinomial tail
    /// batches. Requires `m >= M - 1`.
    Decomposed,
    /// `Decomposed` when legal, `Direct` otherwise.
    Auto,
}

/// Draw `A(m)`: typed failures before the `(m+1)`-st success, adding the
/// counts to `acc` (not cleared). Panics if `route` is `Decomposed` and
/// `m < M - 1`.
pub fn add_failure_counts(
    sampler: &EnvSampler,
    m: u64,
    route: StepRoute,
    acc: &mut [u64],
    rng: &mut impl Rng,
) {
    let cookies = sampler.cookies_per_site() as u64;
    let decomposed = match route {
        StepRoute::Direct => false,
        StepRoute::Decomposed => {
            assert!(
                m + 1 >= cookies,
                "decomposed route needs state total >= {} (got {m})",
                cookies - 1
            );
            true
        }
        StepRoute::Auto => m + 1 >= cookies,
    };
    if decomposed {
        sampler.add_failures_until(1, cookies, acc, rng);
        for _ in 0..(m + 1 - cookies) {
            sampler.add_tail_batch(acc, rng);
        }
    } else {
        sampler.add_failures_until(1, m + 1, acc, rng);
    }
}

/// Convenience wrapper returning a fresh `A(m)` vector.
pub fn sample_failure_counts(
    sampler: &EnvSampler,
    m: u64,
    route: StepRoute,
    rng: &mut impl Rng,
) -> Vec<u64> {
    let mut acc = vec![0u64; sampler.l_max()];
    add_failure_counts(sampler, m, route, &mut acc, rng);
    acc
}

/// One step of the chain: `next = A(|cur|) + (cur_2, ..., cur_L, 0)`.
pub fn z_step_into(
    sampler: &EnvSampler,
    cur: &[u64],
    next: &mut Vec<u64>,
    route: StepRoute,
    rng: &mut impl Rng,
) {
    let l = sampler.l_max();
    debug_assert_eq!(cur.len(), l);
    next.clear();
    next.resize(l, 0);
    let total: u64 = cur.iter().sum();
    add_failure_counts(sampler, total, route, next, rng);
    for i in 0..l - 1 {
        next[i] += cur[i + 1];
    }
}

pub fn z_step(
    sampler: &EnvSampler,
    cur: &[u64],
    route: StepRoute,
    rng: &mut impl Rng,
) -> Vec<u64> {
    let mut next = Vec::new();
    z_step_into(sampler, cur, &mut next, route, rng);
    next
}

/// Exact mean of `A(M-1)`:
/// `E[A_l(M-1)] = sum_{i<=M} q_i(-l) + rho_l * (M - sum_{i<=M} q_i(+1))`.
pub fn expected_failure_counts_exact(env: &CookieEnvironment) -> Vec<BigRational> {
    let m = env.cookies_per_site();
    let rho = env.rho();
    let fwd_sum: BigRational =
        (1..=m).map(|i| env.cookie(i).forward().clone()).fold(BigRational::zero(), |a, b| a + b);
    let m_rat = BigRational::from_integer(BigInt::from(m as u64));
    (1..=env.l_max())
        .map(|l| {
            let cookie_fails: BigRational = (1..=m)
                .map(|i| env.cookie(i).backward(l).clone())
                .fold(BigRational::zero(), |a, b| a + b);
            cookie_fails + &rho[l - 1] * (&m_rat - &fwd_sum)
        })
        .collect()
}

/// Exact conditional mean of the next state from `state` with
/// `|state| >= M - 1`:
/// `E[next_l] = sum_i q_i(-l) + rho_l (|state| + 1 - sum_i q_i(+1)) + state_{l+1}`.
pub fn expected_next_state_exact(
    env: &CookieEnvironment,
    state: &[u64],
) -> Result<Vec<BigRational>, BranchingError> {
    let m = env.cookies_per_site() as u64;
    let total: u64 = state.iter().sum();
    if total + 1 < m {
        return Err(BranchingError::StateTooSmall { total, needed: m - 1 });
    }
    let rho = env.rho();
    let fwd_sum: BigRational = (1..=env.cookies_per_site())
        .map(|i| env.cookie(i).forward().clone())
        .fold(BigRational::zero(), |a, b| a + b);
    let budget = BigRational::from_integer(BigInt::from(total + 1)) - fwd_sum;
    Ok((1..=env.l_max())
        .map(|l| {
            let cookie_fails: BigRational = (1..=env.cookies_per_site())
                .map(|i| env.cookie(i).backward(l).clone())
                .fold(BigRational::zero(), |a, b| a + b);
            let shift = state.get(l).copied().unwrap_or(0);
            cookie_fails
                + &rho[l - 1] * &budget
                + BigRational::from_integer(BigInt::from(shift))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Stationary law
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LowStateMass {
    pub state: Vec<u32>,
    pub mass: EstimateSummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct StationaryReport {
    pub iterations: u64,
    pub burn_in: u64,
    pub regime: Regime,
    /// Per-type stationary means with batch-means standard errors.
    pub mean: Vec<EstimateSummary>,
    /// Stationary mean of `2 * Z_1 + Z_2 + ... + Z_L` (the hitting-time
    /// functional entering the speed formula).
    pub speed_form: EstimateSummary,
    /// Occupation masses of the states with `|state| <= M - 2`.
    pub low_states: Vec<LowStateMass>,
    pub max_total: u64,
    /// Median over eight consecutive run segments of the segment's running
    /// average of the total count divided by its first-quarter average; near
    /// 1 when the stationary mean is finite, visibly above 1 when it is not
    /// (drift at most 2). The median blunts single large excursions.
    pub growth_ratio: f64,
    pub nonconvergence: bool,
}

/// Enumerate all states with `|state| <= cap` in lexicographic order.
pub fn states_up_to(l: usize, cap: u64) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; l];
    fn rec(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u64) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=left {
            cur[pos] = v as u32;
            rec(out, cur, pos + 1, left - v);
        }
        cur[pos] = 0;
    }
    rec(&mut out, &mut cur, 0, cap);
    out.sort();
    out
}

/// Long-run averages of the chain from one seeded trajectory started at
/// zero. Batch-means standard errors absorb the chain's autocorrelation.
/// No finiteness check is attempted: for total drift at or below 2 the
/// reported means simply track a divergent quantity (see `max_total`).
pub fn estimate_stationary(
    env: &CookieEnvironment,
    iterations: u64,
    burn_in: u64,
    root_seed: u64,
) -> Result<StationaryReport, BranchingError> {
    run_stationary_chain(env, iterations, burn_in, StreamKey::new(root_seed, experiment::Z_STATIONARY, 0))
}

/// Same as [`estimate_stationary`] with an explicit stream key, for callers
/// running several independent chains.
pub fn run_stationary_chain(
    env: &CookieEnvironment,
    iterations: u64,
    burn_in: u64,
    key: StreamKey,
) -> Result<StationaryReport, BranchingError> {
    if iterations < 4 {
        return Err(BranchingError::TooFewIterations { needed: 4, got: iterations });
    }
    let sampler = EnvSampler::new(env);
    let l = env.l_max();
    let mut rng = derive_stream(key);
    let mut cur = vec![0u64; l];
    let mut next = Vec::new();
    for _ in 0..burn_in {
        z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
        std::mem::swap(&mut cur, &mut next);
    }
    let low_keys = if env.cookies_per_site() >= 2 {
        states_up_to(l, env.cookies_per_site() as u64 - 2)
    } else {
        Vec::new()
    };
    let mut mean: Vec<BatchMeans> = (0..l).map(|_| BatchMeans::for_total(iterations)).collect();
    let mut speed_form = BatchMeans::for_total(iterations);
    let mut low: Vec<BatchMeans> =
        low_keys.iter().map(|_| BatchMeans::for_total(iterations)).collect();
    let mut max_total = 0u64;
    let segments = if iterations >= 64 { 8 } else { 1 };
    let seg_len = iterations / segments;
    let seg_quarter = seg_len / 4;
    let mut seg_sum: u128 = 0;
    let mut seg_quarter_avg = 0.0;
    let mut seg_ratios: Vec<f64> = Vec::with_capacity(segments as usize);
    for it in 1..=iterations {
        z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
        std::mem::swap(&mut cur, &mut next);
        let total: u64 = cur.iter().sum();
        max_total = max_total.max(total);
        seg_sum += u128::from(total);
        let within = (it - 1) % seg_len + 1;
        if within == seg_quarter {
            seg_quarter_avg = seg_sum as f64 / seg_quarter as f64;
        }
        if within == seg_len && (seg_ratios.len() as u64) < segments {
            let full = seg_sum as f64 / seg_len as f64;
            seg_ratios.push(if seg_quarter_avg > 0.0 {
                full / seg_quarter_avg
            } else if full > 0.0 {
                f64::INFINITY
            } else {
                1.0
            });
            seg_sum = 0;
        }
        for (i, bm) in mean.iter_mut().enumerate() {
            bm.push(cur[i] as f64);
        }
        speed_form.push((total + cur[0]) as f64);
        for (k, bm) in low_keys.iter().zip(low.iter_mut()) {
            let hit = k.iter().enumerate().all(|(i, &v)| cur[i] == u64::from(v));
            bm.push(if hit { 1.0 } else { 0.0 });
        }
    }
    seg_ratios.sort_by(|a, b| a.partial_cmp(b).expect("no NaN ratios"));
    let mid = seg_ratios.len() / 2;
    let growth_ratio = if seg_ratios.len() % 2 == 1 {
        seg_ratios[mid]
    } else {
        0.5 * (seg_ratios[mid - 1] + seg_ratios[mid])
    };
    Ok(StationaryReport {
        iterations,
        burn_in,
        regime: env.regime(),
        mean: mean.iter().map(BatchMeans::summary).collect(),
        speed_form: speed_form.summary(),
        low_states: low_keys
            .into_iter()
            .zip(low.iter())
            .map(|(state, bm)| LowStateMass { state, mass: bm.summary() })
            .collect(),
        max_total,
        growth_ratio,
        nonconvergence: growth_ratio > crate::emigration::DIVERGENCE_THRESHOLD,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StationarySpeed {
    pub speed: f64,
    pub se: f64,
}

/// Speed via the stationary chain: `v = 1 / (1 + E[2 Z_1 + Z_2 + ... + Z_L])`,
/// with the standard error propagated through the reciprocal.
pub fn speed_from_stationary(report: &StationaryReport) -> StationarySpeed {
    let m = report.speed_form.mean;
    let se = report.speed_form.se;
    let denom = 1.0 + m;
    StationarySpeed { speed: 1.0 / denom, se: se / (denom * denom) }
}

// ---------------------------------------------------------------------------
// Walk ledger vs chain trajectory
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ProfileEquivalenceReport {
    pub levels: i64,
    pub replicas: u64,
    pub truncated_walks: u64,
    pub chi: ChiSquareReport,
}

/// Compare the joint law of the walk's crossing ledger, read top-down at
/// levels `n-1, ..., 0`, with `n` steps of the chain started at zero, via a
/// two-sample chi-square over the flattened count vectors.
pub fn profile_matches_chain(
    env: &CookieEnvironment,
    levels: i64,
    replicas: u64,
    horizon: u64,
    root_seed: u64,
) -> Result<ProfileEquivalenceReport, BranchingError> {
    let sampler = EnvSampler::new(env);
    let l = env.l_max();

    let walk_side = (0..replicas)
        .into_par_iter()
        .fold(
            || (CellCounts::new(), 0u64),
            |(mut counts, mut truncated), r| {
                let mut rng =
                    derive_stream(StreamKey::new(root_seed, experiment::WALK_PROFILE, r));
                let rec = run_to_level(&sampler, levels, horizon, &mut rng)
                    .expect("levels >= 1");
                if rec.truncated {
                    truncated += 1;
                } else {
                    let mut key = Vec::with_capacity(levels as usize * l);
                    for level in (0..levels).rev() {
                        for typ in 1..=l {
                            key.push(rec.profile.count(level, typ) as u32);
                        }
                    }
                    counts.record(key);
                }
                (counts, truncated)
            },
        )
        .reduce(
            || (CellCounts::new(), 0u64),
            |(mut a, ta), (b, tb)| {
                a.merge(&b);
                (a, ta + tb)
            },
        );

    let chain_side = (0..replicas)
        .into_par_iter()
        .fold(CellCounts::new, |mut counts, r| {
            let mut rng = derive_stream(StreamKey::new(root_seed, experiment::Z_CHAIN, r));
            let mut key = Vec::with_capacity(levels as usize * l);
            let mut cur = vec![0u64; l];
            let mut next = Vec::new();
            for step in 0..levels {
                for &c in &cur {
                    key.push(c as u32);
                }
                if step + 1 < levels {
                    z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
                    std::mem::swap(&mut cur, &mut next);
                }
            }
            counts.record(key);
            counts
        })
        .reduce(CellCounts::new, |mut a, b| {
            a.merge(&b);
            a
        });

    let chi = chi_square_two_sample(&walk_side.0, &chain_side, 5.0)?;
    Ok(ProfileEquivalenceReport {
        levels,
        replicas,
        truncated_walks: walk_side.1,
        chi,
    })
}

// ---------------------------------------------------------------------------
// Support bound
// ---------------------------------------------------------------------------

/// Per-type reachability bound for the chain.
///
/// Types up to the tail range are unbounded; a type `l` beyond it can only
/// be produced by the (at most `d_s`) cookies putting mass on backward jumps
/// of length `s >= l`, giving the bound `sum_{s >= l} d_s` carried down by
/// the shift.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SupportBound {
    pub tail_range: usize,
    /// `d_l`: number of cookies with mass on the backward jump of length `l`.
    pub cookie_type_counts: Vec<usize>,
    /// `bound[l-1]`: `None` for unbounded types, `Some(b)` for types capped
    /// at `b`.
    pub bound: Vec<Option<u64>>,
}

impl SupportBound {
    pub fn contains(&self, state: &[u64]) -> bool {
        state.len() == self.bound.len()
            && state
                .iter()
                .zip(&self.bound)
                .all(|(&v, b)| b.map_or(true, |cap| v <= cap))
    }
}

pub fn support_bound(env: &CookieEnvironment) -> SupportBound {
    let l = env.l_max();
    let tail_range = env.tail_range();
    let d: Vec<usize> = (1..=l)
        .map(|typ| {
            (1..=env.cookies_per_site())
                .filter(|&i| !env.cookie(i).backward(typ).is_zero())
                .count()
        })
        .collect();
    let bound = (1..=l)
        .map(|typ| {
            if typ <= tail_range {
                None
            } else {
                Some(d[typ - 1..].iter().map(|&x| x as u64).sum())
            }
        })
        .collect();
    SupportBound { tail_range, cookie_type_counts: d, bound }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{parse_prob, presets, CookieEnvironment, JumpLaw, LawName};
    use num_traits::ToPrimitive;

    fn rat(s: &str) -> BigRational {
        parse_prob(s).unwrap()
    }

    fn rational_to_f64(r: &BigRational) -> f64 {
        r.to_f64().expect("rational fits f64")
    }

    #[test]
    fn exact_failure_count_means() {
        let env = presets::ballistic_example();
        assert_eq!(expected_failure_counts_exact(&env), vec![rat("2/5"), rat("1/10")]);

        // Single cookie {+1: 1/2, -1: 1/2} over a symmetric range-1 tail:
        // E[A_1(0)] = 1/2 + 1 * (1 - 1/2) = 1.
        let cookie = JumpLaw::from_masses(
            1,
            LawName::Cookie(1),
            &[(1, rat("1/2")), (-1, rat("1/2"))].into_iter().collect(),
        );
        // Positive drift required; use 3/5 up.
        let cookie = match cookie {
            Ok(_) => JumpLaw::from_masses(
                1,
                LawName::Cookie(1),
                &[(1, rat("3/5")), (-1, rat("2/5"))].into_iter().collect(),
            )
            .unwrap(),
            Err(e) => panic!("{e:?}"),
        };
        let tail = JumpLaw::from_masses(
            1,
            LawName::Tail,
            &[(1, rat("1/2")), (-1, rat("1/2"))].into_iter().collect(),
        )
        .unwrap();
        let env1 = CookieEnvironment::new(vec![cookie], tail).unwrap();
        // E[A_1(0)] = q(-1) + rho (1 - q(+1)) = 2/5 + 1 * 2/5 = 4/5.
        assert_eq!(expected_failure_counts_exact(&env1), vec![rat("4/5")]);
    }

    #[test]
    fn exact_next_state_means() {
        let env = presets::ballistic_example();
        assert_eq!(
            expected_next_state_exact(&env, &[2, 0]).unwrap(),
            vec![rat("2/5"), rat("1/10")]
        );
        // Shift carries the second component into the first; larger total
        // adds rho per extra unit.
        assert_eq!(
            expected_next_state_exact(&env, &[1, 3]).unwrap(),
            vec![
                rat("2/5") + rat("2/3") + rat("3"),
                rat("1/10") + rat("2/3")
            ]
        );
        assert!(matches!(
            expected_next_state_exact(&env, &[1, 0]),
            Err(BranchingError::StateTooSmall { total: 1, needed: 2 })
        ));
    }

    #[test]
    fn sampled_next_state_matches_exact_mean() {
        let env = presets::ballistic_example();
        let sampler = EnvSampler::new(&env);
        for (state, route) in [
            (vec![2u64, 0], StepRoute::Direct),
            (vec![2, 0], StepRoute::Decomposed),
            (vec![1, 3], StepRoute::Auto),
        ] {
            let exact: Vec<f64> = expected_next_state_exact(&env, &state)
                .unwrap()
                .iter()
                .map(rational_to_f64)
                .collect();
            let n = 400_000u64;
            let mut rng = derive_stream(StreamKey::new(21, experiment::SELFTEST, 7));
            let mut sums = vec![0u64; 2];
            let mut sq = vec![0.0f64; 2];
            let mut next = Vec::new();
            for _ in 0..n {
                z_step_into(&sampler, &state, &mut next, route, &mut rng);
                for i in 0..2 {
                    sums[i] += next[i];
                    sq[i] += (next[i] * next[i]) as f64;
                }
            }
            for i in 0..2 {
                let mean = sums[i] as f64 / n as f64;
                let var = sq[i] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                assert!(
                    (mean - exact[i]).abs() < 4.0 * se,
                    "state {state:?} route {route:?} type {i}: {mean} vs {} (se {se})",
                    exact[i]
                );
            }
        }
    }

    #[test]
    fn routes_agree_in_distribution() {
        // Chi-square between the two sampling routes for the full next-state
        // vector, from states at and above the decomposition threshold.
        let env = presets::ballistic_example();
        let sampler = EnvSampler::new(&env);
        for (replica, state) in [vec![2u64, 0], vec![0, 2], vec![3, 2]].into_iter().enumerate() {
            let n = 100_000u64;
            let mut direct = CellCounts::new();
            let mut decomposed = CellCounts::new();
            let mut rng =
                derive_stream(StreamKey::new(33, experiment::SELFTEST, replica as u64));
            let mut next = Vec::new();
            for _ in 0..n {
                z_step_into(&sampler, &state, &mut next, StepRoute::Direct, &mut rng);
                direct.record(next.iter().map(|&v| v as u32).collect());
                z_step_into(&sampler, &state, &mut next, StepRoute::Decomposed, &mut rng);
                decomposed.record(next.iter().map(|&v| v as u32).collect());
            }
            let rep = chi_square_two_sample(&direct, &decomposed, 5.0).unwrap();
            assert!(
                rep.p_value > 0.001,
                "state {state:?}: chi2 {} df {} p {}",
                rep.statistic,
                rep.df,
                rep.p_value
            );
        }
    }

    #[test]
    #[should_panic(expected = "decomposed route needs state total >= 2")]
    fn decomposed_route_rejects_small_states() {
        let env = presets::ballistic_example();
        let sampler = EnvSampler::new(&env);
        let mut rng = derive_stream(StreamKey::new(1, experiment::SELFTEST, 0));
        let _ = sample_failure_counts(&sampler, 0, StepRoute::Decomposed, &mut rng);
    }

    #[test]
    fn stationary_chain_reports_consistent_summaries() {
        let env = presets::ballistic_example();
        let rep = estimate_stationary(&env, 200_000, 1_000, 4242).unwrap();
        assert_eq!(rep.iterations, 200_000);
        // speed_form mean = 2 E[Z_1] + E[Z_2] within floating error of the
        // separately accumulated type means.
        let recombined = 2.0 * rep.mean[0].mean + rep.mean[1].mean;
        assert!(
            (recombined - rep.speed_form.mean).abs() < 1e-9,
            "{recombined} vs {}",
            rep.speed_form.mean
        );
        // Low states for M = 3: (0,0), (0,1), (1,0).
        let keys: Vec<Vec<u32>> =
            rep.low_states.iter().map(|s| s.state.clone()).collect();
        assert_eq!(keys, vec![vec![0, 0], vec![0, 1], vec![1, 0]]);
        let total_low: f64 = rep.low_states.iter().map(|s| s.mass.mean).sum();
        assert!(total_low > 0.3 && total_low < 1.0, "low mass {total_low}");
        let v = speed_from_stationary(&rep);
        assert!(v.speed > 0.0 && v.speed < 1.0);
        assert!(v.se > 0.0 && v.se < v.speed);
        // Determinism.
        let rep2 = estimate_stationary(&env, 200_000, 1_000, 4242).unwrap();
        assert_eq!(rep.speed_form.mean.to_bits(), rep2.speed_form.mean.to_bits());
        assert!(matches!(
            estimate_stationary(&env, 2, 0, 1),
            Err(BranchingError::TooFewIterations { .. })
        ));
    }

    #[test]
    fn stationary_growth_flag_separates_finite_from_infinite_mean() {
        // Drift 12/5: finite stationary mean, the running average settles.
        let settled = estimate_stationary(&presets::ballistic_example(), 400_000, 40_000, 7).unwrap();
        assert!(
            !settled.nonconvergence,
            "drift 12/5 growth ratio {}",
            settled.growth_ratio
        );
        // Drift 8/5: the chain is still ergodic but the stationary mean is
        // infinite, so the running average keeps climbing.
        let heavy = estimate_stationary(&presets::zero_speed_example(), 400_000, 40_000, 7).unwrap();
        assert!(
            heavy.nonconvergence,
            "drift 8/5 growth ratio {}",
            heavy.growth_ratio
        );
    }

    #[test]
    fn stationary_mean_matches_one_type_reference_chain() {
        // Range-1 environment with M = 4 cookies of drift 3/5 over the
        // symmetric tail: delta = 12/5. The chain reduces to the classical
        // single-type branching chain with migration, reimplemented here
        // independently as an oracle.
        let cookie = |i: usize| {
            JumpLaw::from_masses(
                1,
                LawName::Cookie(i),
                &[(1, rat("4/5")), (-1, rat("1/5"))].into_iter().collect(),
            )
            .unwrap()
        };
        let tail = JumpLaw::from_masses(
            1,
            LawName::Tail,
            &[(1, rat("1/2")), (-1, rat("1/2"))].into_iter().collect(),
        )
        .unwrap();
        let env = CookieEnvironment::new((1..=4).map(cookie).collect(), tail).unwrap();
        assert_eq!(env.delta(), rat("12/5"));

        let iterations = 2_000_000u64;
        let rep = estimate_stationary(&env, iterations, 10_000, 99).unwrap();

        // Independent oracle: success probability 4/5 for the first four
        // trials, 1/2 afterwards; plain Bernoulli loop.
        let mut rng = derive_stream(StreamKey::new(987, experiment::SELFTEST, 3));
        let mut z = 0u64;
        let mut oracle = BatchMeans::for_total(iterations);
        for _ in 0..10_000 {
            z = one_type_step(z, &mut rng);
        }
        for _ in 0..iterations {
            z = one_type_step(z, &mut rng);
            oracle.push(z as f64);
        }
        let diff = (rep.mean[0].mean - oracle.mean()).abs();
        let se = rep.mean[0].se.hypot(oracle.se());
        assert!(diff < 4.0 * se, "chain {} oracle {} se {}", rep.mean[0].mean, oracle.mean(), se);

        fn one_type_step(z: u64, rng: &mut impl Rng) -> u64 {
            let mut fails = 0u64;
            let mut successes = 0u64;
            let mut trial = 0u64;
            while successes < z + 1 {
                trial += 1;
                let p = if trial <= 4 { 0.8 } else { 0.5 };
                if rng.gen::<f64>() < p {
                    successes += 1;
                } else {
                    fails += 1;
                }
            }
            fails
        }
    }

    #[test]
    fn ledger_of_short_walks_matches_chain_law() {
        let env = presets::ballistic_example();
        let rep = profile_matches_chain(&env, 3, 60_000, 10_000_000, 2024).unwrap();
        assert_eq!(rep.truncated_walks, 0);
        assert!(
            rep.chi.p_value > 0.001,
            "chi2 {} df {} p {}",
            rep.chi.statistic,
            rep.chi.df,
            rep.chi.p_value
        );
        // The first ledger row (level n-1) is deterministically zero and the
        // chain starts at zero, so keys agree on the first block by
        // construction; the statistic is driven by the deeper levels.
        assert!(rep.chi.cells_used >= 5);
    }

    #[test]
    fn support_bound_caps_types_beyond_tail_range() {
        // Tail only jumps -1; cookie 1 jumps -2, cookie 2 jumps -1.
        let c1 = JumpLaw::from_masses(
            2,
            LawName::Cookie(1),
            &[(1, rat("7/10")), (-2, rat("3/10"))].into_iter().collect(),
        )
        .unwrap();
        let c2 = JumpLaw::from_masses(
            2,
            LawName::Cookie(2),
            &[(1, rat("9/10")), (-1, rat("1/10"))].into_iter().collect(),
        )
        .unwrap();
        let tail = JumpLaw::from_masses(
            2,
            LawName::Tail,
            &[(1, rat("1/2")), (-1, rat("1/2")), (-2, rat("0"))].into_iter().collect(),
        )
        .unwrap();
        let env = CookieEnvironment::new(vec![c1, c2], tail).unwrap();
        let bound = support_bound(&env);
        assert_eq!(bound.tail_range, 1);
        assert_eq!(bound.cookie_type_counts, vec![1, 1]);
        assert_eq!(bound.bound, vec![None, Some(1)]);
        assert!(bound.contains(&[917, 1]));
        assert!(!bound.contains(&[0, 2]));

        // Every reachable state stays within the bound.
        let sampler = EnvSampler::new(&env);
        let mut rng = derive_stream(StreamKey::new(55, experiment::SELFTEST, 0));
        let mut cur = vec![0u64; 2];
        let mut next = Vec::new();
        for _ in 0..50_000 {
            z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
            std::mem::swap(&mut cur, &mut next);
            assert!(bound.contains(&cur), "escaped support: {cur:?}");
        }

        // Full-range tail: nothing is bounded.
        let full = presets::ballistic_example();
        assert_eq!(support_bound(&full).bound, vec![None, None]);
    }
}
