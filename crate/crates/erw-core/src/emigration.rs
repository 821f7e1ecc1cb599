//! Critical multitype branching with per-generation emigration.
//!
//! Each generation first removes a fixed emigrant vector `N` (if the state
//! does not dominate `N` componentwise the process dies), then every
//! remaining individual reproduces independently. The offspring law of
//! interest is the tail family: a type-`k` parent produces one type-`(k-1)`
//! child (for `k >= 2`) plus a multivariate-geometric batch with ratios
//! `rho`. Criticality of the mean matrix is the ladder identity
//! `sum_l l rho_l = 1`, so survival decays like a power of time with
//! exponent `1 + theta`, `theta = <N, u> / beta`.
//!
//! The module also couples this process with the failure chain of the walk:
//! started from the same state, the emigration process stays componentwise
//! below the chain pathwise when both are driven by one stream of shared
//! geometric batches. The coupling consumes, per generation, one cookie
//! failure batch (chain only) and one ordered sequence of geometric batches;
//! the emigration side reads a contiguous block of that sequence.

use crate::branching::z_step_into;
use crate::branching::StepRoute;
use crate::env::CookieEnvironment;
use crate::rng::{derive_stream, experiment, StreamKey};
use crate::sampler::EnvSampler;
use crate::spectral::{tail_family_mean_matrix, tail_family_sigma, SigmaTensor};
use crate::stats::{fit_line, SlopeFit, StatsError};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmigrationError {
    #[error("ratio vector must be nonempty with nonnegative entries and positive last entry")]
    BadRatios,
    #[error("the tail assigns no mass to the longest backward jump, so the top type is unreachable")]
    TopTypeUnreachable,
    #[error("emigrant vector entry {index} must be at least 1")]
    EmigrantZero { index: usize },
    #[error("dimension mismatch: expected {want} types, got {got}")]
    Dimension { want: usize, got: usize },
    #[error("initial state must dominate the emigrant vector componentwise")]
    InitialBelowEmigrants,
    #[error("need at least {need} {what}, got {got}")]
    BudgetTooSmall { what: &'static str, need: u64, got: u64 },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

// ---------------------------------------------------------------------------
// Offspring laws
// ---------------------------------------------------------------------------

/// A multitype offspring law with known first moments.
pub trait OffspringLaw: Sync {
    fn types(&self) -> usize;
    /// Add one parent's offspring (parent type 1-based) into `acc`.
    fn add_offspring(&self, parent_type: usize, acc: &mut [u64], rng: &mut dyn RngCore);
    fn mean_matrix(&self) -> Vec<Vec<f64>>;
    /// Analytic second factorial moments, when available.
    fn sigma(&self) -> Option<SigmaTensor> {
        None
    }
}

/// Tail-family offspring: one type-`(k-1)` child plus a geometric batch.
///
/// The batch has total count geometric with success probability
/// `1 / (1 + sum rho)` and types split proportionally to `rho`; scaling
/// `rho` scales the mean matrix, so scaled-down ratios give a subcritical
/// control with the same shape.
#[derive(Clone, Debug)]
pub struct GeometricShiftOffspring {
    rho: Vec<f64>,
    success: f64,
    split_cum: Vec<f64>,
}

impl GeometricShiftOffspring {
    pub fn from_rho(rho: &[f64]) -> Result<GeometricShiftOffspring, EmigrationError> {
        if rho.is_empty() || rho.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(EmigrationError::BadRatios);
        }
        if *rho.last().expect("nonempty") <= 0.0 {
            return Err(EmigrationError::BadRatios);
        }
        let total: f64 = rho.iter().sum();
        let mut acc = 0.0;
        let mut split_cum: Vec<f64> = rho
            .iter()
            .map(|r| {
                acc += r / total;
                acc
            })
            .collect();
        if let Some(last) = split_cum.last_mut() {
            *last = 1.0;
        }
        Ok(GeometricShiftOffspring { rho: rho.to_vec(), success: 1.0 / (1.0 + total), split_cum })
    }

    /// Tail family of an environment; the tail must reach the full range.
    pub fn from_env(env: &CookieEnvironment) -> Result<GeometricShiftOffspring, EmigrationError> {
        if env.tail_range() != env.l_max() {
            return Err(EmigrationError::TopTypeUnreachable);
        }
        GeometricShiftOffspring::from_rho(&env.rho_f64())
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Add one geometric batch (no shift child) into `acc`.
    pub fn add_batch(&self, acc: &mut [u64], rng: &mut dyn RngCore) {
        // Inversion for the geometric total: u in (0,1].
        let u: f64 = 1.0 - rng.gen::<f64>();
        let total = if self.success >= 1.0 {
            0
        } else {
            (u.ln() / (1.0 - self.success).ln()) as u64
        };
        for _ in 0..total {
            let v: f64 = rng.gen();
            let mut idx = 0;
            while idx + 1 < self.split_cum.len() && v >= self.split_cum[idx] {
                idx += 1;
            }
            acc[idx] += 1;
        }
    }
}

impl OffspringLaw for GeometricShiftOffspring {
    fn types(&self) -> usize {
        self.rho.len()
    }

    fn add_offspring(&self, parent_type: usize, acc: &mut [u64], rng: &mut dyn RngCore) {
        self.add_batch(acc, rng);
        if parent_type >= 2 {
            acc[parent_type - 2] += 1;
        }
    }

    fn mean_matrix(&self) -> Vec<Vec<f64>> {
        tail_family_mean_matrix(&self.rho)
    }

    fn sigma(&self) -> Option<SigmaTensor> {
        Some(tail_family_sigma(&self.rho))
    }
}

// ---------------------------------------------------------------------------
// The emigration process
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EmigrationConfig {
    /// `N`: individuals removed at the start of every generation.
    pub emigrants: Vec<u64>,
    /// `K`: the initial state.
    pub initial: Vec<u64>,
}

impl EmigrationConfig {
    pub fn new(emigrants: Vec<u64>, initial: Vec<u64>) -> Result<EmigrationConfig, EmigrationError> {
        if emigrants.len() != initial.len() {
            return Err(EmigrationError::Dimension { want: emigrants.len(), got: initial.len() });
        }
        if let Some(index) = emigrants.iter().position(|&n| n == 0) {
            return Err(EmigrationError::EmigrantZero { index });
        }
        if emigrants.iter().zip(&initial).any(|(&n, &k)| k < n) {
            return Err(EmigrationError::InitialBelowEmigrants);
        }
        Ok(EmigrationConfig { emigrants, initial })
    }
}

/// One generation: remove emigrants (dying if impossible), then reproduce.
/// Parents are processed in type order, individuals sequentially, so a given
/// stream yields one path.
pub fn gw_step<L: OffspringLaw + ?Sized>(
    law: &L,
    emigrants: &[u64],
    cur: &[u64],
    next: &mut Vec<u64>,
    rng: &mut dyn RngCore,
) {
    let l = law.types();
    next.clear();
    next.resize(l, 0);
    if cur.iter().zip(emigrants).any(|(&c, &n)| c < n) {
        return;
    }
    for k in 1..=l {
        for _ in 0..(cur[k - 1] - emigrants[k - 1]) {
            law.add_offspring(k, next, rng);
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SurvivalPoint {
    pub n: u64,
    pub survivors: u64,
    pub mu_hat: f64,
    /// Mean total population among survivors at time `n` (NaN when none).
    pub cond_mean_size: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SurvivalReport {
    pub replicas: u64,
    pub horizon: u64,
    pub points: Vec<SurvivalPoint>,
    /// Checkpoint range the fits actually used.
    pub fit_window: (u64, u64),
    /// Weighted fit of `ln mu_hat` against `ln n` over the fit range,
    /// weights `R mu / (1 - mu)`; slope estimates `-(1 + theta)`.
    pub power_fit: Option<SlopeFit>,
    /// Same points and weights, `ln mu_hat` against `n`.
    pub exponential_fit: Option<SlopeFit>,
    /// Weighted residual sums of squares of the two fits.
    pub power_rss: f64,
    pub exponential_rss: f64,
    pub decay_exponent_hat: f64,
    pub theta_hat: f64,
}

struct Tally {
    tau_hist: Vec<u64>,
    censored: u64,
    alive: Vec<u64>,
    size_sum: Vec<u64>,
}

impl Tally {
    fn new(horizon: u64, ckpts: usize) -> Tally {
        Tally {
            tau_hist: vec![0; horizon as usize + 1],
            censored: 0,
            alive: vec![0; ckpts],
            size_sum: vec![0; ckpts],
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.tau_hist.iter_mut().zip(&other.tau_hist) {
            *a += b;
        }
        self.censored += other.censored;
        for (a, b) in self.alive.iter_mut().zip(&other.alive) {
            *a += b;
        }
        for (a, b) in self.size_sum.iter_mut().zip(&other.size_sum) {
            *a += b;
        }
        self
    }
}

/// Default fit window: starts at the first checkpoint where the survival
/// frequency has dropped below 1/2 (past the initial-population transient)
/// and ends at the last checkpoint still backed by at least 200 surviving
/// replicas.
fn auto_fit_window(points: &[SurvivalPoint]) -> (u64, u64) {
    let lo = points
        .iter()
        .find(|p| p.mu_hat < 0.5)
        .or_else(|| points.first())
        .map_or(0, |p| p.n);
    let hi = points.iter().rev().find(|p| p.survivors >= 200).map_or(lo, |p| p.n);
    (lo, hi)
}

fn log_spaced_checkpoints(horizon: u64) -> Vec<u64> {
    let lo = 2u64.min(horizon);
    let mut out: Vec<u64> = Vec::new();
    let steps = 24;
    for i in 0..=steps {
        let x = (lo as f64).ln()
            + ((horizon as f64).ln() - (lo as f64).ln()) * i as f64 / steps as f64;
        out.push(x.exp().round() as u64);
    }
    out.dedup();
    out
}

/// Extinction-time tail of the emigration process.
///
/// Replica `r` runs on its own stream until extinct or `horizon`. The tail
/// `mu_hat(n) = #{tau > n} / R` is evaluated on log-spaced checkpoints and
/// fitted two ways over `fit_range` (checkpoints with `0 < mu_hat < 1`):
/// against `ln n` (power decay, the critical signature) and against `n`
/// (exponential decay, the subcritical signature).
pub fn survival_experiment<L: OffspringLaw + ?Sized>(
    law: &L,
    config: &EmigrationConfig,
    replicas: u64,
    horizon: u64,
    fit_range: Option<(u64, u64)>,
    root_seed: u64,
) -> Result<SurvivalReport, EmigrationError> {
    let l = law.types();
    if config.emigrants.len() != l {
        return Err(EmigrationError::Dimension { want: l, got: config.emigrants.len() });
    }
    if replicas < 2 {
        return Err(EmigrationError::BudgetTooSmall { what: "replicas", need: 2, got: replicas });
    }
    if horizon < 4 {
        return Err(EmigrationError::BudgetTooSmall { what: "horizon steps", need: 4, got: horizon });
    }
    let ckpts = log_spaced_checkpoints(horizon);
    let tally = (0..replicas)
        .into_par_iter()
        .fold(
            || Tally::new(horizon, ckpts.len()),
            |mut t, r| {
                let mut rng = derive_stream(StreamKey {
                    root_seed,
                    experiment: experiment::GW_SURVIVAL,
                    replica: r,
                });
                let mut cur = config.initial.clone();
                let mut next = Vec::new();
                let mut ptr = 0;
                let mut died = false;
                for n in 1..=horizon {
                    gw_step(law, &config.emigrants, &cur, &mut next, &mut rng);
                    std::mem::swap(&mut cur, &mut next);
                    if cur.iter().all(|&c| c == 0) {
                        t.tau_hist[n as usize] += 1;
                        died = true;
                        break;
                    }
                    while ptr < ckpts.len() && ckpts[ptr] < n {
                        ptr += 1;
                    }
                    if ptr < ckpts.len() && ckpts[ptr] == n {
                        t.alive[ptr] += 1;
                        t.size_sum[ptr] += cur.iter().sum::<u64>();
                        ptr += 1;
                    }
                }
                if !died {
                    t.censored += 1;
                }
                t
            },
        )
        .reduce(|| Tally::new(horizon, ckpts.len()), Tally::merge);

    // Tail counts from the extinction-time histogram (exact integers).
    let mut points = Vec::with_capacity(ckpts.len());
    for (i, &n) in ckpts.iter().enumerate() {
        let beyond: u64 =
            tally.censored + tally.tau_hist[(n as usize + 1).min(tally.tau_hist.len())..].iter().sum::<u64>();
        debug_assert_eq!(beyond, tally.alive[i], "checkpoint bookkeeping must agree");
        points.push(SurvivalPoint {
            n,
            survivors: tally.alive[i],
            mu_hat: tally.alive[i] as f64 / replicas as f64,
            cond_mean_size: if tally.alive[i] > 0 {
                tally.size_sum[i] as f64 / tally.alive[i] as f64
            } else {
                f64::NAN
            },
        });
    }

    let (fit_lo, fit_hi) = fit_range.unwrap_or_else(|| auto_fit_window(&points));
    let used: Vec<&SurvivalPoint> = points
        .iter()
        .filter(|p| p.n >= fit_lo && p.n <= fit_hi && p.survivors > 0 && p.mu_hat < 1.0)
        .collect();
    let (power_fit, exponential_fit, power_rss, exponential_rss) = if used.len() >= 3 {
        let ln_n: Vec<f64> = used.iter().map(|p| (p.n as f64).ln()).collect();
        let n_lin: Vec<f64> = used.iter().map(|p| p.n as f64).collect();
        let ln_mu: Vec<f64> = used.iter().map(|p| p.mu_hat.ln()).collect();
        let w: Vec<f64> = used
            .iter()
            .map(|p| replicas as f64 * p.mu_hat / (1.0 - p.mu_hat))
            .collect();
        let pf = fit_line(&ln_n, &ln_mu, Some(&w))?;
        let ef = fit_line(&n_lin, &ln_mu, Some(&w))?;
        let rss = |slope: f64, intercept: f64, xs: &[f64]| {
            xs.iter()
                .zip(&ln_mu)
                .zip(&w)
                .map(|((x, y), wi)| {
                    let r = y - slope * x - intercept;
                    wi * r * r
                })
                .sum::<f64>()
        };
        let prss = rss(pf.slope, pf.intercept, &ln_n);
        let erss = rss(ef.slope, ef.intercept, &n_lin);
        (Some(pf), Some(ef), prss, erss)
    } else {
        (None, None, f64::NAN, f64::NAN)
    };
    let decay = power_fit.as_ref().map_or(f64::NAN, |f| -f.slope);
    Ok(SurvivalReport {
        replicas,
        horizon,
        points,
        fit_window: (fit_lo, fit_hi),
        power_fit,
        exponential_fit,
        power_rss,
        exponential_rss,
        decay_exponent_hat: decay,
        theta_hat: decay - 1.0,
    })
}

// ---------------------------------------------------------------------------
// Pathwise coupling with the failure chain
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CouplingReport {
    pub replicas: u64,
    pub horizon: u64,
    /// Initial state of both processes: `M` individuals of every type.
    pub initial: Vec<u64>,
    /// Emigrant vector `(M-1, M, ..., M)`.
    pub emigrants: Vec<u64>,
    /// Generations in which some component of the emigration process
    /// exceeded the chain. The construction makes this impossible, so any
    /// nonzero count falsifies the shared-batch argument.
    pub dominance_violations: u64,
    /// Generation-by-generation comparisons performed.
    pub comparisons: u64,
    pub emigration_extinctions: u64,
    pub emigration_alive_at_horizon: u64,
    pub mean_extinction_time: f64,
}

/// Run the failure chain and the emigration process on shared randomness.
///
/// Both start at `(M, ..., M)` with emigrant vector `(M-1, M, ..., M)`. Per
/// generation the chain consumes one cookie failure batch plus geometric
/// batches `1..=|Z|-M+1` in order; the emigration side reuses the block
/// starting at `(L-1)M + 1` of the same sequence, one batch per remaining
/// parent, plus the deterministic shift children. Componentwise dominance
/// of the chain over the emigration process is checked after every
/// generation until the latter dies or `horizon` is reached.
pub fn coupled_run(
    env: &CookieEnvironment,
    replicas: u64,
    horizon: u64,
    root_seed: u64,
) -> Result<CouplingReport, EmigrationError> {
    if env.tail_range() != env.l_max() {
        return Err(EmigrationError::TopTypeUnreachable);
    }
    if replicas < 1 {
        return Err(EmigrationError::BudgetTooSmall { what: "replicas", need: 1, got: replicas });
    }
    if horizon < 1 {
        return Err(EmigrationError::BudgetTooSmall { what: "horizon steps", need: 1, got: horizon });
    }
    let l = env.l_max();
    let m = env.cookies_per_site() as u64;
    let sampler = EnvSampler::new(env);
    let initial = vec![m; l];
    let mut emigrants = vec![m; l];
    emigrants[0] = m - 1;

    #[derive(Default)]
    struct Acc {
        violations: u64,
        comparisons: u64,
        extinct: u64,
        alive: u64,
        tau_sum: u64,
    }
    let acc = (0..replicas)
        .into_par_iter()
        .fold(
            || Acc::default(),
            |mut a, r| {
                let mut rng = derive_stream(StreamKey {
                    root_seed,
                    experiment: experiment::COUPLING,
                    replica: r,
                });
                let mut z = initial.clone();
                let mut w = initial.clone();
                let mut z_next = vec![0u64; l];
                let mut w_next = vec![0u64; l];
                let mut batch = vec![0u64; l];
                for n in 1..=horizon {
                    // The chain consumes the cookie batch first.
                    z_next.iter_mut().for_each(|v| *v = 0);
                    w_next.iter_mut().for_each(|v| *v = 0);
                    sampler.add_failures_until(1, m, &mut z_next, &mut rng);
                    let z_total: u64 = z.iter().sum();
                    let z_batches = z_total + 1 - m;
                    let w_alive = w.iter().zip(&emigrants).all(|(&wi, &ni)| wi >= ni);
                    let (w_lo, w_hi) = if w_alive {
                        let parents: u64 =
                            w.iter().zip(&emigrants).map(|(&wi, &ni)| wi - ni).sum();
                        let lo = (l as u64 - 1) * m + 1;
                        (lo, lo + parents - 1)
                    } else {
                        (1, 0)
                    };
                    debug_assert!(
                        w_hi <= z_batches,
                        "emigration block {w_lo}..={w_hi} must sit inside 1..={z_batches}"
                    );
                    for j in 1..=z_batches {
                        batch.iter_mut().for_each(|v| *v = 0);
                        sampler.add_tail_batch(&mut batch, &mut rng);
                        for (zi, bi) in z_next.iter_mut().zip(&batch) {
                            *zi += bi;
                        }
                        if j >= w_lo && j <= w_hi {
                            for (wi, bi) in w_next.iter_mut().zip(&batch) {
                                *wi += bi;
                            }
                        }
                    }
                    for i in 0..l - 1 {
                        z_next[i] += z[i + 1];
                        if w_alive {
                            w_next[i] += w[i + 1] - emigrants[i + 1];
                        }
                    }
                    std::mem::swap(&mut z, &mut z_next);
                    std::mem::swap(&mut w, &mut w_next);
                    a.comparisons += 1;
                    if w.iter().zip(&z).any(|(&wi, &zi)| wi > zi) {
                        a.violations += 1;
                    }
                    if w.iter().all(|&wi| wi == 0) {
                        a.extinct += 1;
                        a.tau_sum += n;
                        return a;
                    }
                }
                a.alive += 1;
                a
            },
        )
        .reduce(Acc::default, |mut x, y| {
            x.violations += y.violations;
            x.comparisons += y.comparisons;
            x.extinct += y.extinct;
            x.alive += y.alive;
            x.tau_sum += y.tau_sum;
            x
        });
    Ok(CouplingReport {
        replicas,
        horizon,
        initial,
        emigrants,
        dominance_violations: acc.violations,
        comparisons: acc.comparisons,
        emigration_extinctions: acc.extinct,
        emigration_alive_at_horizon: acc.alive,
        mean_extinction_time: if acc.extinct > 0 {
            acc.tau_sum as f64 / acc.extinct as f64
        } else {
            f64::NAN
        },
    })
}

// ---------------------------------------------------------------------------
// Moment-divergence probe
// ---------------------------------------------------------------------------

pub const DIVERGENCE_THRESHOLD: f64 = 1.10;

/// Safety margin of the probe's divergence rule `kappa >= tail_index -
/// PROBE_MARGIN`. The moment of order `kappa` integrates `x^(kappa-1)`
/// against a tail `~ x^(-alpha)`, so it diverges exactly when `kappa >=
/// alpha`; the margin keeps the boundary case (`kappa` equal to the true
/// index) flagged despite estimation noise, at the price of also flagging
/// orders within the margin below the index, where the moment is finite
/// but enormous and any empirical average is unusable anyway.
pub const PROBE_MARGIN: f64 = 0.15;

#[derive(Clone, Debug, Serialize)]
pub struct KappaDiagnostic {
    pub kappa: u32,
    /// `true` when `kappa >= tail_index - PROBE_MARGIN`: the stationary
    /// moment of this order diverges (or sits too close to the boundary to
    /// estimate).
    pub diverging: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentProbeReport {
    pub iterations: u64,
    pub chains: u64,
    /// Estimated tail index `alpha` of the stationary total failure count:
    /// minus the slope of pooled log exceedance frequency against log
    /// threshold over the accepted dyadic octaves. NaN when fewer than two
    /// octaves qualify.
    pub tail_index: f64,
    /// In-sample scatter of the accepted octaves around the fitted line,
    /// not a calibrated sampling error (the samples are autocorrelated).
    pub tail_index_se: f64,
    /// Per-chain log-log exceedance slopes, descriptive only; NaN for
    /// chains whose occupied range was too short to fit. A lone outlier
    /// here marks the chain whose excursion forced octaves to be dropped.
    pub chain_indices: Vec<f64>,
    /// `(threshold, pooled exceedance frequency)` pairs entering the fit.
    pub tail_points: Vec<(f64, f64)>,
    pub margin: f64,
    pub kappas: Vec<KappaDiagnostic>,
}

/// Integrability probe for stationary moments of the total failure count,
/// orders 1 through `kappa_max`.
///
/// Running empirical averages of a barely-divergent moment grow so slowly
/// (logarithmically at the boundary) that no fixed-budget trend test
/// separates them from noise. The tail does better: the stationary total
/// has a regularly varying tail, the moment of order `kappa` is finite
/// exactly when `kappa` is below the tail index, and the index is a stable
/// log-log slope over dyadic exceedance counts pooled from independent
/// chains. The fit runs over thresholds 4 through 256 while backed by at
/// least 200 pooled exceedances, unweighted so every octave gets one vote.
/// The time a chain spends above a level is itself heavy-tailed, so one
/// freak excursion can flatten the pooled tail for the whole run; such an
/// excursion lives in a single chain, so any octave where one chain
/// carries most of the pooled mass is dropped as polluted. A genuinely
/// fat tail is immune to the rule: there, every chain keeps visiting the
/// high octaves and no single one dominates. Octaves beyond 256 are
/// excluded because the first passage to height `x` takes on the order of
/// `x^2` steps near criticality, leaving them dominated by exactly such
/// single excursions. An eighth of each chain is discarded as burn-in for
/// the same reason: chains start empty, and the occupied band needs time
/// to fill.
pub fn moment_divergence_probe(
    env: &CookieEnvironment,
    kappa_max: u32,
    chains: u64,
    iterations: u64,
    root_seed: u64,
) -> Result<MomentProbeReport, EmigrationError> {
    if !(1..=8).contains(&kappa_max) {
        return Err(EmigrationError::BudgetTooSmall {
            what: "kappa_max in 1..=8",
            need: 1,
            got: u64::from(kappa_max),
        });
    }
    if chains < 2 {
        return Err(EmigrationError::BudgetTooSmall { what: "chains", need: 2, got: chains });
    }
    if iterations < 64 {
        return Err(EmigrationError::BudgetTooSmall {
            what: "iterations",
            need: 64,
            got: iterations,
        });
    }
    // Thresholds 4, 8, ..., 256.
    const OCTAVES: usize = 7;
    let burn_in = iterations / 8;
    let kept = iterations - burn_in;
    let sampler = EnvSampler::new(env);
    let per_chain: Vec<[u64; OCTAVES]> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = derive_stream(StreamKey {
                root_seed,
                experiment: experiment::MOMENT_PROBE,
                replica: c,
            });
            let mut cur = vec![0u64; env.l_max()];
            let mut next = Vec::new();
            let mut acc = [0u64; OCTAVES];
            for n in 0..iterations {
                z_step_into(&sampler, &cur, &mut next, StepRoute::Auto, &mut rng);
                std::mem::swap(&mut cur, &mut next);
                if n < burn_in {
                    continue;
                }
                let total: u64 = cur.iter().sum();
                // acc[j] counts samples with total > 2^(j+2).
                let mut bound = 4u64;
                for slot in acc.iter_mut() {
                    if total > bound {
                        *slot += 1;
                        bound *= 2;
                    } else {
                        break;
                    }
                }
            }
            acc
        })
        .collect();
    let chain_indices: Vec<f64> = per_chain
        .iter()
        .map(|counts| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (j, &count) in counts.iter().enumerate() {
                if count < 64 {
                    break;
                }
                xs.push(((4u64 << j) as f64).ln());
                ys.push((count as f64 / kept as f64).ln());
            }
            match xs.len() {
                0 | 1 => f64::NAN,
                2 => -(ys[1] - ys[0]) / (xs[1] - xs[0]),
                _ => -fit_line(&xs, &ys, None).expect("three distinct abscissae").slope,
            }
        })
        .collect();
    // With very few chains a majority share is typical, not suspicious.
    let share_cap = (2.0 / chains as f64).max(0.5);
    let samples = (chains * kept) as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut tail_points = Vec::new();
    for j in 0..OCTAVES {
        let pooled: u64 = per_chain.iter().map(|c| c[j]).sum();
        let top: u64 = per_chain.iter().map(|c| c[j]).max().unwrap_or(0);
        if pooled < 200 || top as f64 > share_cap * pooled as f64 {
            break;
        }
        let threshold = (4u64 << j) as f64;
        let freq = pooled as f64 / samples;
        xs.push(threshold.ln());
        ys.push(freq.ln());
        tail_points.push((threshold, freq));
    }
    let (tail_index, tail_index_se) = match xs.len() {
        0 | 1 => (f64::NAN, f64::NAN),
        2 => (-(ys[1] - ys[0]) / (xs[1] - xs[0]), f64::NAN),
        _ => {
            let fit = fit_line(&xs, &ys, None).expect("three distinct abscissae");
            (-fit.slope, fit.slope_se)
        }
    };
    let kappas = (1..=kappa_max)
        .map(|kappa| KappaDiagnostic {
            kappa,
            diverging: tail_index.is_finite() && f64::from(kappa) >= tail_index - PROBE_MARGIN,
        })
        .collect();
    Ok(MomentProbeReport {
        iterations,
        chains,
        tail_index,
        tail_index_se,
        chain_indices,
        tail_points,
        margin: PROBE_MARGIN,
        kappas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::presets;
    use crate::stats::{chi_square_two_sample, CellCounts, Estimate};

    fn selftest_rng(replica: u64) -> impl Rng {
        derive_stream(StreamKey { root_seed: 99, experiment: experiment::SELFTEST, replica })
    }

    #[test]
    fn offspring_moments_match_family_formulas() {
        let env = presets::ballistic_example();
        let law = GeometricShiftOffspring::from_env(&env).unwrap();
        let mean = law.mean_matrix();
        assert_eq!(mean, tail_family_mean_matrix(&env.rho_f64()));
        let sigma = law.sigma().unwrap();
        let mut rng = selftest_rng(1);
        let n = 200_000;
        for parent in 1..=2usize {
            let mut means = vec![Estimate::new(); 2];
            let mut cross = Estimate::new();
            let mut fact2 = vec![Estimate::new(); 2];
            let mut buf = vec![0u64; 2];
            for _ in 0..n {
                buf.iter_mut().for_each(|v| *v = 0);
                law.add_offspring(parent, &mut buf, &mut rng);
                for i in 0..2 {
                    means[i].push(buf[i] as f64);
                    fact2[i].push((buf[i] * buf[i].saturating_sub(1)) as f64);
                }
                cross.push((buf[0] * buf[1]) as f64);
            }
            for i in 0..2 {
                let gap = (means[i].mean() - mean[parent - 1][i]).abs();
                assert!(gap < 4.0 * means[i].se(), "mean[{parent}][{i}]");
                let gap2 = (fact2[i].mean() - sigma.get(parent, i + 1, i + 1)).abs();
                assert!(gap2 < 4.0 * fact2[i].se(), "sigma[{parent}]({},{})", i + 1, i + 1);
            }
            let gap_c = (cross.mean() - sigma.get(parent, 1, 2)).abs();
            assert!(gap_c < 4.0 * cross.se(), "sigma[{parent}](1,2)");
        }
    }

    #[test]
    fn geometric_batches_match_environment_tail_law() {
        let env = presets::ballistic_example();
        let law = GeometricShiftOffspring::from_env(&env).unwrap();
        let sampler = EnvSampler::new(&env);
        let mut a = CellCounts::new();
        let mut b = CellCounts::new();
        let mut rng_a = selftest_rng(2);
        let mut rng_b = selftest_rng(3);
        let mut buf = vec![0u64; 2];
        for _ in 0..100_000 {
            buf.iter_mut().for_each(|v| *v = 0);
            law.add_batch(&mut buf, &mut rng_a);
            a.record(buf.iter().map(|&x| (x.min(8)) as u32).collect());
            buf.iter_mut().for_each(|v| *v = 0);
            sampler.add_tail_batch(&mut buf, &mut rng_b);
            b.record(buf.iter().map(|&x| (x.min(8)) as u32).collect());
        }
        let rep = chi_square_two_sample(&a, &b, 5.0).unwrap();
        assert!(rep.p_value > 0.001, "chi-square p = {}", rep.p_value);
    }

    #[test]
    fn construction_rejects_degenerate_inputs() {
        assert!(matches!(
            GeometricShiftOffspring::from_rho(&[0.5, 0.0]),
            Err(EmigrationError::BadRatios)
        ));
        assert!(matches!(
            GeometricShiftOffspring::from_rho(&[]),
            Err(EmigrationError::BadRatios)
        ));
        // Tail reaching only distance 1 cannot feed type 2.
        use crate::env::{parse_prob, JumpLaw, LawName};
        use std::collections::BTreeMap;
        let tail_masses: BTreeMap<i64, _> =
            [(1i64, parse_prob("1/2").unwrap()), (-1i64, parse_prob("1/2").unwrap())]
                .into_iter()
                .collect();
        let tail = JumpLaw::from_masses(2, LawName::Tail, &tail_masses).unwrap();
        let cookie_masses: BTreeMap<i64, _> =
            [(1i64, parse_prob("9/10").unwrap()), (-1i64, parse_prob("1/10").unwrap())]
                .into_iter()
                .collect();
        let cookie = JumpLaw::from_masses(2, LawName::Cookie(1), &cookie_masses).unwrap();
        let env = CookieEnvironment::new(vec![cookie], tail).unwrap();
        assert!(matches!(
            GeometricShiftOffspring::from_env(&env),
            Err(EmigrationError::TopTypeUnreachable)
        ));
        assert!(matches!(coupled_run(&env, 1, 1, 1), Err(EmigrationError::TopTypeUnreachable)));

        assert!(matches!(
            EmigrationConfig::new(vec![1, 0], vec![2, 2]),
            Err(EmigrationError::EmigrantZero { index: 1 })
        ));
        assert!(matches!(
            EmigrationConfig::new(vec![1, 1], vec![1, 0]),
            Err(EmigrationError::InitialBelowEmigrants)
        ));
        assert!(matches!(
            EmigrationConfig::new(vec![1, 1], vec![1]),
            Err(EmigrationError::Dimension { .. })
        ));
    }

    #[test]
    fn state_equal_to_emigrants_dies_in_one_step() {
        let law = GeometricShiftOffspring::from_rho(&[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let config = EmigrationConfig::new(vec![1, 1], vec![1, 1]).unwrap();
        let mut rng = selftest_rng(4);
        let mut next = Vec::new();
        for _ in 0..50 {
            gw_step(&law, &config.emigrants, &config.initial, &mut next, &mut rng);
            assert!(next.iter().all(|&v| v == 0));
        }
        let rep = survival_experiment(&law, &config, 500, 16, None, 5).unwrap();
        assert_eq!(rep.points[0].survivors, 0);
        assert!(rep.power_fit.is_none(), "no surviving checkpoints to fit");
    }

    #[test]
    fn critical_tail_decays_like_a_power_and_subcritical_does_not() {
        let rho = [1.0 / 3.0, 1.0 / 3.0];
        let law = GeometricShiftOffspring::from_rho(&rho).unwrap();
        let config = EmigrationConfig::new(vec![1, 1], vec![2, 1]).unwrap();
        let rep =
            survival_experiment(&law, &config, 400_000, 64, Some((3, 24)), 7).unwrap();
        assert!(rep.points.iter().any(|p| p.survivors > 0));
        let exponent = rep.decay_exponent_hat;
        assert!(
            exponent > 2.0 && exponent < 6.0,
            "decay exponent {exponent}, points {:?}",
            rep.points
        );
        assert!(
            rep.power_rss < rep.exponential_rss,
            "power {} vs exponential {}",
            rep.power_rss,
            rep.exponential_rss
        );

        // Subcritical control: scaled-down ratios, same shape. A higher
        // start keeps it away from the absorbing boundary long enough to
        // show its quasi-stationary exponential phase.
        let sub = GeometricShiftOffspring::from_rho(&[0.3, 0.3]).unwrap();
        let config_sub = EmigrationConfig::new(vec![1, 1], vec![6, 6]).unwrap();
        let rep_sub =
            survival_experiment(&sub, &config_sub, 200_000, 64, Some((6, 36)), 8).unwrap();
        assert!(
            rep_sub.exponential_rss < rep_sub.power_rss,
            "subcritical: exponential {} vs power {}",
            rep_sub.exponential_rss,
            rep_sub.power_rss
        );
    }

    #[test]
    fn emigration_process_never_exceeds_failure_chain() {
        let env = presets::ballistic_example();
        let rep = coupled_run(&env, 2_000, 200, 11).unwrap();
        assert_eq!(rep.dominance_violations, 0);
        assert_eq!(rep.emigrants, vec![2, 3]);
        assert_eq!(rep.initial, vec![3, 3]);
        assert!(rep.comparisons > 2_000);
        assert_eq!(
            rep.emigration_extinctions + rep.emigration_alive_at_horizon,
            rep.replicas
        );
        assert!(rep.emigration_extinctions > 0);
    }

    #[test]
    fn probe_separates_diverging_from_integrable_mean() {
        let diverging =
            moment_divergence_probe(&presets::zero_speed_example(), 1, 9, 400_000, 13).unwrap();
        assert!(
            diverging.kappas[0].diverging,
            "drift 8/5 tail index {}",
            diverging.tail_index
        );
        assert!(diverging.tail_index < 1.0, "drift 8/5 tail index {}", diverging.tail_index);
        let settled =
            moment_divergence_probe(&presets::ballistic_example(), 2, 9, 400_000, 13).unwrap();
        assert!(!settled.kappas[0].diverging, "drift 12/5 tail index {}", settled.tail_index);
        assert!(
            (settled.tail_index - 1.4).abs() < 0.35,
            "drift 12/5 tail index {}",
            settled.tail_index
        );
        assert_eq!(settled.kappas.len(), 2);
        assert_eq!(settled.kappas[1].kappa, 2);
        // The second moment needs a tail index above 2 and is divergent here.
        assert!(settled.kappas[1].diverging);
    }
}
