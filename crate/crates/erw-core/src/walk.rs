//! Direct simulation of the excited random walk.
//!
//! Besides stepping the walk, this module keeps the exact ledger that links
//! hitting times to backward jumps: a backward jump from `x` to `y = x - j`
//! crosses the edges above levels `y, y+1, ..., x-1`, contributing one
//! crossing of type `i - y + 1` at each level `i`. Writing `V_{i,l}` for the
//! number of type-`l` crossings at level `i` before the first visit to `n`,
//! every trajectory satisfies the exact identity
//!
//! ```text
//! T_n = n + 2 * sum_i V_{i,1} + sum_i sum_{l>=2} V_{i,l}
//! ```
//!
//! and the same identity holds for every prefix level `k <= n`. The ledger
//! is the bridge between the walk and the branching chain: read at levels
//! `n-1, n-2, ...` it has the law of the branching chain started from zero.

use crate::env::CookieEnvironment;
use crate::rng::{derive_stream, experiment, StreamKey};
use crate::sampler::EnvSampler;
use crate::stats::{Estimate, EstimateSummary};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("target level must be at least 1 (got {0})")]
    BadTarget(i64),
    #[error("record is truncated at horizon {horizon}; identity undefined")]
    TruncatedRecord { horizon: u64 },
}

/// Departure counts per site, growable on both sides of the origin.
#[derive(Clone, Debug, Default)]
struct TwoSidedCounts {
    nonneg: Vec<u32>,
    neg: Vec<u32>,
}

impl TwoSidedCounts {
    /// Increment the departure count at `site`, returning the new count.
    fn increment(&mut self, site: i64) -> u64 {
        let slot = if site >= 0 {
            let i = site as usize;
            if self.nonneg.len() <= i {
                self.nonneg.resize(i + 1, 0);
            }
            &mut self.nonneg[i]
        } else {
            let i = (-site - 1) as usize;
            if self.neg.len() <= i {
                self.neg.resize(i + 1, 0);
            }
            &mut self.neg[i]
        };
        *slot += 1;
        u64::from(*slot)
    }
}

/// Walk state: position, elapsed steps, and per-site departure counts.
#[derive(Clone, Debug, Default)]
pub struct WalkState {
    position: i64,
    time: u64,
    departures: TwoSidedCounts,
}

impl WalkState {
    pub fn new() -> WalkState {
        WalkState::default()
    }

    pub fn position(&self) -> i64 {
        self.position
    }

    pub fn time(&self) -> u64 {
        self.time
    }
}

/// Advance the walk one step; returns the jump taken.
pub fn step(sampler: &EnvSampler, state: &mut WalkState, rng: &mut impl Rng) -> i64 {
    let visit = state.departures.increment(state.position);
    let jump = sampler.sample_jump(visit, rng);
    state.position += jump;
    state.time += 1;
    jump
}

/// Typed backward-crossing counts `V_{i,l}` for levels `i <= target - 1`.
#[derive(Clone, Debug)]
pub struct BackwardProfile {
    target: i64,
    l_max: usize,
    /// Levels `0..target`, row-major `level * l_max + (type - 1)`.
    nonneg: Vec<u64>,
    /// Levels `-1, -2, ...` in downward order.
    neg: Vec<u64>,
}

impl BackwardProfile {
    fn new(target: i64, l_max: usize) -> BackwardProfile {
        BackwardProfile {
            target,
            l_max,
            nonneg: vec![0; target as usize * l_max],
            neg: Vec::new(),
        }
    }

    pub fn target(&self) -> i64 {
        self.target
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Lowest level with storage (levels below never saw a crossing).
    pub fn min_level(&self) -> i64 {
        -((self.neg.len() / self.l_max) as i64)
    }

    /// `V_{level, typ}`; zero outside the stored range.
    pub fn count(&self, level: i64, typ: usize) -> u64 {
        debug_assert!((1..=self.l_max).contains(&typ));
        if level >= self.target {
            return 0;
        }
        if level >= 0 {
            self.nonneg[level as usize * self.l_max + typ - 1]
        } else {
            let i = (-level - 1) as usize * self.l_max + typ - 1;
            self.neg.get(i).copied().unwrap_or(0)
        }
    }

    fn slot(&mut self, level: i64, typ: usize) -> &mut u64 {
        if level >= 0 {
            &mut self.nonneg[level as usize * self.l_max + typ - 1]
        } else {
            let i = (-level - 1) as usize * self.l_max + typ - 1;
            if self.neg.len() <= i {
                self.neg.resize((-level as usize) * self.l_max, 0);
            }
            &mut self.neg[i]
        }
    }

    /// Ledger update for a backward jump `from -> to`.
    fn record_jump(&mut self, from: i64, to: i64) {
        debug_assert!(from < self.target && to < from);
        for level in to..from {
            let typ = (level - to + 1) as usize;
            *self.slot(level, typ) += 1;
        }
    }

    /// Row `(V_{level,1}, ..., V_{level,L})`, reading from storage.
    pub fn level_row(&self, level: i64) -> Vec<u64> {
        (1..=self.l_max).map(|t| self.count(level, t)).collect()
    }
}

/// Full record of one run to a target level.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub target: i64,
    /// `hitting_times[k-1]` is the first time at level `k`; shorter than
    /// `target` when truncated.
    pub hitting_times: Vec<u64>,
    pub profile: BackwardProfile,
    pub truncated: bool,
    pub horizon: u64,
    pub total_steps: u64,
    pub final_position: i64,
    pub min_position: i64,
    /// Backward jumps strictly before each hitting time.
    back_jumps_at_hit: Vec<u64>,
    /// Sum of `(jump length - 1)` over those jumps.
    excess_at_hit: Vec<u64>,
}

/// Run a fresh walk until it first reaches `target` or `horizon` steps
/// elapse, recording hitting times and the full crossing ledger.
pub fn run_to_level(
    sampler: &EnvSampler,
    target: i64,
    horizon: u64,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord, WalkError> {
    if target < 1 {
        return Err(WalkError::BadTarget(target));
    }
    let mut state = WalkState::new();
    let mut profile = BackwardProfile::new(target, sampler.l_max());
    let mut hitting_times = Vec::with_capacity(target as usize);
    let mut back_jumps_at_hit = Vec::with_capacity(target as usize);
    let mut excess_at_hit = Vec::with_capacity(target as usize);
    let mut back_jumps = 0u64;
    let mut excess = 0u64;
    let mut min_position = 0i64;
    while state.position < target && state.time < horizon {
        let from = state.position;
        let jump = step(sampler, &mut state, rng);
        if jump < 0 {
            profile.record_jump(from, state.position);
            back_jumps += 1;
            excess += (-jump) as u64 - 1;
            min_position = min_position.min(state.position);
        } else if state.position == hitting_times.len() as i64 + 1 {
            hitting_times.push(state.time);
            back_jumps_at_hit.push(back_jumps);
            excess_at_hit.push(excess);
        }
    }
    Ok(TrajectoryRecord {
        target,
        truncated: state.position < target,
        horizon,
        total_steps: state.time,
        final_position: state.position,
        min_position,
        hitting_times,
        profile,
        back_jumps_at_hit,
        excess_at_hit,
    })
}

/// Exact arithmetic check of the hitting-time identity.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub target: i64,
    /// Identity residual `T_k - rhs_k` for the worst prefix `k`.
    pub worst_residual: i128,
    /// Number of prefix levels at which the identity holds exactly.
    pub prefixes_ok: usize,
    pub holds: bool,
    /// Right-hand side at `k = target` recomputed from the 2D ledger; must
    /// equal the streamed right-hand side.
    pub ledger_rhs: i128,
    pub final_hitting_time: u64,
}

pub fn check_hitting_identity(record: &TrajectoryRecord) -> Result<IdentityReport, WalkError> {
    if record.truncated {
        return Err(WalkError::TruncatedRecord { horizon: record.horizon });
    }
    let mut worst = 0i128;
    let mut ok = 0usize;
    for k in 1..=record.target as usize {
        let lhs = record.hitting_times[k - 1] as i128;
        let rhs = k as i128
            + 2 * record.back_jumps_at_hit[k - 1] as i128
            + record.excess_at_hit[k - 1] as i128;
        let res = lhs - rhs;
        if res == 0 {
            ok += 1;
        }
        if res.abs() > worst.abs() {
            worst = res;
        }
    }
    let profile = &record.profile;
    let mut ledger_rhs = record.target as i128;
    for level in profile.min_level()..profile.target() {
        ledger_rhs += 2 * profile.count(level, 1) as i128;
        for typ in 2..=profile.l_max() {
            ledger_rhs += profile.count(level, typ) as i128;
        }
    }
    let final_lhs = *record.hitting_times.last().expect("target >= 1") as i128;
    Ok(IdentityReport {
        target: record.target,
        worst_residual: worst,
        prefixes_ok: ok,
        holds: ok == record.target as usize && ledger_rhs == final_lhs,
        ledger_rhs,
        final_hitting_time: final_lhs as u64,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpeedReport {
    pub speed: EstimateSummary,
    pub steps: u64,
    pub replicas: u64,
}

/// Direct speed estimator: mean of `X_steps / steps` over independent
/// replicas. Deterministic for a given seed at any thread count.
pub fn estimate_speed_direct(
    env: &CookieEnvironment,
    steps: u64,
    replicas: u64,
    root_seed: u64,
) -> SpeedReport {
    let sampler = EnvSampler::new(env);
    let finals: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_stream(StreamKey::new(root_seed, experiment::WALK_SPEED, r));
            let mut state = WalkState::new();
            for _ in 0..steps {
                step(&sampler, &mut state, &mut rng);
            }
            state.position() as f64 / steps as f64
        })
        .collect();
    let mut est = Estimate::new();
    for v in finals {
        est.push(v);
    }
    SpeedReport { speed: est.summary(), steps, replicas }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{presets, CookieEnvironment, JumpLaw, LawName};
    use crate::sampler::test_support::ScriptedRng;

    fn long_jump_env() -> CookieEnvironment {
        // One cookie {+1: 7/10, -2: 3/10} (drift 1/10) over the range-2 tail.
        let cookie = JumpLaw::from_masses(
            2,
            LawName::Cookie(1),
            &[
                (1, crate::env::parse_prob("7/10").unwrap()),
                (-2, crate::env::parse_prob("3/10").unwrap()),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        let tail = JumpLaw::from_masses(
            2,
            LawName::Tail,
            &[
                (1, crate::env::parse_prob("3/5").unwrap()),
                (-1, crate::env::parse_prob("1/5").unwrap()),
                (-2, crate::env::parse_prob("1/5").unwrap()),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap();
        CookieEnvironment::new(vec![cookie], tail).unwrap()
    }

    #[test]
    fn scripted_trajectory_fills_exact_ledger() {
        // Path 0 -> 1 -> -1 -> 0 -> 1 -> 2 with target 2.
        // Jump laws: cookie cum over [+1,-1,-2] = [0.7, 0.7, 1.0],
        // tail cum = [0.6, 0.8, 1.0].
        let env = long_jump_env();
        let sampler = EnvSampler::new(&env);
        let mut rng = ScriptedRng::from_uniforms(&[
            0.0,  // from 0, visit 1 (cookie): +1
            0.75, // from 1, visit 1 (cookie): -2
            0.0,  // from -1, visit 1 (cookie): +1
            0.0,  // from 0, visit 2 (tail): +1
            0.0,  // from 1, visit 2 (tail): +1
        ]);
        let rec = run_to_level(&sampler, 2, 1000, &mut rng).unwrap();
        assert!(rng.exhausted());
        assert!(!rec.truncated);
        assert_eq!(rec.hitting_times, vec![1, 5]);
        assert_eq!(rec.total_steps, 5);
        assert_eq!(rec.min_position, -1);

        // The jump 1 -> -1 crosses levels -1 (type 1) and 0 (type 2).
        assert_eq!(rec.profile.count(-1, 1), 1);
        assert_eq!(rec.profile.count(0, 2), 1);
        assert_eq!(rec.profile.count(0, 1), 0);
        assert_eq!(rec.profile.count(1, 1), 0);
        assert_eq!(rec.profile.count(1, 2), 0);
        assert_eq!(rec.profile.min_level(), -1);

        // T_2 = 2 + 2*1 + 1 = 5 and T_1 = 1 + 0.
        let id = check_hitting_identity(&rec).unwrap();
        assert!(id.holds, "{id:?}");
        assert_eq!(id.worst_residual, 0);
        assert_eq!(id.prefixes_ok, 2);
        assert_eq!(id.ledger_rhs, 5);
    }

    #[test]
    fn identity_holds_for_every_prefix_across_environments() {
        let envs = [
            presets::ballistic_example(),
            presets::zero_speed_example(),
            presets::recurrent_example(),
            presets::critical_drift_example(),
            long_jump_env(),
        ];
        for (e, env) in envs.iter().enumerate() {
            let sampler = EnvSampler::new(env);
            for seed in 0..20u64 {
                let mut rng = derive_stream(StreamKey::new(
                    1000 + seed,
                    experiment::SELFTEST,
                    e as u64,
                ));
                let rec = run_to_level(&sampler, 30, 10_000_000, &mut rng).unwrap();
                assert!(!rec.truncated, "env {e} seed {seed} truncated");
                let id = check_hitting_identity(&rec).unwrap();
                assert!(id.holds, "env {e} seed {seed}: {id:?}");
                assert_eq!(id.prefixes_ok, 30);
                assert_eq!(id.worst_residual, 0);
                // Hitting times strictly increase.
                assert!(rec.hitting_times.windows(2).all(|w| w[0] < w[1]));
                // No crossings at the level just below the target: the walk
                // never sits above it before the first visit.
                assert_eq!(rec.profile.level_row(rec.target - 1), vec![0, 0][..rec
                    .profile
                    .l_max()
                    .min(2)]
                    .to_vec());
                assert!(rec.profile.min_level() >= rec.min_position);
            }
        }
    }

    #[test]
    fn truncation_is_flagged_and_rejected_by_identity() {
        let env = presets::recurrent_example();
        let sampler = EnvSampler::new(&env);
        let mut rng = derive_stream(StreamKey::new(9, experiment::SELFTEST, 0));
        let rec = run_to_level(&sampler, 1_000_000, 50, &mut rng).unwrap();
        assert!(rec.truncated);
        assert!(rec.hitting_times.len() < 1_000_000);
        assert_eq!(rec.total_steps, 50);
        assert!(matches!(
            check_hitting_identity(&rec),
            Err(WalkError::TruncatedRecord { horizon: 50 })
        ));
        assert!(matches!(run_to_level(&sampler, 0, 10, &mut rng), Err(WalkError::BadTarget(0))));
    }

    #[test]
    fn speed_estimator_is_deterministic_and_sane() {
        let env = presets::ballistic_example();
        let a = estimate_speed_direct(&env, 20_000, 32, 77);
        let b = estimate_speed_direct(&env, 20_000, 32, 77);
        assert_eq!(a.speed.mean.to_bits(), b.speed.mean.to_bits());
        assert_eq!(a.speed.se.to_bits(), b.speed.se.to_bits());
        assert_eq!(a.speed.count, 32);
        // Ballistic: positive speed, below the deterministic bound 1.
        assert!(a.speed.mean > 0.05 && a.speed.mean < 1.0, "speed {}", a.speed.mean);
        assert!(a.speed.se > 0.0);
    }

    #[test]
    fn transient_walk_spends_vanishing_time_below_origin() {
        // Drift 12/5 is transient to the right: the time spent at negative
        // sites is finite, so its fraction shrinks as the run grows.
        let env = presets::ballistic_example();
        let sampler = EnvSampler::new(&env);
        let mut rng = crate::rng::derive_stream(crate::rng::StreamKey::new(
            5,
            crate::rng::experiment::SELFTEST,
            0,
        ));
        let mut state = WalkState::new();
        let mut negative = 0u64;
        let mut frac_short = 0.0;
        let short = 20_000u64;
        let long = 200_000u64;
        for t in 1..=long {
            step(&sampler, &mut state, &mut rng);
            if state.position() < 0 {
                negative += 1;
            }
            if t == short {
                frac_short = negative as f64 / short as f64;
            }
        }
        let frac_long = negative as f64 / long as f64;
        assert!(frac_long < 0.01, "negative-site fraction {frac_long}");
        assert!(frac_long <= frac_short, "{frac_long} vs {frac_short}");
    }
}
