//! Floating-point sampling tables derived from a validated environment.
//!
//! Both the direct walk and the branching chain draw from the same laws, in
//! two different framings: the walk samples jumps from `{+1, -1, ..., -L}`,
//! the branching chain samples right-jump trials whose failures are typed by
//! the backward distance. `EnvSampler` precomputes cumulative tables for
//! both framings plus the geometric/multinomial decomposition of the tail
//! failure batches, so the rational environment is converted to f64 exactly
//! once.

use crate::env::CookieEnvironment;
use rand::Rng;

/// Outcome of one right-jump trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialOutcome {
    Success,
    /// Failure of type `l` in `1..=l_max` (backward jump of length `l`).
    Failure(usize),
}

#[derive(Clone, Debug)]
pub struct EnvSampler {
    l_max: usize,
    cookies: usize,
    /// Per visit law (cookies then tail): cumulative masses over the jump
    /// order `[+1, -1, -2, ..., -L]`.
    jump_cum: Vec<Vec<f64>>,
    /// Same laws, cumulative over the trial order `[fail_1, ..., fail_L, success]`.
    trial_cum: Vec<Vec<f64>>,
    /// Tail forward mass; success probability of one tail trial.
    tail_success: f64,
    /// Cumulative masses of `tail(-k) / (1 - tail(+1))`: the type split of a
    /// tail failure.
    split_cum: Vec<f64>,
    rho: Vec<f64>,
}

fn cumulative(masses: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = masses
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

fn pick(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

impl EnvSampler {
    pub fn new(env: &CookieEnvironment) -> EnvSampler {
        let l = env.l_max();
        let m = env.cookies_per_site();
        let laws: Vec<_> = (1..=m).map(|j| env.cookie(j)).chain([env.tail()]).collect();
        let jump_cum = laws
            .iter()
            .map(|law| {
                cumulative(
                    std::iter::once(law.forward_f64()).chain((1..=l).map(|k| law.backward_f64(k))),
                )
            })
            .collect();
        let trial_cum = laws
            .iter()
            .map(|law| {
                cumulative(
                    (1..=l).map(|k| law.backward_f64(k)).chain(std::iter::once(law.forward_f64())),
                )
            })
            .collect();
        let tail = env.tail();
        let tail_success = tail.forward_f64();
        let fail_mass = 1.0 - tail_success;
        let split_cum = cumulative((1..=l).map(|k| tail.backward_f64(k) / fail_mass));
        EnvSampler {
            l_max: l,
            cookies: m,
            jump_cum,
            trial_cum,
            tail_success,
            split_cum,
            rho: env.rho_f64(),
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn cookies_per_site(&self) -> usize {
        self.cookies
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    fn row(&self, visit: u64) -> usize {
        if visit <= self.cookies as u64 {
            (visit - 1) as usize
        } else {
            self.cookies
        }
    }

    /// Jump of the `visit`-th departure from a site: `+1` or `-l`.
    pub fn sample_jump(&self, visit: u64, rng: &mut impl Rng) -> i64 {
        debug_assert!(visit >= 1);
        let idx = pick(&self.jump_cum[self.row(visit)], rng.gen::<f64>());
        if idx == 0 {
            1
        } else {
            -(idx as i64)
        }
    }

    /// Outcome of the `trial`-th right-jump trial (1-based; the law switches
    /// from the cookies to the tail after trial `cookies_per_site`).
    pub fn sample_trial(&self, trial: u64, rng: &mut impl Rng) -> TrialOutcome {
        debug_assert!(trial >= 1);
        let idx = pick(&self.trial_cum[self.row(trial)], rng.gen::<f64>());
        if idx == self.l_max {
            TrialOutcome::Success
        } else {
            TrialOutcome::Failure(idx + 1)
        }
    }

    /// Run trials starting at `first_trial` until `successes` successes
    /// occur, adding each failure of type `l` to `acc[l-1]`. Returns the
    /// number of trials consumed.
    pub fn add_failures_until(
        &self,
        first_trial: u64,
        successes: u64,
        acc: &mut [u64],
        rng: &mut impl Rng,
    ) -> u64 {
        debug_assert_eq!(acc.len(), self.l_max);
        let mut done = 0u64;
        let mut trial = first_trial;
        let mut consumed = 0u64;
        while done < successes {
            match self.sample_trial(trial, rng) {
                TrialOutcome::Success => done += 1,
                TrialOutcome::Failure(l) => acc[l - 1] += 1,
            }
            // Past the cookie range the law no longer depends on the index.
            trial = trial.saturating_add(1);
            consumed += 1;
        }
        consumed
    }

    /// Add one tail failure batch to `acc`: the typed failures between two
    /// consecutive tail successes. Sampled as a geometric batch size split
    /// multinomially across types, which is distribution-equal to running
    /// tail trials one by one.
    pub fn add_tail_batch(&self, acc: &mut [u64], rng: &mut impl Rng) {
        let total = self.sample_tail_batch_size(rng);
        for _ in 0..total {
            let k = pick(&self.split_cum, rng.gen::<f64>());
            acc[k] += 1;
        }
    }

    /// Number of failures before the next tail success: geometric with
    /// success probability `tail(+1)`, sampled by inversion.
    fn sample_tail_batch_size(&self, rng: &mut impl Rng) -> u64 {
        let u = 1.0 - rng.gen::<f64>(); // in (0, 1]
        let k = u.ln() / (1.0 - self.tail_success).ln();
        if k >= u64::MAX as f64 {
            u64::MAX
        } else {
            k as u64
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use rand::{Error, RngCore};

    /// RNG that replays a fixed list of uniforms, for scripted trajectories.
    pub struct ScriptedRng {
        values: Vec<u64>,
        next: usize,
    }

    impl ScriptedRng {
        pub fn from_uniforms(us: &[f64]) -> ScriptedRng {
            // rand converts u64 -> f64 in [0,1) as (x >> 11) * 2^-53.
            let values = us
                .iter()
                .map(|&u| {
                    assert!((0.0..1.0).contains(&u));
                    ((u * (1u64 << 53) as f64) as u64) << 11
                })
                .collect();
            ScriptedRng { values, next: 0 }
        }

        pub fn exhausted(&self) -> bool {
            self.next == self.values.len()
        }
    }

    impl RngCore for ScriptedRng {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }

        fn next_u64(&mut self) -> u64 {
            let v = self.values[self.next];
            self.next += 1;
            v
        }

        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for b in dest {
                *b = 0;
            }
        }

        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }
}
