//! `erw`: simulation laboratory for excited random walks with long backward
//! steps and the branching structures attached to them.
//!
//! Every subcommand reads an environment file (`--config`), prints a JSON
//! envelope on stdout and, where a table is natural, writes CSV to `--out`.
//! Exit codes: 0 success, 1 usage or config error, 2 deterministic assertion
//! failure (a pathwise identity broke), 3 statistical rejection.

mod config;
mod output;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use erw_core::branching::{estimate_stationary, profile_matches_chain, speed_from_stationary};
use erw_core::emigration::{
    coupled_run, survival_experiment, EmigrationConfig, GeometricShiftOffspring,
};
use erw_core::env::{CookieEnvironment, Regime};
use erw_core::genfun::{functional_equation_residual, gamma_fit, kolmogorov_check};
use erw_core::rng::{derive_stream, experiment, StreamKey};
use erw_core::sampler::EnvSampler;
use erw_core::spectral::{
    beta_theta, char_poly_check, perron_pair, tail_family_mean_matrix, tail_family_sigma,
};
use erw_core::stats::EstimateSummary;
use erw_core::walk::{check_hitting_identity, estimate_speed_direct, run_to_level};
use output::{fmt_float, print_envelope, write_csv, Manifest};
use serde::Serialize;

const SIGNIFICANCE: f64 = 0.001;

#[derive(Parser)]
#[command(
    name = "erw",
    version,
    about = "Laboratory for (L,1) excited random walks: cookie walks, their \
             branching structure, and the critical processes behind them"
)]
struct Cli {
    /// Worker threads for replica-parallel commands; 0 picks the machine
    /// default. Results are byte-identical at any value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Environment file (keys L, M, q<j>.<k>, nu.<k>).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse an environment file and report its invariants.
    Validate {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Expected total drift and the recurrence/speed regime.
    Delta {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Mean-matrix eigendata, variance functional, and characteristic
    /// polynomial of the branching family behind the walk.
    Spectral {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run walks to a target level and check the hitting-time identity.
    SimulateWalk {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Target level.
        #[arg(long = "N", default_value_t = 100)]
        target: i64,
        /// Per-replica step cap.
        #[arg(long, default_value_t = 100_000_000)]
        horizon: u64,
        #[arg(long, default_value_t = 1)]
        replicas: u64,
        /// Backward-jump profile of replica 0 (CSV: level,ell,count).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Long-run averages of the failure-count chain.
    SimulateZ {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        iterations: u64,
        /// Low-state occupation masses (CSV: z1,...,zL,probability).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Direct speed estimate against the stationary-chain formula.
    Speed {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Steps per walk replica.
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
        #[arg(long, default_value_t = 200)]
        replicas: u64,
        /// Chain iterations for the formula side.
        #[arg(long, default_value_t = 10_000_000)]
        iterations: u64,
    },
    /// Two-sample test: walk crossing ledger vs failure-count chain.
    MarkovianCheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Number of levels compared.
        #[arg(long = "N", default_value_t = 5)]
        levels: i64,
        /// Replicas per side.
        #[arg(long, default_value_t = 1_000_000)]
        replicas: u64,
        /// Per-replica walk step cap.
        #[arg(long, default_value_t = 1_000_000)]
        horizon: u64,
    },
    /// Extinction-time tail of the emigration process driven by the
    /// environment's tail law.
    GwSurvival {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        replicas: u64,
        /// Generations per replica.
        #[arg(long, default_value_t = 128)]
        horizon: u64,
        /// Emigrant counts per type, comma-separated; default all ones.
        #[arg(long = "N")]
        emigrants: Option<String>,
        /// Initial population per type; default emigrants plus one.
        #[arg(long = "K")]
        initial: Option<String>,
        /// Survival table (CSV: n,mu_hat,se,cond_mean,survivors).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scaled extinction deficit `n (1 - f^n(0))` against its limit.
    Kolmogorov {
        #[command(flatten)]
        config: ConfigArg,
        /// Pgf iterations.
        #[arg(long, default_value_t = 100_000)]
        iterations: u64,
    },
    /// Growth exponent of the reciprocal survival product.
    GammaFit {
        #[command(flatten)]
        config: ConfigArg,
        /// Pgf iterations.
        #[arg(long, default_value_t = 100_000)]
        iterations: u64,
        /// Emigrant counts per type, comma-separated; default all ones.
        #[arg(long = "N")]
        emigrants: Option<String>,
    },
    /// Pathwise dominance of the failure-count chain over the emigration
    /// process on shared randomness.
    CoupleCheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100_000)]
        replicas: u64,
        /// Generations per replica.
        #[arg(long, default_value_t = 500)]
        horizon: u64,
    },
    /// Monte Carlo residual of the stationary-transform functional equation.
    FeqCheck {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: u64,
        /// Transform arguments, comma-separated.
        #[arg(long, default_value = "0.80,0.85,0.90,0.95")]
        grid: String,
        /// Chain iterations.
        #[arg(long, default_value_t = 1_000_000)]
        iterations: u64,
        /// Independent failure-batch samples for the coefficients.
        #[arg(long, default_value_t = 1_000_000)]
        replicas: u64,
        /// Per-point estimates (CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("erw: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("erw: {msg}");
            1
        }
    }
}

/// Loaded environment plus the raw bytes that produced it (for the hash).
fn load(config: &ConfigArg) -> Result<(CookieEnvironment, Vec<u8>, &Path), String> {
    let bytes = std::fs::read(&config.config)
        .map_err(|e| format!("{}: {e}", config.config.display()))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| format!("{}: not valid UTF-8", config.config.display()))?;
    let env = config::environment_from_str(&text)
        .map_err(|e| format!("{}: {e}", config.config.display()))?;
    Ok((env, bytes, &config.config))
}

fn parse_counts(text: &str, what: &str, l: usize) -> Result<Vec<u64>, String> {
    let v: Result<Vec<u64>, _> = text.split(',').map(|t| t.trim().parse::<u64>()).collect();
    let v = v.map_err(|e| format!("{what}: {e}"))?;
    if v.len() != l {
        return Err(format!("{what}: expected {l} comma-separated entries, got {}", v.len()));
    }
    Ok(v)
}

fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let v: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    v.map_err(|e| format!("--grid: {e}"))
}

fn dispatch(cmd: Cmd) -> Result<i32, String> {
    match cmd {
        Cmd::Validate { config } => {
            let (env, bytes, path) = load(&config)?;
            let manifest = Manifest::new(path, &bytes, None);
            print_envelope("validate", &env.summary(), &manifest);
            Ok(0)
        }
        Cmd::Delta { config } => {
            let (env, bytes, path) = load(&config)?;
            #[derive(Serialize)]
            struct DeltaOut {
                delta: f64,
                regime: Regime,
                manifest: Manifest,
            }
            let out = DeltaOut {
                delta: env.delta_f64(),
                regime: env.regime(),
                manifest: Manifest::new(path, &bytes, None),
            };
            println!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
            Ok(0)
        }
        Cmd::Spectral { config } => run_spectral(&config),
        Cmd::SimulateWalk { config, seed, target, horizon, replicas, out } => {
            run_simulate_walk(&config, seed, target, horizon, replicas, out.as_deref())
        }
        Cmd::SimulateZ { config, seed, iterations, out } => {
            run_simulate_z(&config, seed, iterations, out.as_deref())
        }
        Cmd::Speed { config, seed, steps, replicas, iterations } => {
            run_speed(&config, seed, steps, replicas, iterations)
        }
        Cmd::MarkovianCheck { config, seed, levels, replicas, horizon } => {
            run_markovian(&config, seed, levels, replicas, horizon)
        }
        Cmd::GwSurvival { config, seed, replicas, horizon, emigrants, initial, out } => {
            run_gw_survival(
                &config,
                seed,
                replicas,
                horizon,
                emigrants.as_deref(),
                initial.as_deref(),
                out.as_deref(),
            )
        }
        Cmd::Kolmogorov { config, iterations } => {
            let (env, bytes, path) = load(&config)?;
            let report = kolmogorov_check(&env, iterations).map_err(|e| e.to_string())?;
            let manifest =
                Manifest::new(path, &bytes, None).budget("iterations", iterations);
            print_envelope("kolmogorov", &report, &manifest);
            Ok(0)
        }
        Cmd::GammaFit { config, iterations, emigrants } => {
            let (env, bytes, path) = load(&config)?;
            let n = match emigrants {
                Some(text) => parse_counts(&text, "--N", env.l_max())?
                    .into_iter()
                    .map(|x| x as f64)
                    .collect(),
                None => vec![1.0; env.l_max()],
            };
            let report = gamma_fit(&env, &n, iterations).map_err(|e| e.to_string())?;
            let manifest = Manifest::new(path, &bytes, None)
                .budget("iterations", iterations)
                .budget("emigrants", &n);
            print_envelope("gamma-fit", &report, &manifest);
            Ok(0)
        }
        Cmd::CoupleCheck { config, seed, replicas, horizon } => {
            let (env, bytes, path) = load(&config)?;
            let report =
                coupled_run(&env, replicas, horizon, seed).map_err(|e| e.to_string())?;
            let manifest = Manifest::new(path, &bytes, Some(seed))
                .budget("replicas", replicas)
                .budget("horizon", horizon);
            let violations = report.dominance_violations;
            print_envelope("couple-check", &report, &manifest);
            Ok(if violations == 0 { 0 } else { 2 })
        }
        Cmd::FeqCheck { config, seed, grid, iterations, replicas, out } => {
            run_feq(&config, seed, &grid, iterations, replicas, out.as_deref())
        }
    }
}

fn run_spectral(config: &ConfigArg) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let rho = env.rho_f64();
    let pair =
        perron_pair(&tail_family_mean_matrix(&rho), 1e-12, 1_000_000).map_err(|e| e.to_string())?;
    let ones = vec![1.0; rho.len()];
    let bt = beta_theta(&tail_family_sigma(&rho), &pair.right, &pair.left, &ones);
    let char_poly = char_poly_check(&env);
    #[derive(Serialize)]
    struct SpectralOut {
        rho: Vec<f64>,
        perron: erw_core::spectral::PerronPair,
        /// Variance functional and survival exponent for one emigrant of
        /// each type.
        beta_theta: erw_core::spectral::BetaTheta,
        char_poly: erw_core::spectral::CharPolyReport,
    }
    let out = SpectralOut { rho, perron: pair, beta_theta: bt, char_poly };
    let manifest = Manifest::new(path, &bytes, None);
    print_envelope("spectral", &out, &manifest);
    Ok(0)
}

fn run_simulate_walk(
    config: &ConfigArg,
    seed: u64,
    target: i64,
    horizon: u64,
    replicas: u64,
    out: Option<&Path>,
) -> Result<i32, String> {
    use rayon::prelude::*;
    let (env, bytes, path) = load(config)?;
    let sampler = EnvSampler::new(&env);
    let runs: Vec<(bool, i128, u64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_stream(StreamKey {
                root_seed: seed,
                experiment: experiment::WALK_PROFILE,
                replica: r,
            });
            let record = run_to_level(&sampler, target, horizon, &mut rng)
                .map_err(|e| e.to_string())?;
            if record.truncated {
                return Ok((true, 0i128, record.total_steps));
            }
            let identity = check_hitting_identity(&record).map_err(|e| e.to_string())?;
            Ok((false, identity.worst_residual, record.total_steps))
        })
        .collect::<Result<_, String>>()?;
    let truncated_runs = runs.iter().filter(|r| r.0).count() as u64;
    let max_abs_residual =
        runs.iter().filter(|r| !r.0).map(|r| r.1.unsigned_abs()).max().unwrap_or(0);
    let finished = replicas - truncated_runs;
    let mean_steps_to_target = if finished > 0 {
        runs.iter().filter(|r| !r.0).map(|r| r.2 as f64).sum::<f64>() / finished as f64
    } else {
        f64::NAN
    };
    #[derive(Serialize)]
    struct WalkOut {
        target: i64,
        replicas: u64,
        truncated_runs: u64,
        /// Worst absolute residual of the hitting-time identity over all
        /// finished runs; zero is the pathwise guarantee.
        max_abs_residual: u128,
        identity_holds: bool,
        mean_steps_to_target: f64,
    }
    let result = WalkOut {
        target,
        replicas,
        truncated_runs,
        max_abs_residual,
        identity_holds: max_abs_residual == 0,
        mean_steps_to_target,
    };
    if let Some(out_path) = out {
        let mut rng = derive_stream(StreamKey {
            root_seed: seed,
            experiment: experiment::WALK_PROFILE,
            replica: 0,
        });
        let record =
            run_to_level(&sampler, target, horizon, &mut rng).map_err(|e| e.to_string())?;
        let l = env.l_max();
        let mut rows = Vec::new();
        for level in record.profile.min_level()..target {
            let row = record.profile.level_row(level);
            for (i, &count) in row.iter().enumerate().take(l) {
                rows.push(format!("{level},{},{count}", i + 1));
            }
        }
        write_csv(out_path, "level,ell,count", rows).map_err(|e| e.to_string())?;
    }
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("target", target)
        .budget("horizon", horizon)
        .budget("replicas", replicas);
    let ok = result.identity_holds;
    print_envelope("simulate-walk", &result, &manifest);
    Ok(if ok { 0 } else { 2 })
}

fn run_simulate_z(
    config: &ConfigArg,
    seed: u64,
    iterations: u64,
    out: Option<&Path>,
) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let burn_in = iterations / 10;
    let report =
        estimate_stationary(&env, iterations, burn_in, seed).map_err(|e| e.to_string())?;
    let speed = speed_from_stationary(&report);
    #[derive(Serialize)]
    struct ZOut {
        mean_z: Vec<f64>,
        se: Vec<f64>,
        speed_formula_value: f64,
        speed_formula_se: f64,
        report: erw_core::branching::StationaryReport,
    }
    if let Some(out_path) = out {
        let l = env.l_max();
        let header: Vec<String> = (1..=l).map(|i| format!("z{i}")).collect();
        let rows: Vec<String> = report
            .low_states
            .iter()
            .map(|st| {
                let mut cells: Vec<String> =
                    st.state.iter().map(|v| v.to_string()).collect();
                cells.push(fmt_float(st.mass.mean));
                cells.join(",")
            })
            .collect();
        write_csv(out_path, &format!("{},probability", header.join(",")), rows)
            .map_err(|e| e.to_string())?;
    }
    let result = ZOut {
        mean_z: report.mean.iter().map(|e| e.mean).collect(),
        se: report.mean.iter().map(|e| e.se).collect(),
        speed_formula_value: speed.speed,
        speed_formula_se: speed.se,
        report,
    };
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("iterations", iterations)
        .budget("burn_in", burn_in);
    print_envelope("simulate-z", &result, &manifest);
    Ok(0)
}

fn run_speed(
    config: &ConfigArg,
    seed: u64,
    steps: u64,
    replicas: u64,
    iterations: u64,
) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let direct = estimate_speed_direct(&env, steps, replicas, seed);
    let chain = estimate_stationary(&env, iterations, iterations / 10, seed)
        .map_err(|e| e.to_string())?;
    let formula = speed_from_stationary(&chain);
    let difference = direct.speed.mean - formula.speed;
    let combined_se = direct.speed.se.hypot(formula.se);
    let z = difference / combined_se;
    let consistent = z.abs() <= 3.0;
    #[derive(Serialize)]
    struct SpeedOut {
        regime: Regime,
        v_direct: EstimateSummary,
        steps: u64,
        replicas: u64,
        v_formula: erw_core::branching::StationarySpeed,
        chain_iterations: u64,
        /// Heavy-tail warning from the chain's running mean.
        chain_nonconvergence: bool,
        difference: f64,
        combined_se: f64,
        z: f64,
        verdict: &'static str,
    }
    let result = SpeedOut {
        regime: env.regime(),
        v_direct: direct.speed,
        steps,
        replicas,
        v_formula: formula,
        chain_iterations: iterations,
        chain_nonconvergence: chain.nonconvergence,
        difference,
        combined_se,
        z,
        verdict: if consistent { "consistent" } else { "inconsistent" },
    };
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("steps", steps)
        .budget("replicas", replicas)
        .budget("iterations", iterations);
    print_envelope("speed", &result, &manifest);
    Ok(if consistent { 0 } else { 3 })
}

fn run_markovian(
    config: &ConfigArg,
    seed: u64,
    levels: i64,
    replicas: u64,
    horizon: u64,
) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let report = profile_matches_chain(&env, levels, replicas, horizon, seed)
        .map_err(|e| e.to_string())?;
    let rejected = report.chi.p_value < SIGNIFICANCE;
    #[derive(Serialize)]
    struct MarkovOut {
        report: erw_core::branching::ProfileEquivalenceReport,
        significance: f64,
        rejected: bool,
    }
    let result = MarkovOut { report, significance: SIGNIFICANCE, rejected };
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("levels", levels)
        .budget("replicas", replicas)
        .budget("horizon", horizon);
    print_envelope("markovian-check", &result, &manifest);
    Ok(if rejected { 3 } else { 0 })
}

fn run_gw_survival(
    config: &ConfigArg,
    seed: u64,
    replicas: u64,
    horizon: u64,
    emigrants: Option<&str>,
    initial: Option<&str>,
    out: Option<&Path>,
) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let l = env.l_max();
    let emigrants = match emigrants {
        Some(text) => parse_counts(text, "--N", l)?,
        None => vec![1; l],
    };
    let initial = match initial {
        Some(text) => parse_counts(text, "--K", l)?,
        None => emigrants.iter().map(|&n| n + 1).collect(),
    };
    let law = GeometricShiftOffspring::from_env(&env).map_err(|e| e.to_string())?;
    let cfg = EmigrationConfig::new(emigrants.clone(), initial.clone())
        .map_err(|e| e.to_string())?;
    let report = survival_experiment(&law, &cfg, replicas, horizon, None, seed)
        .map_err(|e| e.to_string())?;
    if let Some(out_path) = out {
        let rows: Vec<String> = report
            .points
            .iter()
            .map(|p| {
                let se = (p.mu_hat * (1.0 - p.mu_hat) / replicas as f64).sqrt();
                format!(
                    "{},{},{},{},{}",
                    p.n,
                    fmt_float(p.mu_hat),
                    fmt_float(se),
                    fmt_float(p.cond_mean_size),
                    p.survivors
                )
            })
            .collect();
        write_csv(out_path, "n,mu_hat,se,cond_mean,survivors", rows)
            .map_err(|e| e.to_string())?;
    }
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("replicas", replicas)
        .budget("horizon", horizon)
        .budget("emigrants", &emigrants)
        .budget("initial", &initial);
    print_envelope("gw-survival", &report, &manifest);
    Ok(0)
}

fn run_feq(
    config: &ConfigArg,
    seed: u64,
    grid: &str,
    iterations: u64,
    a_samples: u64,
    out: Option<&Path>,
) -> Result<i32, String> {
    let (env, bytes, path) = load(config)?;
    let grid = parse_grid(grid)?;
    let burn_in = iterations / 10;
    let report = functional_equation_residual(&env, &grid, iterations, burn_in, a_samples, seed)
        .map_err(|e| e.to_string())?;
    if let Some(out_path) = out {
        let rows: Vec<String> = report
            .points
            .iter()
            .map(|p| {
                [
                    fmt_float(p.s),
                    fmt_float(p.g_at_s),
                    fmt_float(p.g_se),
                    fmt_float(p.a_hat),
                    fmt_float(p.a_se),
                    fmt_float(p.b_hat),
                    fmt_float(p.b_se),
                    fmt_float(p.residual),
                    fmt_float(p.se),
                ]
                .join(",")
            })
            .collect();
        write_csv(
            out_path,
            "s,G_hat,G_se,a_hat,a_se,b_hat,b_se,residual,residual_se",
            rows,
        )
        .map_err(|e| e.to_string())?;
    }
    let rejected = report.max_abs_z > 3.0;
    #[derive(Serialize)]
    struct FeqOut {
        report: erw_core::genfun::FeqReport,
        rejected: bool,
    }
    let result = FeqOut { report, rejected };
    let manifest = Manifest::new(path, &bytes, Some(seed))
        .budget("grid", &grid)
        .budget("iterations", iterations)
        .budget("burn_in", burn_in)
        .budget("a_samples", a_samples);
    print_envelope("feq-check", &result, &manifest);
    Ok(if rejected { 3 } else { 0 })
}
