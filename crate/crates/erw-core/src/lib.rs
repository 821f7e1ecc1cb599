//! Simulation and numerical verification toolkit for multi-excited random
//! walks with bounded backward jumps.
//!
//! The crate is organized around one object, the cookie environment of an
//! `(L,1)` excited random walk: at most `M` site-local excitation laws, a
//! zero-drift tail law, jumps in `{-L, ..., -1, +1}`. On top of it sit
//!
//! * [`walk`]: direct path simulation, hitting times, and the exact
//!   backward-jump ledger that converts hitting times into branching counts;
//! * [`branching`]: the directed-edge branching chain, its regeneration
//!   structure, and stationary-law estimation;
//! * [`emigration`]: critical multi-type Galton-Watson processes with
//!   emigration, survival-probability experiments, and the coupling along
//!   which the branching chain dominates such a process;
//! * [`spectral`]: Perron root/vector analysis of offspring mean matrices and
//!   the quadratic functionals entering survival asymptotics;
//! * [`genfun`]: deterministic generating-function iteration and the
//!   stationary functional equation checks;
//! * [`stats`] and [`rng`]: merge-safe estimators, two-sample tests, and
//!   counter-based random streams that make every experiment reproducible at
//!   any thread count.

pub mod branching;
pub mod emigration;
pub mod env;
pub mod genfun;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod stats;
pub mod walk;
