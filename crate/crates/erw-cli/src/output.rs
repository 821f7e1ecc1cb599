//! Result emission: a manifest-bearing JSON envelope on stdout and
//! fixed-schema CSV tables. No timestamps anywhere, so identical inputs
//! produce byte-identical artifacts at any thread count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest {
    pub config_path: String,
    /// Hex digest of the raw config file bytes.
    pub config_sha256: String,
    /// Root seed; absent for deterministic commands.
    pub seed: Option<u64>,
    /// The budgets this command actually consumed.
    pub budgets: BTreeMap<&'static str, serde_json::Value>,
    pub version: &'static str,
    pub rng_algorithm: &'static str,
}

impl Manifest {
    pub fn new(config_path: &Path, config_bytes: &[u8], seed: Option<u64>) -> Manifest {
        let mut hasher = Sha256::new();
        hasher.update(config_bytes);
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        Manifest {
            config_path: config_path.display().to_string(),
            config_sha256: hex,
            seed,
            budgets: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION"),
            rng_algorithm: erw_core::rng::RNG_ALGORITHM,
        }
    }

    pub fn budget(mut self, name: &'static str, value: impl Serialize) -> Manifest {
        let v = serde_json::to_value(value).expect("budget serializes");
        self.budgets.insert(name, v);
        self
    }
}

/// Envelope printed on stdout. Struct order keeps the per-command payload
/// first so quick reads see the numbers before the plumbing.
pub fn print_envelope<T: Serialize>(command: &str, result: &T, manifest: &Manifest) {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        command: &'a str,
        result: &'a T,
        manifest: &'a Manifest,
    }
    let envelope = Envelope { command, result, manifest };
    println!("{}", serde_json::to_string_pretty(&envelope).expect("reports serialize"));
}

/// All CSV floats use 17 significant digits so round-trips are exact.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv<I>(path: &Path, header: &str, rows: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = String>,
{
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{row}")?;
    }
    out.flush()
}
