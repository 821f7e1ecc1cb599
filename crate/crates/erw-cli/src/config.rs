//! Line-oriented environment files: `key = value` pairs with `#` comments.
//!
//! Keys: `L`, `M`, `nu.<k>` and `q<j>.<k>` with jump `k` in `{1, -1, ..., -L}`
//! and cookie index `j` in `1..=M`. Values are exact rationals (`"3/5"`) or
//! decimals; omitted masses are zero.

use std::collections::BTreeMap;
use std::fmt;

use erw_core::env::{parse_prob, CookieEnvironment, JumpLaw, LawName};
use num_rational::BigRational;

#[derive(Debug)]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.msg)
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

struct RawConfig {
    l: usize,
    m: usize,
    cookie_masses: Vec<BTreeMap<i64, BigRational>>,
    tail_masses: BTreeMap<i64, BigRational>,
}

fn parse_raw(text: &str) -> Result<RawConfig, ParseError> {
    let mut l: Option<(usize, usize)> = None;
    let mut m: Option<(usize, usize)> = None;
    let mut masses: Vec<(usize, String, i64, BigRational)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(lineno, "expected `key = value`"))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "L" => {
                if l.is_some() {
                    return Err(err(lineno, "duplicate key L"));
                }
                let v: usize = value
                    .parse()
                    .map_err(|_| err(lineno, format!("bad jump range `{value}`")))?;
                if v == 0 {
                    return Err(err(lineno, "L must be positive"));
                }
                l = Some((v, lineno));
            }
            "M" => {
                if m.is_some() {
                    return Err(err(lineno, "duplicate key M"));
                }
                let v: usize = value
                    .parse()
                    .map_err(|_| err(lineno, format!("bad cookie count `{value}`")))?;
                if v == 0 {
                    return Err(err(lineno, "M must be positive"));
                }
                m = Some((v, lineno));
            }
            _ => {
                let (law, jump) = key
                    .split_once('.')
                    .ok_or_else(|| err(lineno, format!("unknown key `{key}`")))?;
                let jump: i64 = jump
                    .parse()
                    .map_err(|_| err(lineno, format!("bad jump value `{jump}`")))?;
                let mass = parse_prob(value)
                    .map_err(|e| err(lineno, format!("bad probability `{value}`: {e}")))?;
                masses.push((lineno, law.to_string(), jump, mass));
            }
        }
    }
    let (l, _) = l.ok_or_else(|| err(0, "missing key L"))?;
    let (m, _) = m.ok_or_else(|| err(0, "missing key M"))?;
    let mut cookie_masses = vec![BTreeMap::new(); m];
    let mut tail_masses = BTreeMap::new();
    for (lineno, law, jump, mass) in masses {
        if !(jump == 1 || (-(l as i64)..0).contains(&jump)) {
            return Err(err(
                lineno,
                format!("jump {jump} outside the support {{1, -1, ..., -{l}}}"),
            ));
        }
        let slot = if law == "nu" {
            &mut tail_masses
        } else if let Some(j) = law.strip_prefix('q') {
            let j: usize = j
                .parse()
                .map_err(|_| err(lineno, format!("bad cookie index `{law}`")))?;
            if !(1..=m).contains(&j) {
                return Err(err(lineno, format!("cookie index {j} outside 1..={m}")));
            }
            &mut cookie_masses[j - 1]
        } else {
            return Err(err(lineno, format!("unknown law `{law}`")));
        };
        if slot.insert(jump, mass).is_some() {
            return Err(err(lineno, format!("duplicate mass for `{law}.{jump}`")));
        }
    }
    Ok(RawConfig { l, m, cookie_masses, tail_masses })
}

fn join_errors(errs: Vec<erw_core::env::EnvError>) -> String {
    errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

pub fn environment_from_str(text: &str) -> Result<CookieEnvironment, String> {
    let raw = parse_raw(text).map_err(|e| e.to_string())?;
    let mut cookies = Vec::with_capacity(raw.m);
    for (j, masses) in raw.cookie_masses.iter().enumerate() {
        cookies.push(
            JumpLaw::from_masses(raw.l, LawName::Cookie(j + 1), masses).map_err(join_errors)?,
        );
    }
    let tail =
        JumpLaw::from_masses(raw.l, LawName::Tail, &raw.tail_masses).map_err(join_errors)?;
    CookieEnvironment::new(cookies, tail).map_err(|e| e.to_string())
}
