//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, vectors are comma-separated.
//! Unknown and repeated keys are rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Text,
    Real,
    Count,
    Seed,
    Reals,
    Counts,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn describe(self) -> String {
        match self {
            Kind::Text => "a name".into(),
            Kind::Real => "a finite number".into(),
            Kind::Count => "a nonnegative integer".into(),
            Kind::Seed => "an unsigned 64-bit integer".into(),
            Kind::Reals => "comma-separated finite numbers".into(),
            Kind::Counts => "comma-separated nonnegative integers".into(),
            Kind::Choice(c) => format!("one of {}", c.join(", ")),
        }
    }
}

const KEYS: &[(&str, Kind)] = &[
    ("field", Kind::Text),
    ("seed", Kind::Seed),
    ("glm_n", Kind::Count),
    ("beta_star", Kind::Reals),
    ("covariate_law", Kind::Choice(&["standard_normal", "normal", "uniform"])),
    ("mle_tol", Kind::Real),
    ("mle_max_iter", Kind::Count),
    ("bartlett_replications", Kind::Count),
    ("grid_lower", Kind::Reals),
    ("grid_dx", Kind::Reals),
    ("grid_cells", Kind::Counts),
    ("dt", Kind::Real),
    ("t_end", Kind::Real),
    ("snapshots", Kind::Reals),
    ("substeps", Kind::Choice(&["refuse", "subcycle"])),
    ("cfl", Kind::Real),
    ("init_mean", Kind::Reals),
    ("init_sd", Kind::Reals),
    ("particles", Kind::Count),
    ("method", Kind::Choice(&["euler", "rk4"])),
    ("smoothing", Kind::Choice(&["histogram", "kernel"])),
    ("bandwidth", Kind::Real),
    ("center", Kind::Reals),
    ("sigma", Kind::Real),
    ("lemma_dx", Kind::Real),
    ("lemma_halvings", Kind::Count),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Real(f64),
    Count(usize),
    Seed(u64),
    Reals(Vec<f64>),
    Counts(Vec<usize>),
}

impl fmt::Display for Value {
    // `{:?}` on f64 is the shortest text that parses back to the same bits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => f.write_str(s),
            Value::Real(x) => write!(f, "{x:?}"),
            Value::Count(n) => write!(f, "{n}"),
            Value::Seed(n) => write!(f, "{n}"),
            Value::Reals(v) => {
                let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
                f.write_str(&parts.join(","))
            }
            Value::Counts(v) => {
                let parts: Vec<String> = v.iter().map(|n| n.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    value: Value,
}

/// Parsed configuration. Getters record every value they hand out, defaults
/// included, so the manifest can list the resolved settings.
#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    resolved: BTreeMap<String, String>,
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_value(kind: Kind, raw: &str) -> Option<Value> {
    let list = |s: &str| -> Vec<String> { s.split(',').map(|p| p.trim().to_string()).collect() };
    match kind {
        Kind::Text => (!raw.is_empty() && !raw.contains(char::is_whitespace)).then(|| Value::Text(raw.into())),
        Kind::Real => parse_real(raw).map(Value::Real),
        Kind::Count => raw.parse().ok().map(Value::Count),
        Kind::Seed => raw.parse().ok().map(Value::Seed),
        Kind::Reals => list(raw)
            .iter()
            .map(|p| parse_real(p))
            .collect::<Option<Vec<_>>>()
            .map(Value::Reals),
        Kind::Counts => list(raw)
            .iter()
            .map(|p| p.parse().ok())
            .collect::<Option<Vec<_>>>()
            .map(Value::Counts),
        Kind::Choice(options) => options.contains(&raw).then(|| Value::Text(raw.into())),
    }
}

pub fn parse_config(text: &str) -> Result<Config, CliError> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| CliError::config_at(line, format!("expected 'key = value', got '{content}'")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let kind = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, kind)| *kind)
            .ok_or_else(|| CliError::config_at(line, format!("unknown key '{key}'")))?;
        if let Some(first) = entries.get(key) {
            return Err(CliError::config_at(
                line,
                format!("duplicate key '{key}' (first set on line {})", first.line),
            ));
        }
        let value = parse_value(kind, raw).ok_or_else(|| {
            CliError::config_at(
                line,
                format!("type error: '{key}' expects {}, got '{raw}'", kind.describe()),
            )
        })?;
        entries.insert(key.to_string(), Entry { line, value });
    }
    Ok(Config {
        entries,
        resolved: BTreeMap::new(),
    })
}

impl Config {
    /// Replaces (or sets) a value, as command-line overrides do.
    pub fn set(&mut self, key: &str, value: Value) {
        self.entries.insert(key.to_string(), Entry { line: 0, value });
    }

    /// Every value handed out so far, as `key -> canonical text`.
    #[cfg(test)]
    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    /// Resolved values plus any given keys the command did not read.
    pub fn manifest_entries(&self) -> Vec<(String, String)> {
        let mut all = self.resolved.clone();
        for (k, e) in &self.entries {
            all.entry(k.clone()).or_insert_with(|| e.value.to_string());
        }
        all.into_iter().collect()
    }

    fn lookup(&mut self, key: &str, default: Option<Value>) -> Result<(usize, Value), CliError> {
        let (line, value) = match (self.entries.get(key), default) {
            (Some(e), _) => (e.line, e.value.clone()),
            (None, Some(d)) => (0, d),
            (None, None) => return Err(CliError::config(format!("missing key '{key}'"))),
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok((line, value))
    }

    fn bad(&self, line: usize, msg: String) -> CliError {
        if line == 0 {
            CliError::config(msg)
        } else {
            CliError::config_at(line, msg)
        }
    }

    pub fn text(&mut self, key: &str, default: Option<&str>) -> Result<String, CliError> {
        match self.lookup(key, default.map(|d| Value::Text(d.into())))? {
            (_, Value::Text(s)) => Ok(s),
            (line, v) => Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        }
    }

    pub fn real(&mut self, key: &str, default: Option<f64>) -> Result<f64, CliError> {
        match self.lookup(key, default.map(Value::Real))? {
            (_, Value::Real(x)) => Ok(x),
            (line, v) => Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        }
    }

    /// A strictly positive real.
    pub fn positive(&mut self, key: &str, default: Option<f64>) -> Result<f64, CliError> {
        let x = self.real(key, default)?;
        if x > 0.0 {
            Ok(x)
        } else {
            let line = self.line_of(key);
            Err(self.bad(line, format!("'{key}' must be positive, got {x:?}")))
        }
    }

    pub fn count(&mut self, key: &str, default: Option<usize>) -> Result<usize, CliError> {
        match self.lookup(key, default.map(Value::Count))? {
            (_, Value::Count(n)) => Ok(n),
            (line, v) => Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        }
    }

    pub fn seed(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.lookup(key, Some(Value::Seed(default)))? {
            (_, Value::Seed(n)) => Ok(n),
            (line, v) => Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        }
    }

    pub fn reals(&mut self, key: &str) -> Result<Vec<f64>, CliError> {
        match self.lookup(key, None)? {
            (_, Value::Reals(v)) => Ok(v),
            (line, v) => Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        }
    }

    /// A vector of length `p`; a single value is repeated on every axis.
    pub fn reals_p(&mut self, key: &str, p: usize) -> Result<Vec<f64>, CliError> {
        let v = self.reals(key)?;
        self.broadcast(key, v, p)
    }

    pub fn counts_p(&mut self, key: &str, p: usize) -> Result<Vec<usize>, CliError> {
        let v = match self.lookup(key, None)? {
            (_, Value::Counts(v)) => v,
            (line, v) => return Err(self.bad(line, format!("'{key}' has unexpected value '{v}'"))),
        };
        self.broadcast(key, v, p)
    }

    fn broadcast<T: Clone>(&self, key: &str, v: Vec<T>, p: usize) -> Result<Vec<T>, CliError> {
        match v.len() {
            n if n == p => Ok(v),
            1 => Ok(vec![v[0].clone(); p]),
            n => {
                let line = self.line_of(key);
                Err(self.bad(line, format!("'{key}' has {n} entries, expected 1 or {p}")))
            }
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }
}
