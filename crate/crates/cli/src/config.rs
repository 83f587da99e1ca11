//! Flat `key=value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "activation",
    "level",
    "grid_order",
    "nested_order",
    "alpha_lo",
    "alpha_hi",
    "fd_step",
    "jacobian_step",
    "damping",
    "max_iters",
    "stationarity_tol",
    "psi_tol",
    "init_p2",
    "init_q2",
    "format",
    "out",
    "plot_out",
    "d",
    "samples",
    "seed",
    "polish",
    "lattice",
];

/// Values read from a config file. Blank lines and `#` comments are
/// skipped; keys must be in [`KEYS`].
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config line {}: expected key=value, got `{raw}`",
                    n + 1
                ))
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key `{key}`",
                    n + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// The flag value if given, else the parsed file value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list: flag values if any were given, else the file's.
    pub fn pick_list(&self, flag: &[String], key: &str) -> Option<Vec<String>> {
        if !flag.is_empty() {
            return Some(flag.to_vec());
        }
        self.raw(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
    }
}
