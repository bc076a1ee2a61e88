//! Flat `key = value` configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};

use crate::CliError;

/// One configuration key. The flag spelling is the key with `-` for `_`.
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// Adds `--config` and one flag per key to `cmd`.
pub fn with_keys(mut cmd: Command, keys: &'static [Key]) -> Command {
    cmd = cmd.arg(Arg::new("config").long("config").value_name("PATH").help("key = value file; flags override it"));
    for k in keys {
        let mut help = k.help.to_string();
        if let Some(d) = k.default {
            let _ = write!(help, " [default: {d}]");
        }
        cmd = cmd.arg(Arg::new(k.name).long(flag_name(k.name)).value_name("VALUE").help(help));
    }
    cmd
}

fn parse_file(text: &str, keys: &[Key]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !keys.iter().any(|key| key.name == k) {
            return Err(CliError::Usage(format!("config line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

/// Values after applying defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolved {
    values: BTreeMap<String, String>,
}

impl Resolved {
    pub fn from_matches(m: &ArgMatches, keys: &'static [Key]) -> Result<Self, CliError> {
        let file = match m.get_one::<String>("config") {
            Some(p) => {
                let text = fs::read_to_string(Path::new(p))
                    .map_err(|e| CliError::Usage(format!("cannot read config {p}: {e}")))?;
                parse_file(&text, keys)?
            }
            None => BTreeMap::new(),
        };
        let mut values = BTreeMap::new();
        for k in keys {
            let v = m.get_one::<String>(k.name).cloned().or_else(|| file.get(k.name).cloned());
            if let Some(v) = v.or_else(|| k.default.map(str::to_string)) {
                values.insert(k.name.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    #[cfg(test)]
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self { values: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key).ok_or_else(|| CliError::Usage(format!("missing required --{}", flag_name(key))))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Usage(format!("--{} {v:?}: {e}", flag_name(key)))))
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.require(key)?;
        Ok(self.opt(key)?.expect("checked above"))
    }

    /// Every resolved key as a config file that reproduces the run.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
