//! Command settings resolved from defaults, an optional `key=value` file and
//! command-line flags, in increasing precedence.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

/// File name of the resolved settings written next to every output.
pub const RUN_CONFIG_FILE: &str = "run_config.txt";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<String, String>,
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    /// Layers `defaults < file < flags`. Keys outside `defaults` are rejected.
    pub fn resolve(
        command: &str,
        defaults: &[(&str, &str)],
        file: Option<&Path>,
        flags: &[(&'static str, String)],
    ) -> Result<RunConfig, CliError> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text)? {
                if !values.contains_key(&k) {
                    return Err(CliError::Config(format!("unknown key `{k}` for {command} in {}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if !values.contains_key(*k) {
                return Err(CliError::Usage(format!("--{k} does not apply to {command}")));
            }
            values.insert(k.to_string(), v.clone());
        }
        Ok(RunConfig { command: command.to_string(), values })
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("{} needs --{key}", self.command)))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| CliError::Config(format!("invalid {key} `{raw}`: {e}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key).map(PathBuf::from)
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.require(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(CliError::Config(format!("{key} must be true or false, got `{other}`"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.require(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Config(format!("invalid {key} entry `{s}`: {e}"))))
            .collect()
    }

    /// Comma-separated `LO:HI` pairs.
    pub fn ranges(&self, key: &str) -> Result<Vec<(f64, f64)>, CliError> {
        self.list::<String>(key)?.iter().map(|s| parse_range(s)).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG_FILE), self.render())?;
        Ok(())
    }
}

pub fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("range must be LO:HI, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    Ok((lo, hi))
}

/// Settings recorded next to an earlier output, if present.
pub fn read_receipt(dir: &Path) -> Result<Option<BTreeMap<String, String>>, CliError> {
    let path = dir.join(RUN_CONFIG_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(parse_pairs(&fs::read_to_string(path)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "# comment\nseed = 5\nlr=0.1\n").unwrap();
        let defaults = [("seed", "0"), ("lr", "1"), ("batch", "2")];
        let c = RunConfig::resolve("train", &defaults, Some(&file), &[("lr", "0.5".into())]).unwrap();
        assert_eq!(c.get("seed"), Some("5"));
        assert_eq!(c.get("lr"), Some("0.5"));
        assert_eq!(c.get("batch"), Some("2"));
        let back = parse_pairs(&c.render()).unwrap();
        assert_eq!(back.get("lr").map(String::as_str), Some("0.5"));
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = RunConfig::resolve("x", &[("seed", "0")], None, &[("lr", "1".into())]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "bogus=1\n").unwrap();
        let err = RunConfig::resolve("x", &[("seed", "0")], Some(&file), &[]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn typed_access() {
        let c = RunConfig::resolve("x", &[("range", "0.1:10,0.1:80"), ("steps", "1,2,4"), ("on", "maybe")], None, &[]).unwrap();
        assert_eq!(c.ranges("range").unwrap(), vec![(0.1, 10.0), (0.1, 80.0)]);
        assert_eq!(c.list::<usize>("steps").unwrap(), vec![1, 2, 4]);
        assert!(c.flag("on").is_err());
        assert!(parse_range("3").is_err());
    }
}
