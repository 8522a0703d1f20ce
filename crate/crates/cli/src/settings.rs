//! `--config` files: flat TOML key/value pairs whose keys are long flag
//! names (`batch-size` or `batch_size`). Command-line flags take precedence.

use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    table: toml::Table,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Settings::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(format!("'{k}': nested tables are not supported"));
        }
        Ok(Settings { table })
    }

    fn raw(&self, key: &str) -> Option<String> {
        let v = self.table.get(key).or_else(|| self.table.get(&key.replace('-', "_")))?;
        Some(match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        })
    }

    /// Flag value if given, else the config value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse '{s}': {e}"))),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Usage(format!("config key '{key}': cannot parse '{s}': {e}")))
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_key_spelling() {
        let s = Settings::parse("batch_size = 16\nlr = 2e-4\nhidden = [8, 8]\nstrategy = \"mdb\"").unwrap();
        assert_eq!(s.resolve(None, "batch-size", 32usize).unwrap(), 16);
        assert_eq!(s.resolve(Some(64usize), "batch-size", 32).unwrap(), 64);
        assert_eq!(s.resolve(None, "lr", 1e-4).unwrap(), 2e-4);
        assert_eq!(s.resolve(None, "hidden", String::new()).unwrap(), "8,8");
        assert_eq!(s.resolve(None, "epochs", 5usize).unwrap(), 5);
        assert!(s.resolve::<usize>(None, "strategy", 0).is_err());
        assert!(Settings::parse("[train]\nlr = 1").is_err());
    }
}
