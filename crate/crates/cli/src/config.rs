//! Layered settings: command-line flags, then the config file, then defaults.
//!
//! The config file is TOML whose keys are the long flag names. Keys may sit
//! at the top level or in a table named after the subcommand; the table
//! wins over the top level.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::UsageError;

pub struct Settings {
    file: Table,
    section: &'static str,
}

impl Settings {
    pub fn load(path: Option<&Path>, section: &'static str) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        Ok(Settings { file, section })
    }

    fn raw(&self, key: &str) -> Option<&Value> {
        let in_section = self
            .file
            .get(self.section)
            .and_then(Value::as_table)
            .and_then(|t| t.get(key));
        in_section.or_else(|| self.file.get(key).filter(|v| !v.is_table()))
    }

    fn file_value<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| UsageError(format!("config key {key:?}: {e}")).into()),
        }
    }

    /// Flag value if given, else the config value, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.file_value(key)?.unwrap_or(default)),
        }
    }

    pub fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file_value(key),
        }
    }

    pub fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.file_value(key)?.unwrap_or(false))
    }

    /// A comma-separated list from a flag, or a list (array or string) from
    /// the config file, with exactly `arity` entries.
    pub fn pick_list<T>(&self, flag: Option<&str>, key: &str, arity: usize) -> Result<Option<Vec<T>>>
    where
        T: FromStr + DeserializeOwned,
    {
        let parsed = match (flag, self.raw(key)) {
            (Some(s), _) => parse_list(s, key)?,
            (None, Some(Value::String(s))) => parse_list(s, key)?,
            (None, Some(_)) => self.file_value::<Vec<T>>(key)?.unwrap_or_default(),
            (None, None) => return Ok(None),
        };
        if parsed.len() != arity {
            bail!(UsageError(format!(
                "--{key} expects {arity} comma-separated values, got {}",
                parsed.len()
            )));
        }
        Ok(Some(parsed))
    }
}

pub fn parse_list<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| UsageError(format!("--{key}: cannot parse {:?}", part.trim())).into())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str, section: &'static str) -> Settings {
        Settings {
            file: text.parse().unwrap(),
            section,
        }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let s = settings("epochs = 4\n[train]\nlearning-rate = 0.01\n", "train");
        assert_eq!(s.pick(Some(7usize), "epochs", 20).unwrap(), 7);
        assert_eq!(s.pick(None, "epochs", 20usize).unwrap(), 4);
        assert_eq!(s.pick(None, "patience", 3usize).unwrap(), 3);
        assert_eq!(s.pick(None, "learning-rate", 1e-4).unwrap(), 0.01);
    }

    #[test]
    fn section_overrides_top_level() {
        let s = settings("seed = 1\n[synth]\nseed = 2\n", "synth");
        assert_eq!(s.pick(None, "seed", 0u64).unwrap(), 2);
        let s = settings("seed = 1\n[synth]\nseed = 2\n", "train");
        assert_eq!(s.pick(None, "seed", 0u64).unwrap(), 1);
    }

    #[test]
    fn lists_from_flags_and_files() {
        let s = settings("grade-mix = [0.2, 0.6, 0.2]\nsplit = \"0.5,0.25,0.25\"\n", "x");
        assert_eq!(s.pick_list::<f64>(None, "grade-mix", 3).unwrap().unwrap(), vec![0.2, 0.6, 0.2]);
        assert_eq!(s.pick_list::<f64>(None, "split", 3).unwrap().unwrap(), vec![0.5, 0.25, 0.25]);
        assert!(s.pick_list::<f64>(Some("0.5,0.5"), "grade-mix", 3).is_err());
        assert!(s.pick_list::<f64>(None, "absent", 3).unwrap().is_none());
    }

    #[test]
    fn wrong_type_is_a_usage_error() {
        let s = settings("epochs = \"many\"\n", "train");
        let err = s.pick(None, "epochs", 1usize).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
