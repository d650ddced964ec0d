//! Flat `key = value` run files. Command-line flags win over file values.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone)]
pub struct RunFile {
    values: BTreeMap<String, String>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let key = key.trim().replace('_', "-");
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Fails on keys the command does not understand.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::Usage(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("config key '{key}': cannot parse '{v}'")))
            })
            .transpose()
    }
}

/// Flag value, else file value, else default; the chosen value is recorded.
pub struct Resolver<'a> {
    file: &'a RunFile,
    pub resolved: BTreeMap<String, String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a RunFile) -> Self {
        Self {
            file,
            resolved: BTreeMap::new(),
        }
    }

    pub fn pick<T: FromStr + ToString + Clone>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self.file.get(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn pick_opt<T: FromStr + ToString + Clone>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file.get(key)?,
        };
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    /// Seed from the flag, the file, then `EBSURV_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let env = match std::env::var("EBSURV_SEED") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("EBSURV_SEED='{v}' is not an integer")))?,
            ),
            Err(_) => None,
        };
        let seed = match flag {
            Some(s) => s,
            None => self.file.get("seed")?.or(env).unwrap_or(0),
        };
        self.resolved.insert("seed".into(), seed.to_string());
        Ok(seed)
    }
}
