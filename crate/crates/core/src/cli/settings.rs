use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches};

use crate::error::{Error, Result};

/// One addressable setting: a `--long-flag` and the same key in a config file.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub switch: bool,
}

pub const fn value(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help, switch: false }
}

pub const fn switch(name: &'static str, help: &'static str) -> Key {
    Key { name, default: None, help, switch: true }
}

impl Key {
    pub fn arg(&self) -> Arg {
        let arg = Arg::new(self.name).long(self.name).help(self.help);
        if self.switch {
            arg.action(ArgAction::SetTrue)
        } else {
            // Defaults are applied after merging with the config file, so
            // clap only reports what was typed.
            let help = match self.default {
                Some(d) => format!("{} [default: {d}]", self.help),
                None => self.help.to_string(),
            };
            arg.value_name("VALUE").help(help)
        }
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('_', "-")
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)));
        };
        let key = normalize_key(k);
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{}:{}: duplicate key `{key}`", path.display(), i + 1)));
        }
    }
    Ok(out)
}

/// Effective settings of one command: flags over config file over defaults.
#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(matches: &ArgMatches, keys: &[Key]) -> Result<Self> {
        let file = match matches.get_one::<String>("config") {
            Some(p) => parse_config_file(Path::new(p))?,
            None => BTreeMap::new(),
        };
        if let Some(unknown) = file.keys().find(|k| !keys.iter().any(|key| key.name == k.as_str())) {
            return Err(Error::Config(format!("unknown config key `{unknown}`")));
        }
        let mut values = BTreeMap::new();
        for key in keys {
            let typed = matches.value_source(key.name) == Some(ValueSource::CommandLine);
            let v = if key.switch {
                if typed {
                    Some("true".to_string())
                } else {
                    file.get(key.name).cloned()
                }
            } else if typed {
                matches.get_one::<String>(key.name).cloned()
            } else {
                file.get(key.name).cloned().or(key.default.map(str::to_string))
            };
            if let Some(v) = v {
                values.insert(key.name.to_string(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("invalid value `{v}` for `{key}`: {e}"))))
            .transpose()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.opt(key)?
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.opt(key)?.unwrap_or(false))
    }

    /// The effective configuration, echoed into output manifests.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }
}
