//! Flat key=value run configuration: per-command defaults, an optional
//! config file (`key = value` lines, `#` comments), and command-line flags
//! that override the file. Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use super::CliError;

/// One configuration key: name, default (None = required), and whether it
/// is a bare boolean flag.
#[derive(Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub flag: bool,
}

pub const fn key(name: &'static str, default: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(default),
        flag: false,
    }
}

pub const fn required(name: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: None,
        flag: false,
    }
}

pub const fn optional(name: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(""),
        flag: false,
    }
}

pub const fn flag(name: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some("false"),
        flag: true,
    }
}

/// Resolved configuration of one command run.
pub struct RunConfig {
    command: String,
    values: BTreeMap<String, String>,
    user_set: BTreeSet<String>,
}

impl RunConfig {
    /// Parse flags (and `--config FILE`, loaded first) against the allowed
    /// key set, then fill remaining defaults.
    pub fn resolve(command: &str, args: &[String], spec: &[KeySpec]) -> Result<RunConfig, CliError> {
        let find = |name: &str| spec.iter().find(|k| k.name == name);
        let mut values: BTreeMap<String, String> = BTreeMap::new();
        let mut user_set = BTreeSet::new();

        // pass 1: pull out --config and load the file
        let mut flat: Vec<(String, Option<String>)> = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let stripped = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument {:?}", arg)))?;
            let (name, inline) = match stripped.split_once('=') {
                Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
                None => (stripped.replace('-', "_"), None),
            };
            if name == "config" {
                let path = match inline {
                    Some(v) => v,
                    None => {
                        i += 1;
                        args.get(i)
                            .cloned()
                            .ok_or_else(|| CliError::Usage("--config needs a path".into()))?
                    }
                };
                for (k, v) in parse_config_file(&PathBuf::from(&path))? {
                    if find(&k).is_none() {
                        return Err(CliError::Usage(format!(
                            "unknown key {:?} in config file {}",
                            k, path
                        )));
                    }
                    values.insert(k.clone(), v);
                    user_set.insert(k);
                }
            } else {
                flat.push((name, inline));
            }
            // consume the value of non-flag keys given as `--key value`
            if let Some((name, None)) = flat.last().cloned() {
                let is_flag = find(&name).map(|k| k.flag).unwrap_or(false);
                if !is_flag {
                    i += 1;
                    let value = args
                        .get(i)
                        .cloned()
                        .ok_or_else(|| CliError::Usage(format!("--{} needs a value", name)))?;
                    flat.last_mut().unwrap().1 = Some(value);
                }
            }
            i += 1;
        }

        // pass 2: flags override the file
        for (name, value) in flat {
            let ks = find(&name)
                .ok_or_else(|| CliError::Usage(format!("unknown option --{}", name)))?;
            let value = match value {
                Some(v) => v,
                None if ks.flag => "true".to_string(),
                None => unreachable!("non-flag values consumed above"),
            };
            values.insert(name.clone(), value);
            user_set.insert(name);
        }

        // defaults
        for ks in spec {
            if !values.contains_key(ks.name) {
                match ks.default {
                    Some(d) => {
                        values.insert(ks.name.to_string(), d.to_string());
                    }
                    None => {
                        return Err(CliError::Usage(format!("--{} is required", ks.name)));
                    }
                }
            }
        }

        // seed fallback from the environment when not given explicitly
        if values.get("seed").map(|s| s.as_str()) == Some("")
            || (spec.iter().any(|k| k.name == "seed") && !user_set.contains("seed"))
        {
            if let Ok(env_seed) = std::env::var("REMRG_SEED") {
                values.insert("seed".to_string(), env_seed);
            }
        }

        Ok(RunConfig {
            command: command.to_string(),
            values,
            user_set,
        })
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.user_set.contains(key)
    }

    pub fn str_value(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .unwrap_or_else(|| panic!("key {:?} missing from resolved config", key))
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.str_value(key))
    }

    pub fn usize_value(&self, key: &str) -> Result<usize, CliError> {
        self.str_value(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("--{} expects an integer", key)))
    }

    pub fn u64_value(&self, key: &str) -> Result<u64, CliError> {
        self.str_value(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("--{} expects an integer", key)))
    }

    pub fn f64_value(&self, key: &str) -> Result<f64, CliError> {
        self.str_value(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("--{} expects a number", key)))
    }

    pub fn bool_value(&self, key: &str) -> Result<bool, CliError> {
        match self.str_value(key) {
            "true" | "1" => Ok(true),
            "false" | "0" | "" => Ok(false),
            other => Err(CliError::Usage(format!(
                "--{} expects true/false, found {:?}",
                key, other
            ))),
        }
    }

    /// Effective configuration echo: sorted key=value lines.
    pub fn echo(&self) -> String {
        let mut out = format!("command={}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{}={}\n", k, v));
        }
        out
    }
}

fn parse_config_file(path: &PathBuf) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read config {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                idx + 1
            ))
        })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}
