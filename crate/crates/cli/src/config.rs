//! Resolution of flags, an optional key=value file and defaults into one
//! argument list. Flags win over the file, the file wins over defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgMatches, Command, CommandFactory, FromArgMatches};

use crate::Cli;

/// Arguments that steer a run without being part of its configuration.
const META: [&str; 3] = ["help", "version", "config"];

#[derive(Debug)]
pub enum ResolveError {
    /// Rejected by the argument parser; carries usage text.
    Clap(clap::Error),
    Config(String),
}

impl From<clap::Error> for ResolveError {
    fn from(e: clap::Error) -> Self {
        ResolveError::Clap(e)
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub cli: Cli,
    pub subcommand: String,
    /// Every configuration key with its effective value, in declaration order.
    pub entries: Vec<(String, String)>,
}

impl Resolved {
    /// Argument list that reproduces this run without any config file.
    pub fn rerun_argv(&self) -> Vec<String> {
        let mut v = vec!["amkit".to_string(), self.subcommand.clone()];
        let cmd = Cli::command();
        let sub = cmd
            .find_subcommand(&self.subcommand)
            .expect("known subcommand");
        for (k, val) in &self.entries {
            let takes = sub
                .get_arguments()
                .find(|a| a.get_long() == Some(k.as_str()))
                .is_some_and(|a| a.get_action().takes_values());
            if takes {
                v.push(format!("--{k}={val}"));
            } else if val == "true" {
                v.push(format!("--{k}"));
            }
        }
        v
    }

    pub fn run_conf(&self) -> String {
        let mut s = format!("# amkit {} --config run.conf\n", self.subcommand);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let k = k.trim().trim_start_matches("--").to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(format!("config line {}: duplicate key '{k}'", i + 1));
        }
    }
    Ok(out)
}

fn raw_joined(m: &ArgMatches, id: &str) -> Option<String> {
    m.get_raw(id).map(|vals| {
        vals.map(|v| v.to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join(",")
    })
}

fn config_args(sub: &Command) -> impl Iterator<Item = &clap::Arg> {
    sub.get_arguments()
        .filter(|a| !META.contains(&a.get_id().as_str()) && a.get_long().is_some())
}

pub fn resolve<I, T>(argv: I) -> Result<Resolved, ResolveError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cmd = Cli::command();
    let first = cmd.clone().try_get_matches_from(&argv)?;
    let (name, sub_m) = first.subcommand().expect("subcommand is required");
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");

    let file = match sub_m.get_one::<std::path::PathBuf>("config") {
        Some(p) => read_config(p)?,
        None => BTreeMap::new(),
    };
    let longs: Vec<&str> = config_args(sub).filter_map(|a| a.get_long()).collect();
    if let Some(bad) = file.keys().find(|k| !longs.contains(&k.as_str())) {
        return Err(ResolveError::Config(format!(
            "unknown config key '{bad}' for '{name}' (valid keys: {})",
            longs.join(", ")
        )));
    }

    let mut merged: Vec<OsString> = vec![
        argv.first().cloned().unwrap_or_else(|| "amkit".into()),
        name.into(),
    ];
    for a in config_args(sub) {
        let (id, long) = (a.get_id().as_str(), a.get_long().expect("filtered"));
        let takes = a.get_action().takes_values();
        let value = if sub_m.value_source(id) == Some(ValueSource::CommandLine) {
            if takes {
                raw_joined(sub_m, id)
            } else {
                Some("true".into())
            }
        } else {
            file.get(long).cloned()
        };
        match (value, takes) {
            (Some(v), true) => merged.push(format!("--{long}={v}").into()),
            (Some(v), false) => match v.as_str() {
                "true" => merged.push(format!("--{long}").into()),
                "false" => {}
                _ => {
                    return Err(ResolveError::Config(format!(
                        "key '{long}' expects true or false, got '{v}'"
                    )))
                }
            },
            (None, _) => {}
        }
    }

    let m = cmd.clone().try_get_matches_from(&merged)?;
    let cli = Cli::from_arg_matches(&m)?;
    let (_, sub_m) = m.subcommand().expect("subcommand is required");
    let entries = config_args(sub)
        .filter_map(|a| {
            let (id, long) = (a.get_id().as_str(), a.get_long().expect("filtered"));
            if a.get_action().takes_values() {
                raw_joined(sub_m, id).map(|v| (long.to_string(), v))
            } else {
                Some((long.to_string(), sub_m.get_flag(id).to_string()))
            }
        })
        .collect();
    Ok(Resolved {
        cli,
        subcommand: name.to_string(),
        entries,
    })
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>, ResolveError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ResolveError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text).map_err(ResolveError::Config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry<'a>(r: &'a Resolved, k: &str) -> Option<&'a str> {
        r.entries.iter().find(|e| e.0 == k).map(|e| e.1.as_str())
    }

    #[test]
    fn defaults_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("a.conf");
        std::fs::write(&conf, "# comment\ntrials = 7\nflips=3\nassert=true\n").unwrap();
        let c = conf.to_str().unwrap();
        let r = resolve(["amkit", "retrieve", "--config", c, "--flips", "5"]).unwrap();
        assert_eq!(entry(&r, "trials"), Some("7"));
        assert_eq!(entry(&r, "flips"), Some("5"));
        assert_eq!(entry(&r, "max-sweeps"), Some("50"));
        assert_eq!(entry(&r, "assert"), Some("true"));
        assert!(r.rerun_argv().contains(&"--assert".to_string()));
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("a.conf");
        std::fs::write(&conf, "bogus=1\n").unwrap();
        let r = resolve(["amkit", "gradcheck", "--config", conf.to_str().unwrap()]);
        assert!(matches!(r, Err(ResolveError::Config(_))));
    }

    #[test]
    fn list_values_survive_the_merge() {
        let r = resolve(["amkit", "capacity", "--dims", "24,32", "--n", "3"]).unwrap();
        assert_eq!(entry(&r, "dims"), Some("24,32"));
        let again = resolve(r.rerun_argv()).unwrap();
        assert_eq!(again.entries, r.entries);
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse_config_text("seed 3").is_err());
        assert!(parse_config_text("seed=1\nseed=2").is_err());
    }
}
