//! Layered flag resolution: command line, then `--config` file, then
//! `KCTUTOR_*` environment variables.
//!
//! Values missing from the command line are looked up in the lower layers
//! and appended to argv as `--flag=value`, so clap still does all parsing
//! and validation.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};
use serde_json::Value;

pub const ENV_PREFIX: &str = "KCTUTOR_";

pub fn env_name(long: &str) -> String {
    format!("{ENV_PREFIX}{}", long.to_ascii_uppercase().replace('-', "_"))
}

/// Returns argv with file and environment values filled in.
pub fn resolve_argv(
    cmd: Command,
    argv: Vec<OsString>,
    env: &HashMap<String, String>,
) -> anyhow::Result<Vec<OsString>> {
    let mut cmd = cmd.ignore_errors(true);
    cmd.build();
    let root = cmd.clone().try_get_matches_from(argv.clone()).context("parsing arguments")?;

    let config_path = match root.get_one::<PathBuf>("config") {
        Some(p) => Some(p.clone()),
        None => env.get(&env_name("config")).map(PathBuf::from),
    };
    let file: serde_json::Map<String, Value> = match &config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("config file {}", p.display()))?;
            match serde_json::from_str(&text).with_context(|| format!("config file {}", p.display()))? {
                Value::Object(m) => m,
                _ => bail!("config file {} must hold a JSON object", p.display()),
            }
        }
        None => serde_json::Map::new(),
    };

    // Walk to the innermost subcommand.
    let mut leaf_cmd = &cmd;
    let mut leaf = &root;
    while let Some((name, sub)) = leaf.subcommand() {
        match leaf_cmd.find_subcommand(name) {
            Some(c) => {
                leaf_cmd = c;
                leaf = sub;
            }
            None => break,
        }
    }

    let mut out = argv;
    for arg in leaf_cmd.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        let id = arg.get_id().as_str();
        if matches!(id, "config" | "help" | "version") {
            continue;
        }
        if on_command_line(leaf, &root, id) {
            continue;
        }
        let values = match lookup(&file, long) {
            Some(v) => json_values(v).with_context(|| format!("config key {long:?}"))?,
            None => match env.get(&env_name(long)) {
                Some(v) => vec![v.clone()],
                None => continue,
            },
        };
        match arg.get_action() {
            ArgAction::SetTrue => {
                if values.iter().any(|v| matches!(v.as_str(), "true" | "1" | "yes")) {
                    out.push(format!("--{long}").into());
                }
            }
            _ => match arg.get_value_delimiter() {
                Some(d) if values.len() > 1 => out.push(format!("--{long}={}", values.join(&d.to_string())).into()),
                _ => {
                    for v in values {
                        out.push(format!("--{long}={v}").into());
                    }
                }
            },
        }
    }
    Ok(out)
}

fn on_command_line(leaf: &ArgMatches, root: &ArgMatches, id: &str) -> bool {
    let src = |m: &ArgMatches| m.try_get_raw(id).ok().flatten().and_then(|_| m.value_source(id));
    src(leaf) == Some(ValueSource::CommandLine) || src(root) == Some(ValueSource::CommandLine)
}

fn lookup<'a>(file: &'a serde_json::Map<String, Value>, long: &str) -> Option<&'a Value> {
    file.get(long).or_else(|| file.get(&long.replace('-', "_")))
}

fn json_values(v: &Value) -> anyhow::Result<Vec<String>> {
    Ok(match v {
        Value::String(s) => vec![s.clone()],
        Value::Number(n) => vec![n.to_string()],
        Value::Bool(b) => vec![b.to_string()],
        Value::Array(items) => {
            let parts: anyhow::Result<Vec<Vec<String>>> = items.iter().map(json_values).collect();
            parts?.concat()
        }
        Value::Null => vec![],
        Value::Object(_) => bail!("nested objects are not flag values"),
    })
}
