//! `--config FILE` support.
//!
//! The file is TOML. Top-level keys apply to every subcommand; a table named
//! after a subcommand applies to that subcommand only. Keys are flag names
//! without the leading dashes (`min_area` and `min-area` both work). Values
//! are inserted ahead of the command-line flags, so flags win.

use anyhow::{bail, Context, Result};
use std::ffi::OsString;
use std::path::Path;

/// Splits `--config FILE` / `--config=FILE` out of `args`.
pub fn take_config_path(args: &mut Vec<OsString>) -> Result<Option<OsString>> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if a == "--config" {
            if i + 1 >= args.len() {
                bail!("--config needs a file");
            }
            let path = args.remove(i + 1);
            args.remove(i);
            return Ok(Some(path));
        }
        if let Some(p) = a.strip_prefix("--config=") {
            let path = OsString::from(p);
            args.remove(i);
            return Ok(Some(path));
        }
        i += 1;
    }
    Ok(None)
}

fn value_args(key: &str, value: &toml::Value, out: &mut Vec<OsString>) -> Result<()> {
    let flag = format!("--{}", key.replace('_', "-"));
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => out.extend([flag.into(), s.into()]),
        toml::Value::Integer(n) => out.extend([flag.into(), n.to_string().into()]),
        toml::Value::Float(x) => out.extend([flag.into(), x.to_string().into()]),
        toml::Value::Array(items) => {
            let parts: Result<Vec<String>> = items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(x) => Ok(x.to_string()),
                    other => bail!("unsupported list item {other} for {key}"),
                })
                .collect();
            out.extend([flag.into(), parts?.join(",").into()]);
        }
        other => bail!("unsupported value {other} for {key}"),
    }
    Ok(())
}

/// Flags from `text` for `subcommand`.
pub fn config_args(text: &str, subcommand: &str) -> Result<Vec<OsString>> {
    let table: toml::Table = text.parse().context("parsing config")?;
    let mut out = Vec::new();
    for (key, value) in &table {
        if !value.is_table() {
            value_args(key, value, &mut out)?;
        }
    }
    if let Some(section) = table.get(subcommand) {
        let section = section.as_table().with_context(|| format!("[{subcommand}] must be a table"))?;
        for (key, value) in section {
            value_args(key, value, &mut out)?;
        }
    }
    Ok(out)
}

/// Rewrites `args` so config values precede the user's flags for the
/// chosen subcommand.
pub fn apply(mut args: Vec<OsString>, known_subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some(path) = take_config_path(&mut args)? else { return Ok(args) };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config {}", Path::new(&path).display()))?;
    let Some(pos) = args.iter().position(|a| known_subcommands.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let sub = args[pos].to_string_lossy().into_owned();
    let extra = config_args(&text, &sub)?;
    let tail = args.split_off(pos + 1);
    args.extend(extra);
    args.extend(tail);
    Ok(args)
}
