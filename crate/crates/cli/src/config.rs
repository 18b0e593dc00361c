//! `--config` files: flat `key=value` lines supplying defaults for flags.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parsed entries in file order. Keys are normalized to flag form (`--key`).
pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                i + 1
            );
        };
        let key = key.trim().trim_start_matches('-').replace('_', "-");
        if key.is_empty() {
            bail!("{}:{}: empty key", path.display(), i + 1);
        }
        entries.push((format!("--{key}"), value.trim().to_string()));
    }
    Ok(entries)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn has_flag(argv: &[OsString], flag: &str) -> bool {
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag
            || s.strip_prefix(flag)
                .is_some_and(|rest| rest.starts_with('='))
    })
}

/// Appends config entries whose flags are absent from `argv`. A value of
/// `true` stands for a bare switch; `false` omits it.
pub fn merge_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path).to_path_buf();
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (flag, value) in parse(&text, &path)? {
        if has_flag(&argv, &flag) {
            continue;
        }
        match value.as_str() {
            "false" => {}
            "true" => argv.push(flag.into()),
            _ => {
                argv.push(flag.into());
                argv.push(value.into());
            }
        }
    }
    Ok(argv)
}
