//! `key=value` config files. Each entry becomes a `--key value` flag
//! inserted right after the subcommand, so anything given explicitly on
//! the command line (which comes later and overrides) wins.

use std::ffi::OsString;
use std::path::Path;

use crate::{CliError, CliResult};

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may use `-` or `_`.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", no + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::usage(format!("config line {}: bad key {:?}", no + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_flags(path: &Path) -> CliResult<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("config file {}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (k, v) in parse_config(&text)? {
        match v.as_str() {
            "true" => flags.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                flags.push(format!("--{k}").into());
                flags.push(v.into());
            }
        }
    }
    Ok(flags)
}

fn config_path(argv: &[OsString]) -> Option<(usize, OsString)> {
    argv.iter().enumerate().find_map(|(i, a)| {
        let s = a.to_str()?;
        if s == "--config" {
            argv.get(i + 1).map(|p| (i, p.clone()))
        } else {
            s.strip_prefix("--config=").map(|p| (i, p.into()))
        }
    })
}

/// Splices the entries of the file named by `--config` into `argv`.
pub fn merge_config_file(argv: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let Some((_, path)) = config_path(&argv) else {
        return Ok(argv);
    };
    let flags = config_flags(Path::new(&path))?;
    // Position of the subcommand: the first argument after the program
    // name that is not an option or an option's value.
    let mut at = 1;
    while at < argv.len() {
        let s = argv[at].to_str().unwrap_or("");
        if s == "--config" {
            at += 2;
        } else if s.starts_with('-') {
            at += 1;
        } else {
            break;
        }
    }
    if at >= argv.len() {
        return Ok(argv);
    }
    let mut out = argv[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_comments_and_underscores() {
        let c = parse_config("# sweep\nmax_epochs = 5\n\nlr=0.01 # fast\n").unwrap();
        assert_eq!(c, vec![("max-epochs".into(), "5".into()), ("lr".into(), "0.01".into())]);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert_eq!(parse_config("lr 0.1").unwrap_err().code, crate::EXIT_USAGE);
    }

    #[test]
    fn config_entries_precede_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "lr=0.5\nquiet=true\nresume=false\n").unwrap();
        let p = path.to_str().unwrap();
        let merged = merge_config_file(os(&["lightcrl", "--config", p, "train", "--lr", "0.1"])).unwrap();
        assert_eq!(
            merged,
            os(&["lightcrl", "--config", p, "train", "--lr", "0.5", "--quiet", "--lr", "0.1"])
        );
    }

    #[test]
    fn config_after_subcommand_is_found() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        std::fs::write(&path, "n=4").unwrap();
        let p = path.to_str().unwrap();
        let merged = merge_config_file(os(&["lightcrl", "gensynth", "--config", p])).unwrap();
        assert_eq!(merged, os(&["lightcrl", "gensynth", "--n", "4", "--config", p]));
    }
}
