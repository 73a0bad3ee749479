//! `key = value` config files and resolved-config snapshots.

use std::fs;
use std::path::Path;

use clap::ArgMatches;

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected `key = value`", i + 1))?;
        let k = k.trim().replace('_', "-");
        if k.is_empty() {
            return Err(format!("config line {}: empty key", i + 1));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn given(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    let prefixed = format!("{flag}=");
    args.iter().any(|a| *a == flag || a.starts_with(&prefixed))
}

/// Finds `--config FILE` in `args` and appends every file entry whose flag
/// is not already on the command line, so explicit flags win.
pub fn merge_config_file(mut args: Vec<String>) -> Result<Vec<String>, String> {
    let path = args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config file {path}: {e}"))?;
    for (k, v) in parse(&text)? {
        if given(&args, &k) {
            continue;
        }
        match v.as_str() {
            "true" => args.push(format!("--{k}")),
            "false" => {}
            _ => args.push(format!("--{k}={v}")),
        }
    }
    Ok(args)
}

/// Every argument of the chosen subcommand, defaults included, as
/// `key = value` lines that can be fed back through `--config`.
pub fn snapshot(command: &str, m: &ArgMatches) -> String {
    let mut out = format!("# resolved configuration of `rcm {command}`\n");
    for id in m.ids() {
        let id = id.as_str();
        // argument groups are named after their structs
        if id == "config" || id.starts_with(char::is_uppercase) {
            continue;
        }
        if let Some(vals) = m.get_raw(id) {
            let joined: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            if !joined.is_empty() {
                out.push_str(&format!("{id} = {}\n", joined.join(",")));
            }
        }
    }
    out
}

pub fn write_snapshot(dir: &Path, command: &str, m: &ArgMatches) -> std::io::Result<()> {
    fs::write(dir.join(format!("{command}.config")), snapshot(command, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_merges_with_flags_winning() {
        let parsed = parse("# c\nseed = 3\n\nnum_frames= 8 # trailing\n").unwrap();
        assert_eq!(parsed, vec![("seed".into(), "3".into()), ("num-frames".into(), "8".into())]);
        assert!(parse("novalue").is_err());

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "seed = 3\nframes = 8\nrefine = true\nquiet = false\n").unwrap();
        let args: Vec<String> = ["rcm", "simulate", "--seed", "9", "--config", file.to_str().unwrap()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let merged = merge_config_file(args).unwrap();
        assert!(merged.contains(&"--frames=8".to_string()));
        assert!(merged.contains(&"--refine".to_string()));
        assert!(!merged.iter().any(|a| a.starts_with("--seed=")));
        assert!(!merged.iter().any(|a| a.contains("quiet")));
    }
}
