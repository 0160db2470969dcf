use std::fs;
use std::path::{Path, PathBuf};

use covcal_core::trace::TraceFile;
use serde::Serialize;

use crate::error::{CliError, CliResult};

fn is_trace_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "csv" || e == "jsonl")
}

/// Expands directories into their `.csv`/`.jsonl` files, sorted by name.
/// Files named explicitly are kept in the order given.
pub fn trace_paths(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::from(e).at(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_trace_file(p))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::usage(format!(
                "{}: no such file or directory",
                p.display()
            )));
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("no trace files given"));
    }
    Ok(out)
}

pub fn load_traces(paths: &[PathBuf]) -> CliResult<Vec<TraceFile>> {
    paths
        .iter()
        .map(|p| TraceFile::load(p).map_err(|e| CliError::from(e).at(p)))
        .collect()
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::from(e).at(path))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::from(e).at(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::from(e).at(path))
}

/// Creates the parent directory of an output file if needed.
pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn save_trace(trace: &TraceFile, path: &Path) -> CliResult<()> {
    trace.save(path).map_err(|e| CliError::from(e).at(path))
}

/// `path` with `suffix` appended to the file stem, e.g. `model.json` and
/// `.curve.csv` give `model.curve.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// `(lo, hi, step)` from `lo:hi[:step]`; the step defaults to 2.
pub fn parse_range(text: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || CliError::usage(format!("range must be lo:hi[:step], got {text:?}"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        [lo, hi] => Ok((num(lo)?, num(hi)?, 2)),
        [lo, hi, step] => Ok((num(lo)?, num(hi)?, num(step)?)),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_names() {
        assert_eq!(
            sibling(Path::new("out/model.json"), ".curve.csv"),
            PathBuf::from("out/model.curve.csv")
        );
        assert_eq!(sibling(Path::new("a"), ".x"), PathBuf::from("a.x"));
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("27:601:2").unwrap(), (27, 601, 2));
        assert_eq!(parse_range("5:9").unwrap(), (5, 9, 2));
        assert!(parse_range("5").is_err());
        assert!(parse_range("a:b:c").is_err());
    }

    #[test]
    fn directories_expand_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.csv", "a.jsonl", "manifest.json"] {
            fs::write(dir.path().join(name), "").unwrap();
        }
        let got = trace_paths(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = got
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(names, ["a.jsonl", "b.csv"]);
        assert!(trace_paths(&[dir.path().join("missing")]).is_err());
    }
}
