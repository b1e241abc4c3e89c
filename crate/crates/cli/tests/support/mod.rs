use std::fs;
use std::path::{Path, PathBuf};

/// Runs the CLI in-process and returns its exit code.
pub fn icrl(args: &[&str]) -> i32 {
    let mut full = vec!["icrl"];
    full.extend_from_slice(args);
    icrl_cli::run(full)
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

pub fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// `key=value` lines of a metrics file.
pub fn metric(dir: &Path, key: &str) -> f64 {
    read(dir.join("metrics.txt"))
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in metrics"))
}

/// Every file under `dir`, sorted by relative path, with its bytes.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
