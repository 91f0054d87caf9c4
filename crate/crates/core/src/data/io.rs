//! Corpus files: one pair per line, space-separated ids, source and target
//! separated by a tab, and the register in a trailing `# r` column. Lines
//! starting with `#` are headers.

use std::fmt::Write as _;
use std::path::Path;

use super::ParallelPair;
use crate::error::{Error, Result};

pub fn save_corpus(path: &Path, pairs: &[ParallelPair], header: &[String]) -> Result<()> {
    let mut out = String::new();
    for h in header {
        writeln!(out, "# {h}").unwrap();
    }
    for p in pairs {
        writeln!(out, "{}\t{}\t# {}", join(&p.source), join(&p.target), p.register).unwrap();
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn load_corpus(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, detail: &str| Error::Format {
        what: "corpus",
        path: path.to_path_buf(),
        detail: format!("line {}: {detail}", line + 1),
    };
    let ids = |s: &str, line: usize| -> Result<Vec<u32>> {
        let v = s
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| bad(line, "token is not an id")))
            .collect::<Result<Vec<_>>>()?;
        if v.is_empty() {
            return Err(bad(line, "empty sentence"));
        }
        Ok(v)
    };
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(n, "expected three tab-separated columns"));
        }
        let register = cols[2]
            .trim_start_matches('#')
            .trim()
            .parse()
            .map_err(|_| bad(n, "register is not an integer"))?;
        pairs.push(ParallelPair {
            source: ids(cols[0], n)?,
            target: ids(cols[1], n)?,
            register,
        });
    }
    Ok(pairs)
}
