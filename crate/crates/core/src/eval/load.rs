use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{letter_index, BenchmarkSpec, McqItem, Split};

const COLUMNS: [&str; 6] = ["question", "A", "B", "C", "D", "answer"];

/// Items of both splits plus non-fatal findings such as empty files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Benchmark {
    pub items: Vec<McqItem>,
    pub warnings: Vec<String>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &McqItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.subject.as_str()).collect()
    }
}

fn split_dir(dir: &Path, split: Split) -> Option<PathBuf> {
    let names: &[&str] = match split {
        Split::Dev => &["dev"],
        Split::Test => &["test", "val"],
    };
    names.iter().map(|n| dir.join(n)).find(|p| p.is_dir())
}

fn subject_of(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in ["_dev", "_test", "_val"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            return s.to_string();
        }
    }
    stem
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_subject(path: &Path, subject: &str, split: Split) -> Result<Vec<McqItem>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let mut idx = [0usize; 6];
    for (slot, col) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}') == col)
            .ok_or_else(|| Error::FileFormat {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column {col:?}"),
            })?;
    }
    let mut items = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("").to_string();
        let raw = field(5);
        let answer = letter_index(&raw).ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            index: i,
            message: format!("answer {raw:?} is not one of A, B, C, D"),
        })?;
        items.push(McqItem {
            subject: subject.to_string(),
            question: field(0),
            choices: [field(1), field(2), field(3), field(4)],
            answer,
            split,
        });
    }
    Ok(items)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::FileFormat {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads `dir/dev/<subject>.csv` and `dir/test/<subject>.csv` (falling back
/// to `dir/val`). Subjects come from file names with any `_dev`, `_test` or
/// `_val` suffix removed; items keep file order, subjects sort by name.
pub fn load_benchmark(dir: &Path, spec: &BenchmarkSpec) -> Result<Benchmark> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "benchmark directory not found"),
        ));
    }
    let wanted: BTreeSet<&str> = spec.subjects.iter().map(String::as_str).collect();
    let mut bench = Benchmark::default();
    let mut found = BTreeSet::new();
    for split in [Split::Dev, Split::Test] {
        let Some(sdir) = split_dir(dir, split) else {
            if split == Split::Test {
                return Err(Error::Config(format!("{}: no test split", dir.display())));
            }
            continue;
        };
        for path in csv_files(&sdir)? {
            let subject = subject_of(&path);
            if !wanted.is_empty() && !wanted.contains(subject.as_str()) {
                continue;
            }
            let items = read_subject(&path, &subject, split)?;
            if items.is_empty() {
                bench.warnings.push(format!("{}: no items", path.display()));
            }
            found.insert(subject);
            bench.items.extend(items);
        }
    }
    if let Some(missing) = wanted.iter().find(|s| !found.contains(**s)) {
        return Err(Error::Config(format!("subject {missing:?} not found in {}", dir.display())));
    }
    Ok(bench)
}
