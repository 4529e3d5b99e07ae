use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ir::{parse_program, ParseError, Program};

/// Environment variable that points corpus loading at another directory.
pub const CORPUS_ENV: &str = "BRL_CORPUS_DIR";
pub const EXTENSION: &str = ".brl.s";

const EMBEDDED: &[(&str, &str)] = &[
    ("bubblesort", include_str!("../../corpus/bubblesort.brl.s")),
    ("callback", include_str!("../../corpus/callback.brl.s")),
    ("cover", include_str!("../../corpus/cover.brl.s")),
    ("dijkstra", include_str!("../../corpus/dijkstra.brl.s")),
    ("dispatcher", include_str!("../../corpus/dispatcher.brl.s")),
    ("family", include_str!("../../corpus/family.brl.s")),
    ("interp", include_str!("../../corpus/interp.brl.s")),
    ("qsort", include_str!("../../corpus/qsort.brl.s")),
    ("rbtree", include_str!("../../corpus/rbtree.brl.s")),
    ("recursion", include_str!("../../corpus/recursion.brl.s")),
    ("switch10", include_str!("../../corpus/switch10.brl.s")),
    ("vtable", include_str!("../../corpus/vtable.brl.s")),
];

#[derive(Debug, Clone)]
pub struct CorpusProgram {
    pub name: String,
    pub program: Program,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{name}: {error}")]
    Parse { name: String, error: ParseError },
    #[error("{0}: no `{EXTENSION}` programs found")]
    Empty(PathBuf),
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn parse(name: &str, src: &str) -> Result<CorpusProgram, CorpusError> {
    let program = parse_program(src).map_err(|error| CorpusError::Parse { name: name.to_string(), error })?;
    Ok(CorpusProgram { name: name.to_string(), program })
}

/// The built-in twelve-program corpus, ordered by name.
pub fn embedded() -> Vec<CorpusProgram> {
    EMBEDDED.iter().map(|(n, s)| parse(n, s).expect("embedded corpus parses")).collect()
}

pub fn embedded_source(name: &str) -> Option<&'static str> {
    EMBEDDED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Every `*.brl.s` file in `dir`, ordered by name.
pub fn load_dir(dir: &Path) -> Result<Vec<CorpusProgram>, CorpusError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(EXTENSION)) else {
            continue;
        };
        let src = std::fs::read_to_string(&path).map_err(io(&path))?;
        out.push(parse(name, &src)?);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty(dir.to_path_buf()));
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// `BRL_CORPUS_DIR` when set, otherwise the embedded corpus.
pub fn default_corpus() -> Result<Vec<CorpusProgram>, CorpusError> {
    match std::env::var_os(CORPUS_ENV) {
        Some(dir) => load_dir(Path::new(&dir)),
        None => Ok(embedded()),
    }
}
