//! Text key -> array map used for checkpoints.
//!
//! ```text
//! pda-tensors 1
//! meta <key> <value>
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

pub const TENSOR_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "pda-tensors";

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("missing metadata `{0}`")]
    MissingMeta(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// Ordered collection of named arrays plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.push((name.into(), value));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str, TensorFileError> {
        self.meta(key)
            .ok_or_else(|| TensorFileError::MissingMeta(key.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn take(&self, name: &str) -> Result<Array2<f64>, TensorFileError> {
        self.get(name)
            .cloned()
            .ok_or_else(|| TensorFileError::Missing(name.to_string()))
    }

    pub fn take_shaped(&self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>, TensorFileError> {
        let t = self.take(name)?;
        if t.dim() != shape {
            return Err(TensorFileError::Shape {
                name: name.to_string(),
                expected: shape,
                got: t.dim(),
            });
        }
        Ok(t)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} {TENSOR_FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self, TensorFileError> {
        let err = |line: usize, msg: String| TensorFileError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(MAGIC) {
            return Err(err(n, format!("expected `{MAGIC}` header")));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(n, "missing format version".into()))?;
        if version != TENSOR_FORMAT_VERSION {
            return Err(err(n, format!("unsupported format version {version}")));
        }

        let mut map = TensorMap::new();
        let mut finished = false;
        while let Some((n, line)) = lines.next() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(n, "meta without key".into()))?;
                    let value: Vec<&str> = parts.collect();
                    map.meta.push((key.to_string(), value.join(" ")));
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| err(n, "tensor without name".into()))?
                        .to_string();
                    let mut dim = || -> Result<usize, TensorFileError> {
                        parts
                            .next()
                            .and_then(|d| d.parse().ok())
                            .ok_or_else(|| err(n, format!("bad shape for `{name}`")))
                    };
                    let rows = dim()?;
                    let cols = dim()?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rn, row) = lines
                            .next()
                            .ok_or_else(|| err(n, format!("truncated tensor `{name}`")))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            data.push(tok.parse::<f64>().map_err(|_| err(rn, format!("bad number `{tok}`")))?);
                        }
                        if data.len() - before != cols {
                            return Err(err(
                                rn,
                                format!("expected {cols} values, found {}", data.len() - before),
                            ));
                        }
                    }
                    let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| err(n, e.to_string()))?;
                    map.tensors.push((name, arr));
                }
                Some("end") => {
                    finished = true;
                    break;
                }
                None => {}
                Some(other) => return Err(err(n, format!("unexpected record `{other}`"))),
            }
        }
        if !finished {
            return Err(err(text.lines().count(), "missing `end` marker".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorFileError> {
        fs::write(path, self.to_text()).map_err(|source| TensorFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TensorFileError> {
        let text = fs::read_to_string(path).map_err(|source| TensorFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}
