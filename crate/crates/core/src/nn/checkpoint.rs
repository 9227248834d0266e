//! Versioned flat-text checkpoints.
//!
//! ```text
//! mfm-checkpoint 1
//! kind mlp
//! meta fd_step 1e-3
//! tensor layer0.weight 5 64
//! <row-major values, one matrix row per line>
//! end
//! ```
//!
//! Floats are written in Rust's shortest round-trip exponent form, so a
//! write/read cycle reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::mlp::{Linear, MlpParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: &str = "mfm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint { kind: kind.into(), meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.tensors.push((name.into(), m));
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no meta key `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| Error::Parse(format!("meta `{key}`: `{s}` is not a number")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Parse(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "kind {}", self.kind).unwrap();
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, m) in &self.tensors {
            writeln!(out, "tensor {name} {} {}", m.rows(), m.cols()).unwrap();
            for i in 0..m.rows() {
                let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse("not a checkpoint file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let mut ckpt = Checkpoint::new("");
        let mut saw_end = false;
        while let Some(line) = lines.next() {
            let mut it = line.splitn(2, ' ');
            match (it.next(), it.next()) {
                (Some("kind"), Some(k)) => ckpt.kind = k.to_string(),
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(rest)) => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    if f.len() != 3 {
                        return Err(Error::Parse(format!("bad tensor header `{line}`")));
                    }
                    let rows: usize = f[1].parse().map_err(|_| Error::Parse(format!("bad rows in `{line}`")))?;
                    let cols: usize = f[2].parse().map_err(|_| Error::Parse(format!("bad cols in `{line}`")))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        let row = lines
                            .next()
                            .ok_or_else(|| Error::Parse(format!("tensor {} truncated at row {r}", f[0])))?;
                        for tok in row.split_whitespace() {
                            data.push(tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{tok}`")))?);
                        }
                    }
                    ckpt.push(f[0], Matrix::from_vec(rows, cols, data)?);
                }
                (Some("end"), None) => {
                    saw_end = true;
                    break;
                }
                _ => return Err(Error::Parse(format!("unexpected checkpoint line `{line}`"))),
            }
        }
        if !saw_end {
            return Err(Error::Parse("checkpoint missing `end` marker".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

impl MlpParams {
    /// Appends this network's tensors under `prefix`.
    pub fn write_tensors(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (i, l) in self.layers().iter().enumerate() {
            ckpt.push(format!("{prefix}layer{i}.weight"), Matrix::from_vec(l.inputs, l.outputs, l.weight.clone()).unwrap());
            ckpt.push(format!("{prefix}layer{i}.bias"), Matrix::from_vec(1, l.outputs, l.bias.clone()).unwrap());
        }
    }

    pub fn read_tensors(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        while let Ok(w) = ckpt.tensor(&format!("{prefix}layer{}.weight", layers.len())) {
            let b = ckpt.tensor(&format!("{prefix}layer{}.bias", layers.len()))?;
            layers.push(Linear {
                inputs: w.rows(),
                outputs: w.cols(),
                weight: w.data().to_vec(),
                bias: b.data().to_vec(),
            });
        }
        MlpParams::from_layers(layers)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("mlp");
        self.write_tensors(&mut c, "");
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("mlp")?;
        Self::read_tensors(ckpt, "")
    }
}
