use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{RunConfig, Tolerances};

/// Provenance attached to every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub tolerances: Tolerances,
}

impl Meta {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            tolerances: cfg.tolerances,
        }
    }
}

/// One JSON line: `{"kind": ..., "meta": ..., <fields>}`.
pub fn record<T: Serialize>(kind: &str, meta: &Meta, body: &T) -> anyhow::Result<String> {
    let mut v = serde_json::to_value(body)?;
    let obj = v
        .as_object_mut()
        .context("record body must be a JSON object")?;
    let mut out = serde_json::Map::new();
    out.insert("kind".into(), Value::String(kind.into()));
    out.insert("meta".into(), serde_json::to_value(meta)?);
    out.append(obj);
    Ok(serde_json::to_string(&Value::Object(out))?)
}

pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.into() })
    }

    pub fn writer(&self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn write_lines(&self, name: &str, lines: &[String]) -> anyhow::Result<()> {
        let mut w = self.writer(name)?;
        for l in lines {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Two-column plain-text trace.
pub fn write_trace<W: Write>(mut w: W, points: &[[f64; 2]]) -> std::io::Result<()> {
    for p in points {
        writeln!(w, "{:.12e} {:.12e}", p[0], p[1])?;
    }
    w.flush()
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1))
        })
        .collect()
}
