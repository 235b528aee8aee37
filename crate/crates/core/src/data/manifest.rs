//! JSON Lines manifest: one `{id, label, caption, image_path, split}` object
//! per line, image paths relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// 1 for the positive (cue present) class.
    pub label: u8,
    pub caption: String,
    /// Relative, forward-slash separated.
    pub image_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the image paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn image_file(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(record.image_path.split('/').collect::<PathBuf>())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Parses and validates every line, and checks every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if record.label > 1 {
            return Err(parse_err(format!("label {} is not 0 or 1", record.label)));
        }
        if record.image_path.contains('\\') || record.image_path.starts_with('/') {
            return Err(parse_err(format!("image path `{}` must be relative with `/` separators", record.image_path)));
        }
        if !ids.insert(record.id.clone()) {
            return Err(parse_err(format!("duplicate id `{}`", record.id)));
        }
        records.push(record);
    }
    let manifest = Manifest { root, records };
    for r in &manifest.records {
        let file = manifest.image_file(r);
        if !file.is_file() {
            return Err(Error::Referential { id: r.id.clone(), path: file });
        }
    }
    Ok(manifest)
}
