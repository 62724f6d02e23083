//! Line-delimited JSON page manifests shared by the forge, the training
//! corpus readers and the word exporter.
//!
//! One record per line:
//! `{"image_path":..,"page_width":..,"page_height":..,"words":[{"text","x","y","w","h","line","order","drop_cap"}]}`.
//! Image paths are stored relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::forge::{BBox, WordGT};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestWord {
    pub text: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub line: u32,
    pub order: u32,
    #[serde(default)]
    pub drop_cap: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub page_width: u32,
    pub page_height: u32,
    #[serde(default)]
    pub words: Vec<ManifestWord>,
}

impl From<&WordGT> for ManifestWord {
    fn from(w: &WordGT) -> Self {
        ManifestWord {
            text: w.text.clone(),
            x: w.bbox.x,
            y: w.bbox.y,
            w: w.bbox.w,
            h: w.bbox.h,
            line: w.line_index,
            order: w.order_index,
            drop_cap: w.drop_cap,
        }
    }
}

impl From<&ManifestWord> for WordGT {
    fn from(w: &ManifestWord) -> Self {
        WordGT {
            text: w.text.clone(),
            bbox: BBox::new(w.x, w.y, w.w, w.h),
            line_index: w.line,
            order_index: w.order,
            drop_cap: w.drop_cap,
        }
    }
}

impl ManifestRecord {
    pub fn word_gts(&self) -> Vec<WordGT> {
        self.words.iter().map(WordGT::from).collect()
    }
}

/// A loaded manifest together with the directory its image paths are relative to.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            records.push(record);
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Manifest { root, records })
    }

    pub fn write(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for record in records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        let p = Path::new(&self.records[index].image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Sorted set of every character appearing in any word of the manifest.
    pub fn charset(&self) -> BTreeSet<char> {
        self.records
            .iter()
            .flat_map(|r| r.words.iter())
            .flat_map(|w| w.text.chars())
            .collect()
    }

    pub fn word_count(&self) -> usize {
        self.records.iter().map(|r| r.words.len()).sum()
    }
}
