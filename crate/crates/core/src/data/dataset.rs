use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::preprocess;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
    Unspecified,
}

impl Side {
    fn from_dir(name: &str) -> Option<Side> {
        match name.to_ascii_lowercase().as_str() {
            "left" | "l" => Some(Side::Left),
            "right" | "r" => Some(Side::Right),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Unspecified => "unspecified",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `subject/side`, or just `subject` when the side is unspecified. Subject
/// names are directory names and cannot contain `/`, so keys never collide.
pub fn identity_key(subject: &str, side: Side) -> String {
    match side {
        Side::Unspecified => subject.to_string(),
        s => format!("{subject}/{s}"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub identity_key: String,
    pub subject_id: String,
    pub side: Side,
    pub path: PathBuf,
}

/// Records in deterministic order plus the sorted identity list that defines
/// dense labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
    identities: Vec<String>,
}

impl DatasetIndex {
    pub fn new(mut records: Vec<Record>) -> Self {
        records.sort_by(|a, b| (&a.identity_key, &a.path).cmp(&(&b.identity_key, &b.path)));
        let mut identities: Vec<String> = records.iter().map(|r| r.identity_key.clone()).collect();
        identities.dedup();
        DatasetIndex {
            records,
            identities,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Dense label of each record: position of its key in [`identities`](Self::identities).
    pub fn labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.identities.binary_search(&r.identity_key).unwrap())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Lower-case file extensions to consider; other files are skipped.
    pub extensions: Vec<String>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            image_size: 112,
            channels: 1,
            extensions: ["pgm", "ppm", "pnm", "png"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    /// Preprocessed tensors aligned with `index.records`.
    pub images: Vec<Tensor>,
    /// Files that were skipped, with the reason.
    pub failures: Vec<(PathBuf, Error)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let path = entry.path();
        let is_dir = path.is_dir();
        out.push((name, path, is_dir));
    }
    out.sort();
    Ok(out)
}

/// Scans `root/<subject>/[<side>/]<image>` and preprocesses every image.
///
/// Side directories are `left`/`right` (or `l`/`r`, any case). Images placed
/// directly in a subject directory get an unspecified side. Files that fail to
/// decode are reported in `failures` and left out of the index.
pub fn load_dataset(root: &Path, layout: &LayoutConfig) -> Result<LoadedDataset> {
    let mut candidates: Vec<(String, Side, PathBuf)> = Vec::new();
    let mut failures = Vec::new();
    let wanted = |p: &Path| {
        p.extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .is_some_and(|e| layout.extensions.contains(&e))
    };

    for (subject, subject_path, is_dir) in sorted_entries(root)? {
        if !is_dir {
            continue;
        }
        for (name, path, is_dir) in sorted_entries(&subject_path)? {
            if is_dir {
                let Some(side) = Side::from_dir(&name) else {
                    failures.push((
                        path.clone(),
                        Error::Format {
                            path,
                            reason: "directory is not a recognized side (left/right)".into(),
                        },
                    ));
                    continue;
                };
                for (_, file, is_dir) in sorted_entries(&path)? {
                    if !is_dir && wanted(&file) {
                        candidates.push((subject.clone(), side, file));
                    }
                }
            } else if wanted(&path) {
                candidates.push((subject.clone(), Side::Unspecified, path));
            }
        }
    }

    let decoded: Vec<Result<Tensor>> = candidates
        .par_iter()
        .map(|(_, _, path)| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            preprocess(
                &bytes,
                &path.to_string_lossy(),
                layout.image_size,
                layout.channels,
            )
        })
        .collect();

    let mut kept: BTreeMap<(String, PathBuf), (Record, Tensor)> = BTreeMap::new();
    for ((subject, side, path), result) in candidates.into_iter().zip(decoded) {
        match result {
            Ok(t) => {
                let key = identity_key(&subject, side);
                let record = Record {
                    identity_key: key.clone(),
                    subject_id: subject,
                    side,
                    path: path.clone(),
                };
                kept.insert((key, path), (record, t));
            }
            Err(e) => failures.push((path, e)),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let (records, images): (Vec<Record>, Vec<Tensor>) = kept.into_values().unzip();
    Ok(LoadedDataset {
        index: DatasetIndex::new(records),
        images,
        failures,
    })
}
