//! Plain-text dataset manifests.
//!
//! One entry per line: `<split> <path> [match_id]`, where split is `train`,
//! `val` or `test`, paths are relative to the manifest's directory and the
//! match id defaults to the file stem. Blank lines and `#` comments are
//! ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tracking::{load_tracking, write_tracking, TrackedExample};
use crate::error::{Error, Result};

/// Train / validation / test fractions of match ids.
pub const SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{}`", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: PathBuf,
    pub match_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that relative entry paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |detail: String| Error::Parse { path: path.display().to_string(), line: i as u64 + 1, detail };
            if !(2..=3).contains(&fields.len()) {
                return Err(bad("expected `<split> <path> [match_id]`".into()));
            }
            let split = fields[0].parse::<Split>().map_err(|e| bad(e.to_string()))?;
            let file = PathBuf::from(fields[1]);
            let match_id = match fields.get(2) {
                Some(m) => m.to_string(),
                None => file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            };
            entries.push(ManifestEntry { split, path: file, match_id });
        }
        Ok(Self { root, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# split path match_id\n");
        for e in &self.entries {
            out.push_str(&format!("{} {} {}\n", e.split, e.path.display(), e.match_id));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Loads every example of one split, in manifest order.
    pub fn load(&self, split: Split, frame_rate_hz: f64) -> Result<Vec<TrackedExample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mut ex = load_tracking(&self.resolve(e), frame_rate_hz)?;
                ex.match_id = e.match_id.clone();
                Ok(ex)
            })
            .collect()
    }
}

/// Assigns whole matches to splits. Ids are ordered by a hash of the id, so
/// the assignment depends only on the set of ids.
pub fn split_by_match<'a, I>(match_ids: I) -> BTreeMap<String, Split>
where
    I: IntoIterator<Item = &'a str>,
{
    let unique: BTreeSet<&str> = match_ids.into_iter().collect();
    let mut keyed: Vec<(Vec<u8>, &str)> =
        unique.into_iter().map(|id| (Sha256::digest(id.as_bytes()).to_vec(), id)).collect();
    keyed.sort();
    let n = keyed.len();
    let n_train = (n as f64 * SPLIT_RATIOS[0]).round() as usize;
    let n_val = ((n as f64 * SPLIT_RATIOS[1]).round() as usize).min(n - n_train);
    keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect()
}

/// Writes one CSV per example under `dir/plays/` plus `dir/manifest.txt`.
pub fn write_dataset(dir: &Path, examples: &[TrackedExample]) -> Result<Manifest> {
    let plays = dir.join("plays");
    std::fs::create_dir_all(&plays)?;
    let splits = split_by_match(examples.iter().map(|e| e.match_id.as_str()));
    let mut entries = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let rel = PathBuf::from("plays").join(format!("play_{:05}.csv", i));
        let file = std::fs::File::create(dir.join(&rel))?;
        write_tracking(ex, std::io::BufWriter::new(file))?;
        entries.push(ManifestEntry { split: splits[&ex.match_id], path: rel, match_id: ex.match_id.clone() });
    }
    let manifest = Manifest { root: dir.to_path_buf(), entries };
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
