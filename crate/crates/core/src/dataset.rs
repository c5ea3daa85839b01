//! Triplet datasets in the ISTD directory layout:
//!
//! ```text
//! root/
//!   train_A/  shadow images       test_A/
//!   train_B/  shadow masks        test_B/
//!   train_C/  shadow-free images  test_C/
//! ```
//!
//! The three files of a triplet share a file name.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask, FloatImage, RawMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// `(shadow, mask, shadow-free)` directory names.
    pub fn dirs(&self) -> [String; 3] {
        ["A", "B", "C"].map(|s| format!("{}_{s}", self.as_str()))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTriplet {
    /// File stem shared by the three images.
    pub id: String,
    pub shadow_path: PathBuf,
    pub mask_path: PathBuf,
    pub free_path: PathBuf,
    pub split: Split,
}

/// A loaded triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shadow: FloatImage,
    pub mask: RawMask,
    pub free: FloatImage,
}

impl Sample {
    pub fn resized(&self, height: usize, width: usize) -> Sample {
        if self.shadow.height() == height && self.shadow.width() == width {
            return self.clone();
        }
        Sample {
            id: self.id.clone(),
            shadow: self.shadow.resize_nearest(height, width),
            mask: self.mask.resize_nearest(height, width),
            free: self.free.resize_nearest(height, width),
        }
    }

    pub fn resolution(&self) -> String {
        format!("{}x{}", self.shadow.height(), self.shadow.width())
    }
}

const EXTENSIONS: [&str; 3] = ["png", "ppm", "pgm"];

fn list_images(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// Lists and validates one split. A split whose three directories are all
/// absent yields an empty list.
pub fn ingest_split(root: &Path, split: Split) -> Result<Vec<DatasetTriplet>> {
    let dirs = split.dirs().map(|d| root.join(d));
    let present: Vec<bool> = dirs.iter().map(|d| d.is_dir()).collect();
    if present.iter().all(|p| !p) {
        return Ok(Vec::new());
    }
    if let Some(i) = present.iter().position(|p| !p) {
        return Err(Error::Dataset(format!("missing directory {}", dirs[i].display())));
    }
    let listings = dirs.iter().map(|d| list_images(d)).collect::<Result<Vec<_>>>()?;
    let mut problems = Vec::new();
    let all: BTreeSet<&String> = listings.iter().flatten().collect();
    for name in &all {
        for (dir, listing) in dirs.iter().zip(&listings) {
            if !listing.contains(*name) {
                problems.push(format!("orphan {name}: no counterpart in {}", dir.display()));
            }
        }
    }
    let mut triplets = Vec::new();
    for name in listings[0].iter().filter(|n| listings[1].contains(*n) && listings[2].contains(*n)) {
        let paths = dirs.clone().map(|d| d.join(name));
        let dims = paths
            .iter()
            .map(|p| image::image_dimensions(p).map_err(|e| format!("{}: {e}", p.display())))
            .collect::<std::result::Result<Vec<_>, _>>();
        match dims {
            Err(e) => problems.push(e),
            Ok(d) if d[0] != d[1] || d[0] != d[2] => problems.push(format!(
                "dimension mismatch for {name}: shadow {:?}, mask {:?}, free {:?}",
                d[0], d[1], d[2]
            )),
            Ok(_) => {}
        }
        let [shadow_path, mask_path, free_path] = paths;
        let id = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        triplets.push(DatasetTriplet {
            id,
            shadow_path,
            mask_path,
            free_path,
            split,
        });
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems.join("; ")));
    }
    Ok(triplets)
}

/// Lists both splits, train first, each sorted by file name.
pub fn ingest_dataset(root: impl AsRef<Path>) -> Result<Vec<DatasetTriplet>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", root.display())));
    }
    let mut all = ingest_split(root, Split::Train)?;
    all.extend(ingest_split(root, Split::Test)?);
    if all.is_empty() {
        log::warn!("no triplets found under {}", root.display());
    }
    Ok(all)
}

impl DatasetTriplet {
    pub fn load(&self) -> Result<Sample> {
        let shadow = load_image(&self.shadow_path)?;
        let mask = load_mask(&self.mask_path)?;
        let free = load_image(&self.free_path)?;
        if !shadow.same_dims(&free) || !mask.matches(&shadow) || shadow.channels() != 3 {
            return Err(Error::Dataset(format!(
                "triplet {} has inconsistent dimensions or channel counts",
                self.id
            )));
        }
        Ok(Sample {
            id: self.id.clone(),
            shadow,
            mask,
            free,
        })
    }
}

/// Loads a split, optionally resampling every triplet to `resolution`.
pub fn load_split(root: impl AsRef<Path>, split: Split, resolution: Option<(usize, usize)>) -> Result<Vec<Sample>> {
    ingest_split(root.as_ref(), split)?
        .iter()
        .map(|t| {
            let s = t.load()?;
            Ok(match resolution {
                Some((h, w)) => s.resized(h, w),
                None => s,
            })
        })
        .collect()
}
