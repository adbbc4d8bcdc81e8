//! Dataset ingestion: a directory of class folders becomes a manifest.
//!
//! Two layouts are accepted. The classic layout keeps all images directly in
//! the class folder and the whole class lands in the train split:
//!
//! ```text
//! root/
//!   sedan/      img_000.pgm ...
//!   truck/      img_000.pgm ...
//! ```
//!
//! The split layout nests `train/`, `val/` and `test/` under each class;
//! missing split folders are simply empty. The root is treated as split
//! layout as soon as any class folder contains a `train` subdirectory.
//!
//! Class ids are deterministic: known class names sorted ascending get
//! `0..`, then the reserved unknown classes (sorted) get the highest ids,
//! so known ids form a contiguous prefix. Images within a split are sorted
//! by file name.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Reserved directory name for the first holdout class.
pub const UNKNOWN_HEAVY: &str = "unknown_heavy";
/// Reserved directory name for the second holdout class.
pub const UNKNOWN_LIGHT: &str = "unknown_light";

/// One class: its display name and per-split image paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassManifest {
    pub name: String,
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl ClassManifest {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Indexed by class id; known classes first, unknowns last.
    pub classes: Vec<ClassManifest>,
    /// Whether the root used train/val/test subdirectories.
    pub split_layout: bool,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Ids of the reserved unknown classes (always the highest ids).
    pub fn unknown_ids(&self) -> BTreeSet<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| is_unknown_name(&c.name))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of known classes (ids `0..num_known`).
    pub fn num_known(&self) -> usize {
        self.classes.iter().filter(|c| !is_unknown_name(&c.name)).count()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

fn is_unknown_name(name: &str) -> bool {
    name == UNKNOWN_HEAVY || name == UNKNOWN_LIGHT
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase()
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm") | Some("ppm")
    )
}

/// Sorted image files directly inside `dir`.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image_file(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scan `root` and build the manifest.
///
/// Errors: [`Error::EmptyDataset`] when no class directories exist,
/// [`Error::EmptyClassDir`] when a class contributes zero images across all
/// splits, [`Error::DuplicateClass`] when two directory names collide after
/// trimming and lowercasing.
pub fn ingest_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            dirs.push((name, path));
        }
    }
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }

    let mut seen = BTreeSet::new();
    for (name, _) in &dirs {
        if !seen.insert(normalize(name)) {
            return Err(Error::DuplicateClass(name.clone()));
        }
    }

    // Known classes sorted first, unknowns sorted after, so unknown classes
    // always take the highest ids.
    dirs.sort_by(|a, b| {
        (is_unknown_name(&normalize(&a.0)), normalize(&a.0))
            .cmp(&(is_unknown_name(&normalize(&b.0)), normalize(&b.0)))
    });

    let split_layout = dirs.iter().any(|(_, path)| path.join("train").is_dir());

    let mut classes = Vec::with_capacity(dirs.len());
    for (name, path) in dirs {
        let (train, val, test) = if split_layout {
            let split = |s: &str| -> Result<Vec<PathBuf>> {
                let dir = path.join(s);
                if dir.is_dir() { list_images(&dir) } else { Ok(Vec::new()) }
            };
            (split("train")?, split("val")?, split("test")?)
        } else {
            (list_images(&path)?, Vec::new(), Vec::new())
        };
        let class = ClassManifest { name, train, val, test };
        if class.total() == 0 {
            return Err(Error::EmptyClassDir(path));
        }
        classes.push(class);
    }

    Ok(DatasetManifest { root: root.to_path_buf(), classes, split_layout })
}

// ---------------------------------------------------------------------------
