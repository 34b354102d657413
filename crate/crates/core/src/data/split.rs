use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::image::{decode_image, Image};
use super::synthetic::SyntheticSource;
use crate::error::{BmlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Base,
    Val,
    Novel,
}

impl SplitRole {
    pub const ALL: [SplitRole; 3] = [SplitRole::Base, SplitRole::Val, SplitRole::Novel];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::Base => "base",
            SplitRole::Val => "val",
            SplitRole::Novel => "novel",
        }
    }

    /// Directory names accepted for this role, canonical name first.
    fn dir_names(self) -> &'static [&'static str] {
        match self {
            SplitRole::Base => &["base", "train"],
            SplitRole::Val => &["val", "validation"],
            SplitRole::Novel => &["novel", "test"],
        }
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitRole {
    type Err = BmlError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        SplitRole::ALL
            .into_iter()
            .find(|r| r.dir_names().contains(&lower.as_str()))
            .ok_or_else(|| BmlError::Dataset(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Arc<Image>,
}

/// One role's worth of classes and their images.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub role: SplitRole,
    /// Class identifiers in lexicographic order; the index is the class label.
    pub classes: Vec<String>,
    pub images: Vec<Vec<ImageRecord>>,
    pub image_size: usize,
}

impl DatasetSplit {
    pub fn empty(name: impl Into<String>, role: SplitRole, image_size: usize) -> Self {
        Self {
            name: name.into(),
            role,
            classes: Vec::new(),
            images: Vec::new(),
            image_size,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_images(&self) -> usize {
        self.images.iter().map(Vec::len).sum()
    }

    pub fn min_images_per_class(&self) -> usize {
        self.images.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.images.len() {
            return Err(BmlError::Dataset(format!(
                "split `{}`: {} classes but {} image lists",
                self.name,
                self.classes.len(),
                self.images.len()
            )));
        }
        for (class, imgs) in self.classes.iter().zip(&self.images) {
            if imgs.is_empty() {
                return Err(BmlError::Dataset(format!("class `{class}` in split `{}` is empty", self.name)));
            }
            for rec in imgs {
                let (h, w, c) = rec.pixels.dim();
                if h != self.image_size || w != self.image_size || c != 3 {
                    return Err(BmlError::Dataset(format!(
                        "image `{}` has shape {h}x{w}x{c}, split expects {s}x{s}x3",
                        rec.id,
                        s = self.image_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The three disjoint splits of a benchmark.
#[derive(Debug, Clone)]
pub struct Splits {
    pub base: DatasetSplit,
    pub val: DatasetSplit,
    pub novel: DatasetSplit,
}

impl Splits {
    pub fn get(&self, role: SplitRole) -> &DatasetSplit {
        match role {
            SplitRole::Base => &self.base,
            SplitRole::Val => &self.val,
            SplitRole::Novel => &self.novel,
        }
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, SplitRole> = BTreeMap::new();
        for role in SplitRole::ALL {
            for class in &self.get(role).classes {
                if let Some(prev) = owner.insert(class, role) {
                    return Err(BmlError::Dataset(format!(
                        "class `{class}` appears in both {prev} and {role} splits"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads a `class,split` manifest. A header row is optional.
fn read_manifest(path: &Path) -> Result<BTreeMap<String, SplitRole>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| BmlError::Dataset(format!("manifest {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| BmlError::Dataset(format!("manifest {}: {e}", path.display())))?;
        if row.len() != 2 {
            return Err(BmlError::Dataset(format!("manifest line {}: expected `class,split`", i + 1)));
        }
        if i == 0 && &row[0] == "class" && &row[1] == "split" {
            continue;
        }
        let role: SplitRole = row[1].parse()?;
        if let Some(prev) = map.insert(row[0].to_string(), role) {
            if prev != role {
                return Err(BmlError::Dataset(format!(
                    "class `{}` appears in both {prev} and {role} splits",
                    &row[0]
                )));
            }
        }
    }
    Ok(map)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::fs::DirEntry>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn load_split_dir(dir: &Path, role: SplitRole, image_size: usize) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::empty(role.as_str(), role, image_size);
    for entry in sorted_entries(dir)? {
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let class = entry.file_name().to_string_lossy().into_owned();
        let mut records = Vec::new();
        for file in sorted_entries(&entry.path())? {
            let path = file.path();
            if !is_image_file(&path) {
                continue;
            }
            let pixels = decode_image(&path, image_size)?;
            records.push(ImageRecord {
                id: format!("{role}/{class}/{}", file.file_name().to_string_lossy()),
                pixels: Arc::new(pixels),
            });
        }
        if records.is_empty() {
            return Err(BmlError::Dataset(format!("class `{class}` in {role} split has no images")));
        }
        split.classes.push(class);
        split.images.push(records);
    }
    Ok(split)
}

/// Loads `root/<split>/<class>/<image>` into base/val/novel splits.
///
/// Split directories may also be named `train`/`validation`/`test`. Without a
/// manifest, absent split directories yield empty splits (at least one must
/// exist). With a manifest, every split it names must exist on disk and the
/// directory layout must agree with it class by class.
pub fn load_dataset(root: &Path, manifest: Option<&Path>, image_size: usize) -> Result<Splits> {
    if image_size == 0 {
        return Err(BmlError::invalid("image size must be positive"));
    }
    if !root.is_dir() {
        return Err(BmlError::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let manifest = manifest.map(read_manifest).transpose()?;

    let mut loaded: BTreeMap<SplitRole, DatasetSplit> = BTreeMap::new();
    for role in SplitRole::ALL {
        let dir = role.dir_names().iter().map(|n| root.join(n)).find(|p| p.is_dir());
        let required = manifest.as_ref().is_some_and(|m| m.values().any(|&r| r == role));
        match dir {
            Some(dir) => {
                loaded.insert(role, load_split_dir(&dir, role, image_size)?);
            }
            None if required => {
                return Err(BmlError::Dataset(format!(
                    "missing split directory `{}` under {}",
                    role.as_str(),
                    root.display()
                )))
            }
            None => {}
        }
    }
    if loaded.is_empty() {
        return Err(BmlError::Dataset(format!("no split directories under {}", root.display())));
    }

    let take = |loaded: &mut BTreeMap<SplitRole, DatasetSplit>, role| {
        loaded.remove(&role).unwrap_or_else(|| DatasetSplit::empty(role.as_str(), role, image_size))
    };
    let splits = Splits {
        base: take(&mut loaded, SplitRole::Base),
        val: take(&mut loaded, SplitRole::Val),
        novel: take(&mut loaded, SplitRole::Novel),
    };
    splits.check_disjoint()?;

    if let Some(manifest) = manifest {
        let mut on_disk = BTreeSet::new();
        for role in SplitRole::ALL {
            for class in &splits.get(role).classes {
                on_disk.insert(class.as_str());
                match manifest.get(class) {
                    Some(&r) if r == role => {}
                    Some(&r) => {
                        return Err(BmlError::Dataset(format!(
                            "class `{class}` is under {role} but the manifest assigns it to {r}"
                        )))
                    }
                    None => return Err(BmlError::Dataset(format!("class `{class}` ({role}) is not in the manifest"))),
                }
            }
        }
        if let Some((class, role)) = manifest.iter().find(|(c, _)| !on_disk.contains(c.as_str())) {
            return Err(BmlError::Dataset(format!("manifest class `{class}` ({role}) has no directory")));
        }
    }
    Ok(splits)
}

/// Resolves a dataset source: a `synthetic://` URI or a directory path. A
/// `manifest.csv` inside the directory is used when present.
pub fn load_source(source: &str, image_size: usize) -> Result<Splits> {
    if source.starts_with("synthetic://") {
        let synthetic: SyntheticSource = source.parse()?;
        return synthetic.build();
    }
    let root = Path::new(source);
    let manifest = root.join("manifest.csv");
    load_dataset(root, manifest.is_file().then_some(manifest.as_path()), image_size)
}
