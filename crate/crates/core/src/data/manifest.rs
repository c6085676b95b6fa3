//! Dataset manifests: one tab-separated record per item with the columns
//! `id path category instance_group domain split`, preceded by a header.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sketch,
    Photo,
    Edgemap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Sketch => "sketch",
            Domain::Photo => "photo",
            Domain::Edgemap => "edgemap",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DataError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub category: String,
    pub instance_group: String,
    pub domain: Domain,
    pub split: Split,
}

impl ManifestItem {
    pub fn is_photo_like(&self) -> bool {
        matches!(self.domain, Domain::Photo | Domain::Edgemap)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    /// Directory that item paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(items: Vec<ManifestItem>, root: impl Into<PathBuf>) -> Self {
        Self {
            items,
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        self.root.join(&item.path)
    }

    /// Sorted distinct category names.
    pub fn categories(&self) -> Vec<String> {
        self.items
            .iter()
            .map(|i| i.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn select(&self, photo_like: bool, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items
            .iter()
            .filter(move |i| i.split == split && (i.is_photo_like() == photo_like))
    }

    pub fn sketches(&self, split: Split) -> Vec<&ManifestItem> {
        self.select(false, split).collect()
    }

    pub fn photos(&self, split: Split) -> Vec<&ManifestItem> {
        self.select(true, split).collect()
    }

    /// Keeps only items whose category is not excluded.
    pub fn without_categories(&self, excluded: &[String]) -> Self {
        Self {
            items: self
                .items
                .iter()
                .filter(|i| !excluded.contains(&i.category))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for item in &self.items {
            for (field, v) in [
                ("id", &item.id),
                ("path", &item.path),
                ("category", &item.category),
                ("instance_group", &item.instance_group),
            ] {
                if v.is_empty() || v.contains(['\t', '\n', '\r']) {
                    return Err(DataError::Manifest(format!("item `{}` has an invalid {field} {v:?}", item.id)));
                }
            }
            if !ids.insert(item.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate id `{}`", item.id)));
            }
        }
        let mut photo_count: BTreeMap<&str, usize> = BTreeMap::new();
        for p in self.photos(Split::Train) {
            *photo_count.entry(&p.category).or_default() += 1;
        }
        for s in self.sketches(Split::Train) {
            if !photo_count.contains_key(s.category.as_str()) {
                return Err(DataError::Manifest(format!(
                    "category `{}` has training sketches but no training photos",
                    s.category
                )));
            }
        }
        let train_paths: HashSet<&str> = self.sketches(Split::Train).iter().map(|s| s.path.as_str()).collect();
        if let Some(v) = self
            .sketches(Split::Validation)
            .into_iter()
            .find(|v| train_paths.contains(v.path.as_str()))
        {
            return Err(DataError::Manifest(format!(
                "validation sketch `{}` reuses training file `{}`",
                v.id, v.path
            )));
        }
        Ok(())
    }

    pub fn write_tsv(&self, mut w: impl std::io::Write) -> Result<()> {
        let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        for item in &self.items {
            out.serialize(item).map_err(|e| DataError::Manifest(e.to_string()))?;
        }
        let bytes = out.into_inner().map_err(|e| DataError::Manifest(e.to_string()))?;
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_tsv(std::io::BufWriter::new(f))
    }

    pub fn read_tsv(r: impl std::io::Read, root: impl Into<PathBuf>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_reader(r);
        let mut items = Vec::new();
        for (i, rec) in rdr.deserialize::<ManifestItem>().enumerate() {
            let item = rec.map_err(|e| DataError::ManifestLine {
                line: i + 2,
                msg: e.to_string(),
            })?;
            items.push(item);
        }
        let m = Self::new(items, root);
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest; item paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::open(path)
            .map_err(|e| DataError::Manifest(format!("cannot open {}: {e}", path.display())))?;
        Self::read_tsv(std::io::BufReader::new(f), root)
    }

    /// Adapter for datasets laid out as `root/<category>/<file>`, such as
    /// the common sketch and photo benchmark distributions. Every file
    /// becomes its own instance group.
    pub fn from_category_dirs(root: impl AsRef<Path>, domain: Domain, split: Split, extensions: &[&str]) -> Result<Self> {
        let root = root.as_ref();
        let mut items = Vec::new();
        let mut cats: Vec<_> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .collect();
        cats.sort_by_key(|e| e.file_name());
        for cat in cats {
            let cname = cat.file_name().to_string_lossy().into_owned();
            let mut files: Vec<_> = std::fs::read_dir(cat.path())?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| extensions.iter().any(|e| e.eq_ignore_ascii_case(x)))
                })
                .collect();
            files.sort();
            for f in files {
                let stem = f.file_stem().unwrap_or_default().to_string_lossy();
                let id = format!("{domain}/{cname}/{stem}");
                let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
                items.push(ManifestItem {
                    instance_group: id.clone(),
                    id,
                    path: rel,
                    category: cname.clone(),
                    domain,
                    split,
                });
            }
        }
        Ok(Self::new(items, root))
    }
}
