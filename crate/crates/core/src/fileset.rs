//! In-memory file trees keyed by `/`-separated relative paths.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use walkdir::WalkDir;

/// A set of files: relative path -> contents.
///
/// Paths always use `/` as separator and never start with `/` or contain
/// `..` components.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileSet {
    files: BTreeMap<String, Vec<u8>>,
}

impl FileSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load every regular file under `root`. Hidden bookkeeping files
    /// (names starting with `.pkl`) are skipped.
    pub fn load_dir(root: &Path) -> io::Result<Self> {
        let meta = fs::metadata(root)?;
        if !meta.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} is not a directory", root.display()),
            ));
        }
        let mut files = BTreeMap::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(io::Error::other)?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).expect("walkdir stays under root");
            let key = rel_to_key(rel)?;
            if key.split('/').any(|c| c.starts_with(".pkl")) {
                continue;
            }
            files.insert(key, fs::read(entry.path())?);
        }
        Ok(Self { files })
    }

    /// Write all files under `root`, creating directories as needed.
    /// Existing files not in the set are left alone.
    pub fn write_dir(&self, root: &Path) -> io::Result<()> {
        fs::create_dir_all(root)?;
        for (key, bytes) in &self.files {
            let path = root.join(key_to_rel(key));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }

    pub fn insert(&mut self, path: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Option<Vec<u8>> {
        self.files.insert(normalize_key(&path.into()), bytes.into())
    }

    pub fn remove(&mut self, path: &str) -> Option<Vec<u8>> {
        self.files.remove(path)
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn get_str(&self, path: &str) -> Option<&str> {
        self.get(path).and_then(|b| std::str::from_utf8(b).ok())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.files.contains_key(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.files.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Sum of file sizes in bytes.
    pub fn total_bytes(&self) -> u64 {
        self.files.values().map(|v| v.len() as u64).sum()
    }

    pub fn into_inner(self) -> BTreeMap<String, Vec<u8>> {
        self.files
    }
}

impl FromIterator<(String, Vec<u8>)> for FileSet {
    fn from_iter<I: IntoIterator<Item = (String, Vec<u8>)>>(iter: I) -> Self {
        let mut set = FileSet::new();
        for (k, v) in iter {
            set.insert(k, v);
        }
        set
    }
}

impl From<BTreeMap<String, Vec<u8>>> for FileSet {
    fn from(files: BTreeMap<String, Vec<u8>>) -> Self {
        files.into_iter().collect()
    }
}

fn normalize_key(key: &str) -> String {
    key.split(['/', '\\'])
        .filter(|c| !c.is_empty() && *c != ".")
        .collect::<Vec<_>>()
        .join("/")
}

fn rel_to_key(rel: &Path) -> io::Result<String> {
    let mut parts = Vec::new();
    for comp in rel.components() {
        match comp {
            Component::Normal(os) => parts.push(
                os.to_str()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "non utf-8 path"))?
                    .to_owned(),
            ),
            Component::CurDir => {}
            _ => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("unsupported path component in {}", rel.display()),
                ))
            }
        }
    }
    Ok(parts.join("/"))
}

/// Convert a file-set key back to a relative filesystem path. `..` and
/// absolute components are dropped so a key can never escape its root.
pub fn key_to_rel(key: &str) -> PathBuf {
    key.split('/').filter(|c| !c.is_empty() && *c != "." && *c != "..").collect()
}
