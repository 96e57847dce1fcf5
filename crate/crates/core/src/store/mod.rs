//! Write-once, filesystem-backed artifact store.
//!
//! ```text
//! {root}/datasets/{dataset}/manifest.json
//! {root}/datasets/{dataset}/{stage}/{class}/{name}.{ext}
//! ```
//!
//! Keys are `dataset/class/stage/name`. A committed artifact is never
//! rewritten; `put` on an existing key is a [`Error::Conflict`].

pub mod rle;
pub mod tensor;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use tensor::TensorBlob;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Captions,
    Masks,
    Tensors,
    Segments,
    Matrices,
    Graphs,
    Reports,
    Steering,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Captions,
        Stage::Masks,
        Stage::Tensors,
        Stage::Segments,
        Stage::Matrices,
        Stage::Graphs,
        Stage::Reports,
        Stage::Steering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Captions => "captions",
            Stage::Masks => "masks",
            Stage::Tensors => "tensors",
            Stage::Segments => "segments",
            Stage::Matrices => "matrices",
            Stage::Graphs => "graphs",
            Stage::Reports => "reports",
            Stage::Steering => "steering",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown stage {s:?}")))
    }
}

/// Checks one path component of a key.
pub fn valid_component(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('.')
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '+' | '@' | '='))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArtifactKey {
    pub dataset: String,
    pub class: String,
    pub stage: Stage,
    pub name: String,
}

impl ArtifactKey {
    pub fn new(dataset: &str, class: &str, stage: Stage, name: &str) -> Result<Self> {
        for (what, part) in [("dataset", dataset), ("class", class), ("name", name)] {
            if !valid_component(part) {
                return Err(invalid(format!("invalid {what} component {part:?} in artifact key")));
            }
        }
        Ok(Self {
            dataset: dataset.into(),
            class: class.into(),
            stage,
            name: name.into(),
        })
    }
}

impl fmt::Display for ArtifactKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.dataset,
            self.class,
            self.stage.as_str(),
            self.name
        )
    }
}

impl FromStr for ArtifactKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let [dataset, class, stage, name] = parts[..] else {
            return Err(invalid(format!("artifact key {s:?} is not dataset/class/stage/name")));
        };
        ArtifactKey::new(dataset, class, stage.parse()?, name)
    }
}

/// Value that can be committed to the store.
pub trait Artifact: Sized {
    const EXT: &'static str;
    fn encode(&self) -> Result<Vec<u8>>;
    fn decode(bytes: &[u8]) -> Result<Self>;
}

impl Artifact for TensorBlob {
    const EXT: &'static str = "bin";

    fn encode(&self) -> Result<Vec<u8>> {
        Ok(self.to_bytes())
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        TensorBlob::from_bytes(bytes)
    }
}

/// JSON-encoded artifact. Types should use ordered maps so output is stable.
pub struct Json<T>(pub T);

impl<T: Serialize + DeserializeOwned> Artifact for Json<T> {
    const EXT: &'static str = "json";

    fn encode(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(&self.0)?;
        v.push(b'\n');
        Ok(v)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Json(serde_json::from_slice(bytes)?))
    }
}

pub struct ArtifactStore {
    root: PathBuf,
    writes: AtomicU64,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("datasets"))?;
        Ok(Self {
            root,
            writes: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of artifacts committed through this handle.
    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::SeqCst)
    }

    pub fn dataset_dir(&self, dataset: &str) -> PathBuf {
        self.root.join("datasets").join(dataset)
    }

    pub fn path_for(&self, key: &ArtifactKey, ext: &str) -> PathBuf {
        self.dataset_dir(&key.dataset)
            .join(key.stage.as_str())
            .join(&key.class)
            .join(format!("{}.{ext}", key.name))
    }

    pub fn exists<A: Artifact>(&self, key: &ArtifactKey) -> bool {
        self.path_for(key, A::EXT).is_file()
    }

    /// Commit `value` under `key`; the returned id is the key's string form.
    pub fn put<A: Artifact>(&self, key: &ArtifactKey, value: &A) -> Result<String> {
        let bytes = value.encode()?;
        self.write_once(&self.path_for(key, A::EXT), &bytes, &key.to_string())?;
        Ok(key.to_string())
    }

    /// Commit under the first free `{name}.v{n}` and return that id.
    pub fn put_versioned<A: Artifact>(&self, key: &ArtifactKey, value: &A) -> Result<String> {
        let bytes = value.encode()?;
        for n in 1u32.. {
            let k = ArtifactKey::new(&key.dataset, &key.class, key.stage, &format!("{}.v{n}", key.name))?;
            match self.write_once(&self.path_for(&k, A::EXT), &bytes, &k.to_string()) {
                Ok(()) => return Ok(k.to_string()),
                Err(Error::Conflict(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!("version space exhausted")
    }

    pub fn get<A: Artifact>(&self, id: &str) -> Result<A> {
        let key: ArtifactKey = id.parse()?;
        self.get_key(&key)
    }

    pub fn get_key<A: Artifact>(&self, key: &ArtifactKey) -> Result<A> {
        let path = self.path_for(key, A::EXT);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("artifact {key}")),
            _ => Error::Io(e),
        })?;
        A::decode(&bytes)
    }

    pub fn put_json<T: Serialize + DeserializeOwned + Clone>(&self, key: &ArtifactKey, value: &T) -> Result<String> {
        self.put(key, &Json(value.clone()))
    }

    pub fn get_json<T: Serialize + DeserializeOwned>(&self, key: &ArtifactKey) -> Result<T> {
        self.get_key::<Json<T>>(key).map(|j| j.0)
    }

    /// Keys under one dataset stage, sorted.
    pub fn list(&self, dataset: &str, stage: Stage) -> Result<Vec<ArtifactKey>> {
        let dir = self.dataset_dir(dataset).join(stage.as_str());
        let mut out = Vec::new();
        let Ok(classes) = std::fs::read_dir(&dir) else {
            return Ok(out);
        };
        for class in classes {
            let class = class?;
            if !class.file_type()?.is_dir() {
                continue;
            }
            let class_name = class.file_name().to_string_lossy().into_owned();
            for file in std::fs::read_dir(class.path())? {
                let name = file?.file_name().to_string_lossy().into_owned();
                if name.starts_with('.') {
                    continue;
                }
                if let Some((stem, _ext)) = name.rsplit_once('.') {
                    if let Ok(k) = ArtifactKey::new(dataset, &class_name, stage, stem) {
                        out.push(k);
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        Ok(out)
    }

    /// Whether anything besides the manifest has been committed.
    pub fn has_artifacts(&self, dataset: &str) -> Result<bool> {
        for stage in Stage::ALL {
            if !self.list(dataset, stage)?.is_empty() {
                return Ok(true);
            }
        }
        Ok(false)
    }

    pub fn list_datasets(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(self.root.join("datasets"))? {
            let entry = entry?;
            if entry.path().join("manifest.json").is_file() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn manifest_path(&self, dataset: &str) -> PathBuf {
        self.dataset_dir(dataset).join("manifest.json")
    }

    pub fn load_manifest<M: DeserializeOwned>(&self, dataset: &str) -> Result<M> {
        let path = self.manifest_path(dataset);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("dataset {dataset}")),
            _ => Error::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Write the manifest. Replacing an existing manifest is only allowed
    /// while no artifact has been committed under the dataset.
    pub fn save_manifest<M: Serialize>(&self, dataset: &str, manifest: &M) -> Result<bool> {
        if !valid_component(dataset) {
            return Err(invalid(format!("invalid dataset id {dataset:?}")));
        }
        let path = self.manifest_path(dataset);
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        if let Ok(existing) = std::fs::read(&path) {
            if existing == bytes {
                return Ok(false);
            }
            if self.has_artifacts(dataset)? {
                return Err(Error::Conflict(format!(
                    "manifest of dataset {dataset} is frozen once artifacts are committed"
                )));
            }
        }
        std::fs::create_dir_all(self.dataset_dir(dataset))?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(true)
    }

    fn write_once(&self, path: &Path, bytes: &[u8], id: &str) -> Result<()> {
        if path.exists() {
            return Err(Error::Conflict(id.to_string()));
        }
        let dir = path.parent().expect("artifact paths have a parent");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile_in(dir)?;
        tmp.1.write_all(bytes)?;
        tmp.1.sync_all()?;
        drop(tmp.1);
        // hard_link refuses to replace an existing file, which makes the
        // final commit atomic and first-writer-wins.
        let res = std::fs::hard_link(&tmp.0, path);
        let _ = std::fs::remove_file(&tmp.0);
        match res {
            Ok(()) => {
                self.writes.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Conflict(id.to_string())),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

fn tempfile_in(dir: &Path) -> Result<(PathBuf, std::fs::File)> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    loop {
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }
}
