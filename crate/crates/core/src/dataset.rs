//! Manifests (JSON lines) and deterministic corpus splits.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("duplicate path {0:?}")]
    DuplicatePath(String),
    #[error("split counts {counts:?} sum to {sum}, manifest has {len} entries")]
    CountMismatch {
        counts: [usize; 3],
        sum: usize,
        len: usize,
    },
    #[error("{}: cannot read directory ({detail})", .path.display())]
    UnreadableRoot { path: PathBuf, detail: String },
    #[error("manifest line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Speech,
    Ir,
    Noise,
}

impl std::str::FromStr for EntryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "speech" => Ok(EntryKind::Speech),
            "ir" => Ok(EntryKind::Ir),
            "noise" => Ok(EntryKind::Noise),
            other => Err(format!("unknown kind {other:?} (speech|ir|noise)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl ManifestEntry {
    pub fn new(id: impl Into<String>, path: impl AsRef<Path>, kind: EntryKind) -> Self {
        Self {
            id: id.into(),
            path: path.as_ref().to_string_lossy().into_owned(),
            kind,
            metadata: BTreeMap::new(),
        }
    }
}

/// Ordered list of entries with unique ids and paths.
///
/// Relative entry paths are resolved against the directory the manifest was
/// loaded from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, DatasetError> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(DatasetError::DuplicateId(e.id.clone()));
            }
            if !paths.insert(e.path.as_str()) {
                return Err(DatasetError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: None,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn with_base_dir(mut self, base: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(base.into());
        self
    }

    /// Filesystem location of an entry.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = PathBuf::from(&entry.path);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    /// Drop entries whose id is listed.
    pub fn exclude<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Manifest {
        let drop: HashSet<&str> = ids.into_iter().collect();
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| !drop.contains(e.id.as_str()))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self::from_jsonl(&text)?.with_base_dir(base))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Seeded shuffle, then contiguous partition into the three requested sizes.
/// Each part keeps the input's relative order.
pub fn split_manifest(
    m: &Manifest,
    counts: [usize; 3],
    seed: u64,
) -> Result<[Manifest; 3], DatasetError> {
    let sum: usize = counts.iter().sum();
    if sum != m.len() {
        return Err(DatasetError::CountMismatch {
            counts,
            sum,
            len: m.len(),
        });
    }
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut start = 0;
    let parts = counts.map(|n| {
        let mut idx = order[start..start + n].to_vec();
        start += n;
        idx.sort_unstable();
        Manifest {
            entries: idx.into_iter().map(|i| m.entries[i].clone()).collect(),
            base_dir: m.base_dir.clone(),
        }
    });
    Ok(parts)
}

fn is_wave(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav") || e.eq_ignore_ascii_case("wave"))
}

/// Recursively list WAVE files under `root`; ids are `/`-separated paths
/// relative to `root`, sorted lexicographically.
pub fn scan_directory(root: impl AsRef<Path>, kind: EntryKind) -> Result<Manifest, DatasetError> {
    let root = root.as_ref();
    std::fs::read_dir(root).map_err(|e| DatasetError::UnreadableRoot {
        path: root.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut found = Vec::new();
    for item in walkdir::WalkDir::new(root).follow_links(true) {
        let item = item.map_err(|e| DatasetError::UnreadableRoot {
            path: root.to_path_buf(),
            detail: e.to_string(),
        })?;
        if !item.file_type().is_file() || !is_wave(item.path()) {
            continue;
        }
        let rel = item
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under root");
        let id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        found.push(ManifestEntry::new(id, item.path(), kind));
    }
    found.sort_by(|a, b| a.id.cmp(&b.id));
    Manifest::new(found)
}

/// Relative output file for an item id: the id itself, with `.wav` appended
/// when it does not already end in it.
pub fn output_file_name(id: &str) -> PathBuf {
    let clean: PathBuf = Path::new(id)
        .components()
        .filter(|c| matches!(c, std::path::Component::Normal(_)))
        .collect();
    if is_wave(&clean) {
        clean
    } else {
        let mut s = clean.into_os_string();
        s.push(".wav");
        PathBuf::from(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| {
                    ManifestEntry::new(
                        format!("ir{i:04}"),
                        format!("irs/{i:04}.wav"),
                        EntryKind::Ir,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_of_1209_entries() {
        let m = manifest(1209);
        let [a, b, c] = split_manifest(&m, [773, 194, 242], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (773, 194, 242));
        let ids = |m: &Manifest| {
            m.entries()
                .iter()
                .map(|e| e.id.clone())
                .collect::<HashSet<_>>()
        };
        assert!(ids(&a).is_disjoint(&ids(&b)));
        assert!(ids(&a).is_disjoint(&ids(&c)));
        assert!(ids(&b).is_disjoint(&ids(&c)));
    }

    #[test]
    fn everything_in_first_part() {
        let m = manifest(20);
        let [a, b, c] = split_manifest(&m, [20, 0, 0], 9).unwrap();
        assert_eq!(a, m);
        assert!(b.is_empty() && c.is_empty());
    }

    #[test]
    fn split_is_seeded() {
        let m = manifest(100);
        assert_eq!(
            split_manifest(&m, [50, 30, 20], 3).unwrap(),
            split_manifest(&m, [50, 30, 20], 3).unwrap()
        );
        assert_ne!(
            split_manifest(&m, [50, 30, 20], 3).unwrap(),
            split_manifest(&m, [50, 30, 20], 4).unwrap()
        );
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(
            split_manifest(&manifest(10), [5, 5, 1], 0),
            Err(DatasetError::CountMismatch { sum: 11, .. })
        ));
    }

    #[test]
    fn duplicates_are_rejected() {
        let e = ManifestEntry::new("a", "x.wav", EntryKind::Speech);
        let mut f = e.clone();
        f.path = "y.wav".into();
        assert!(matches!(
            Manifest::new(vec![e.clone(), f]),
            Err(DatasetError::DuplicateId(_))
        ));
        let mut g = e.clone();
        g.id = "b".into();
        assert!(matches!(
            Manifest::new(vec![e, g]),
            Err(DatasetError::DuplicatePath(_))
        ));
    }

    #[test]
    fn scan_finds_wave_files_in_order() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("b/c")).unwrap();
        for f in [
            "z.wav",
            "a.WAV",
            "b/c/d.wav",
            "b/x.wav",
            "b/y.wav",
            "notes.txt",
            "b/readme.md",
        ] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let m = scan_directory(dir.path(), EntryKind::Noise).unwrap();
        let ids: Vec<&str> = m.entries().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a.WAV", "b/c/d.wav", "b/x.wav", "b/y.wav", "z.wav"]);
        assert_eq!(scan_directory(dir.path(), EntryKind::Noise).unwrap(), m);
    }

    #[test]
    fn scan_empty_and_missing() {
        let dir = tempdir().unwrap();
        assert!(scan_directory(dir.path(), EntryKind::Ir)
            .unwrap()
            .is_empty());
        assert!(matches!(
            scan_directory(dir.path().join("nope"), EntryKind::Ir),
            Err(DatasetError::UnreadableRoot { .. })
        ));
    }

    #[test]
    fn output_names() {
        assert_eq!(output_file_name("a/b.wav"), PathBuf::from("a/b.wav"));
        assert_eq!(output_file_name("utt-1"), PathBuf::from("utt-1.wav"));
        assert_eq!(output_file_name("../../etc/x"), PathBuf::from("etc/x.wav"));
    }

    proptest! {
        #[test]
        fn split_partitions_input(n in 0usize..200, a in 0usize..200, b in 0usize..200, seed: u64) {
            let a = a.min(n);
            let b = b.min(n - a);
            let m = manifest(n);
            let parts = split_manifest(&m, [a, b, n - a - b], seed).unwrap();
            let mut all: Vec<String> = parts.iter().flat_map(|p| p.entries().iter().map(|e| e.id.clone())).collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }

        #[test]
        fn jsonl_round_trip_is_byte_identical(n in 0usize..20, meta in proptest::collection::btree_map("[a-z]{1,6}", -1e6f64..1e6, 0..4)) {
            let mut m = manifest(n);
            for e in &mut m.entries {
                for (k, v) in &meta {
                    e.metadata.insert(k.clone(), (*v).into());
                }
            }
            let text = m.to_jsonl();
            let back = Manifest::from_jsonl(&text).unwrap();
            prop_assert_eq!(back.to_jsonl(), text);
        }
    }
}
