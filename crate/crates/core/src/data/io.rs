use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const AFT_MAGIC: &[u8; 4] = b"AFT1";

pub fn encode_features(features: &Tensor<f32>) -> Result<Vec<u8>> {
    if features.shape().len() != 2 {
        return Err(Error::shape("feature matrix must be T x C"));
    }
    let to_u32 = |n: usize| {
        u32::try_from(n).map_err(|_| Error::invalid(format!("dimension {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(12 + 4 * features.numel());
    out.extend_from_slice(AFT_MAGIC);
    out.extend_from_slice(&to_u32(features.rows())?.to_le_bytes());
    out.extend_from_slice(&to_u32(features.cols())?.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != AFT_MAGIC {
        return Err(Error::format(path, "missing AFT1 magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (t, c) = (word(4), word(8));
    let expected = t
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let payload = &bytes[12..];
    if payload.len() < expected {
        return Err(Error::format(
            path,
            format!("truncated payload: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", payload.len() - expected),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            format!("non-finite value at frame {}, channel {}", i / c, i % c),
        ));
    }
    Tensor::new(vec![t, c], data)
}

/// Writes an `AFT1` feature file.
pub fn save_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_features(features)?)?;
    Ok(())
}

/// Reads an `AFT1` feature file.
pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    decode_features(&fs::read(path)?, path)
}

/// Bijection between class names and ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "class name `{n}` is empty or has spaces"
                )));
            }
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Parses `<id> <name>` lines; ids must cover `0..K` exactly once.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (id, name) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Error::format(path, format!("line {}: expected `<id> <name>`", n + 1))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad id `{id}`", n + 1)))?;
            if entries.insert(id, name.trim().to_string()).is_some() {
                return Err(Error::format(
                    path,
                    format!("line {}: duplicate id {id}", n + 1),
                ));
            }
        }
        if entries.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::format(path, "class ids must be 0..K without gaps"));
        }
        Self::new(entries.into_values().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i} {n}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Resolves one name per line. A trailing empty line is allowed.
    pub fn parse_labels(&self, text: &str) -> Result<Vec<usize>> {
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        lines
            .iter()
            .enumerate()
            .map(|(n, line)| {
                let name = line.trim_end_matches('\r').trim();
                self.id(name).ok_or_else(|| Error::UnknownLabel {
                    line: n + 1,
                    name: name.to_string(),
                })
            })
            .collect()
    }

    pub fn labels_to_text(&self, labels: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &l in labels {
            let name = self
                .name(l)
                .ok_or_else(|| Error::invalid(format!("label id {l} has no name")))?;
            out.push_str(name);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn load_labels(path: &Path, map: &LabelMap) -> Result<Vec<usize>> {
    map.parse_labels(&fs::read_to_string(path)?)
}

pub fn save_labels(path: &Path, labels: &[usize], map: &LabelMap) -> Result<()> {
    fs::write(path, map.labels_to_text(labels)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub features: PathBuf,
    pub labels: PathBuf,
}

/// Dataset index; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub mapping: PathBuf,
    pub videos: Vec<ManifestVideo>,
    pub splits: BTreeMap<String, Vec<String>>,
}

/// Writes features, labels, the class mapping and `manifest.json` under
/// `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let map = LabelMap::new(dataset.class_names.clone())?;
    fs::create_dir_all(dir.join("features"))?;
    fs::create_dir_all(dir.join("labels"))?;
    map.save(&dir.join("mapping.txt"))?;
    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let features = PathBuf::from("features").join(format!("{}.aft", v.id));
        let labels = PathBuf::from("labels").join(format!("{}.txt", v.id));
        save_features(&dir.join(&features), &v.features)?;
        save_labels(&dir.join(&labels), &v.labels, &map)?;
        videos.push(ManifestVideo {
            id: v.id.clone(),
            features,
            labels,
        });
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.videos[i].id.clone()).collect();
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), ids(&dataset.train));
    splits.insert("test".to_string(), ids(&dataset.test));
    let manifest = Manifest {
        mapping: PathBuf::from("mapping.txt"),
        videos,
        splits,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Reads a dataset written by [`save_dataset`] or laid out the same way.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let map = LabelMap::load(&base.join(&manifest.mapping))?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut index = HashMap::new();
    for mv in &manifest.videos {
        let fpath = base.join(&mv.features);
        let features = load_features(&fpath)?;
        let labels = load_labels(&base.join(&mv.labels), &map)?;
        if labels.len() != features.rows() {
            return Err(Error::format(
                fpath,
                format!("{} frames but {} labels", features.rows(), labels.len()),
            ));
        }
        if index.insert(mv.id.clone(), videos.len()).is_some() {
            return Err(Error::format(
                manifest_path,
                format!("duplicate video id `{}`", mv.id),
            ));
        }
        videos.push(VideoRecord::new(mv.id.clone(), features, labels)?);
    }
    let split = |name: &str| -> Result<Vec<usize>> {
        manifest
            .splits
            .get(name)
            .map(|ids| {
                ids.iter()
                    .map(|id| {
                        index.get(id).copied().ok_or_else(|| {
                            Error::format(
                                manifest_path,
                                format!("split `{name}` names unknown video `{id}`"),
                            )
                        })
                    })
                    .collect()
            })
            .unwrap_or_else(|| Ok(Vec::new()))
    };
    Ok(Dataset {
        train: split("train")?,
        test: split("test")?,
        videos,
        class_names: map.names().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aft_header_and_truncation() {
        let mut bytes = b"AFT1".to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for i in 0..6 {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = decode_features(&bytes, Path::new("x")).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.row(2), &[4.0, 5.0]);
        assert_eq!(encode_features(&t).unwrap(), bytes);
        let short = &bytes[..bytes.len() - 4];
        let err = decode_features(short, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, Path::new("x")).is_err());
        let mut nan = bytes.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&nan, Path::new("x")).is_err());
    }

    #[test]
    fn label_text_round_trip() {
        let map = LabelMap::new(vec!["cut".into(), "mix".into(), "pour".into()]).unwrap();
        let labels = vec![0, 0, 2, 1];
        let text = map.labels_to_text(&labels).unwrap();
        assert_eq!(map.parse_labels(&text).unwrap(), labels);
        assert_eq!(map.parse_labels(text.trim_end()).unwrap(), labels);
        let bad = "cut\ncut\ncut\ncut\ncut\ncut\nstir\n";
        match map.parse_labels(bad) {
            Err(Error::UnknownLabel { line, name }) => {
                assert_eq!(line, 7);
                assert_eq!(name, "stir");
            }
            other => panic!("{other:?}"),
        }
        let parsed = LabelMap::parse(&map.to_text(), Path::new("m")).unwrap();
        assert_eq!(parsed, map);
        assert!(LabelMap::parse("0 a\n2 b\n", Path::new("m")).is_err());
        assert!(LabelMap::new(vec!["a".into(), "a".into()]).is_err());
    }
}
