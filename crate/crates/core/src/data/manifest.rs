//! Line-oriented study manifests and the on-disk dataset layout.
//!
//! A saved dataset directory holds `manifest.jsonl`, a raw little-endian f64
//! blob `images.bin` and `index.json` mapping image ids to blob ranges.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{format_labels, parse_labels, Dataset, Study};
use crate::error::{Error, Result};
use crate::model::{ViewImage, ViewLabel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_index: Option<usize>,
    pub view: ViewLabel,
    pub image: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobIndex {
    class_names: Vec<String>,
    image_shape: Vec<usize>,
    /// id → (offset in values, value count)
    entries: BTreeMap<String, (usize, usize)>,
}

const MANIFEST: &str = "manifest.jsonl";
const BLOB: &str = "images.bin";
const INDEX: &str = "index.json";

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

struct ImageSource {
    dir: PathBuf,
    shape: Vec<usize>,
    blob: Option<(BlobIndex, Vec<u8>)>,
}

impl ImageSource {
    fn resolve(&mut self, image: &str) -> std::result::Result<Tensor, String> {
        let n: usize = self.shape.iter().product();
        if let Some(id) = image.strip_prefix("synthetic:") {
            if self.blob.is_none() {
                let index: BlobIndex = serde_json::from_slice(
                    &std::fs::read(self.dir.join(INDEX)).map_err(|e| format!("{INDEX}: {e}"))?,
                )
                .map_err(|e| format!("{INDEX}: {e}"))?;
                let blob = std::fs::read(self.dir.join(BLOB)).map_err(|e| format!("{BLOB}: {e}"))?;
                self.blob = Some((index, blob));
            }
            let (index, blob) = self.blob.as_ref().expect("loaded above");
            let &(off, len) = index
                .entries
                .get(id)
                .ok_or_else(|| format!("image id {id:?} not in {INDEX}"))?;
            if len != n {
                return Err(format!("image {id:?} has {len} values, expected {n}"));
            }
            let bytes = blob
                .get(off * 8..(off + len) * 8)
                .ok_or_else(|| format!("image {id:?} lies outside {BLOB}"))?;
            Tensor::new(&self.shape, read_f64s(bytes)).map_err(|e| e.to_string())
        } else {
            let path = self.dir.join(image);
            let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if bytes.len() != n * 8 {
                return Err(format!(
                    "{}: expected {} bytes of little-endian f64, found {}",
                    path.display(),
                    n * 8,
                    bytes.len()
                ));
            }
            Tensor::new(&self.shape, read_f64s(&bytes)).map_err(|e| e.to_string())
        }
    }
}

/// Read a manifest; images are `[H, W, C]` given by `image_shape`.
pub fn load_manifest(path: &Path, image_shape: &[usize]) -> Result<Vec<Study>> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut source = ImageSource {
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        shape: image_shape.to_vec(),
        blob: None,
    };
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (Study, Vec<usize>)> = HashMap::new();
    let mut seen: HashSet<(String, usize)> = HashSet::new();
    let mut classes: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: name.clone(),
            line: line_no,
            msg,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let labels = parse_labels(&rec.labels).map_err(&err)?;
        match classes {
            None => classes = Some(labels.len()),
            Some(c) if c != labels.len() => {
                return Err(err(format!("{} labels, earlier lines have {c}", labels.len())))
            }
            _ => {}
        }
        let pixels = source.resolve(&rec.image).map_err(&err)?;
        let entry = grouped.entry(rec.study_id.clone()).or_insert_with(|| {
            order.push(rec.study_id.clone());
            (
                Study {
                    study_id: rec.study_id.clone(),
                    views: Vec::new(),
                    labels: labels.clone(),
                    source: rec.source.clone().unwrap_or_default(),
                },
                Vec::new(),
            )
        });
        let view_index = rec.view_index.unwrap_or(entry.1.len());
        if !seen.insert((rec.study_id.clone(), view_index)) {
            return Err(err(format!(
                "duplicate view {view_index} for study {}",
                rec.study_id
            )));
        }
        if entry.0.labels != labels {
            return Err(err(format!("labels disagree across views of study {}", rec.study_id)));
        }
        entry.0.views.push(ViewImage::new(pixels, rec.view));
        entry.1.push(view_index);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (mut study, idx) = grouped.remove(&id).expect("grouped above");
            let mut pairs: Vec<(usize, ViewImage)> = idx.into_iter().zip(study.views).collect();
            pairs.sort_by_key(|(i, _)| *i);
            study.views = pairs.into_iter().map(|(_, v)| v).collect();
            study
        })
        .collect())
}

/// Write `dataset` to `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shape = dataset
        .studies
        .first()
        .map(|s| s.views[0].pixels.shape().to_vec())
        .unwrap_or_default();
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = BTreeMap::new();
    let mut offset = 0usize;
    for s in &dataset.studies {
        for (vi, v) in s.views.iter().enumerate() {
            if v.pixels.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "study {} view {vi} has shape {:?}, dataset uses {:?}",
                    s.study_id,
                    v.pixels.shape(),
                    shape
                )));
            }
            let id = format!("{}/{vi}", s.study_id);
            for x in v.pixels.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            entries.insert(id.clone(), (offset, v.pixels.numel()));
            offset += v.pixels.numel();
            let rec = ManifestRecord {
                study_id: s.study_id.clone(),
                view_index: Some(vi),
                view: v.view,
                image: format!("synthetic:{id}"),
                labels: format_labels(&s.labels),
                source: (!s.source.is_empty()).then(|| s.source.clone()),
            };
            writeln!(manifest, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    manifest.flush()?;
    std::fs::write(dir.join(BLOB), blob)?;
    let index = BlobIndex {
        class_names: dataset.class_names.clone(),
        image_shape: shape,
        entries,
    };
    std::fs::write(dir.join(INDEX), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Read a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index: BlobIndex = serde_json::from_slice(&std::fs::read(dir.join(INDEX))?)?;
    let studies = load_manifest(&dir.join(MANIFEST), &index.image_shape)?;
    Dataset::new(index.class_names, studies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelValue;

    #[test]
    fn parses_two_view_study_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.bin");
        std::fs::write(&img, [0u8; 4 * 8]).unwrap();
        let m = dir.path().join("m.jsonl");
        std::fs::write(
            &m,
            concat!(
                r#"{"study_id":"x","view":"frontal","image":"a.bin","labels":"1,0,u,m,s:0.5"}"#,
                "\n\n",
                r#"{"study_id":"x","view":"lateral","image":"a.bin","labels":"1,0,u,m,s:0.5"}"#,
                "\n"
            ),
        )
        .unwrap();
        let s = load_manifest(&m, &[2, 2, 1]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].views.len(), 2);
        assert_eq!(s[0].labels[2], LabelValue::Uncertain);

        std::fs::write(&m, r#"{"study_id":"x","view":"frontal","image":"a.bin","labels":"1","extra":1}"#).unwrap();
        match load_manifest(&m, &[2, 2, 1]).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("{e}"),
        }
        let dup = concat!(
            r#"{"study_id":"x","view_index":0,"view":"frontal","image":"a.bin","labels":"1"}"#,
            "\n",
            r#"{"study_id":"x","view_index":0,"view":"frontal","image":"a.bin","labels":"1"}"#
        );
        std::fs::write(&m, dup).unwrap();
        match load_manifest(&m, &[2, 2, 1]).unwrap_err() {
            Error::Parse { line, msg, .. } => assert!(line == 2 && msg.contains("duplicate")),
            e => panic!("{e}"),
        }
        std::fs::write(&m, "").unwrap();
        assert!(load_manifest(&m, &[2, 2, 1]).unwrap().is_empty());
    }
}
