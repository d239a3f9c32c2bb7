//! Studies, label semantics, pseudo-label merging and batching.

mod manifest;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

pub use manifest::{load_dataset, load_manifest, save_dataset, ManifestRecord};
pub use synthetic::{generate_synthetic, StudyTruth, SyntheticConfig, SyntheticTruth, Visibility};

use crate::error::{Error, Result};
use crate::losses::Target;
use crate::model::ViewImage;
use crate::tensor::StreamKey;

/// One entry of a study's label vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelValue {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
    Soft(f64),
}

impl LabelValue {
    pub fn soft(p: f64) -> Result<Self> {
        if p.is_finite() && (0.0..=1.0).contains(&p) {
            Ok(Self::Soft(p))
        } else {
            Err(Error::Domain {
                op: "label",
                detail: format!("soft label {p} outside [0, 1]"),
            })
        }
    }

    /// Training value and validity; uncertain and unmentioned entries are masked.
    pub fn as_target(self) -> (f64, bool) {
        match self {
            Self::Positive => (1.0, true),
            Self::Negative => (0.0, true),
            Self::Uncertain | Self::Unmentioned => (0.0, false),
            Self::Soft(p) => (p, true),
        }
    }

    pub fn is_positive(self) -> bool {
        self == Self::Positive
    }
}

impl fmt::Display for LabelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Positive => f.write_str("1"),
            Self::Negative => f.write_str("0"),
            Self::Uncertain => f.write_str("u"),
            Self::Unmentioned => f.write_str("m"),
            Self::Soft(p) => write!(f, "s:{p}"),
        }
    }
}

impl FromStr for LabelValue {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "1" => Ok(Self::Positive),
            "0" => Ok(Self::Negative),
            "u" => Ok(Self::Uncertain),
            "m" => Ok(Self::Unmentioned),
            t => match t.strip_prefix("s:").map(str::parse::<f64>) {
                Some(Ok(p)) => Self::soft(p).map_err(|e| e.to_string()),
                _ => Err(format!("bad label token {t:?}")),
            },
        }
    }
}

pub fn parse_labels(s: &str) -> std::result::Result<Vec<LabelValue>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_labels(labels: &[LabelValue]) -> String {
    labels.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub views: Vec<ViewImage>,
    pub labels: Vec<LabelValue>,
    pub source: String,
}

impl Study {
    pub fn target(&self) -> Target {
        let (y, mask) = self.labels.iter().map(|l| l.as_target()).unzip();
        Target { y, mask }
    }

    /// Binary evaluation labels: positive is 1, everything else 0.
    pub fn eval_labels(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.is_positive() as u8).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub studies: Vec<Study>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, studies: Vec<Study>) -> Result<Self> {
        let c = class_names.len();
        for s in &studies {
            if s.labels.len() != c {
                return Err(Error::Contract(format!(
                    "study {} has {} labels, dataset has {c} classes",
                    s.study_id,
                    s.labels.len()
                )));
            }
            if s.views.is_empty() {
                return Err(Error::Contract(format!("study {} has no views", s.study_id)));
            }
        }
        Ok(Self {
            class_names,
            studies,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.studies.iter().map(|s| s.views.len()).sum()
    }

    /// Seeded split into (train, validation).
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction {val_fraction} not in [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut StreamKey::new(seed, "split", 0).rng());
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val, train) = idx.split_at(n_val);
        let pick = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            Dataset {
                class_names: self.class_names.clone(),
                studies: ids.iter().map(|&i| self.studies[i].clone()).collect(),
            }
        };
        Ok((pick(train), pick(val)))
    }

    /// Positive counts per class (used for head/medium/tail grouping).
    pub fn positive_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.studies {
            for (c, l) in counts.iter_mut().zip(&s.labels) {
                *c += l.is_positive() as usize;
            }
        }
        counts
    }

    pub fn targets(&self) -> Vec<Target> {
        self.studies.iter().map(Study::target).collect()
    }

    /// The same studies with every label unmentioned.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            studies: self
                .studies
                .iter()
                .map(|s| Study {
                    labels: vec![LabelValue::Unmentioned; s.labels.len()],
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Concatenation of two datasets over the same classes.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        if self.class_names != other.class_names {
            return Err(Error::Contract("cannot join datasets with different classes".into()));
        }
        let mut studies = self.studies.clone();
        studies.extend(other.studies.iter().cloned());
        Ok(Dataset {
            class_names: self.class_names.clone(),
            studies,
        })
    }
}

/// Which internal classes each external class covers.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassOverlapMap {
    internal: usize,
    map: Vec<Vec<usize>>,
}

impl ClassOverlapMap {
    /// `map[e]` lists the internal classes of external class `e` (0, 1 or 2 entries).
    pub fn new(internal: usize, map: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; internal];
        for (e, targets) in map.iter().enumerate() {
            if targets.len() > 2 {
                return Err(Error::Config(format!(
                    "external class {e} maps to {} internal classes; at most 2 allowed",
                    targets.len()
                )));
            }
            for &i in targets {
                if i >= internal {
                    return Err(Error::Config(format!("external class {e} maps to unknown class {i}")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("internal class {i} is covered twice")));
                }
            }
        }
        Ok(Self { internal, map })
    }

    pub fn identity(classes: usize) -> Self {
        Self {
            internal: classes,
            map: (0..classes).map(|i| vec![i]).collect(),
        }
    }

    /// No external labels at all.
    pub fn unlabeled(classes: usize) -> Self {
        Self {
            internal: classes,
            map: Vec::new(),
        }
    }

    pub fn internal_classes(&self) -> usize {
        self.internal
    }

    pub fn external_classes(&self) -> usize {
        self.map.len()
    }

    pub fn has_pairs(&self) -> bool {
        self.map.iter().any(|m| m.len() == 2)
    }

    /// Whether every internal class is covered by some external class.
    pub fn is_full(&self) -> bool {
        self.map.iter().map(Vec::len).sum::<usize>() == self.internal
    }
}

/// Combine a study's own labels with teacher probabilities.
///
/// Known positives and negatives of overlapping classes are kept. Everything
/// else becomes the teacher probability. A positive paired class gives a hard
/// 1 to the member with the higher teacher probability (lower index on ties)
/// and the teacher probability to the other; a negative pair gives 0 to both.
pub fn merge_pseudo_labels(
    labels: &[LabelValue],
    teacher: &[f64],
    overlap: &ClassOverlapMap,
) -> Result<Vec<LabelValue>> {
    if teacher.len() != overlap.internal {
        return Err(Error::Contract(format!(
            "teacher gave {} probabilities, expected {}",
            teacher.len(),
            overlap.internal
        )));
    }
    if labels.len() != overlap.map.len() {
        return Err(Error::Contract(format!(
            "study has {} labels but the overlap map covers {} external classes",
            labels.len(),
            overlap.map.len()
        )));
    }
    let mut out = teacher
        .iter()
        .map(|&p| LabelValue::soft(p))
        .collect::<Result<Vec<_>>>()?;
    for (label, targets) in labels.iter().zip(&overlap.map) {
        match (targets.as_slice(), label) {
            (&[i], LabelValue::Positive | LabelValue::Negative) => out[i] = *label,
            (&[i], LabelValue::Soft(p)) => out[i] = LabelValue::Soft(*p),
            (&[i, j], LabelValue::Positive) => {
                let (lo, hi) = (i.min(j), i.max(j));
                let winner = if teacher[hi] > teacher[lo] { hi } else { lo };
                out[winner] = LabelValue::Positive;
            }
            (&[i, j], LabelValue::Negative) => {
                out[i] = LabelValue::Negative;
                out[j] = LabelValue::Negative;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// One mini-batch: study indices and the views retained for each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub studies: Vec<usize>,
    pub views: Vec<Vec<usize>>,
}

impl Batch {
    pub fn real_view_counts(&self) -> Vec<usize> {
        self.views.iter().map(Vec::len).collect()
    }
}

/// Shuffled batches for one epoch; studies with more than `max_views`
/// views keep a uniform sample of `max_views` of them.
pub fn make_batches(
    view_counts: &[usize],
    batch_size: usize,
    max_views: usize,
    key: StreamKey,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_views == 0 {
        return Err(Error::Config("batch_size and max_views must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..view_counts.len()).collect();
    order.shuffle(&mut key.child("order").rng());
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch {
            studies: chunk.to_vec(),
            views: chunk
                .iter()
                .map(|&s| subsample_views(view_counts[s], max_views, key.child("views").child_index(s as u64)))
                .collect(),
        })
        .collect())
}

/// Indices of the views kept for a study with `n0` views.
pub fn subsample_views(n0: usize, max_views: usize, key: StreamKey) -> Vec<usize> {
    if n0 <= max_views {
        return (0..n0).collect();
    }
    let mut v = index::sample(&mut key.rng(), n0, max_views).into_vec();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use LabelValue::*;

    #[test]
    fn label_tokens_round_trip() {
        let v = parse_labels("1,0,u,m,s:0.25").unwrap();
        assert_eq!(v, vec![Positive, Negative, Uncertain, Unmentioned, Soft(0.25)]);
        assert_eq!(format_labels(&v), "1,0,u,m,s:0.25");
        assert!(parse_labels("1,x").is_err());
        assert!(parse_labels("s:1.5").is_err());
        assert_eq!(parse_labels("").unwrap(), vec![]);
    }

    #[test]
    fn merge_keeps_hard_labels() {
        let labels = vec![Positive, Negative, Positive];
        let out = merge_pseudo_labels(&labels, &[0.1, 0.9, 0.5], &ClassOverlapMap::identity(3)).unwrap();
        assert_eq!(out, labels);
    }

    #[test]
    fn merge_paired_and_passthrough() {
        // external: [pair(0,1), single 2]; internal class 3 not covered
        let map = ClassOverlapMap::new(4, vec![vec![0, 1], vec![2]]).unwrap();
        let out = merge_pseudo_labels(&[Positive, Unmentioned], &[0.7, 0.4, 0.23, 0.6], &map).unwrap();
        assert_eq!(out, vec![Positive, Soft(0.4), Soft(0.23), Soft(0.6)]);
        let out = merge_pseudo_labels(&[Negative, Negative], &[0.7, 0.4, 0.23, 0.6], &map).unwrap();
        assert_eq!(out, vec![Negative, Negative, Negative, Soft(0.6)]);
        assert!(merge_pseudo_labels(&[Negative, Negative], &[0.7], &map).is_err());
    }

    #[test]
    fn overlap_validation() {
        assert!(ClassOverlapMap::new(2, vec![vec![0, 1, 1]]).is_err());
        assert!(ClassOverlapMap::new(2, vec![vec![0], vec![0]]).is_err());
        assert!(ClassOverlapMap::new(2, vec![vec![5]]).is_err());
    }

    #[test]
    fn batches_partition_and_cap() {
        let counts = vec![6, 1, 2, 4, 3];
        let key = StreamKey::new(3, "b", 0);
        let b = make_batches(&counts, 2, 4, key).unwrap();
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.studies.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        for batch in &b {
            for (s, v) in batch.studies.iter().zip(&batch.views) {
                assert_eq!(v.len(), counts[*s].min(4));
            }
        }
        assert_eq!(b, make_batches(&counts, 2, 4, key).unwrap());
        assert!(make_batches(&counts, 0, 4, key).is_err());
    }
}
