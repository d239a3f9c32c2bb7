//! Ranking metrics and long-tail grouping.
//!
//! AP is the information-retrieval form: rank studies by descending score
//! (ties broken by original index), then average the precision at the rank
//! of every positive. AUROC is the Mann-Whitney statistic with ties counted
//! as one half. Classes without positives (AP) or without both outcomes
//! (AUROC) are undefined and left out of every mean.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Scores and binary labels for `S` studies × `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub study_ids: Vec<String>,
    pub class_names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
}

impl PredictionSet {
    pub fn new(
        study_ids: Vec<String>,
        class_names: Vec<String>,
        scores: Vec<Vec<f64>>,
        labels: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let c = class_names.len();
        if scores.len() != labels.len() || scores.len() != study_ids.len() {
            return Err(Error::Shape {
                op: "prediction_set",
                detail: format!(
                    "{} ids, {} score rows, {} label rows",
                    study_ids.len(),
                    scores.len(),
                    labels.len()
                ),
            });
        }
        for (s, l) in scores.iter().zip(&labels) {
            if s.len() != c || l.len() != c {
                return Err(Error::Shape {
                    op: "prediction_set",
                    detail: format!("row has {} scores / {} labels for {c} classes", s.len(), l.len()),
                });
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Domain {
                    op: "prediction_set",
                    detail: "labels must be 0 or 1".into(),
                });
            }
        }
        Ok(Self {
            study_ids,
            class_names,
            scores,
            labels,
        })
    }

    pub fn num_studies(&self) -> usize {
        self.scores.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_column(&self, c: usize) -> (Vec<f64>, Vec<u8>) {
        (
            self.scores.iter().map(|r| r[c]).collect(),
            self.labels.iter().map(|r| r[c]).collect(),
        )
    }

    /// Write `{study_id, scores}` records to `scores_path` and
    /// `{study_id, labels}` records to `labels_path`, one JSON object per line.
    pub fn save(&self, scores_path: &Path, labels_path: &Path) -> Result<()> {
        let mut s = std::io::BufWriter::new(std::fs::File::create(scores_path)?);
        let mut l = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
        writeln!(s, "{}", serde_json::to_string(&ClassHeader { class_names: self.class_names.clone() })?)?;
        for i in 0..self.num_studies() {
            let rec = ScoreRecord {
                study_id: self.study_ids[i].clone(),
                scores: self.scores[i].clone(),
            };
            writeln!(s, "{}", serde_json::to_string(&rec)?)?;
            let rec = LabelRecord {
                study_id: self.study_ids[i].clone(),
                labels: self.labels[i].clone(),
            };
            writeln!(l, "{}", serde_json::to_string(&rec)?)?;
        }
        s.flush()?;
        l.flush()?;
        Ok(())
    }

    pub fn load(scores_path: &Path, labels_path: &Path) -> Result<Self> {
        let read = |p: &Path| -> Result<Vec<String>> {
            let f = std::io::BufReader::new(std::fs::File::open(p)?);
            Ok(f.lines().collect::<std::io::Result<Vec<_>>>()?)
        };
        let slines = read(scores_path)?;
        let llines = read(labels_path)?;
        let name = scores_path.display().to_string();
        let header: ClassHeader = serde_json::from_str(slines.first().map(String::as_str).unwrap_or(""))
            .map_err(|e| Error::Parse { source_name: name.clone(), line: 1, msg: e.to_string() })?;
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in slines.iter().enumerate().skip(1) {
            let r: ScoreRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse { source_name: name.clone(), line: i + 1, msg: e.to_string() })?;
            ids.push(r.study_id);
            scores.push(r.scores);
        }
        let lname = labels_path.display().to_string();
        let mut labels = Vec::new();
        for (i, line) in llines.iter().enumerate() {
            let r: LabelRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse { source_name: lname.clone(), line: i + 1, msg: e.to_string() })?;
            if ids.get(i) != Some(&r.study_id) {
                return Err(Error::Parse {
                    source_name: lname.clone(),
                    line: i + 1,
                    msg: format!("study {} does not match score file", r.study_id),
                });
            }
            labels.push(r.labels);
        }
        Self::new(ids, header.class_names, scores, labels)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassHeader {
    class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRecord {
    study_id: String,
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    study_id: String,
    labels: Vec<u8>,
}

/// Descending-score order, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Average precision; `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Area under the ROC curve via mid-ranks; `None` unless both classes occur.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based mid-ranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid * pos_in_tie as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// mAP and the number of classes in the subset that had no AP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanAp {
    pub value: f64,
    pub undefined: usize,
}

fn per_class_ap(preds: &PredictionSet) -> Vec<Option<f64>> {
    par::map_indexed(preds.num_classes(), |c| {
        let (s, l) = preds.class_column(c);
        average_precision(&s, &l)
    })
}

fn mean_defined(values: &[Option<f64>], subset: &[usize]) -> Option<(f64, usize)> {
    let defined: Vec<f64> = subset.iter().filter_map(|&c| values[c]).collect();
    if defined.is_empty() {
        return None;
    }
    Some((
        defined.iter().sum::<f64>() / defined.len() as f64,
        subset.len() - defined.len(),
    ))
}

/// Mean of the defined per-class APs over `subset` (all classes when `None`).
pub fn mean_ap(preds: &PredictionSet, subset: Option<&[usize]>) -> Result<MeanAp> {
    let all: Vec<usize> = (0..preds.num_classes()).collect();
    let subset = subset.unwrap_or(&all);
    if let Some(&bad) = subset.iter().find(|&&c| c >= preds.num_classes()) {
        return Err(Error::Usage(format!("class {bad} out of range")));
    }
    let aps = per_class_ap(preds);
    mean_defined(&aps, subset)
        .map(|(value, undefined)| MeanAp { value, undefined })
        .ok_or_else(|| Error::Usage("mAP undefined: no class in the subset has a positive label".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
    pub train_counts: Vec<usize>,
}

impl GroupAssignment {
    pub fn members(&self, g: Group) -> Vec<usize> {
        (0..self.groups.len()).filter(|&c| self.groups[c] == g).collect()
    }
}

/// Sizes proportional to the 8/10/8 head/medium/tail split of 26 classes.
pub fn default_group_sizes(classes: usize) -> (usize, usize, usize) {
    let head = (classes as f64 * 8.0 / 26.0).round() as usize;
    let tail = head;
    (head, classes - head - tail, tail)
}

/// Rank classes by training count (descending, ties by index) and cut into
/// head / medium / tail.
pub fn assign_groups(train_counts: &[usize], sizes: (usize, usize, usize)) -> Result<GroupAssignment> {
    let (h, m, t) = sizes;
    if h + m + t != train_counts.len() {
        return Err(Error::Config(format!(
            "group sizes {h}+{m}+{t} do not sum to {} classes",
            train_counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..train_counts.len()).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]).then(a.cmp(&b)));
    let mut groups = vec![Group::Tail; train_counts.len()];
    for (rank, &c) in order.iter().enumerate() {
        groups[c] = if rank < h {
            Group::Head
        } else if rank < h + m {
            Group::Medium
        } else {
            Group::Tail
        };
    }
    Ok(GroupAssignment {
        groups,
        train_counts: train_counts.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub ap: Option<f64>,
    pub auroc: Option<f64>,
    pub group: Group,
    pub n_pos: usize,
}

/// Table-style summary: mAP overall and per group, macro AUROC, per-class rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_total: f64,
    pub map_head: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_tail: Option<f64>,
    pub auroc_total: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn one_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("  n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "mAP {:.4} | head {} | medium {} | tail {} | AUROC {}",
            self.map_total,
            f(self.map_head),
            f(self.map_medium),
            f(self.map_tail),
            f(self.auroc_total)
        )
    }
}

pub fn report(preds: &PredictionSet, groups: &GroupAssignment) -> Result<MetricsReport> {
    let c = preds.num_classes();
    if groups.groups.len() != c {
        return Err(Error::Config(format!(
            "group assignment covers {} classes, predictions have {c}",
            groups.groups.len()
        )));
    }
    let rows: Vec<(Option<f64>, Option<f64>, usize)> = par::map_indexed(c, |k| {
        let (s, l) = preds.class_column(k);
        let n_pos = l.iter().filter(|&&v| v == 1).count();
        (average_precision(&s, &l), auroc(&s, &l), n_pos)
    });
    let aps: Vec<Option<f64>> = rows.iter().map(|r| r.0).collect();
    let aucs: Vec<Option<f64>> = rows.iter().map(|r| r.1).collect();
    let all: Vec<usize> = (0..c).collect();
    let (map_total, _) = mean_defined(&aps, &all)
        .ok_or_else(|| Error::Usage("mAP undefined: no class has a positive label".into()))?;
    let group_map = |g| mean_defined(&aps, &groups.members(g)).map(|(v, _)| v);
    Ok(MetricsReport {
        map_total,
        map_head: group_map(Group::Head),
        map_medium: group_map(Group::Medium),
        map_tail: group_map(Group::Tail),
        auroc_total: mean_defined(&aucs, &all).map(|(v, _)| v),
        per_class: (0..c)
            .map(|k| ClassMetrics {
                name: preds.class_names[k].clone(),
                ap: rows[k].0,
                auroc: rows[k].1,
                group: groups.groups[k],
                n_pos: rows[k].2,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.5, 0.3], &[1, 1, 1]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.5], &[0, 0]), None);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]), Some(1.0));
        assert_eq!(auroc(&[0.3; 5], &[1, 0, 1, 0, 0]), Some(0.5));
        assert_eq!(auroc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), Some(0.75));
        assert_eq!(auroc(&[0.8, 0.6], &[1, 1]), None);
    }

    #[test]
    fn mean_ap_examples() {
        let p = PredictionSet::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["x".into(), "y".into()],
            vec![vec![0.9, 0.1], vec![0.8, 0.9], vec![0.1, 0.5]],
            vec![vec![1, 1], vec![0, 0], vec![1, 0]],
        )
        .unwrap();
        let single = mean_ap(&p, Some(&[0])).unwrap();
        assert_eq!(single.value, average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap());
        // class y: positive ranked 3rd of 3 -> AP 1/3
        let both = mean_ap(&p, None).unwrap();
        assert!((both.value - (single.value + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mean_ap_skips_undefined_and_errors_when_empty() {
        let p = PredictionSet::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![vec![0.9, 0.1], vec![0.8, 0.9]],
            vec![vec![1, 0], vec![0, 0]],
        )
        .unwrap();
        let m = mean_ap(&p, None).unwrap();
        assert_eq!(m.value, 1.0);
        assert_eq!(m.undefined, 1);
        assert!(mean_ap(&p, Some(&[1])).is_err());
    }

    #[test]
    fn group_assignment() {
        let g = assign_groups(&[5, 5, 1], (1, 1, 1)).unwrap();
        assert_eq!(g.groups, vec![Group::Head, Group::Medium, Group::Tail]);
        assert!(assign_groups(&[1, 2], (1, 0, 0)).is_err());
        let counts: Vec<usize> = (0..26).rev().collect();
        let g = assign_groups(&counts, (8, 10, 8)).unwrap();
        assert_eq!(g.members(Group::Head).len(), 8);
        assert_eq!(g.members(Group::Medium).len(), 10);
        assert_eq!(g.members(Group::Tail).len(), 8);
        assert_eq!(g.members(Group::Head), (0..8).collect::<Vec<_>>());
        assert_eq!(default_group_sizes(26), (8, 10, 8));
        assert_eq!(default_group_sizes(12), (4, 4, 4));
    }

    #[test]
    fn constant_scores_give_half_auroc() {
        let p = PredictionSet::new(
            (0..4).map(|i| i.to_string()).collect(),
            vec!["x".into(), "y".into()],
            vec![vec![0.5, 0.5]; 4],
            vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 0]],
        )
        .unwrap();
        let g = assign_groups(&[2, 2], (1, 0, 1)).unwrap();
        let r = report(&p, &g).unwrap();
        assert!(r.per_class.iter().all(|c| c.auroc == Some(0.5)));
        assert_eq!(r.auroc_total, Some(0.5));
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn prediction_set_validates() {
        assert!(PredictionSet::new(vec!["a".into()], vec!["x".into()], vec![vec![0.1]], vec![vec![2]]).is_err());
        assert!(PredictionSet::new(vec!["a".into()], vec!["x".into()], vec![vec![0.1, 0.2]], vec![vec![1]]).is_err());
    }
}
