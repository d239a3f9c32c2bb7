use serde::{Deserialize, Serialize};

use super::runner::EpochLog;
use super::stages::{check_classes, train_stage1, Stage1Head, Validation};
use super::TrainConfig;
use crate::data::{merge_pseudo_labels, ClassOverlapMap, Dataset, LabelValue, Study};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::par;
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyStudentConfig {
    pub iterations: usize,
    /// Train students with stochastic depth and heavy augmentation.
    pub noise: bool,
    pub drop_path: f64,
    /// Flip-average teacher predictions.
    pub tta: bool,
}

impl Default for NoisyStudentConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            noise: true,
            drop_path: 0.1,
            tta: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub train_studies: usize,
    pub pseudo_labeled_studies: usize,
    pub final_train_loss: f64,
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct NoisyStudentOutput {
    pub store: ParamStore,
    /// Log of the initial (iteration 0) teacher.
    pub teacher_log: Vec<EpochLog>,
    pub iterations: Vec<IterationLog>,
}

fn needs_teacher(labels: &[LabelValue], overlap: &ClassOverlapMap) -> bool {
    !overlap.is_full()
        || labels
            .iter()
            .any(|l| matches!(l, LabelValue::Uncertain | LabelValue::Unmentioned))
        || overlap.has_pairs()
}

/// Relabel `data` with teacher probabilities where its own labels are
/// missing. Teacher scores are per-view probabilities averaged over the
/// study's views (flip-averaged when `tta`).
pub fn pseudo_label(
    model: &Model,
    teacher: &ParamStore,
    data: &Dataset,
    overlap: &ClassOverlapMap,
    class_names: &[String],
    tta: bool,
) -> Result<Dataset> {
    let c = model.config().classes;
    if overlap.internal_classes() != c || class_names.len() != c {
        return Err(Error::Config(format!(
            "class count mismatch: teacher has {c} classes, overlap map targets {}, {} names given",
            overlap.internal_classes(),
            class_names.len()
        )));
    }
    if data.num_classes() != overlap.external_classes() {
        return Err(Error::Config(format!(
            "class count mismatch: dataset has {} classes, overlap map expects {}",
            data.num_classes(),
            overlap.external_classes()
        )));
    }
    let studies = par::map_indexed(data.len(), |s| -> Result<Study> {
        let study = &data.studies[s];
        let probs = if needs_teacher(&study.labels, overlap) {
            let mut acc = vec![0.0; c];
            for v in &study.views {
                let p = model.predict_single(teacher, &v.pixels, tta)?;
                acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
            let n = study.views.len() as f64;
            acc.into_iter().map(|a| a / n).collect()
        } else {
            // every entry is decided by the study's own labels
            vec![0.0; c]
        };
        Ok(Study {
            labels: merge_pseudo_labels(&study.labels, &probs, overlap)?,
            ..study.clone()
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Dataset::new(class_names.to_vec(), studies)
}

/// Iterated teacher/student training on the single-view model.
///
/// The iteration-0 teacher is a plain stage-1 run. Each iteration
/// pseudo-labels the labeled and unlabeled sets with the current teacher and
/// trains a fresh student on their union, which becomes the next teacher.
pub fn noisy_student_loop(
    model: &Model,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
    ns: &NoisyStudentConfig,
    rho: &[f64],
) -> Result<NoisyStudentOutput> {
    if ns.iterations == 0 {
        return Err(Error::Config("noisy student needs iterations >= 1".into()));
    }
    check_classes(model, labeled)?;
    if !unlabeled.is_empty() {
        check_classes(model, unlabeled)?;
    }
    let c = model.config().classes;
    let overlap = ClassOverlapMap::identity(c);
    let names = labeled.class_names.clone();
    let first = train_stage1(model, labeled, val, cfg, rho, Stage1Head::Decoder)?;
    let teacher_log = first.log;
    let mut teacher = first.store;
    let student_cfg = if ns.noise {
        TrainConfig {
            drop_path: ns.drop_path,
            heavy_augment: true,
            ..cfg.clone()
        }
    } else {
        cfg.clone()
    };
    let mut iterations = Vec::with_capacity(ns.iterations);
    for it in 1..=ns.iterations {
        let mut train = pseudo_label(model, &teacher, labeled, &overlap, &names, ns.tta)?;
        if !unlabeled.is_empty() {
            train = train.union(&pseudo_label(model, &teacher, unlabeled, &overlap, &names, ns.tta)?)?;
        }
        let student = train_stage1(model, &train, val, &student_cfg, rho, Stage1Head::Decoder)?;
        iterations.push(IterationLog {
            iteration: it,
            train_studies: train.len(),
            pseudo_labeled_studies: unlabeled.len(),
            final_train_loss: student.log.last().map_or(0.0, |l| l.train_loss),
            report: student.report,
        });
        teacher = student.store;
    }
    Ok(NoisyStudentOutput {
        store: teacher,
        teacher_log,
        iterations,
    })
}
