//! Comparison systems: single-view averaging, frontal/lateral weighted
//! averaging and a concatenated-GAP linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, subsample_views, Dataset};
use crate::error::{Error, Result};
use crate::losses::loss_on_tape;
use crate::metrics::{report, PredictionSet};
use crate::model::{gap, sigmoid, Model, ParamGroup, ViewLabel};
use crate::par;
use crate::tensor::{ParamStore, StreamKey, Tape, Tensor};
use crate::training::{stage1_predictions, Stage1Head, TrainConfig, TrainOutput, Validation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedAvgConfig {
    /// Frontal weight; the lateral weight is `1 − w_f`.
    pub w_f: f64,
}

impl WeightedAvgConfig {
    pub fn new(w_f: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w_f) {
            return Err(Error::Config(format!("w_f {w_f} outside [0, 1]")));
        }
        Ok(Self { w_f })
    }

    pub fn w_l(&self) -> f64 {
        1.0 - self.w_f
    }
}

/// Study scores from the stage-1 model: flip-averaged per-view
/// probabilities, averaged uniformly over views.
pub fn single_view_eval(model: &Model, store: &ParamStore, data: &Dataset, tta: bool) -> Result<PredictionSet> {
    stage1_predictions(model, store, data, tta, Stage1Head::Decoder)
}

/// Combine per-view probabilities by view group. Unknown views count as
/// frontal; an absent group drops out and the weights are renormalised.
pub fn weighted_average_predict(
    per_view: &[Vec<f64>],
    views: &[ViewLabel],
    cfg: &WeightedAvgConfig,
) -> Result<Vec<f64>> {
    if per_view.is_empty() {
        return Err(Error::Contract("weighted average needs at least one view".into()));
    }
    if per_view.len() != views.len() {
        return Err(Error::Contract(format!(
            "{} probability vectors for {} view labels",
            per_view.len(),
            views.len()
        )));
    }
    let c = per_view[0].len();
    let mean_of = |lateral: bool| -> Option<Vec<f64>> {
        let members: Vec<&Vec<f64>> = per_view
            .iter()
            .zip(views)
            .filter(|(_, v)| (**v == ViewLabel::Lateral) == lateral)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            return None;
        }
        let mut m = vec![0.0; c];
        for p in &members {
            m.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
        }
        let n = members.len() as f64;
        Some(m.into_iter().map(|a| a / n).collect())
    };
    match (mean_of(false), mean_of(true)) {
        (Some(f), None) => Ok(f),
        (None, Some(l)) => Ok(l),
        (Some(f), Some(l)) => {
            let (wf, wl) = (cfg.w_f, cfg.w_l());
            if wf == 1.0 {
                return Ok(f);
            }
            if wl == 1.0 {
                return Ok(l);
            }
            Ok(f.iter().zip(&l).map(|(a, b)| (wf * a + wl * b) / (wf + wl)).collect())
        }
        (None, None) => unreachable!("at least one view"),
    }
}

/// Per-view (flip-averaged) stage-1 probabilities for every study.
pub fn per_view_probabilities(model: &Model, store: &ParamStore, data: &Dataset, tta: bool) -> Result<Vec<Vec<Vec<f64>>>> {
    par::map_indexed(data.len(), |s| {
        data.studies[s]
            .views
            .iter()
            .map(|v| model.predict_single(store, &v.pixels, tta))
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

/// Weighted-average predictions from precomputed per-view probabilities.
pub fn weighted_average_eval(
    data: &Dataset,
    per_view: &[Vec<Vec<f64>>],
    cfg: &WeightedAvgConfig,
) -> Result<PredictionSet> {
    let scores = data
        .studies
        .iter()
        .zip(per_view)
        .map(|(s, p)| {
            let labels: Vec<ViewLabel> = s.views.iter().map(|v| v.view).collect();
            weighted_average_predict(p, &labels, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(
        data.studies.iter().map(|s| s.study_id.clone()).collect(),
        data.class_names.clone(),
        scores,
        data.studies.iter().map(|s| s.eval_labels()).collect(),
    )
}

/// GAP vectors of every view and its mirror image: `[s][v] = (orig, flip)`.
fn gap_cache(model: &Model, store: &ParamStore, data: &Dataset) -> Result<Vec<Vec<(Tensor, Tensor)>>> {
    par::map_indexed(data.len(), |s| {
        data.studies[s]
            .views
            .iter()
            .map(|v| {
                Ok((
                    gap(&model.features(store, &v.pixels)?)?,
                    gap(&model.features(store, &v.pixels.flip_horizontal()?)?)?,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })
    .into_iter()
    .collect()
}

fn slot_views(n0: usize, max_views: usize, s: usize) -> Vec<usize> {
    subsample_views(n0, max_views, StreamKey::new(0, "eval.views", 0).child_index(s as u64))
}

/// Train the concat head on frozen GAP features of a GAP-head stage-1 model.
pub fn concat_gap_train(
    model: &Model,
    gap_stage1: &ParamStore,
    train: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
    rho: &[f64],
) -> Result<TrainOutput> {
    let loss_cfg = cfg.loss_config(rho.to_vec());
    loss_cfg.validate(model.config().classes)?;
    let mut store = model.init_params(cfg.seed, &[ParamGroup::Backbone, ParamGroup::GapHead, ParamGroup::ConcatHead])?;
    store.copy_matching(gap_stage1)?;
    store.set_trainable("backbone.", false);
    store.set_trainable("gap_head.", false);
    let cache = gap_cache(model, &store, train)?;
    let val_cache = match val {
        Some(v) => Some(gap_cache(model, &store, v.data)?),
        None => None,
    };
    let targets = train.targets();
    let counts: Vec<usize> = train.studies.iter().map(|s| s.views.len()).collect();
    let n = model.config().max_views;
    let batches = (0..cfg.epochs)
        .map(|e| {
            Ok(make_batches(&counts, cfg.batch_size, n, StreamKey::new(cfg.seed, "concat.batches", e as u64))?
                .into_iter()
                .map(|b| b.studies.into_iter().zip(b.views).collect::<Vec<_>>())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut last = None;
    let log = crate::training::optimize_items(
        &mut store,
        cfg,
        "concat",
        &batches,
        |tape, store, (s, views): &(usize, Vec<usize>), mode| {
            let flip = cfg.flip && mode.key.child("flip").rng().random_bool(0.5);
            let vecs: Vec<Tensor> = views
                .iter()
                .map(|&v| {
                    let (o, f) = &cache[*s][v];
                    if flip { f.clone() } else { o.clone() }
                })
                .collect();
            let logits = model.concat_logits(tape, store, &vecs)?;
            loss_on_tape(tape, logits, &targets[*s], &loss_cfg)
        },
        |store, epoch| {
            if !(cfg.validate_every_epoch || epoch + 1 == cfg.epochs) {
                return Ok(None);
            }
            let (Some(v), Some(c)) = (val, val_cache.as_ref()) else {
                return Ok(None);
            };
            let r = report(&concat_eval_cached(model, store, v.data, c, cfg.tta)?, v.groups)?;
            last = Some(r.clone());
            Ok(Some(r))
        },
    )?;
    Ok(TrainOutput {
        store,
        log,
        report: last,
    })
}

/// Concat-head probabilities for one study's views in dataset order.
pub fn concat_gap_predict(model: &Model, store: &ParamStore, views: &[Tensor], tta: bool) -> Result<Vec<f64>> {
    let run = |flip: bool| -> Result<Vec<f64>> {
        let vecs = views
            .iter()
            .map(|px| {
                let px = if flip { px.flip_horizontal()? } else { px.clone() };
                gap(&model.features(store, &px)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::no_grad();
        let v = model.concat_logits(&tape, store, &vecs)?;
        Ok(tape.value(v).data().iter().map(|&x| sigmoid(x)).collect())
    };
    let p = run(false)?;
    if !tta {
        return Ok(p);
    }
    let q = run(true)?;
    Ok(p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect())
}

fn concat_eval_cached(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    cache: &[Vec<(Tensor, Tensor)>],
    tta: bool,
) -> Result<PredictionSet> {
    let n = model.config().max_views;
    let rows = par::map_indexed(data.len(), |s| -> Result<Vec<f64>> {
        let keep = slot_views(data.studies[s].views.len(), n, s);
        let run = |flip: bool| -> Result<Vec<f64>> {
            let vecs: Vec<Tensor> = keep
                .iter()
                .map(|&v| if flip { cache[s][v].1.clone() } else { cache[s][v].0.clone() })
                .collect();
            let tape = Tape::no_grad();
            let v = model.concat_logits(&tape, store, &vecs)?;
            Ok(tape.value(v).data().iter().map(|&x| sigmoid(x)).collect())
        };
        let p = run(false)?;
        if !tta {
            return Ok(p);
        }
        let q = run(true)?;
        Ok(p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect())
    });
    PredictionSet::new(
        data.studies.iter().map(|s| s.study_id.clone()).collect(),
        data.class_names.clone(),
        rows.into_iter().collect::<Result<Vec<_>>>()?,
        data.studies.iter().map(|s| s.eval_labels()).collect(),
    )
}

/// Concat-head predictions for a whole dataset.
pub fn concat_gap_eval(model: &Model, store: &ParamStore, data: &Dataset, tta: bool) -> Result<PredictionSet> {
    let cache = gap_cache(model, store, data)?;
    concat_eval_cached(model, store, data, &cache, tta)
}
