use std::borrow::Cow;

use rand::Rng;

use super::runner::{optimize, EpochLog};
use super::{augment_heavy, TrainConfig};
use crate::data::{make_batches, subsample_views, Dataset};
use crate::error::{Error, Result};
use crate::losses::{loss_on_tape, Target};
use crate::metrics::{report, GroupAssignment, MetricsReport, PredictionSet};
use crate::model::{sigmoid, FeatureMapSet, ForwardMode, Model, ParamGroup};
use crate::par;
use crate::tensor::{ParamStore, StreamKey, Tape, Tensor};

/// Classification head trained on top of the single-view backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage1Head {
    /// Cross-attention class-query decoder.
    Decoder,
    /// Global average pooling followed by one affine layer.
    Gap,
}

/// Held-out data and the class grouping used to report on it.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub data: &'a Dataset,
    pub groups: &'a GroupAssignment,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
    /// Validation report after the final epoch.
    pub report: Option<MetricsReport>,
}

pub(crate) fn check_classes(model: &Model, data: &Dataset) -> Result<()> {
    let (m, d) = (model.config().classes, data.num_classes());
    if m != d {
        return Err(Error::Config(format!(
            "class count mismatch: model has {m} classes, dataset has {d}"
        )));
    }
    Ok(())
}

fn augment_view<'a>(image: &'a Tensor, cfg: &TrainConfig, key: StreamKey) -> Result<Cow<'a, Tensor>> {
    let mut out = Cow::Borrowed(image);
    if cfg.flip && key.child("flip").rng().random_bool(0.5) {
        out = Cow::Owned(out.flip_horizontal()?);
    }
    if cfg.heavy_augment {
        out = Cow::Owned(augment_heavy(&out, key.child("heavy"))?);
    }
    Ok(out)
}

fn shuffled_chunks<T: Clone>(items: &[T], batch: usize, key: StreamKey) -> Vec<Vec<T>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut key.rng());
    order
        .chunks(batch)
        .map(|c| c.iter().map(|&i| items[i].clone()).collect())
        .collect()
}

fn validate_at(cfg: &TrainConfig, epoch: usize) -> bool {
    cfg.validate_every_epoch || epoch + 1 == cfg.epochs
}

/// Train a single-view backbone and head with every view as a sample
/// carrying its study's labels.
pub fn train_stage1(
    model: &Model,
    train: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
    rho: &[f64],
    head: Stage1Head,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_classes(model, train)?;
    let loss_cfg = cfg.loss_config(rho.to_vec());
    loss_cfg.validate(model.config().classes)?;
    let groups = match head {
        Stage1Head::Decoder => [ParamGroup::Backbone, ParamGroup::Head],
        Stage1Head::Gap => [ParamGroup::Backbone, ParamGroup::GapHead],
    };
    let mut store = model.init_params(cfg.seed, &groups)?;
    let targets: Vec<Target> = train.targets();
    let samples: Vec<(usize, usize)> = train
        .studies
        .iter()
        .enumerate()
        .flat_map(|(s, st)| (0..st.views.len()).map(move |v| (s, v)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Config("stage 1 needs at least one training view".into()));
    }
    let batches: Vec<Vec<Vec<(usize, usize)>>> = (0..cfg.epochs)
        .map(|e| shuffled_chunks(&samples, cfg.batch_size, StreamKey::new(cfg.seed, "stage1.order", e as u64)))
        .collect();
    let mut last = None;
    let log = optimize(
        &mut store,
        cfg,
        "stage1",
        &batches,
        |tape, store, &(s, v), mode| {
            let image = augment_view(&train.studies[s].views[v].pixels, cfg, mode.key.child("augment"))?;
            let logits = match head {
                Stage1Head::Decoder => model.single_view_logits(tape, store, &image, mode)?,
                Stage1Head::Gap => model.gap_logits(tape, store, &image, mode)?,
            };
            loss_on_tape(tape, logits, &targets[s], &loss_cfg)
        },
        |store, epoch| {
            let Some(v) = val.filter(|_| validate_at(cfg, epoch)) else {
                return Ok(None);
            };
            let r = report(&stage1_predictions(model, store, v.data, cfg.tta, head)?, v.groups)?;
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

/// Study-level scores from a single-view model: the uniform mean of the
/// per-view probabilities.
pub fn stage1_predictions(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    tta: bool,
    head: Stage1Head,
) -> Result<PredictionSet> {
    check_classes(model, data)?;
    let rows = par::map_indexed(data.len(), |s| -> Result<Vec<f64>> {
        let study = &data.studies[s];
        let mut acc = vec![0.0; model.config().classes];
        for v in &study.views {
            let p = match head {
                Stage1Head::Decoder => model.predict_single(store, &v.pixels, tta)?,
                Stage1Head::Gap => gap_predict(model, store, &v.pixels, tta)?,
            };
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        }
        let n = study.views.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    });
    let scores = rows.into_iter().collect::<Result<Vec<_>>>()?;
    PredictionSet::new(
        data.studies.iter().map(|s| s.study_id.clone()).collect(),
        data.class_names.clone(),
        scores,
        data.studies.iter().map(|s| s.eval_labels()).collect(),
    )
}

fn gap_predict(model: &Model, store: &ParamStore, image: &Tensor, tta: bool) -> Result<Vec<f64>> {
    let run = |im: &Tensor| -> Result<Vec<f64>> {
        let tape = Tape::no_grad();
        let v = model.gap_logits(&tape, store, im, &ForwardMode::eval())?;
        Ok(tape.value(v).data().iter().map(|&x| sigmoid(x)).collect())
    };
    let p = run(image)?;
    if !tta {
        return Ok(p);
    }
    let q = run(&image.flip_horizontal()?)?;
    Ok(p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Stage-2 parameters: backbone and head copied from stage 1, fusion
/// parameters freshly initialised, backbone frozen.
pub fn init_stage2(model: &Model, stage1: &ParamStore, seed: u64) -> Result<ParamStore> {
    let mut store = model.init_params(seed, &[ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Fusion])?;
    let copied = store.copy_matching(stage1)?;
    let missing: Vec<&str> = store
        .names()
        .filter(|n| n.starts_with("backbone.") || n.starts_with("head."))
        .filter(|n| !copied.iter().any(|c| c == n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "stage-1 parameters missing for stage 2: {missing:?}"
        )));
    }
    store.set_trainable("backbone.", false);
    Ok(store)
}

/// Frozen-backbone features of every view and of its mirror image.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    /// `views[s][v] = (original, flipped)`
    pub views: Vec<Vec<(Tensor, Tensor)>>,
}

impl FeatureCache {
    pub fn build(model: &Model, store: &ParamStore, data: &Dataset) -> Result<Self> {
        let views = par::map_indexed(data.len(), |s| {
            data.studies[s]
                .views
                .iter()
                .map(|v| {
                    Ok((
                        model.features(store, &v.pixels)?,
                        model.features(store, &v.pixels.flip_horizontal()?)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { views })
    }
}

fn eval_views(n0: usize, max_views: usize, s: usize) -> Vec<usize> {
    subsample_views(n0, max_views, StreamKey::new(0, "eval.views", 0).child_index(s as u64))
}

/// Train the fusion encoder, pad token, segment embeddings and head on top
/// of the frozen stage-1 backbone.
pub fn train_stage2(
    model: &Model,
    stage1: &ParamStore,
    train: &Dataset,
    val: Option<Validation<'_>>,
    cfg: &TrainConfig,
    rho: &[f64],
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_classes(model, train)?;
    let loss_cfg = cfg.loss_config(rho.to_vec());
    loss_cfg.validate(model.config().classes)?;
    let mut store = init_stage2(model, stage1, cfg.seed)?;
    let cache = FeatureCache::build(model, &store, train)?;
    let val_cache = match val {
        Some(v) => Some(FeatureCache::build(model, &store, v.data)?),
        None => None,
    };
    let targets = train.targets();
    let counts: Vec<usize> = train.studies.iter().map(|s| s.views.len()).collect();
    let n = model.config().max_views;
    let batches = (0..cfg.epochs)
        .map(|e| {
            Ok(make_batches(&counts, cfg.batch_size, n, StreamKey::new(cfg.seed, "stage2.batches", e as u64))?
                .into_iter()
                .map(|b| b.studies.into_iter().zip(b.views).collect::<Vec<_>>())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut last = None;
    let log = optimize(
        &mut store,
        cfg,
        "stage2",
        &batches,
        |tape, store, (s, views): &(usize, Vec<usize>), mode| {
            let flip = cfg.flip && mode.key.child("flip").rng().random_bool(0.5);
            let vars: Vec<_> = views
                .iter()
                .map(|&v| {
                    let (o, f) = &cache.views[*s][v];
                    tape.constant(if flip { f.clone() } else { o.clone() })
                })
                .collect();
            let logits = model.fusion_logits_vars(tape, store, &vars, mode)?;
            loss_on_tape(tape, logits, &targets[*s], &loss_cfg)
        },
        |store, epoch| {
            let Some(v) = val.filter(|_| validate_at(cfg, epoch)) else {
                return Ok(None);
            };
            let preds = fusion_eval(model, store, v.data, val_cache.as_ref(), cfg.tta)?;
            let r = report(&preds, v.groups)?;
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

/// Fusion predictions for every study, from cached features when given.
pub fn fusion_eval(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    cache: Option<&FeatureCache>,
    tta: bool,
) -> Result<PredictionSet> {
    check_classes(model, data)?;
    let n = model.config().max_views;
    let rows = par::map_indexed(data.len(), |s| -> Result<Vec<f64>> {
        let study = &data.studies[s];
        let keep = eval_views(study.views.len(), n, s);
        let (orig, flip): (Vec<Tensor>, Vec<Tensor>) = match cache {
            Some(c) => keep.iter().map(|&v| c.views[s][v].clone()).unzip(),
            None => keep
                .iter()
                .map(|&v| {
                    let px = &study.views[v].pixels;
                    Ok((model.features(store, px)?, model.features(store, &px.flip_horizontal()?)?))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip(),
        };
        let p = model.predict_fusion(store, &FeatureMapSet::new(orig)?)?;
        if !tta {
            return Ok(p);
        }
        let q = model.predict_fusion(store, &FeatureMapSet::new(flip)?)?;
        Ok(p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect())
    });
    PredictionSet::new(
        data.studies.iter().map(|s| s.study_id.clone()).collect(),
        data.class_names.clone(),
        rows.into_iter().collect::<Result<Vec<_>>>()?,
        data.studies.iter().map(|s| s.eval_labels()).collect(),
    )
}
