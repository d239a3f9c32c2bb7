use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{adamw_step, cosine_lr, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::ForwardMode;
use crate::par;
use crate::tensor::{ParamStore, StreamKey, Tape, Tensor, Var};

/// One record per training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map_total: Option<f64>,
    pub val_map_head: Option<f64>,
    pub val_map_medium: Option<f64>,
    pub val_map_tail: Option<f64>,
    pub val_auroc: Option<f64>,
    pub wall_seconds: f64,
}

/// Minibatch AdamW over per-item losses.
///
/// `batches[e]` lists the items of every step in epoch `e`. Each item gets
/// its own tape and random stream; gradients are summed in batch order and
/// divided by the batch length, so results do not depend on threading.
pub(crate) fn optimize<T, L, E>(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    stream: &str,
    batches: &[Vec<Vec<T>>],
    item_loss: L,
    mut on_epoch: E,
) -> Result<Vec<EpochLog>>
where
    T: Sync,
    L: Fn(&Tape, &ParamStore, &T, &ForwardMode) -> Result<Var> + Sync,
    E: FnMut(&ParamStore, usize) -> Result<Option<MetricsReport>>,
{
    cfg.validate()?;
    let total: usize = batches.iter().map(Vec::len).sum();
    let mut state = OptimizerState::new(store, cfg.weight_decay);
    let root = StreamKey::new(cfg.seed, stream, 0);
    let mut step = 0usize;
    let mut log = Vec::with_capacity(batches.len());
    for (epoch, epoch_batches) in batches.iter().enumerate() {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut lr = 0.0;
        for batch in epoch_batches {
            if batch.is_empty() {
                continue;
            }
            lr = cosine_lr(step, total, cfg.lr)?;
            let step_key = root.with_counter(step as u64);
            let frozen: &ParamStore = store;
            let results = par::map_indexed(batch.len(), |i| -> Result<(f64, BTreeMap<String, Tensor>)> {
                let mode = ForwardMode::train(step_key.child_index(i as u64))
                    .with_drop_path(cfg.drop_path)
                    .with_shuffle(cfg.shuffle_views);
                let tape = Tape::new();
                let loss = item_loss(&tape, frozen, &batch[i], &mode)?;
                let value = tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {value} at epoch {epoch}, step {step}, batch item {i}"
                    )));
                }
                Ok((value, tape.backward(loss)?.for_store(frozen)))
            });
            let mut sum: Option<BTreeMap<String, Tensor>> = None;
            for r in results {
                let (value, grads) = r?;
                loss_sum += value;
                count += 1;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            acc.get_mut(&name).expect("same trainable set").add_assign(&g)?;
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.values_mut().for_each(|g| g.scale_in_place(inv));
            adamw_step(store, &grads, &mut state, lr)?;
            step += 1;
        }
        let report = on_epoch(store, epoch)?;
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: if count > 0 { loss_sum / count as f64 } else { 0.0 },
            val_map_total: report.as_ref().map(|r| r.map_total),
            val_map_head: report.as_ref().and_then(|r| r.map_head),
            val_map_medium: report.as_ref().and_then(|r| r.map_medium),
            val_map_tail: report.as_ref().and_then(|r| r.map_tail),
            val_auroc: report.as_ref().and_then(|r| r.auroc_total),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}
