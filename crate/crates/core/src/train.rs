//! Mini-batch Adam training with per-epoch learning-rate decay and early
//! stopping on the validation loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{self, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model, Sample};
use crate::par::{self, Execution};
use crate::param::{Adam, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("epoch,steps,lr,train_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:e},{:e},{}\n", e.epoch, e.steps, e.lr, e.train_loss, val));
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

/// Parameters, optimizer moments and the shuffling stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        Self {
            params,
            adam: Adam::default(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn sample_salt(step: usize, index: usize) -> u64 {
    ((step as u64 + 1) << 20) | index as u64
}

/// Mean loss and mean gradient over a batch. Per-sample work may run in
/// parallel; the reduction is sequential in batch order.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &[Sample],
    step: usize,
    exec: Execution,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let per_sample = par::map_range(exec, batch.len(), |b| {
        let mut g = Graph::new();
        let ctx = ForwardCtx {
            salt: sample_salt(step, b),
        };
        let loss = model.loss(&mut g, params, &batch[b], ctx)?;
        let value = g.value(loss).data()[0];
        Ok::<_, Error>((value, g.backward(loss)?.params(params)))
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in per_sample {
        let (loss, grads): (f64, BTreeMap<String, Tensor>) = r?;
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, sum))
}

/// One Adam step on `batch`; returns the mean batch loss.
pub fn train_step(model: &Model, state: &mut TrainState, batch: &[Sample], lr: f64, exec: Execution) -> Result<f64> {
    let (loss, grads) = batch_gradients(model, &state.params, batch, state.step, exec)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            loss,
        });
    }
    state.adam.update(&mut state.params, &grads, lr)?;
    state.step += 1;
    Ok(loss)
}

/// Evenly spaced subset of window indices, all of them when `limit` is absent.
pub fn window_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len && k > 0 => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Deterministic forecasts for the chosen windows.
pub fn forecast_windows(
    model: &Model,
    params: &ParamStore,
    ds: &WindowedDataset,
    indices: &[usize],
    exec: Execution,
) -> Result<Vec<(Tensor, Tensor)>> {
    par::map_range(exec, indices.len(), |i| {
        let s = ds.sample(indices[i]);
        let r = model.predict(params, &s, ForwardCtx::default())?;
        Ok((r.prediction, s.target.expect("windows carry targets")))
    })
    .into_iter()
    .collect()
}

/// `(MSE, MAE)` over the chosen windows, in normalized space.
pub fn evaluate_dataset(
    model: &Model,
    params: &ParamStore,
    ds: &WindowedDataset,
    limit: Option<usize>,
    exec: Execution,
) -> Result<(f64, f64)> {
    let idx = window_indices(ds.len(), limit);
    let pairs = forecast_windows(model, params, ds, &idx, exec)?;
    let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    data::evaluate(&p, &t)
}

/// Trains until `max_epochs`, `max_steps` or `patience` epochs without a
/// validation improvement. Returns the best-validation parameters.
pub fn fit(
    model: &Model,
    state: &mut TrainState,
    train: &WindowedDataset,
    val: Option<&WindowedDataset>,
    exec: Execution,
) -> Result<(ParamStore, TrainReport)> {
    let tc = model.cfg.train.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best = (f64::INFINITY, state.params.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..tc.max_epochs {
        let lr = tc.learning_rate_at(epoch);
        order.shuffle(&mut state.rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| train.sample(i)).collect();
            let loss = train_step(model, state, &batch, lr, exec)?;
            report.step_losses.push(loss);
            sum += loss;
            n += 1;
        }
        if n == 0 {
            break;
        }
        let train_loss = sum / n as f64;
        let val_loss = match val {
            Some(v) => Some(evaluate_dataset(model, &state.params, v, tc.val_windows, exec)?.0),
            None => None,
        };
        log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:?}");
        report.epochs.push(EpochLog {
            epoch,
            steps: state.step,
            lr,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        if score < best.0 {
            best = (score, state.params.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                report.stopped_early = true;
                break 'epochs;
            }
        }
        if tc.max_steps.is_some_and(|m| state.step >= m) {
            break;
        }
    }
    Ok((best.1, report))
}
