//! Mini-batch Adam training with a per-epoch learning-rate decay and
//! best-epoch selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compute::Tape;
use crate::data::{BoundDataset, Example};
use crate::error::{GrpError, Result};
use crate::grp::GrpModel;
use crate::params::ParamStore;
use crate::report::mae;
use crate::tensor::Tensor;

/// Multiplier applied every epoch: the rate keeps 40% of its value.
pub const LR_DECAY_RETAIN: f64 = 0.4;
/// The other reading of the decay rule (lose 40%, keep 60%).
pub const LR_DECAY_ALTERNATE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Must stay 0; kept so the manifest records it.
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            lr_decay_factor: LR_DECAY_RETAIN,
            batch_size: 32,
            max_epochs: 10,
            seed: 42,
            dropout: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GrpError::config("batch size must be at least 1"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(GrpError::config("learning-rate decay factor must be in (0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GrpError::config("learning rate must be positive"));
        }
        if self.dropout != 0.0 {
            return Err(GrpError::config("dropout is not supported; it must be 0"));
        }
        if self.max_epochs == 0 {
            return Err(GrpError::config("need at least one epoch"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(GrpError::config("invalid Adam moment settings"));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Adam moments for every parameter in a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Adam hyper-parameters for one update.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamHyper { lr, beta1: cfg.beta1, beta2: cfg.beta2, epsilon: cfg.epsilon }
    }
}

/// Bias-corrected Adam update of one contiguous block, at step `t ≥ 1`.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= h.lr * mh / (vh.sqrt() + h.epsilon);
    }
}

/// One Adam step over every unfrozen parameter. Lookup tables only update
/// the rows that received gradient in this step.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, h: AdamHyper) -> Result<()> {
    for (_, p) in store.iter() {
        let bad = if p.sparse_rows {
            p.touched_rows().any(|r| p.grad.row(r).iter().any(|g| !g.is_finite()))
        } else {
            !p.grad.all_finite()
        };
        if bad {
            return Err(GrpError::Numeric(format!("non-finite gradient in parameter '{}'", p.name)));
        }
    }
    state.step += 1;
    let t = state.step;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if p.frozen {
            continue;
        }
        if p.sparse_rows {
            let cols = p.value.cols();
            let rows: Vec<usize> = p.touched_rows().collect();
            for r in rows {
                let span = r * cols..(r + 1) * cols;
                let g = p.grad.as_slice()[span.clone()].to_vec();
                adam_update(
                    &mut p.value.as_mut_slice()[span.clone()],
                    &g,
                    &mut state.m[i].as_mut_slice()[span.clone()],
                    &mut state.v[i].as_mut_slice()[span],
                    t,
                    h,
                );
            }
        } else {
            let g = p.grad.as_slice().to_vec();
            adam_update(
                p.value.as_mut_slice(),
                &g,
                state.m[i].as_mut_slice(),
                state.v[i].as_mut_slice(),
                t,
                h,
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// `train` or `test`.
    pub split: &'static str,
    pub mae: f64,
    /// Mean squared error of raw predictions.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_test_mae: f64,
}

/// Raw predictions for `examples`.
pub fn predict_all(model: &GrpModel, store: &ParamStore, ds: &BoundDataset, examples: &[Example]) -> Result<Vec<f64>> {
    let mut t = Tape::inference();
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        t.reset();
        let x = model.inputs(ds, ex.user, ex.item);
        let f = model.forward(&mut t, store, &x)?;
        out.push(t.scalar(f.pred));
    }
    Ok(out)
}

fn mse(preds: &[f64], truths: &[f64]) -> f64 {
    preds.iter().zip(truths).map(|(p, r)| (p - r) * (p - r)).sum::<f64>() / preds.len().max(1) as f64
}

/// Trains `model` in place and leaves the best-epoch parameters in `store`.
///
/// Each epoch visits every training example once in a seeded random order.
/// The kept epoch is the one with the lowest test MAE.
pub fn train(model: &GrpModel, store: &mut ParamStore, ds: &BoundDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(GrpError::config("training set is empty"));
    }
    let c = ds.c;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut state = AdamState::new(store);
    let mut tape = Tape::new();
    let test_truth: Vec<f64> = ds.test.iter().map(|e| e.rating as f64).collect();
    let mut history = Vec::with_capacity(2 * cfg.max_epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.learning_rate, cfg.lr_decay_factor);
        let hyper = AdamHyper::from_config(cfg, lr);
        order.shuffle(&mut rng);
        let mut train_preds = Vec::with_capacity(order.len());
        let mut train_truth = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            tape.reset();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = ds.train[i];
                let x = model.inputs(ds, ex.user, ex.item);
                let f = model.forward(&mut tape, store, &x)?;
                train_preds.push(tape.scalar(f.pred));
                train_truth.push(ex.rating as f64);
                losses.push(tape.square_loss(f.pred, ex.rating as f64)?);
            }
            let loss = tape.add_n(&losses)?;
            if !tape.scalar(loss).is_finite() {
                return Err(GrpError::Numeric(format!("loss became non-finite in epoch {epoch}")));
            }
            tape.backward(loss)?;
            store.zero_grad();
            tape.accumulate_into(store);
            adam_step(store, &mut state, hyper)?;
        }
        let train_mae = mae(&train_preds, &train_truth, c)?;
        history.push(HistoryRow { epoch, split: "train", mae: train_mae, loss: mse(&train_preds, &train_truth) });

        let (test_mae, test_loss) = if ds.test.is_empty() {
            (train_mae, f64::NAN)
        } else {
            let preds = predict_all(model, store, ds, &ds.test)?;
            (mae(&preds, &test_truth, c)?, mse(&preds, &test_truth))
        };
        if !ds.test.is_empty() {
            history.push(HistoryRow { epoch, split: "test", mae: test_mae, loss: test_loss });
        }
        log::info!("epoch {epoch}: lr {lr:.6} train mae {train_mae:.4} test mae {test_mae:.4}");
        if best.as_ref().is_none_or(|b| test_mae < b.1) {
            best = Some((epoch, test_mae, store.clone()));
        }
    }
    let (best_epoch, best_test_mae, snapshot) = best.expect("at least one epoch ran");
    store.load_values(&snapshot);
    store.zero_grad();
    Ok(TrainOutcome { history, best_epoch, best_test_mae })
}

/// Writes `epoch,split,mae,loss`.
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("epoch,split,mae,loss\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.split, h.mae, h.loss));
    }
    let mut f = std::fs::File::create(path).map_err(|e| GrpError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| GrpError::io(path, e))
}
