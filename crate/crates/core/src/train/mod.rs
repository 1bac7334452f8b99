//! ADAM training with warm-up, step decay, gradient accumulation and
//! best-k checkpoint averaging.

pub mod adam;
pub mod augment;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, SampleData};
use crate::error::{Error, Result};
use crate::model::{Hatnet, Input};
use crate::tensor::{ParamStore, Real};

pub use adam::Adam;
pub use augment::{augment_tiled, augment_word, AugmentParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Counted in optimizer updates.
    pub warmup_iters: u64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub decay_factor: f64,
    pub accum_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub augment: bool,
    pub checkpoint_top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-7,
            lr_peak: 1e-4,
            warmup_iters: 600,
            epochs_phase1: 50,
            epochs_phase2: 50,
            decay_factor: 0.5,
            accum_steps: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            augment: true,
            checkpoint_top_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(self.warmup_iters >= 1, "warmup_iters", "must be at least 1")?;
        check(self.accum_steps >= 1, "accum_steps", "must be at least 1")?;
        check(
            self.decay_factor > 0.0 && self.decay_factor < 1.0,
            "decay_factor",
            "must lie strictly between 0 and 1",
        )?;
        check(self.lr_start >= 0.0 && self.lr_start.is_finite(), "lr_start", "must be finite and non-negative")?;
        check(self.lr_peak > 0.0 && self.lr_peak.is_finite(), "lr_peak", "must be finite and positive")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps", "must be positive")?;
        check(self.checkpoint_top_k >= 1, "checkpoint_top_k", "must be at least 1")?;
        check(self.epochs() >= 1, "epochs_phase1", "need at least one epoch")?;
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }
}

/// Learning rate for update number `global_iter` (0-based) during the
/// 0-based `epoch`. Linear warm-up takes precedence; afterwards the rate is
/// `lr_peak` for the first `epochs_phase1` epochs and `lr_peak * decay_factor`
/// from then on.
pub fn lr_at(cfg: &TrainConfig, global_iter: u64, epoch: usize) -> f64 {
    if global_iter < cfg.warmup_iters {
        let t = global_iter as f64 / cfg.warmup_iters as f64;
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * t;
    }
    if epoch < cfg.epochs_phase1 {
        cfg.lr_peak
    } else {
        cfg.lr_peak * cfg.decay_factor
    }
}

/// Parameter snapshot with its selection score.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub params: ParamStore<T>,
    pub val_accuracy: f64,
    pub epoch: usize,
}

/// Orders best first: higher accuracy, then earlier epoch.
fn rank_checkpoints<T: Real>(list: &mut [Checkpoint<T>]) {
    list.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy).then(a.epoch.cmp(&b.epoch)));
}

/// Element-wise mean of the best `top_k` checkpoints (mean taken in f64).
pub fn average_checkpoints<T: Real>(list: &[Checkpoint<T>], top_k: usize) -> Result<ParamStore<T>> {
    if list.is_empty() || top_k == 0 {
        return Err(Error::Contract("checkpoint averaging needs at least one checkpoint".into()));
    }
    let mut ranked = list.to_vec();
    rank_checkpoints(&mut ranked);
    ranked.truncate(top_k);
    let first = &ranked[0].params;
    for c in &ranked[1..] {
        first.check_layout(&c.params)?;
    }
    let mut out = first.snapshot();
    let k = ranked.len() as f64;
    for (name, t) in out.iter_mut() {
        let mut acc = vec![0.0f64; t.numel()];
        for c in &ranked {
            for (a, v) in acc.iter_mut().zip(c.params.get(name)?.data()) {
                *a += v.to_f64();
            }
        }
        for (dst, a) in t.data_mut().iter_mut().zip(acc) {
            *dst = T::from_f64(a / k);
        }
    }
    Ok(out)
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer updates performed so far.
    pub iter: u64,
    /// Rate used by the last update of the epoch.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// `None` when there is no validation split.
    pub val_accuracy: Option<f64>,
}

/// Mutable training state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: Adam,
    pub global_iter: u64,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps),
            global_iter: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch (before each update).
    pub running_accuracy: f64,
    pub last_lr: f64,
    pub updates: u64,
}

fn apply_update<T: Real>(params: &mut ParamStore<T>, state: &mut TrainState, cfg: &TrainConfig, pending: usize) -> Result<f64> {
    params.scale_grads(1.0 / pending as f64);
    let lr = lr_at(cfg, state.global_iter, state.epoch);
    state.adam.step(params, lr)?;
    params.zero_grad();
    state.global_iter += 1;
    Ok(lr)
}

/// One pass over `samples` in a seeded random order. Gradients are averaged
/// over every `accum_steps` samples before an update; a trailing partial
/// window is flushed at the end of the epoch, averaged over its own size.
pub fn train_epoch<T: Real>(
    model: &Hatnet,
    params: &mut ParamStore<T>,
    samples: &[&Sample],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochSummary> {
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut state.rng);
    params.zero_grad();
    let (mut loss_sum, mut correct, mut pending, mut last_lr) = (0.0, 0usize, 0usize, f64::NAN);
    let updates_before = state.global_iter;
    for &i in &order {
        let s = samples[i];
        let augmented;
        let input = match (&s.data, cfg.augment) {
            (SampleData::Words(t), true) => {
                augmented = augment_tiled(t, &mut state.rng);
                Input::Words(&augmented)
            }
            _ => s.input(),
        };
        let (loss, pred) = model
            .accumulate_gradients(params, input, s.label)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("sample `{}` (epoch {}): {msg}", s.id, state.epoch)),
                other => other,
            })?;
        loss_sum += loss;
        correct += (pred.class == s.label) as usize;
        pending += 1;
        if pending == cfg.accum_steps {
            last_lr = apply_update(params, state, cfg, pending)?;
            pending = 0;
        }
    }
    if pending > 0 {
        last_lr = apply_update(params, state, cfg, pending)?;
    }
    Ok(EpochSummary {
        mean_loss: loss_sum / samples.len() as f64,
        running_accuracy: correct as f64 / samples.len() as f64,
        last_lr,
        updates: state.global_iter - updates_before,
    })
}

/// Top-1 accuracy with frozen parameters; `None` for an empty set.
pub fn accuracy<T: Real>(model: &Hatnet, params: &ParamStore<T>, samples: &[&Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut correct = 0;
    for s in samples {
        let (pred, _) = model.forward(params, s.input())?;
        correct += (pred.class == s.label) as usize;
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

pub struct FitOutcome<T: Real = f32> {
    /// Average of the best checkpoints.
    pub params: ParamStore<T>,
    /// Parameters after the last epoch.
    pub last: ParamStore<T>,
    pub checkpoints: Vec<Checkpoint<T>>,
    pub records: Vec<EpochRecord>,
}

/// Runs `cfg.epochs()` epochs (or until `stop` returns true after an epoch),
/// retaining the `checkpoint_top_k` best end-of-epoch snapshots. Selection
/// uses validation accuracy, or training accuracy when `val` is empty.
pub fn fit<T: Real>(
    model: &Hatnet,
    mut params: ParamStore<T>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut stop: impl FnMut(&EpochRecord, &ParamStore<T>) -> bool,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg);
    let mut kept: Vec<Checkpoint<T>> = Vec::new();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs() {
        state.epoch = epoch;
        let summary = train_epoch(model, &mut params, train, cfg, &mut state)?;
        let val_accuracy = accuracy(model, &params, val)?;
        let score = match val_accuracy {
            Some(a) => a,
            None => accuracy(model, &params, train)?.unwrap_or(0.0),
        };
        let record = EpochRecord {
            epoch,
            iter: state.global_iter,
            lr: summary.last_lr,
            loss: summary.mean_loss,
            val_accuracy,
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        kept.push(Checkpoint {
            params: params.snapshot(),
            val_accuracy: score,
            epoch,
        });
        rank_checkpoints(&mut kept);
        kept.truncate(cfg.checkpoint_top_k);
        let done = stop(&record, &params);
        records.push(record);
        if done {
            break;
        }
    }
    let averaged = average_checkpoints(&kept, cfg.checkpoint_top_k)?;
    Ok(FitOutcome {
        params: averaged,
        last: params.snapshot(),
        checkpoints: kept,
        records,
    })
}

/// Sum of per-sample gradients at fixed parameters, without any update.
pub fn summed_gradients<T: Real>(model: &Hatnet, params: &ParamStore<T>, samples: &[&Sample]) -> Result<ParamStore<T>> {
    let mut p = params.snapshot();
    p.zero_grad();
    for s in samples {
        model.accumulate_gradients(&mut p, s.input(), s.label)?;
    }
    Ok(p)
}

/// Gradient buffers of a store flattened in name order (zeros where absent).
pub fn flat_grads<T: Real>(params: &ParamStore<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_scalars());
    for (_, t) in params.iter() {
        match t.grad() {
            Some(g) => out.extend(g.iter().map(|v| v.to_f64())),
            None => out.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    out
}

pub fn params_equal<T: Real>(a: &ParamStore<T>, b: &ParamStore<T>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.dims() == tb.dims() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0, 0), 1e-7);
        assert_eq!(lr_at(&cfg, 600, 0), 1e-4);
        assert_eq!(lr_at(&cfg, 600, 49), 1e-4);
        assert_eq!(lr_at(&cfg, 10_000, 50), 5e-5);
        assert_eq!(lr_at(&cfg, 10_000, 51), 5e-5);
        assert_eq!(lr_at(&cfg, 10_000, 500), 5e-5);
        assert!((lr_at(&cfg, 300, 0) - 5.005e-5).abs() < 1e-18);
        // warm-up end meets the phase-one plateau exactly
        assert_eq!(lr_at(&cfg, cfg.warmup_iters, 0), cfg.lr_peak);
    }

    #[test]
    fn warmup_is_monotone() {
        let cfg = TrainConfig::default();
        let mut prev = 0.0;
        for it in 0..=600 {
            let lr = lr_at(&cfg, it, 0);
            assert!(lr > prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { warmup_iters: 0, ..Default::default() },
            TrainConfig { accum_steps: 0, ..Default::default() },
            TrainConfig { decay_factor: 1.0, ..Default::default() },
            TrainConfig { decay_factor: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }

    fn ckpt(v: f64, acc: f64, epoch: usize) -> Checkpoint<f32> {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_f64(vec![3], &[v, -2.0 * v, 0.1 * v]).unwrap());
        Checkpoint { params: p, val_accuracy: acc, epoch }
    }

    #[test]
    fn averaging_cases() {
        let same = vec![ckpt(0.37, 0.5, 1), ckpt(0.37, 0.5, 2), ckpt(0.37, 0.5, 3)];
        let avg = average_checkpoints(&same, 5).unwrap();
        assert!(params_equal(&avg, &same[0].params.snapshot()));

        let opposite = vec![ckpt(0.37, 0.5, 1), ckpt(-0.37, 0.5, 2)];
        let avg = average_checkpoints(&opposite, 2).unwrap();
        assert!(avg.get("a").unwrap().data().iter().all(|&v| v == 0.0));

        // best two by accuracy, ties go to the earlier epoch
        let list = vec![ckpt(1.0, 0.9, 4), ckpt(2.0, 0.7, 1), ckpt(3.0, 0.9, 2), ckpt(5.0, 0.9, 7)];
        let avg = average_checkpoints(&list, 2).unwrap();
        assert_eq!(avg.get("a").unwrap().data()[0], 2.0);
        assert!(average_checkpoints::<f32>(&[], 1).is_err());
    }

    #[test]
    fn averaging_rejects_mismatched_shapes() {
        let mut other = ParamStore::new();
        other.insert("a", Tensor::zeros(&[4]));
        let list = vec![ckpt(1.0, 0.9, 0), Checkpoint { params: other, val_accuracy: 0.8, epoch: 1 }];
        assert!(average_checkpoints(&list, 2).is_err());
    }
}
