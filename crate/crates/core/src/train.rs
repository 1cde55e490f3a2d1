//! Mini-batch SGD with momentum, a plateau learning-rate schedule, best-val
//! checkpointing and `MMCK1` checkpoint files.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::params::{seeded_rng, ParamStore};
use crate::streams::{argmax, FusionNetwork};
use crate::synth::{Dataset, Sample};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MMCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub momentum: f64,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    /// Epochs without a val-loss improvement of at least `min_delta` before
    /// the learning rate drops.
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the plateau persists at `min_lr`.
    pub early_stop: bool,
    /// Coupled L2 penalty on every parameter.
    pub weight_decay: f64,
    /// Weight of the squared excitation penalty.
    pub excitation_decay: f64,
    /// Seeds the data order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            base_lr: 1e-2,
            lr_drop_factor: 10.0,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-5,
            batch_size: 16,
            max_epochs: 30,
            early_stop: true,
            weight_decay: 1e-4,
            excitation_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if self.lr_drop_factor <= 1.0 {
            return fail(format!("lr_drop_factor must exceed 1, got {}", self.lr_drop_factor));
        }
        if self.patience == 0 {
            return fail("patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.min_lr <= 0.0 {
            return fail(format!("min_lr must be > 0, got {}", self.min_lr));
        }
        if self.weight_decay < 0.0 || self.excitation_decay < 0.0 {
            return fail("decay weights must be >= 0".into());
        }
        Ok(())
    }
}

/// Tracks the learning rate against val-loss plateaus.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    best: f64,
    stale: usize,
    pub drops: usize,
    factor: f64,
    patience: usize,
    min_delta: f64,
    min_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Waiting,
    Dropped,
    /// Plateau reached with no drop left.
    Exhausted,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.base_lr,
            best: f64::INFINITY,
            stale: 0,
            drops: 0,
            factor: cfg.lr_drop_factor,
            patience: cfg.patience,
            min_delta: cfg.min_delta,
            min_lr: cfg.min_lr,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> ScheduleEvent {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            return ScheduleEvent::Improved;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleEvent::Waiting;
        }
        self.stale = 0;
        let next = self.lr / self.factor;
        if next >= self.min_lr * (1.0 - 1e-9) {
            self.lr = next;
            self.drops += 1;
            ScheduleEvent::Dropped
        } else {
            ScheduleEvent::Exhausted
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Epoch 0 is the untrained network.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub seed: u64,
    pub config: serde_json::Value,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.test_accuracy == other.test_accuracy
            && self.test_loss == other.test_loss
            && self.seed == other.seed
            && self.config == other.config
    }

    /// One JSON object per epoch, then a summary line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "best_epoch": self.best_epoch,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "seed": self.seed,
            "config": self.config,
            "wall_time_secs": self.wall_time_secs,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and accuracy of `net` over `samples`.
pub fn evaluate(net: &FusionNetwork, samples: &[Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let logits = net.forward(&s.inputs)?;
        let l = logits.data();
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - l[s.label];
        correct += (argmax(l) == s.label) as usize;
    }
    let n = samples.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

fn first_non_finite(store: &ParamStore, grads: Option<&[Tensor]>) -> Option<String> {
    if let Some(grads) = grads {
        for (p, g) in store.iter().zip(grads) {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Some(format!("gradient of {}", p.name));
            }
        }
    }
    store
        .iter()
        .find(|p| p.value.data().iter().any(|x| !x.is_finite()))
        .map(|p| format!("parameter {}", p.name))
}

/// One optimizer step on a mini-batch. Returns the summed data loss and the
/// number of correct predictions.
fn train_batch(
    net: &mut FusionNetwork,
    batch: &[&Sample],
    velocity: &mut [Tensor],
    lr: f64,
    cfg: &TrainConfig,
    (epoch, step): (usize, usize),
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let p = net.store.bind(&mut tape);
    let mut total = None;
    let mut data_loss = 0.0;
    let mut correct = 0;
    for s in batch {
        let (loss, out) = net.loss_on_tape(&mut tape, &p, &s.inputs, s.label, cfg.excitation_decay)?;
        let logits = tape.value(out.logits).data();
        correct += (argmax(logits) == s.label) as usize;
        data_loss += tape.value(loss).data()[0];
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    if !data_loss.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            step,
            component: first_non_finite(&net.store, None).unwrap_or_else(|| "loss".into()),
        });
    }
    tape.backward(mean)?;
    let grads = p.grads(&tape, &net.store);
    if let Some(c) = first_non_finite(&net.store, Some(&grads)) {
        return Err(Error::NonFinite {
            epoch,
            step,
            component: c,
        });
    }
    for ((param, g), v) in net.store.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
        let w = param.value.data_mut();
        for ((wi, &gi), vi) in w.iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = gi + cfg.weight_decay * *wi;
            *vi = cfg.momentum * *vi + g;
            *wi -= lr * *vi;
        }
    }
    Ok((data_loss, correct))
}

/// Trains `net` in place and leaves it holding the best-validation
/// parameters.
pub fn train(net: &mut FusionNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    train_with_echo(net, data, cfg, serde_json::to_value(cfg)?)
}

/// As [`train`], storing `echo` as the run's config.
pub fn train_with_echo(
    net: &mut FusionNetwork,
    data: &Dataset,
    cfg: &TrainConfig,
    echo: serde_json::Value,
) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut velocity: Vec<Tensor> = net
        .store
        .iter()
        .map(|p| Tensor::zeros(p.value.shape().to_vec()))
        .collect::<Result<_>>()?;
    let mut schedule = PlateauSchedule::new(cfg);

    let train0 = evaluate(net, &data.train)?;
    let val0 = evaluate(net, &data.val)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        lr: schedule.lr,
        train_loss: train0.loss,
        train_accuracy: train0.accuracy,
        val_loss: val0.loss,
        val_accuracy: val0.accuracy,
    }];
    let mut best = (val0.accuracy, -val0.loss, 0usize);
    let mut best_store = net.store.clone();

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        let mut correct = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (l, c) = train_batch(net, &batch, &mut velocity, lr, cfg, (epoch, step))?;
            loss += l;
            correct += c;
        }
        let n = data.train.len() as f64;
        let val = evaluate(net, &data.val)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        });
        if (val.accuracy, -val.loss) > (best.0, best.1) {
            best = (val.accuracy, -val.loss, epoch);
            best_store = net.store.clone();
        }
        if schedule.step(val.loss) == ScheduleEvent::Exhausted && cfg.early_stop {
            break;
        }
    }

    net.store = best_store;
    let test = evaluate(net, &data.test)?;
    Ok(RunRecord {
        epochs,
        best_epoch: best.2,
        test_accuracy: test.accuracy,
        test_loss: test.loss,
        seed: cfg.seed,
        config: echo,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint bytes: header `{"config": echo, "params": [{name, shape}]}`,
/// payload `u64` scalar count then every parameter value in declaration
/// order.
pub fn checkpoint_bytes(store: &ParamStore, echo: &serde_json::Value) -> Result<Vec<u8>> {
    let params: Vec<ParamHeader> = store
        .iter()
        .map(|p| ParamHeader {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let header = serde_json::json!({ "config": echo, "params": params });
    let mut w = Writer::new(CHECKPOINT_MAGIC, &header)?;
    let flat = store.flatten();
    w.u64(flat.len() as u64);
    w.f64s(&flat);
    Ok(w.into_bytes())
}

pub fn save_checkpoint(store: &ParamStore, echo: &serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store, echo)?)?;
    Ok(())
}

/// Loads checkpoint values into `store`, whose layout must match exactly.
/// Returns the config echo.
pub fn load_checkpoint_bytes(bytes: &[u8], store: &mut ParamStore) -> Result<serde_json::Value> {
    let (mut r, mut header) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let params: Vec<ParamHeader> = serde_json::from_value(header["params"].take())
        .map_err(|e| Error::Parse {
            offset: 17,
            message: format!("invalid checkpoint header: {e}"),
        })?;
    let layout: Vec<ParamHeader> = store
        .iter()
        .map(|p| ParamHeader {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    if params != layout {
        return Err(Error::Config(
            "checkpoint parameter layout does not match the network built from the config".into(),
        ));
    }
    let at = r.offset();
    let n = r.u64()? as usize;
    if n != store.num_scalars() {
        return Err(Error::Parse {
            offset: at,
            message: format!("payload holds {n} values, header implies {}", store.num_scalars()),
        });
    }
    let flat = r.f64s(n)?;
    r.finish()?;
    store.load_flat(&flat)?;
    Ok(header["config"].take())
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    load_checkpoint_bytes(&std::fs::read(path)?, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_drops_exactly_tenfold_and_is_bounded() {
        let cfg = TrainConfig {
            patience: 2,
            base_lr: 1e-2,
            min_lr: 1e-5,
            ..TrainConfig::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        assert_eq!(s.step(1.0), ScheduleEvent::Improved);
        let mut lrs = vec![s.lr];
        let mut exhausted = false;
        for _ in 0..20 {
            match s.step(1.0) {
                ScheduleEvent::Dropped => lrs.push(s.lr),
                ScheduleEvent::Exhausted => exhausted = true,
                _ => {}
            }
        }
        assert!(exhausted);
        assert_eq!(s.drops, 3);
        for w in lrs.windows(2) {
            assert_eq!(w[1], w[0] / 10.0);
        }
        assert_eq!(s.step(0.5), ScheduleEvent::Improved);
        assert_eq!(s.step(0.49995), ScheduleEvent::Waiting);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { base_lr: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
