//! Binary cross-entropy training with Adam and a two-phase learning rate.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{stack_images, stack_masks, Sample};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::nn::{Mode, ParamStore};

/// Clamp applied to predictions before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Stream of the DropBlock generator; the shuffle uses the default stream.
pub const DROPBLOCK_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_epochs: usize,
    /// Epochs trained at `lr_phase1` before switching to `lr_phase2`.
    pub phase1_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Training images held out for validation.
    pub validation_count: usize,
    pub bce_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::drive()
    }
}

impl TrainConfig {
    /// 200 epochs, the last 50 at the lower rate, batch size 2.
    pub fn drive() -> Self {
        TrainConfig {
            batch_size: 2,
            total_epochs: 200,
            phase1_epochs: 150,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_count: 2,
            bce_eps: BCE_EPS,
        }
    }

    /// 150 epochs, the last 50 at the lower rate, batch size 1.
    pub fn chase() -> Self {
        TrainConfig {
            batch_size: 1,
            total_epochs: 150,
            phase1_epochs: 100,
            ..Self::drive()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("batch_size and total_epochs must be positive".into()));
        }
        if self.phase1_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "phase1_epochs {} exceeds total_epochs {}",
                self.phase1_epochs, self.total_epochs
            )));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::Config(format!("bce_eps {} out of range", self.bce_eps)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Config(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        Ok(if epoch < self.phase1_epochs {
            self.lr_phase1
        } else {
            self.lr_phase2
        })
    }
}

/// First and second moments for every trainable store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new<E: Element>(params: &ParamStore<E>) -> Self {
        let zeros = |p: &crate::nn::Parameter<E>| {
            if p.trainable {
                vec![0.0; p.value.len()]
            } else {
                Vec::new()
            }
        };
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. `grads[i]` is the gradient of store
    /// entry `i`; every trainable entry must have one.
    pub fn step<E: Element>(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &[Option<&[E]>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} entries, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.trainable && g.is_none_or(|g| g.len() != p.value.len()) {
                return Err(Error::Config(format!("missing gradient for {}", p.name)));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i].filter(|_| p.trainable) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                *w = E::from_f64(w.as_f64() - step);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the training-mode batch losses.
    pub train_loss: f64,
    /// Eval-mode loss over the validation images, if any.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub network: Network<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot from the epoch with the lowest validation loss.
    pub best: Option<BestCheckpoint>,
}

/// Eval-mode mean BCE over `samples`, processed `batch_size` at a time.
/// Touches neither parameters, running statistics nor any random stream.
pub fn dataset_loss(net: &Network<f32>, samples: &[Sample], batch_size: usize, eps: f64) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Config(
            "dataset_loss needs samples and a positive batch size".into(),
        ));
    }
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = stack_images(&refs)?;
        let y = stack_masks(&refs)?;
        let mut graph = Graph::inference();
        let xv = graph.leaf(x);
        let pass = net.forward_frozen(&mut graph, xv, Mode::Eval, None)?;
        let loss = graph.bce(pass.output, &y, eps)?;
        total += graph.value(loss).data()[0] as f64 * y.len() as f64;
        pixels += y.len();
    }
    Ok(total / pixels as f64)
}

/// Trains in place. After each epoch `on_epoch` sees the finished record.
pub fn train(
    net: &mut Network<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training images",
            cfg.batch_size,
            train_set.len()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(DROPBLOCK_STREAM);
    let mut adam = AdamState::new(net.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut best: Option<BestCheckpoint> = None;

    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at(epoch)?;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let x = stack_images(&refs)?;
            let y = stack_masks(&refs)?;
            let mut graph = Graph::new();
            let xv = graph.leaf(x);
            let pass = net.forward(&mut graph, xv, Mode::Train, Some(&mut drop_rng))?;
            let loss = graph.bce(pass.output, &y, cfg.bce_eps)?;
            let value = graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, value });
            }
            graph.backward(loss)?;
            let grads: Vec<Option<&[f32]>> = pass.bindings.iter().map(|b| b.and_then(|v| graph.grad(v))).collect();
            adam.step(net.params_mut(), &grads, lr, cfg)?;
            loss_sum += value * batch.len() as f64;
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(dataset_loss(net, val_set, cfg.batch_size, cfg.bce_eps)?)
        };
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.val_loss) {
                best = Some(BestCheckpoint {
                    epoch,
                    val_loss: v,
                    network: net.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { history, best })
}

/// `epoch,phase_lr,train_loss,val_loss` with six decimals; `NA` marks a
/// missing validation loss.
pub fn write_loss_csv<W: Write>(history: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "epoch,phase_lr,train_loss,val_loss")?;
    for r in history {
        let val = r.val_loss.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        writeln!(w, "{},{:.6},{:.6},{}", r.epoch, r.lr, r.train_loss, val)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_switches_by_epoch() {
        let d = TrainConfig::drive();
        assert_eq!(d.lr_at(0).unwrap(), 1e-3);
        assert_eq!(d.lr_at(149).unwrap(), 1e-3);
        assert_eq!(d.lr_at(150).unwrap(), 1e-4);
        assert!(d.lr_at(200).is_err());
        let c = TrainConfig::chase();
        assert_eq!(c.lr_at(99).unwrap(), 1e-3);
        assert_eq!(c.lr_at(100).unwrap(), 1e-4);
        let flat = TrainConfig {
            phase1_epochs: 10,
            total_epochs: 10,
            ..TrainConfig::drive()
        };
        assert!((0..10).all(|e| flat.lr_at(e).unwrap() == 1e-3));
    }

    #[test]
    fn config_invariants() {
        let bad = TrainConfig {
            phase1_epochs: 300,
            ..TrainConfig::drive()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_phase2: 0.0,
            ..TrainConfig::drive()
        };
        assert!(bad.validate().is_err());
    }

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w".into(), Tensor::from_vec(&[1], vec![w]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store);
        adam.step(&mut store, &[Some(&[1.0])], 1e-3, &TrainConfig::drive())
            .unwrap();
        let w = store.iter().next().unwrap().value.data()[0];
        assert!((w + 1e-3).abs() < 1e-9, "{w}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.25);
        let mut adam = AdamState::new(&store);
        for _ in 0..3 {
            adam.step(&mut store, &[Some(&[0.0])], 1e-3, &TrainConfig::drive())
                .unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.data()[0], 0.25);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store);
        assert!(adam.step(&mut store, &[None], 1e-3, &TrainConfig::drive()).is_err());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn step_on_quadratic_reduces_loss() {
        let mut store = scalar_store(2.0);
        let mut adam = AdamState::new(&store);
        let f = |w: f64| (w - 0.5) * (w - 0.5);
        let w0 = store.iter().next().unwrap().value.data()[0];
        adam.step(&mut store, &[Some(&[2.0 * (w0 - 0.5)])], 1e-4, &TrainConfig::drive())
            .unwrap();
        let w1 = store.iter().next().unwrap().value.data()[0];
        assert!(f(w1) < f(w0));
    }

    #[test]
    fn loss_csv_format() {
        let h = [
            EpochRecord {
                epoch: 0,
                lr: 1e-3,
                train_loss: 0.5,
                val_loss: Some(0.25),
            },
            EpochRecord {
                epoch: 1,
                lr: 1e-4,
                train_loss: 0.125,
                val_loss: None,
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&h, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,phase_lr,train_loss,val_loss\n0,0.001000,0.500000,0.250000\n1,0.000100,0.125000,NA\n"
        );
    }
}
