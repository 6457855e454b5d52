//! Dice loss, Adam and the training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{Mode, Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, DEFAULT_THRESHOLD};
use crate::model::LfraNet;
use crate::nn::{Graph, ParamId, ParamKind, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Soft dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` over the whole batch.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, eps: f64) -> Result<Var> {
    tape.dice_loss(pred, gt, eps, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dice_eps: f64,
    /// Weight of foreground pixels in the dice sums (1 is plain dice).
    pub foreground_weight: f64,
    /// Stop after this many epochs without improvement.
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.002,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            dice_eps: DICE_EPS,
            foreground_weight: 1.0,
            patience: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.dice_eps > 0.0) {
            return bad("dice_eps", "must be positive");
        }
        if !(self.foreground_weight > 0.0) {
            return bad("foreground_weight", "must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta", "Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }
}

/// Adam moments for every trainable tensor of one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| (p.kind == ParamKind::Trainable).then(|| Tensor::zeros(p.value.shape().clone())))
                .collect::<Vec<_>>()
        };
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.m.get(id.index()).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.v.get(id.index()).and_then(Option::as_ref)
    }

    /// One bias-corrected Adam update of the parameters named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::UninitializedState(format!(
                "moments for {} tensors, store holds {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads {
            let ok = |t: &Option<Tensor<T>>| t.as_ref().is_some_and(|t| t.shape() == g.shape());
            if !ok(&self.m[id.index()]) || !ok(&self.v[id.index()]) {
                return Err(Error::UninitializedState(format!(
                    "no moments for `{}`",
                    params.get(*id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - libm::pow(self.beta1, t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(self.beta2, t as f64));
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        for (id, g) in grads {
            let m = self.m[id.index()].as_mut().expect("checked above").data_mut();
            let v = self.v[id.index()].as_mut().expect("checked above").data_mut();
            let p = params.value_mut(*id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A model, its optimizer state and the training configuration.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub net: LfraNet<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    steps: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: LfraNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&net.params, config.beta1, config.beta2, config.adam_eps);
        Ok(Trainer {
            net,
            adam,
            config,
            steps: 0,
        })
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Train-mode dice loss of a batch, without updating anything. Uses the
    /// dropout stream of the next step.
    pub fn loss(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut g = Graph::new(&mut tape, &self.net.params, Mode::Train, self.dropout_rng());
        let pred = self.net.forward(&mut g, x)?;
        drop(g);
        let loss = tape.dice_loss(pred, masks, self.config.dice_eps, self.config.foreground_weight)?;
        Ok(tape.value(loss).data()[0].to_f64())
    }

    fn dropout_rng(&self) -> rng::StreamRng {
        rng::stream(self.config.seed, rng::STREAM_DROPOUT, self.steps)
    }

    /// Forward in train mode, dice loss, backward, Adam update and running
    /// statistic update. Returns the loss before the update.
    pub fn step(&mut self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let mut g = Graph::new(&mut tape, &self.net.params, Mode::Train, self.dropout_rng());
        let pred = self.net.forward(&mut g, x)?;
        let loss = g
            .tape
            .dice_loss(pred, masks, self.config.dice_eps, self.config.foreground_weight)?;
        g.tape.backward(loss)?;
        let grads = g.grads();
        let updates = g.take_stat_updates();
        drop(g);
        let value = tape.value(loss).data()[0].to_f64();
        drop(tape);
        self.adam.step(&mut self.net.params, &grads, self.config.lr)?;
        self.net.params.apply_stat_updates(&updates);
        self.steps += 1;
        Ok(value)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Mean per-image dice on the validation set (infer mode, threshold
    /// 0.5); `None` without validation samples.
    pub val_dice: Option<f64>,
}

/// Batches of `(images, masks)` for the given sample order.
pub fn batches<T: Scalar>(
    samples: &[Sample],
    order: &[usize],
    batch_size: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let images: Vec<Tensor<T>> = chunk.iter().map(|&i| samples[i].image.cast()).collect();
            let masks: Vec<Tensor<T>> = chunk.iter().map(|&i| samples[i].mask.cast()).collect();
            Ok((
                Tensor::stack(&images.iter().collect::<Vec<_>>())?,
                Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
            ))
        })
        .collect()
}

/// Trains for `config.epochs` epochs. Each epoch shuffles the training set
/// (seeded by epoch), runs one step per batch, then scores the validation
/// set. `on_best` is called whenever the validation dice improves (or, with
/// no validation set, the training loss improves).
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &[Sample],
    val: &[Sample],
    mut on_best: impl FnMut(&LfraNet<T>, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = trainer.config.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<f64> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::STREAM_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, masks) = batches::<T>(train, chunk, cfg.batch_size)?.remove(0);
            total += trainer.step(&images, &masks)?;
            count += 1;
        }
        let val_dice = if val.is_empty() {
            None
        } else {
            Some(evaluate_dataset(&trainer.net, val, DEFAULT_THRESHOLD, false)?.mean.dice)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: total / count as f64,
            val_dice,
        };
        log.push(entry);
        // higher is better for both scores
        let score = val_dice.unwrap_or(-entry.train_loss);
        if best.is_none_or(|b| score > b) {
            best = Some(score);
            stale = 0;
            on_best(&trainer.net, &entry)?;
        } else {
            stale += 1;
            if cfg.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(log)
}
