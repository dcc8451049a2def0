use std::fmt;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::VideoFeatures;
use crate::error::{Error, Result};
use crate::forward::Forward;
use crate::model::Model;
use crate::params::{Binding, ParamId};
use crate::vocab::Vocabulary;

use super::loss::{batch_loss, plan_video, LossComponents, PreparedVideo};
use super::optim::{scheduled_sampling_ratio, Optimizer, Plateau};
use super::TrainConfig;

const PLAN_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Generator for one purpose at one step, independent of all earlier steps.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(purpose));
    rng
}

/// One training step as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub components: LossComponents,
    pub lr: f64,
    pub grad_norm: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.components;
        write!(
            f,
            "step={} loss={:.6} reg={:.6} mask={:.6} event={:.6} caption={:.6} lr={:.6e} grad_norm={:.6}",
            self.step, self.loss, c.regression, c.mask, c.event, c.caption, self.lr, self.grad_norm
        )
    }
}

/// Training state: everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub plateau: Plateau,
    pub step: u64,
    /// Sum and count of training losses since the last plateau check.
    pub window_loss: f64,
    pub window_steps: u64,
    videos: Vec<PreparedVideo>,
}

impl Trainer {
    pub fn new(
        model: Model,
        vocab: Vocabulary,
        config: TrainConfig,
        dataset: &[VideoFeatures],
    ) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            config.momentum,
            config.clip_norm,
            &model.store,
        )?;
        let plateau = Plateau::new(
            config.plateau_factor,
            config.plateau_patience,
            config.plateau_threshold,
        );
        let mut t = Trainer {
            model,
            vocab,
            config,
            optimizer,
            plateau,
            step: 0,
            window_loss: 0.0,
            window_steps: 0,
            videos: Vec::new(),
        };
        t.set_dataset(dataset)?;
        Ok(t)
    }

    pub fn set_dataset(&mut self, dataset: &[VideoFeatures]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::config("training needs at least one video"));
        }
        if self.model.vocab_size() != self.vocab.len() {
            return Err(Error::config(format!(
                "model vocabulary size {} does not match vocabulary of {} tokens",
                self.model.vocab_size(),
                self.vocab.len()
            )));
        }
        self.videos = dataset
            .iter()
            .map(|v| PreparedVideo::new(&self.model, &self.vocab, v))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn videos(&self) -> &[PreparedVideo] {
        &self.videos
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.videos.len().div_ceil(self.config.batch_videos) as u64
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch()
    }

    /// Video indices of the batch at `step`: consecutive slices of a
    /// per-epoch shuffle.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch();
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        order.shuffle(&mut step_rng(self.config.seed, epoch, SHUFFLE_STREAM));
        let k = (step % per_epoch) as usize * self.config.batch_videos;
        order[k..(k + self.config.batch_videos).min(order.len())].to_vec()
    }

    /// Runs one optimization step and returns its log line.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let seed = self.config.seed;
        let step = self.step;
        let batch = self.batch_indices(step);
        let mut plan_rng = step_rng(seed, step, PLAN_STREAM);
        let items: Vec<(&PreparedVideo, _)> = batch
            .iter()
            .map(|&i| {
                let v = &self.videos[i];
                (v, plan_video(v, self.config.anchors_per_segment, &mut plan_rng))
            })
            .collect();
        let mut fwd = Forward::train(
            step_rng(seed, step, DROPOUT_STREAM),
            self.config.dropout,
            self.config.input_dropout,
        );
        fwd.frozen_bn = self.config.bn_frozen_at(step);
        let mut sampling_rng = step_rng(seed, step, SAMPLING_STREAM);
        let sampling = self
            .config
            .uses_scheduled_sampling()
            .then(|| (scheduled_sampling_ratio(self.epoch()), &mut sampling_rng));

        let tape = Tape::new();
        let (loss, components, grads) = {
            let b = Binding::new(&tape, &self.model.store);
            let terms = batch_loss(&self.model, &b, &items, &self.config, &mut fwd, sampling)?;
            tape.backward(terms.total)?;
            (terms.total.item(), terms.components(), b.gradients())
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }

        let store = &mut self.model.store;
        store.zero_grads();
        store.accumulate(&grads);
        let ids: Vec<ParamId> = grads
            .iter()
            .map(|(id, _)| *id)
            .filter(|id| store.is_trainable(*id))
            .collect();
        let lr = self.optimizer.lr;
        let grad_norm = self.optimizer.step(store, &ids)?;
        for u in &fwd.bn_updates {
            store.apply_bn_update(u, self.config.bn_momentum);
        }

        self.step += 1;
        self.window_loss += loss;
        self.window_steps += 1;
        if self.step.is_multiple_of(self.config.eval_every) {
            let mean = self.window_loss / self.window_steps as f64;
            let next = self.plateau.observe(mean, self.optimizer.lr);
            if next != self.optimizer.lr {
                info!(
                    "loss plateau at step {}: learning rate {} -> {}",
                    self.step, self.optimizer.lr, next
                );
                self.optimizer.lr = next;
            }
            self.window_loss = 0.0;
            self.window_steps = 0;
        }
        Ok(StepLog {
            step,
            loss,
            components,
            lr,
            grad_norm,
        })
    }

    /// Training objective over every video with dropout off and a fixed
    /// anchor sample. Normalization layers behave as at the current step.
    pub fn dataset_loss(&self) -> Result<(f64, LossComponents)> {
        let mut total = 0.0;
        let mut parts = LossComponents::default();
        let mut plan_rng = step_rng(self.config.seed, u64::MAX / 4, PLAN_STREAM);
        for v in &self.videos {
            let items = vec![(v, plan_video(v, self.config.anchors_per_segment, &mut plan_rng))];
            let tape = Tape::new();
            let b = Binding::new(&tape, &self.model.store);
            let mut fwd = Forward::train(ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
            fwd.frozen_bn = self.config.bn_frozen_at(self.step);
            let terms = batch_loss(&self.model, &b, &items, &self.config, &mut fwd, None)?;
            total += terms.total.item();
            let c = terms.components();
            parts.regression += c.regression;
            parts.mask += c.mask;
            parts.event += c.event;
            parts.caption += c.caption;
        }
        let n = self.videos.len() as f64;
        parts.regression /= n;
        parts.mask /= n;
        parts.event /= n;
        parts.caption /= n;
        Ok((total / n, parts))
    }
}
