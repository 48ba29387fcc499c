//! Minibatch training with periodic validation and early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState, ADAM_EPS};
use super::augment::augment_rotate;
use super::checkpoint::Checkpoint;
use super::loss::{foreground_soft_dice, SoftDiceLoss};
use crate::arch::{ArchSpec, Network};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Steps between validation passes.
    pub eval_every: u64,
    /// Stop as soon as the validation score reaches this value.
    pub target_val_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: ADAM_EPS,
            max_steps: 500,
            patience: 10,
            batch_size: 1,
            seed: 0,
            augment: true,
            eval_every: 20,
            target_val_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        for (name, v) in [
            ("patience", self.patience as u64),
            ("batch_size", self.batch_size as u64),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

/// Tab-separated `step loss val_dice` lines with a header; `-` marks steps
/// without validation.
pub fn format_log(log: &[StepRecord]) -> String {
    let mut s = String::from("step\tloss\tval_dice\n");
    for r in log {
        let v = r.val_dice.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(s, "{}\t{:.6}\t{}", r.step, r.loss, v).expect("string write");
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the best validation score.
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub evaluations: usize,
    /// Steps actually taken.
    pub steps: u64,
}

/// Mean over samples of the mean foreground soft Dice.
pub fn validation_score(net: &Network, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let probs = net.forward(&batch_of(&[s])?.0)?;
        total += foreground_soft_dice(&probs, s.labels())?;
    }
    Ok(total / samples.len() as f64)
}

fn batch_of(samples: &[&Sample]) -> Result<(Tensor, Vec<u8>)> {
    let first = samples[0];
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.image().shape());
    let mut data = Vec::with_capacity(samples.len() * first.image().numel());
    let mut labels = Vec::with_capacity(samples.len() * first.voxels());
    for s in samples {
        if s.image().shape() != first.image().shape() {
            return Err(Error::invalid(format!(
                "batch mixes shapes {:?} and {:?}",
                first.image().shape(),
                s.image().shape()
            )));
        }
        data.extend_from_slice(s.image().data());
        labels.extend_from_slice(s.labels());
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// One loss evaluation and gradient on a batch; returns the loss.
pub fn loss_and_gradients(net: &Network, batch: &[&Sample]) -> Result<(f64, crate::numerics::Gradients)> {
    let (images, labels) = batch_of(batch)?;
    let mut g = Graph::new();
    let x = g.constant(images);
    let probs = net.record(&mut g, x)?;
    let loss = SoftDiceLoss::new(labels, net.arch().n_classes)?.record(&mut g, probs)?;
    g.output("loss", loss);
    let value = g.eval()?["loss"].item().expect("scalar loss");
    Ok((value, g.backward(loss)?))
}

/// Trains with [`validation_score`] as the stopping criterion.
pub fn train(arch: ArchSpec, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(arch, train_set, val_set, cfg, validation_score)
}

/// Trains from a fresh seeded initialisation, scoring with `validator`.
pub fn train_with(
    arch: ArchSpec,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    validator: impl FnMut(&Network, &[Sample]) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Network::init(arch, cfg.seed)?;
    resume(Checkpoint::initial(net), train_set, val_set, cfg, validator)
}

/// Continues training from `start` for steps `start.step + 1 ..= cfg.max_steps`.
pub fn resume(
    start: Checkpoint,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut validator: impl FnMut(&Network, &[Sample]) -> Result<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let n = start.arch.n_modalities;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.modalities() != n) {
        return Err(Error::invalid(format!(
            "architecture expects {n} modalities, a sample has {}",
            s.modalities()
        )));
    }

    let standardizer = start.standardizer.clone();
    let mut net = start.network()?;
    let mut adam: AdamState = start.adam.clone();
    let mut best = start.clone();
    let adam_cfg = cfg.adam();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut evaluations = 0;
    let mut stale = 0;
    let mut step = start.step;

    while step < cfg.max_steps {
        step += 1;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).rev().collect();
                order.shuffle(&mut rng);
            }
            let s = &train_set[order.pop().expect("refilled")];
            batch.push(if cfg.augment {
                augment_rotate(s, &mut rng)?
            } else {
                s.clone()
            });
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, grads) = loss_and_gradients(&net, &refs)?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                step: step as usize,
                loss,
            });
        }
        adam_step(net.params_mut(), &grads, &mut adam, &adam_cfg, step)?;

        let mut record = StepRecord {
            step,
            loss,
            val_dice: None,
        };
        if step.is_multiple_of(cfg.eval_every) || step == cfg.max_steps {
            let score = validator(&net, val_set)?;
            record.val_dice = Some(score);
            evaluations += 1;
            if score > best.best_val {
                let (arch, params) = net.clone().into_parts();
                best = Checkpoint {
                    arch,
                    step,
                    params,
                    adam: adam.clone(),
                    best_val: score,
                    standardizer: standardizer.clone(),
                };
                stale = 0;
            } else {
                stale += 1;
            }
            log.push(record);
            if stale >= cfg.patience || cfg.target_val_dice.is_some_and(|t| score >= t) {
                break;
            }
            continue;
        }
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: best,
        log,
        evaluations,
        steps: step - start.step,
    })
}
