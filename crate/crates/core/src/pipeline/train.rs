//! Stage drivers: pre-training with skeleton input, multi-task learning and
//! EM refinement with latent targets, chained by [`train_three_step`].

use prnn_tensor::params::accumulate;
use prnn_tensor::{AdamConfig, Binding, GradMap, ParameterStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Hyperparams, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::pipeline::data::Sample;
use crate::pipeline::latent::{
    estep_latent_pi, mstep_bridging, q_loglik_from_logits, sample_disturbed_target, BridgingMatrix, LatentPi,
};
use crate::pipeline::losses::{classification_loss, classification_term, multitask_term, refining_term};
use crate::pipeline::model::{add_group, forward, init_store, Group, EMBED_WE};
use crate::rng;

/// Slack allowed when checking that the closed-form M update does not
/// decrease Q.
pub const Q_MONOTONE_TOL: f64 = 1e-9;

/// Training and validation sequences for one run.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Split {
    fn check(&self, what: &'static str) -> Result<()> {
        if self.train.is_empty() {
            return invalid(what, "empty training set");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// Summed training loss over the epoch (Q-stage: refining loss).
    pub train: f64,
    /// Mean validation cross-entropy at the final frame.
    pub val: f64,
}

/// One row of a stage's training log. Iteration 0 describes the stage input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    #[serde(rename = "Q")]
    pub q: Option<f64>,
    pub losses: Losses,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct StageResult {
    /// Best-validation snapshot.
    pub params: ParameterStore,
    /// State after the last epoch that ran.
    pub last: ParameterStore,
    pub log: Vec<LogEntry>,
    pub best_iteration: usize,
}

/// Per EM iteration: the posteriors used as targets, Q around the
/// closed-form M update, and the updated matrix.
#[derive(Clone, Debug)]
pub struct EmIteration {
    pub iteration: usize,
    pub posteriors: Vec<LatentPi>,
    pub q_before: f64,
    pub q_after: f64,
    pub bridging: BridgingMatrix,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub stage: StageResult,
    /// Bridging matrix belonging to the selected snapshot.
    pub bridging: BridgingMatrix,
    pub em: Vec<EmIteration>,
}

#[derive(Clone, Debug)]
pub struct ThreeStepResult {
    pub pretrain: StageResult,
    pub learn: StageResult,
    pub refine: RefineResult,
}

/// Validation summary of a parameter snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub accuracy: f64,
    pub loss: f64,
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        self.accuracy > other.accuracy || (self.accuracy == other.accuracy && self.loss < other.loss)
    }
}

/// Per-frame class distributions `[T, K]` for one sequence. The skeleton
/// branch is used only when `skeleton` is given.
pub fn predict(store: &ParameterStore, cfg: &ModelConfig, frames: &Tensor, skeleton: Option<&Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let x = tape.constant(frames.clone());
    let e = skeleton.map(|s| tape.constant(s.clone()));
    let fwd = forward(&tape, &params, cfg, x, e)?;
    let probs = tape.value(fwd.cls_probs).clone();
    Ok(probs)
}

fn final_row(probs: &Tensor) -> &[f64] {
    let k = probs.shape()[1];
    &probs.data()[probs.len() - k..]
}

/// Accuracy and mean final-frame cross-entropy over `samples`.
pub fn evaluate(store: &ParameterStore, cfg: &ModelConfig, samples: &[Sample], use_pi: bool) -> Result<Score> {
    if samples.is_empty() {
        return Ok(Score {
            accuracy: 0.0,
            loss: 0.0,
        });
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in samples {
        let skeleton = if use_pi { s.skeleton.as_ref() } else { None };
        let probs = predict(store, cfg, &s.frames, skeleton)?;
        let last = final_row(&probs);
        if prnn_tensor::func::argmax(last) == s.label {
            correct += 1;
        }
        loss += classification_loss(last, s.label)?;
    }
    let n = samples.len() as f64;
    Ok(Score {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Secondary-task scores y′ for one sequence.
pub fn secondary_logits(store: &ParameterStore, cfg: &ModelConfig, sample: &Sample) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let x = tape.constant(sample.frames.clone());
    let fwd = forward(&tape, &params, cfg, x, None)?;
    let y = fwd
        .sec_logits
        .ok_or_else(|| Error::Shape("secondary head missing".into()))?;
    let out = tape.value(y).data().to_vec();
    Ok(out)
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

fn sequence_grads(
    store: &ParameterStore,
    loss_fn: &mut dyn FnMut(&Tape, &Binding) -> Result<Var>,
) -> Result<(f64, GradMap)> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let loss = loss_fn(&tape, &params)?;
    let value = finite(tape.value(loss).item(), "training loss")?;
    let grads = tape.backward(loss)?;
    Ok((value, params.collect(&tape, &grads)))
}

/// One shuffled pass over `n` sequences in minibatches; gradients are
/// summed over each minibatch before an Adam step. Returns the summed loss.
fn run_epoch(
    store: &mut ParameterStore,
    n: usize,
    hp: &Hyperparams,
    rng: &mut ChaCha8Rng,
    loss_fn: &mut dyn FnMut(&Tape, &Binding, usize, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<f64> {
    let adam = AdamConfig::with_lr(hp.lr);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for batch in order.chunks(hp.batch) {
        let mut grads = GradMap::new();
        for &j in batch {
            let (value, g) = sequence_grads(store, &mut |tape, params| loss_fn(tape, params, j, rng))?;
            total += value;
            accumulate(&mut grads, g)?;
        }
        store.adam_step(&grads, &adam)?;
    }
    Ok(total)
}

/// Summed loss without updating anything.
fn total_loss(
    store: &ParameterStore,
    n: usize,
    rng: &mut ChaCha8Rng,
    loss_fn: &mut dyn FnMut(&Tape, &Binding, usize, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..n {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let loss = loss_fn(&tape, &params, j, rng)?;
        total += finite(tape.value(loss).item(), "training loss")?;
    }
    Ok(total)
}

/// Epoch loop with early stopping: runs up to `epochs` epochs and keeps the
/// best-validation snapshot, stopping after `patience` epochs without
/// improvement.
#[allow(clippy::too_many_arguments)]
fn fit(
    mut store: ParameterStore,
    split: &Split,
    cfg: &ModelConfig,
    hp: &Hyperparams,
    epochs: usize,
    val_pi: bool,
    rng: &mut ChaCha8Rng,
    loss_fn: &mut dyn FnMut(&Tape, &Binding, usize, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<StageResult> {
    let n = split.train.len();
    let init_loss = total_loss(&store, n, rng, loss_fn)?;
    let mut best_score = evaluate(&store, cfg, &split.val, val_pi)?;
    let mut log = vec![LogEntry {
        iteration: 0,
        q: None,
        losses: Losses {
            train: init_loss,
            val: best_score.loss,
        },
        val_accuracy: best_score.accuracy,
    }];
    let mut best = store.clone();
    let mut best_iteration = 0;
    for epoch in 1..=epochs {
        let train = run_epoch(&mut store, n, hp, rng, loss_fn)?;
        let score = evaluate(&store, cfg, &split.val, val_pi)?;
        finite(score.loss, "validation loss")?;
        log.push(LogEntry {
            iteration: epoch,
            q: None,
            losses: Losses {
                train,
                val: score.loss,
            },
            val_accuracy: score.accuracy,
        });
        if score.better_than(&best_score) {
            best_score = score;
            best = store.clone();
            best_iteration = epoch;
        } else if epoch - best_iteration >= hp.patience.max(1) {
            log::debug!("early stop at epoch {epoch}, best {best_iteration}");
            break;
        }
    }
    Ok(StageResult {
        params: best,
        last: store,
        log,
        best_iteration,
    })
}

/// Classification training at the final frame. With `with_pi` the
/// embedding also receives the skeleton; without it this is the plain
/// depth-only CNN-RNN.
pub fn run_pretrain(
    split: &Split,
    cfg: &ModelConfig,
    hp: &Hyperparams,
    epochs: usize,
    with_pi: bool,
    seed: u64,
) -> Result<StageResult> {
    split.check("pretraining data")?;
    hp.validate()?;
    if with_pi && split.train.iter().any(|s| s.skeleton.is_none()) {
        return invalid("pretraining data", "skeleton input missing");
    }
    let mut groups = vec![Group::Encoder, Group::Embed, Group::Recurrent];
    if with_pi {
        groups.push(Group::PiEmbed);
    }
    let store = init_store(cfg, &groups, &mut rng::stream(seed, "pretrain.init"))?;
    let mut rng = rng::stream(seed, "pretrain.shuffle");
    let train = &split.train;
    fit(store, split, cfg, hp, epochs, with_pi, &mut rng, &mut |tape, params, j, _| {
        let s = &train[j];
        let x = tape.constant(s.frames.clone());
        let e = if with_pi {
            s.skeleton.as_ref().map(|t| tape.constant(t.clone()))
        } else {
            None
        };
        let fwd = forward(tape, params, cfg, x, e)?;
        classification_term(tape, fwd.final_probs(tape)?, s.label)
    })
}

/// Multi-task learning on depth input. Starts from `init` with the skeleton
/// branch removed (or from scratch when `init` is `None`) and a fresh
/// regression head.
pub fn run_learning(
    split: &Split,
    init: Option<&ParameterStore>,
    cfg: &ModelConfig,
    hp: &Hyperparams,
    epochs: usize,
    seed: u64,
) -> Result<StageResult> {
    split.check("learning data")?;
    hp.validate()?;
    if split.train.iter().any(|s| s.targets.is_none()) {
        return invalid("learning data", "regression targets missing");
    }
    let mut init_rng = rng::stream(seed, "learn.init");
    let mut store = match init {
        Some(p) => p.filtered(|name| name != EMBED_WE),
        None => init_store(cfg, &[Group::Encoder, Group::Embed, Group::Recurrent], &mut init_rng)?,
    };
    add_group(&mut store, cfg, Group::Regression, &mut init_rng)?;
    let mut rng = rng::stream(seed, "learn.shuffle");
    let train = &split.train;
    let lambda = hp.lambda;
    fit(store, split, cfg, hp, epochs, false, &mut rng, &mut |tape, params, j, _| {
        let s = &train[j];
        let x = tape.constant(s.frames.clone());
        let fwd = forward(tape, params, cfg, x, None)?;
        multitask_term(tape, &fwd, s, lambda)
    })
}

fn all_secondary_logits(store: &ParameterStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| secondary_logits(store, cfg, s)).collect()
}

fn posteriors(logits: &[Vec<f64>], labels: &[usize], m: &BridgingMatrix) -> Result<Vec<LatentPi>> {
    logits
        .iter()
        .zip(labels)
        .map(|(s, &g)| estep_latent_pi(s, g, m))
        .collect()
}

/// EM refinement. Each iteration computes latent targets from the current
/// secondary scores and M, runs Adam on the refining loss with freshly
/// disturbed targets, then updates M in closed form with Θ fixed.
pub fn run_refining(
    split: &Split,
    init: &ParameterStore,
    cfg: &ModelConfig,
    hp: &Hyperparams,
    seed: u64,
) -> Result<RefineResult> {
    split.check("refining data")?;
    hp.validate()?;
    let k = cfg.num_classes;
    let m0 = BridgingMatrix::smoothed_identity(k, hp.bridge_init_eps);
    let init_score = evaluate(init, cfg, &split.val, false)?;
    let first = LogEntry {
        iteration: 0,
        q: None,
        losses: Losses {
            train: 0.0,
            val: init_score.loss,
        },
        val_accuracy: init_score.accuracy,
    };
    if hp.em_max_iters == 0 {
        return Ok(RefineResult {
            stage: StageResult {
                params: init.clone(),
                last: init.clone(),
                log: vec![first],
                best_iteration: 0,
            },
            bridging: m0,
            em: Vec::new(),
        });
    }

    let mut store = init.filtered(|_| true);
    let mut init_rng = rng::stream(seed, "refine.init");
    if !store.contains(crate::pipeline::model::REG_W) {
        add_group(&mut store, cfg, Group::Regression, &mut init_rng)?;
    }
    add_group(&mut store, cfg, Group::Secondary, &mut init_rng)?;
    let mut rng = rng::stream(seed, "refine.shuffle");

    let train = &split.train;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let mut m = m0.clone();
    let mut logits = all_secondary_logits(&store, cfg, train)?;
    let mut q_prev = finite(q_loglik_from_logits(&logits, &labels, &m)?, "Q")?;

    let mut log = vec![LogEntry {
        q: Some(q_prev),
        ..first
    }];
    let mut best = init.clone();
    let mut best_m = m0;
    let mut best_score = init_score;
    let mut best_iteration = 0;
    let mut em = Vec::new();

    for iteration in 1..=hp.em_max_iters {
        let us = posteriors(&logits, &labels, &m)?;
        let mut train_loss = 0.0;
        for _ in 0..hp.epochs_per_m_step {
            train_loss = run_epoch(&mut store, train.len(), hp, &mut rng, &mut |tape, params, j, rng| {
                let s = &train[j];
                let (_, target) = sample_disturbed_target(&us[j], s.label, hp.alpha, rng)?;
                let x = tape.constant(s.frames.clone());
                let fwd = forward(tape, params, cfg, x, None)?;
                refining_term(tape, &fwd, &target, s.label, hp.beta)
            })?;
        }
        logits = all_secondary_logits(&store, cfg, train)?;
        let q_before = finite(q_loglik_from_logits(&logits, &labels, &m)?, "Q")?;
        let m_new = mstep_bridging(&posteriors(&logits, &labels, &m)?, &labels)?;
        let q_after = finite(q_loglik_from_logits(&logits, &labels, &m_new)?, "Q")?;
        if q_after < q_before - Q_MONOTONE_TOL {
            return Err(Error::Numeric(format!(
                "Q decreased across the M update ({q_before} -> {q_after})"
            )));
        }
        m = m_new;
        em.push(EmIteration {
            iteration,
            posteriors: us,
            q_before,
            q_after,
            bridging: m.clone(),
        });

        let score = evaluate(&store, cfg, &split.val, false)?;
        finite(score.loss, "validation loss")?;
        log.push(LogEntry {
            iteration,
            q: Some(q_after),
            losses: Losses {
                train: train_loss,
                val: score.loss,
            },
            val_accuracy: score.accuracy,
        });
        if score.better_than(&best_score) {
            best_score = score;
            best = store.clone();
            best_m = m.clone();
            best_iteration = iteration;
        }
        let rel = (q_after - q_prev).abs() / q_prev.abs().max(f64::MIN_POSITIVE);
        q_prev = q_after;
        if rel < hp.em_tol {
            log::debug!("EM converged after {iteration} iterations");
            break;
        }
    }
    Ok(RefineResult {
        stage: StageResult {
            params: best,
            last: store,
            log,
            best_iteration,
        },
        bridging: best_m,
        em,
    })
}

/// Derived per-stage seed, so a stage gives the same result whether run
/// standalone or as part of a longer pipeline.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    rng::derive(seed, &[rng::tag(stage)])
}

/// Pre-training with skeleton input, multi-task learning, then refinement.
pub fn train_three_step(split: &Split, cfg: &ModelConfig, hp: &Hyperparams, seed: u64) -> Result<ThreeStepResult> {
    let pretrain = run_pretrain(split, cfg, hp, hp.pretrain_epochs, true, stage_seed(seed, "pretrain"))?;
    let learn = run_learning(split, Some(&pretrain.params), cfg, hp, hp.learn_epochs, stage_seed(seed, "learn"))?;
    let refine = run_refining(split, &learn.params, cfg, hp, stage_seed(seed, "refine"))?;
    Ok(ThreeStepResult {
        pretrain,
        learn,
        refine,
    })
}
