//! Parameter groups and the full forward pass:
//! encoder → embedding (optionally with skeleton input) → recurrent stack →
//! classification head, plus the regression head and the secondary
//! classifier `y′ = W B + b` over the concatenated predicted skeletons.

use prnn_tensor::params::glorot_uniform;
use prnn_tensor::{Binding, ParameterStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, REGRESSION_DIM};
use crate::error::{Error, Result};
use crate::{encoder, recurrent};

pub const EMBED_W: &str = "embed.w";
pub const EMBED_B: &str = "embed.b";
/// Skeleton-to-embedding weights; present only while pre-training.
pub const EMBED_WE: &str = "embed.we";
pub const REG_W: &str = "head.reg.w";
pub const REG_B: &str = "head.reg.b";
pub const SEC_W: &str = "head.sec.w";
pub const SEC_B: &str = "head.sec.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Conv stack and projection.
    Encoder,
    /// `tanh(W x + b)` between encoder and recurrent stack.
    Embed,
    /// The skeleton branch of the embedding.
    PiEmbed,
    /// Recurrent layers and classification head.
    Recurrent,
    /// Per-frame keypoint regression head.
    Regression,
    /// Classifier over the concatenated predicted skeletons.
    Secondary,
}

pub const ALL_GROUPS: [Group; 6] = [
    Group::Encoder,
    Group::Embed,
    Group::PiEmbed,
    Group::Recurrent,
    Group::Regression,
    Group::Secondary,
];

pub fn group_shapes(cfg: &ModelConfig, group: Group) -> Vec<(String, Vec<usize>)> {
    let d = cfg.encoder.feature_dim;
    let hid = cfg.lstm.hidden_units;
    let k = cfg.num_classes;
    match group {
        Group::Encoder => encoder::param_shapes(&cfg.encoder),
        Group::Embed => vec![(EMBED_W.into(), vec![d, d]), (EMBED_B.into(), vec![d])],
        Group::PiEmbed => vec![(EMBED_WE.into(), vec![3 * cfg.num_joints, d])],
        Group::Recurrent => recurrent::param_shapes(&cfg.lstm, d, k),
        Group::Regression => vec![
            (REG_W.into(), vec![hid, REGRESSION_DIM]),
            (REG_B.into(), vec![REGRESSION_DIM]),
        ],
        Group::Secondary => vec![
            (SEC_W.into(), vec![cfg.skeleton_vector_len(), k]),
            (SEC_B.into(), vec![k]),
        ],
    }
}

/// Adds freshly initialized parameters of `group`.
pub fn add_group<R: Rng>(store: &mut ParameterStore, cfg: &ModelConfig, group: Group, rng: &mut R) -> Result<()> {
    match group {
        Group::Encoder => encoder::add_params(store, &cfg.encoder, rng),
        Group::Recurrent => recurrent::add_params(store, &cfg.lstm, cfg.encoder.feature_dim, cfg.num_classes, rng),
        _ => {
            for (name, shape) in group_shapes(cfg, group) {
                let value = if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    glorot_uniform(&shape, rng)
                };
                store.insert(name, value)?;
            }
            Ok(())
        }
    }
}

pub fn init_store<R: Rng>(cfg: &ModelConfig, groups: &[Group], rng: &mut R) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for &g in groups {
        add_group(&mut store, cfg, g, rng)?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly shape-compatible members of known
/// groups and that the depth-only path (encoder, embedding, recurrent) is
/// complete.
pub fn check_shapes(store: &ParameterStore, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let expected: Vec<(String, Vec<usize>)> = ALL_GROUPS.iter().flat_map(|&g| group_shapes(cfg, g)).collect();
    for (name, t) in store.iter() {
        match expected.iter().find(|(n, _)| n == name) {
            Some((_, shape)) if shape.as_slice() == t.shape() => {}
            Some((_, shape)) => {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())))
            }
            None => return Err(Error::Shape(format!("unexpected parameter {name}"))),
        }
    }
    for g in [Group::Encoder, Group::Embed, Group::Recurrent] {
        for (name, _) in group_shapes(cfg, g) {
            if !store.contains(&name) {
                return Err(Error::Shape(format!("missing parameter {name}")));
            }
        }
    }
    Ok(())
}

/// Tape handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: Var,
    /// `[T, K]` tanh-bounded class scores.
    pub cls_logits: Var,
    /// `[T, K]` per-frame class distributions.
    pub cls_probs: Var,
    /// `[T, 12]` normalized keypoint predictions, when the regression head exists.
    pub regression: Option<Var>,
    /// `[1, K]` secondary scores y′, when both regression and secondary heads exist.
    pub sec_logits: Option<Var>,
    pub sec_probs: Option<Var>,
}

impl Forward {
    /// Class distribution at the final frame, `[1, K]`.
    pub fn final_probs(&self, tape: &Tape) -> Result<Var> {
        let t = tape.shape(self.cls_probs)[0];
        Ok(tape.row(self.cls_probs, t - 1)?)
    }
}

/// `x′ = tanh(W x + W_e E + b)` over `[T, D]` features; without a skeleton
/// `[T, 3S]` the `W_e E` term is dropped.
pub fn pretrain_embed(tape: &Tape, params: &Binding, features: Var, skeleton: Option<Var>) -> Result<Var> {
    let mut z = tape.matmul(features, params.var(EMBED_W)?)?;
    if let Some(e) = skeleton {
        z = tape.add(z, tape.matmul(e, params.var(EMBED_WE)?)?)?;
    }
    Ok(tape.tanh(tape.add_bias(z, params.var(EMBED_B)?)?))
}

/// Runs the network on `frames` (`[T, side, side, 1]`). With `skeleton`
/// (`[T, 3S]`) the embedding adds the skeleton branch, which must then be
/// bound.
pub fn forward(
    tape: &Tape,
    params: &Binding,
    cfg: &ModelConfig,
    frames: Var,
    skeleton: Option<Var>,
) -> Result<Forward> {
    let t_len = tape.shape(frames)[0];
    if t_len > cfg.lstm.max_unroll {
        return Err(Error::Shape(format!(
            "{t_len} frames exceed the unroll limit {}",
            cfg.lstm.max_unroll
        )));
    }
    let enc = encoder::encode(tape, params, &cfg.encoder, frames)?;
    let embedded = pretrain_embed(tape, params, enc.features, skeleton)?;
    let hidden = recurrent::run_layers(tape, params, &cfg.lstm, embedded)?;
    let (cls_logits, cls_probs) = recurrent::class_head(tape, params, hidden)?;

    let regression = if params.has(REG_W) {
        let r = tape.add_bias(tape.matmul(hidden, params.var(REG_W)?)?, params.var(REG_B)?)?;
        Some(tape.tanh(r))
    } else {
        None
    };
    let (sec_logits, sec_probs) = match regression {
        Some(r) if params.has(SEC_W) => {
            let b = tape.reshape(r, &[1, t_len * REGRESSION_DIM])?;
            let b = tape.pad_cols(b, cfg.skeleton_vector_len())?;
            let y = tape.add_bias(tape.matmul(b, params.var(SEC_W)?)?, params.var(SEC_B)?)?;
            (Some(y), Some(tape.softmax(y)?))
        }
        _ => (None, None),
    };
    Ok(Forward {
        hidden,
        cls_logits,
        cls_probs,
        regression,
        sec_logits,
        sec_probs,
    })
}

/// `y′ = W B + b` for an explicit predicted-skeleton vector `B`, which may
/// be shorter than `12·T_max` (it is zero-padded).
pub fn skeleton_to_logits(b: &[f64], store: &ParameterStore, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let len = cfg.skeleton_vector_len();
    if b.len() > len || !b.len().is_multiple_of(REGRESSION_DIM) {
        return Err(Error::Shape(format!(
            "skeleton vector of length {} (max {len}, multiple of {REGRESSION_DIM})",
            b.len()
        )));
    }
    let w = store.require(SEC_W)?;
    let bias = store.require(SEC_B)?;
    if w.shape() != [len, cfg.num_classes] || bias.shape() != [cfg.num_classes] {
        return Err(Error::Shape(format!("secondary head {:?} for B of {len}", w.shape())));
    }
    let k = cfg.num_classes;
    let mut y = bias.data().to_vec();
    for (i, &bi) in b.iter().enumerate() {
        for (c, yc) in y.iter_mut().enumerate() {
            *yc += bi * w.data()[i * k + c];
        }
    }
    Ok(y)
}
