//! Model and training configuration, with the `paper` and `desk` presets.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Number of max-pool stages; input sides must be divisible by `2^STAGES`.
pub const STAGES: usize = 5;

/// Keypoints regressed per frame: head, hands, feet and hip center.
pub const REGRESSION_JOINTS: usize = 6;

/// Regression outputs per frame, (x, y) per keypoint.
pub const REGRESSION_DIM: usize = 2 * REGRESSION_JOINTS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub scale: Scale,
}

impl EncoderConfig {
    /// 224×224 input, VGG-style channel doubling to a 7×7×512 map, 1000-d features.
    pub fn paper() -> Self {
        Self {
            input_size: 224,
            conv_channels: vec![64, 128, 256, 512, 512],
            feature_dim: 1000,
            scale: Scale::Paper,
        }
    }

    pub fn desk() -> Self {
        Self {
            input_size: 32,
            conv_channels: vec![8, 16, 16, 32, 32],
            feature_dim: 64,
            scale: Scale::Desk,
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != STAGES {
            return invalid(
                "encoder config",
                format!("expected {STAGES} conv layers, got {}", self.conv_channels.len()),
            );
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << STAGES) {
            return invalid(
                "encoder config",
                format!("input size {} is not divisible by {}", self.input_size, 1 << STAGES),
            );
        }
        if self.feature_dim == 0 || self.conv_channels.contains(&0) {
            return invalid("encoder config", "zero-sized layer");
        }
        Ok(())
    }

    /// Side length of the map after the last pooling stage.
    pub fn final_side(&self) -> usize {
        self.input_size >> STAGES
    }

    /// Shape `[side, side, channels]` of the flattened activation map fed
    /// to the projection.
    pub fn final_map_shape(&self) -> [usize; 3] {
        let s = self.final_side();
        [s, s, *self.conv_channels.last().expect("validated")]
    }

    pub fn flat_dim(&self) -> usize {
        self.final_map_shape().iter().product()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Lstm,
    /// `h_t = tanh(W x_t + U h_{t-1} + b)`; ablation only.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub num_layers: usize,
    pub hidden_units: usize,
    pub max_unroll: usize,
    #[serde(default)]
    pub cell: CellKind,
}

impl LstmConfig {
    pub fn paper() -> Self {
        Self {
            num_layers: 2,
            hidden_units: 1000,
            max_unroll: 100,
            cell: CellKind::Lstm,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            hidden_units: 64,
            max_unroll: 30,
            cell: CellKind::Lstm,
        }
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Paper => Self::paper(),
            Scale::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_units == 0 || self.max_unroll == 0 {
            return invalid("lstm config", "layers, units and unroll must be positive");
        }
        Ok(())
    }
}

/// Everything needed to build and shape-check a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lstm: LstmConfig,
    pub num_classes: usize,
    /// Joints per skeleton annotation (the embedding input is `3 × num_joints`).
    pub num_joints: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            lstm: LstmConfig::desk(),
            num_classes,
            num_joints: REGRESSION_JOINTS,
        }
    }

    pub fn paper(num_classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            lstm: LstmConfig::paper(),
            num_classes,
            num_joints: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lstm.validate()?;
        if self.num_classes == 0 {
            return invalid("model config", "num_classes must be positive");
        }
        if self.num_joints == 0 {
            return invalid("model config", "num_joints must be positive");
        }
        Ok(())
    }

    /// Length of the zero-padded predicted-skeleton vector B.
    pub fn skeleton_vector_len(&self) -> usize {
        REGRESSION_DIM * self.lstm.max_unroll
    }
}

/// Loss weights, optimizer and EM settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Regression weight in the multi-task loss.
    pub lambda: f64,
    /// Label-disturbance strength, in [0, 1].
    pub alpha: f64,
    /// Weight of the secondary softmax term in the refining loss.
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub em_max_iters: usize,
    /// Relative change in Q below which EM stops.
    pub em_tol: f64,
    /// Adam epochs on the refining loss per EM iteration.
    pub epochs_per_m_step: usize,
    /// Smoothing of the initial bridging matrix, `(1−ε)I + ε/K`.
    pub bridge_init_eps: f64,
    pub pretrain_epochs: usize,
    pub learn_epochs: usize,
    /// Epochs without validation improvement before stopping a stage.
    pub patience: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.4,
            beta: 0.5,
            lr: 1e-3,
            batch: 10,
            em_max_iters: 20,
            em_tol: 1e-6,
            epochs_per_m_step: 1,
            bridge_init_eps: 0.1,
            pretrain_epochs: 30,
            learn_epochs: 30,
            patience: 6,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return invalid("hyperparameters", "lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid("hyperparameters", "alpha must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) {
            return invalid("hyperparameters", "beta must be >= 0");
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return invalid("hyperparameters", "lr and batch must be positive");
        }
        if !(self.em_tol >= 0.0) || !(0.0..1.0).contains(&self.bridge_init_eps) {
            return invalid("hyperparameters", "em_tol >= 0 and bridge_init_eps in [0, 1) required");
        }
        if self.epochs_per_m_step == 0 {
            return invalid("hyperparameters", "epochs_per_m_step must be positive");
        }
        Ok(())
    }
}
