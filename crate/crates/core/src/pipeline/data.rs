use prnn_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::recurrent::truncate_front;
use crate::skeleton::{embedding_inputs, regression_targets, smooth_skeleton, Region, SkeletonAnnotation};

/// Savitzky–Golay window and order applied to skeleton annotations.
pub const SMOOTH_WINDOW: usize = 5;
pub const SMOOTH_ORDER: usize = 2;

/// One training or evaluation sequence, ready for the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `[T, side, side, 1]`, values in [−1, 1].
    pub frames: Tensor,
    /// `[T, 3S]` embedding input; training-time only.
    pub skeleton: Option<Tensor>,
    /// `[T, 12]` regression targets; training-time only.
    pub targets: Option<Tensor>,
}

impl Sample {
    /// Truncates to the most recent `max_unroll` frames and derives the
    /// skeleton inputs (smoothed; hip-centered for the embedding,
    /// frame-normalized for the regression targets).
    pub fn prepare(
        id: impl Into<String>,
        frames: &Tensor,
        skeleton: Option<&SkeletonAnnotation>,
        label: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let side = cfg.encoder.input_size;
        let [t_len, h, w] = *frames.shape() else {
            return Err(Error::Shape(format!("frames must be [T, H, W], got {:?}", frames.shape())));
        };
        if h != side || w != side {
            return Err(Error::Shape(format!("frames are {h}×{w}, encoder expects {side}×{side}")));
        }
        if label >= cfg.num_classes {
            return invalid("label", format!("class {label} out of range for K = {}", cfg.num_classes));
        }
        let keep = t_len.min(cfg.lstm.max_unroll);
        let per = side * side;
        let kept = truncate_front(frames.data(), keep * per).to_vec();
        let frames = Tensor::new(&[keep, side, side, 1], kept)?;

        let (skeleton, targets) = match skeleton {
            None => (None, None),
            Some(ann) => {
                if ann.frames() != t_len {
                    return Err(Error::Shape(format!(
                        "{} skeleton frames for {t_len} depth frames",
                        ann.frames()
                    )));
                }
                if ann.joints().len() != cfg.num_joints {
                    return Err(Error::Shape(format!(
                        "{} joints, model expects {}",
                        ann.joints().len(),
                        cfg.num_joints
                    )));
                }
                let smooth = smooth_skeleton(&ann.last_frames(keep), SMOOTH_WINDOW, SMOOTH_ORDER)?;
                let region = Region::frame(side);
                (
                    Some(embedding_inputs(&smooth, region)?),
                    Some(regression_targets(&smooth, region)?),
                )
            }
        };
        Ok(Self {
            id: id.into(),
            label,
            frames,
            skeleton,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy without any privileged information.
    pub fn depth_only(&self) -> Self {
        Self {
            skeleton: None,
            targets: None,
            ..self.clone()
        }
    }
}
