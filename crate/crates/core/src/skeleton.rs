//! Skeleton annotations (the privileged information) and their
//! preprocessing: hip-centering, Savitzky–Golay smoothing and keypoint
//! normalization for the regression targets.

use nalgebra::{DMatrix, DVector};
use prnn_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{REGRESSION_DIM, REGRESSION_JOINTS};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    Head,
    LeftHand,
    RightHand,
    LeftFoot,
    RightFoot,
    HipCenter,
}

/// Joints used as regression targets, in output order.
pub const REGRESSION_SUBSET: [Joint; REGRESSION_JOINTS] = [
    Joint::Head,
    Joint::LeftHand,
    Joint::RightHand,
    Joint::LeftFoot,
    Joint::RightFoot,
    Joint::HipCenter,
];

/// Per-frame joint coordinates `(x, y, depth)`, shaped `[T, S, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonAnnotation {
    joints: Vec<Joint>,
    coords: Tensor,
}

impl SkeletonAnnotation {
    pub fn new(joints: Vec<Joint>, coords: Tensor) -> Result<Self> {
        match *coords.shape() {
            [_, s, 3] if s == joints.len() => {}
            _ => {
                return Err(Error::Shape(format!(
                    "skeleton coords must be [T, {}, 3], got {:?}",
                    joints.len(),
                    coords.shape()
                )))
            }
        }
        if !coords.all_finite() {
            return Err(Error::Numeric("skeleton coordinate".into()));
        }
        Ok(Self { joints, coords })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn joint_index(&self, joint: Joint) -> Option<usize> {
        self.joints.iter().position(|&j| j == joint)
    }

    /// `(x, y, depth)` of joint `s` at frame `t`.
    pub fn at(&self, t: usize, s: usize) -> [f64; 3] {
        let i = (t * self.joints.len() + s) * 3;
        let d = self.coords.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    /// Keeps the last `n` frames.
    pub fn last_frames(&self, n: usize) -> Self {
        let t = self.frames();
        if n >= t {
            return self.clone();
        }
        let per = self.joints.len() * 3;
        let data = self.coords.data()[(t - n) * per..].to_vec();
        Self {
            joints: self.joints.clone(),
            coords: Tensor::new(&[n, self.joints.len(), 3], data).expect("slice of valid tensor"),
        }
    }
}

/// Translates every frame so the hip center sits at the origin.
pub fn normalize_skeleton(raw: &SkeletonAnnotation) -> Result<SkeletonAnnotation> {
    let hip = raw
        .joint_index(Joint::HipCenter)
        .ok_or_else(|| Error::Validation {
            what: "skeleton",
            reason: "hip-center joint missing".into(),
        })?;
    let s = raw.joints.len();
    let mut data = raw.coords.data().to_vec();
    for frame in data.chunks_mut(3 * s) {
        let origin = [frame[3 * hip], frame[3 * hip + 1], frame[3 * hip + 2]];
        for joint in frame.chunks_mut(3) {
            for (v, o) in joint.iter_mut().zip(origin) {
                *v -= o;
            }
        }
    }
    SkeletonAnnotation::new(raw.joints.clone(), Tensor::new(raw.coords.shape(), data)?)
}

/// Least-squares weights of a centered Savitzky–Golay window.
pub fn sg_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || order >= window {
        return invalid(
            "smoothing window",
            format!("window must be odd and larger than the order (window {window}, order {order})"),
        );
    }
    let half = (window / 2) as f64;
    let design = DMatrix::from_fn(window, order + 1, |i, j| (i as f64 - half).powi(j as i32));
    let gram = design.transpose() * &design;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular smoothing design".into()))?;
    // Value of the fitted polynomial at the center is its constant term.
    let weights = inv.row(0) * design.transpose();
    Ok(weights.iter().copied().collect())
}

/// Savitzky–Golay smoothing with odd-symmetric reflection at both ends
/// (`x[−i] = 2x[0] − x[i]`), which reproduces polynomial data of degree ≤ 1
/// exactly at the edges. Series shorter than the window are returned as is.
pub fn sg_smooth(series: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    let weights = sg_coefficients(window, order)?;
    let n = series.len();
    if n < window {
        return Ok(series.to_vec());
    }
    let half = window / 2;
    let at = |i: isize| -> f64 {
        if i < 0 {
            2.0 * series[0] - series[(-i) as usize]
        } else if i as usize >= n {
            let j = 2 * (n - 1) - i as usize;
            2.0 * series[n - 1] - series[j]
        } else {
            series[i as usize]
        }
    };
    let w = DVector::from_vec(weights);
    Ok((0..n)
        .map(|c| {
            (0..window)
                .map(|k| w[k] * at(c as isize + k as isize - half as isize))
                .sum()
        })
        .collect())
}

/// Smooths every joint coordinate over time.
pub fn smooth_skeleton(raw: &SkeletonAnnotation, window: usize, order: usize) -> Result<SkeletonAnnotation> {
    let (t, s) = (raw.frames(), raw.joints.len());
    let mut data = raw.coords.data().to_vec();
    for j in 0..s {
        for axis in 0..3 {
            let idx = |f: usize| (f * s + j) * 3 + axis;
            let series: Vec<f64> = (0..t).map(|f| data[idx(f)]).collect();
            for (f, v) in sg_smooth(&series, window, order)?.into_iter().enumerate() {
                data[idx(f)] = v;
            }
        }
    }
    SkeletonAnnotation::new(raw.joints.clone(), Tensor::new(raw.coords.shape(), data)?)
}

/// Input region against which keypoints are normalized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Region {
    /// The whole `side × side` frame in continuous pixel coordinates.
    pub fn frame(side: usize) -> Self {
        let s = side as f64;
        Self {
            cx: s / 2.0,
            cy: s / 2.0,
            width: s,
            height: s,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return invalid("region", format!("degenerate {}×{}", self.width, self.height));
        }
        Ok(())
    }
}

/// `x' = 2(x − cx)/w`, `y' = 2(y − cy)/h`, clamped to [−1, 1].
pub fn normalize_keypoints(points: &[[f64; 2]], region: Region) -> Result<Vec<[f64; 2]>> {
    region.validate()?;
    Ok(points
        .iter()
        .map(|&[x, y]| {
            [
                (2.0 * (x - region.cx) / region.width).clamp(-1.0, 1.0),
                (2.0 * (y - region.cy) / region.height).clamp(-1.0, 1.0),
            ]
        })
        .collect())
}

pub fn denormalize_keypoints(points: &[[f64; 2]], region: Region) -> Result<Vec<[f64; 2]>> {
    region.validate()?;
    Ok(points
        .iter()
        .map(|&[x, y]| [region.cx + x * region.width / 2.0, region.cy + y * region.height / 2.0])
        .collect())
}

/// Regression targets `[T, 12]`: normalized (x, y) of the six-joint subset.
pub fn regression_targets(ann: &SkeletonAnnotation, region: Region) -> Result<Tensor> {
    let idx = REGRESSION_SUBSET
        .iter()
        .map(|&j| {
            ann.joint_index(j).ok_or_else(|| Error::Validation {
                what: "skeleton",
                reason: format!("regression joint {j:?} missing"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(ann.frames() * REGRESSION_DIM);
    for t in 0..ann.frames() {
        let pts: Vec<[f64; 2]> = idx
            .iter()
            .map(|&s| {
                let [x, y, _] = ann.at(t, s);
                [x, y]
            })
            .collect();
        for [x, y] in normalize_keypoints(&pts, region)? {
            data.push(x);
            data.push(y);
        }
    }
    Ok(Tensor::new(&[ann.frames(), REGRESSION_DIM], data)?)
}

/// Embedding input `[T, 3S]`: hip-centered joints with x, y scaled by the
/// region half-extent (depth is kept as is).
pub fn embedding_inputs(ann: &SkeletonAnnotation, region: Region) -> Result<Tensor> {
    region.validate()?;
    let centered = normalize_skeleton(ann)?;
    let s = ann.joints.len();
    let data = centered
        .coords
        .data()
        .chunks(3)
        .flat_map(|j| [2.0 * j[0] / region.width, 2.0 * j[1] / region.height, j[2]])
        .collect();
    Ok(Tensor::new(&[ann.frames(), 3 * s], data)?)
}
