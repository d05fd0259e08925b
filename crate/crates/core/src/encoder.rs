//! Per-frame convolutional encoder and the projection onto feature vectors.
//!
//! Five `conv3×3 → ReLU → maxpool2` stages reduce a square depth frame by
//! `2^5`; the flattened map goes through `tanh(W f + b)`. ReLU is used
//! inside the conv stack and tanh only in the projection.

use prnn_tensor::params::glorot_uniform;
use prnn_tensor::{Binding, ParameterStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::EncoderConfig;
use crate::error::{invalid, Error, Result};

/// A depth frame with pixel values in [−1, 1], shaped `[side, side, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pixels: Tensor,
}

impl DepthFrame {
    pub fn new(pixels: Tensor) -> Result<Self> {
        match *pixels.shape() {
            [h, w, 1] if h == w => {}
            _ => {
                return Err(Error::Shape(format!(
                    "depth frame must be [side, side, 1], got {:?}",
                    pixels.shape()
                )))
            }
        }
        if pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return invalid("depth frame", "pixel values must lie in [-1, 1]");
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Encoder output `x_t`; entries lie strictly inside (−1, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Affine map of raw depth `[min, max] → [−1, 1]`, clamping values outside.
pub fn normalize_depth(raw: &Tensor, min_depth: f64, max_depth: f64) -> Result<DepthFrame> {
    if !(max_depth > min_depth) || !min_depth.is_finite() || !max_depth.is_finite() {
        return invalid(
            "depth range",
            format!("need finite max > min, got [{min_depth}, {max_depth}]"),
        );
    }
    let [h, w] = *raw.shape() else {
        return Err(Error::Shape(format!("raw depth must be [H, W], got {:?}", raw.shape())));
    };
    let span = max_depth - min_depth;
    let scaled = raw.map(|d| (2.0 * (d - min_depth) / span - 1.0).clamp(-1.0, 1.0));
    DepthFrame::new(scaled.reshape(&[h, w, 1])?)
}

pub fn conv_names(layer: usize) -> (String, String) {
    (format!("encoder.conv{layer}.w"), format!("encoder.conv{layer}.b"))
}

pub const PROJ_W: &str = "encoder.proj.w";
pub const PROJ_B: &str = "encoder.proj.b";

/// Expected `(name, shape)` of every encoder parameter.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = 1;
    for (i, &cout) in cfg.conv_channels.iter().enumerate() {
        let (w, b) = conv_names(i + 1);
        out.push((w, vec![3, 3, cin, cout]));
        out.push((b, vec![cout]));
        cin = cout;
    }
    out.push((PROJ_W.into(), vec![cfg.flat_dim(), cfg.feature_dim]));
    out.push((PROJ_B.into(), vec![cfg.feature_dim]));
    out
}

/// Adds normalized-initialized weights and zero biases to `store`.
pub fn add_params<R: Rng>(store: &mut ParameterStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in param_shapes(cfg) {
        let value = if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else {
            glorot_uniform(&shape, rng)
        };
        store.insert(name, value)?;
    }
    Ok(())
}

pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    add_params(&mut store, cfg, &mut crate::rng::stream(seed, "encoder.init"))?;
    Ok(store)
}

/// Spatial shape `[side, side, channels]` after each conv/pool stage.
pub fn shape_trace(cfg: &EncoderConfig) -> Vec<[usize; 3]> {
    let mut side = cfg.input_size;
    cfg.conv_channels
        .iter()
        .map(|&c| {
            side = side.div_ceil(2);
            [side, side, c]
        })
        .collect()
}

/// Output of [`encode`]: the last pooled map and the projected features.
pub struct Encoded {
    pub map: Var,
    pub features: Var,
}

/// Encodes a batch of frames `[T, side, side, 1]` into features `[T, feature_dim]`.
pub fn encode(tape: &Tape, params: &Binding, cfg: &EncoderConfig, frames: Var) -> Result<Encoded> {
    let shape = tape.shape(frames);
    let t = match *shape.as_slice() {
        [t, h, w, 1] if h == cfg.input_size && w == cfg.input_size => t,
        _ => {
            return Err(Error::Shape(format!(
                "encoder expects [T, {s}, {s}, 1] frames, got {shape:?}",
                s = cfg.input_size
            )))
        }
    };
    let mut x = frames;
    for layer in 1..=cfg.conv_channels.len() {
        let (w, b) = conv_names(layer);
        x = tape.conv2d_same(x, params.var(&w)?, params.var(&b)?)?;
        x = tape.maxpool2(tape.relu(x))?;
    }
    let map = x;
    let flat = tape.reshape(map, &[t, cfg.flat_dim()])?;
    let z = tape.matmul(flat, params.var(PROJ_W)?)?;
    let features = tape.tanh(tape.add_bias(z, params.var(PROJ_B)?)?);
    Ok(Encoded { map, features })
}

/// Encodes a single frame without recording gradients for later use.
pub fn encode_frame(frame: &DepthFrame, store: &ParameterStore, cfg: &EncoderConfig) -> Result<FeatureVector> {
    if frame.side() != cfg.input_size {
        return Err(Error::Shape(format!(
            "frame side {} does not match encoder input {}",
            frame.side(),
            cfg.input_size
        )));
    }
    let tape = Tape::new();
    let params = bind_encoder(store, &tape, cfg)?;
    let side = cfg.input_size;
    let frames = tape.constant(frame.pixels().reshape(&[1, side, side, 1])?);
    let out = encode(&tape, &params, cfg, frames)?;
    let values = tape.value(out.features).data().to_vec();
    Ok(FeatureVector(values))
}

fn bind_encoder(store: &ParameterStore, tape: &Tape, cfg: &EncoderConfig) -> Result<Binding> {
    for (name, shape) in param_shapes(cfg) {
        let t = store.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "{name}: expected {shape:?}, found {:?}",
                t.shape()
            )));
        }
    }
    Ok(store.filtered(|n| n.starts_with("encoder.")).bind(tape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_depth_cases() {
        let raw = Tensor::full(&[2, 2], 500.0);
        let f = normalize_depth(&raw, 500.0, 4000.0).unwrap();
        assert!(f.pixels().data().iter().all(|&v| v == -1.0));
        let f = normalize_depth(&Tensor::full(&[2, 2], 2250.0), 500.0, 4000.0).unwrap();
        assert!(f.pixels().data().iter().all(|&v| v == 0.0));
        let f = normalize_depth(&Tensor::full(&[2, 2], 9000.0), 500.0, 4000.0).unwrap();
        assert!(f.pixels().data().iter().all(|&v| v == 1.0));
        assert!(normalize_depth(&raw, 1.0, 1.0).is_err());
    }

    #[test]
    fn desk_trace() {
        let trace = shape_trace(&EncoderConfig::desk());
        assert_eq!(trace[0], [16, 16, 8]);
        assert_eq!(trace[4], [1, 1, 32]);
        let paper = shape_trace(&EncoderConfig::paper());
        assert_eq!(paper[4], [7, 7, 512]);
        for (i, s) in paper.iter().enumerate() {
            assert_eq!(s[0], 224 >> (i + 1));
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = EncoderConfig::desk();
        let a = init_params(&cfg, 11).unwrap();
        let b = init_params(&cfg, 11).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
            if na.ends_with(".b") {
                assert!(ta.data().iter().all(|&v| v == 0.0));
            }
        }
        let k = a.get("encoder.conv1.w").unwrap();
        let bound = (6.0f64 / (9.0 + 72.0)).sqrt();
        assert!(k.data().iter().all(|v| v.abs() <= bound));
        assert_ne!(init_params(&cfg, 12).unwrap().get("encoder.conv1.w").unwrap(), k);
    }

    #[test]
    fn zero_params_give_zero_features() {
        let cfg = EncoderConfig::desk();
        let mut store = ParameterStore::new();
        for (name, shape) in param_shapes(&cfg) {
            store.insert(name, Tensor::zeros(&shape)).unwrap();
        }
        let frame = DepthFrame::new(Tensor::full(&[32, 32, 1], 0.3)).unwrap();
        let x = encode_frame(&frame, &store, &cfg).unwrap();
        assert_eq!(x.0.len(), 64);
        assert!(x.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_frame_size_is_shape_error() {
        let cfg = EncoderConfig::desk();
        let store = init_params(&cfg, 1).unwrap();
        let frame = DepthFrame::new(Tensor::zeros(&[64, 64, 1])).unwrap();
        assert!(matches!(encode_frame(&frame, &store, &cfg), Err(Error::Shape(_))));
    }
}
