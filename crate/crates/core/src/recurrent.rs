//! Stacked LSTM (or vanilla tanh RNN) over feature sequences, and the
//! classification head `softmax(tanh(W h_t + b))`.

use prnn_tensor::params::glorot_uniform;
use prnn_tensor::{func, Binding, ParameterStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{CellKind, LstmConfig};
use crate::encoder::FeatureVector;
use crate::error::{invalid, Error, Result};

pub const GATES: [&str; 4] = ["i", "f", "o", "c"];
pub const CLS_W: &str = "head.cls.w";
pub const CLS_B: &str = "head.cls.b";

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

fn layer_prefix(layer: usize) -> String {
    format!("rnn.layer{layer}")
}

/// Expected `(name, shape)` of the recurrent stack and classification head.
pub fn param_shapes(cfg: &LstmConfig, input_dim: usize, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let hid = cfg.hidden_units;
    let mut out = Vec::new();
    for layer in 1..=cfg.num_layers {
        let p = layer_prefix(layer);
        let inp = if layer == 1 { input_dim } else { hid };
        match cfg.cell {
            CellKind::Lstm => {
                for g in GATES {
                    out.push((format!("{p}.w{g}"), vec![inp, hid]));
                }
                for g in GATES {
                    out.push((format!("{p}.u{g}"), vec![hid, hid]));
                }
                for g in GATES {
                    out.push((format!("{p}.b{g}"), vec![hid]));
                }
            }
            CellKind::Vanilla => {
                out.push((format!("{p}.wh"), vec![inp, hid]));
                out.push((format!("{p}.uh"), vec![hid, hid]));
                out.push((format!("{p}.bh"), vec![hid]));
            }
        }
    }
    out.push((CLS_W.into(), vec![hid, num_classes]));
    out.push((CLS_B.into(), vec![num_classes]));
    out
}

pub fn add_params<R: Rng>(
    store: &mut ParameterStore,
    cfg: &LstmConfig,
    input_dim: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in param_shapes(cfg, input_dim, num_classes) {
        let value = if shape.len() == 1 {
            let fill = if name.ends_with(".bf") { FORGET_BIAS } else { 0.0 };
            Tensor::full(&shape, fill)
        } else {
            glorot_uniform(&shape, rng)
        };
        store.insert(name, value)?;
    }
    Ok(())
}

/// Per-layer hidden and cell vectors, each `[1, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<Tensor>,
    pub c: Vec<Tensor>,
}

impl LstmState {
    pub fn zeros(cfg: &LstmConfig) -> Self {
        let z = Tensor::zeros(&[1, cfg.hidden_units]);
        Self {
            h: vec![z.clone(); cfg.num_layers],
            c: vec![z; cfg.num_layers],
        }
    }
}

/// Tape-resident counterpart of [`LstmState`].
#[derive(Clone, Debug)]
pub struct StateVars {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl StateVars {
    pub fn constant(tape: &Tape, state: &LstmState) -> Self {
        Self {
            h: state.h.iter().map(|t| tape.constant(t.clone())).collect(),
            c: state.c.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    pub fn read(&self, tape: &Tape) -> LstmState {
        LstmState {
            h: self.h.iter().map(|&v| tape.value(v).clone()).collect(),
            c: self.c.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// `act(x_proj + h U + b)` where `x_proj` is the already-projected input.
fn gate(tape: &Tape, params: &Binding, p: &str, g: &str, x_proj: Var, h: Var) -> Result<Var> {
    let rec = tape.matmul(h, params.var(&format!("{p}.u{g}"))?)?;
    let a = tape.add_bias(tape.add(x_proj, rec)?, params.var(&format!("{p}.b{g}"))?)?;
    Ok(if g == "c" { tape.tanh(a) } else { tape.sigmoid(a) })
}

/// One cell update given per-gate input projections (`x W_g`, each `[1, hidden]`).
fn cell_update(
    tape: &Tape,
    params: &Binding,
    cfg: &LstmConfig,
    layer: usize,
    x_proj: &[Var],
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let p = layer_prefix(layer);
    match cfg.cell {
        CellKind::Lstm => {
            let i = gate(tape, params, &p, "i", x_proj[0], h)?;
            let f = gate(tape, params, &p, "f", x_proj[1], h)?;
            let o = gate(tape, params, &p, "o", x_proj[2], h)?;
            let cand = gate(tape, params, &p, "c", x_proj[3], h)?;
            let c_new = tape.add(tape.mul(f, c)?, tape.mul(i, cand)?)?;
            let h_new = tape.mul(o, tape.tanh(c_new))?;
            Ok((h_new, c_new))
        }
        CellKind::Vanilla => {
            let rec = tape.matmul(h, params.var(&format!("{p}.uh"))?)?;
            let a = tape.add_bias(tape.add(x_proj[0], rec)?, params.var(&format!("{p}.bh"))?)?;
            let h_new = tape.tanh(a);
            Ok((h_new, c))
        }
    }
}

fn input_weights(cfg: &LstmConfig, layer: usize) -> Vec<String> {
    let p = layer_prefix(layer);
    match cfg.cell {
        CellKind::Lstm => GATES.iter().map(|g| format!("{p}.w{g}")).collect(),
        CellKind::Vanilla => vec![format!("{p}.wh")],
    }
}

/// Advances every layer by one frame; layer `l > 1` consumes layer `l−1`'s new `h`.
pub fn lstm_step(tape: &Tape, params: &Binding, cfg: &LstmConfig, x: Var, state: &StateVars) -> Result<StateVars> {
    let mut input = x;
    let mut next = StateVars {
        h: Vec::with_capacity(cfg.num_layers),
        c: Vec::with_capacity(cfg.num_layers),
    };
    for layer in 1..=cfg.num_layers {
        let proj = input_weights(cfg, layer)
            .iter()
            .map(|w| Ok(tape.matmul(input, params.var(w)?)?))
            .collect::<Result<Vec<_>>>()?;
        let (h, c) = cell_update(tape, params, cfg, layer, &proj, state.h[layer - 1], state.c[layer - 1])?;
        next.h.push(h);
        next.c.push(c);
        input = h;
    }
    Ok(next)
}

/// Runs the stack over `[T, input_dim]` features from a zero state and
/// returns the top layer's hidden states `[T, hidden]`.
///
/// Input projections are computed for all frames of a layer at once; the
/// result equals repeated [`lstm_step`] calls.
pub fn run_layers(tape: &Tape, params: &Binding, cfg: &LstmConfig, features: Var) -> Result<Var> {
    let shape = tape.shape(features);
    let [t_len, _] = *shape.as_slice() else {
        return Err(Error::Shape(format!("recurrent input must be [T, D], got {shape:?}")));
    };
    let zero = tape.constant(Tensor::zeros(&[1, cfg.hidden_units]));
    let mut input = features;
    for layer in 1..=cfg.num_layers {
        let proj_all = input_weights(cfg, layer)
            .iter()
            .map(|w| Ok(tape.matmul(input, params.var(w)?)?))
            .collect::<Result<Vec<_>>>()?;
        let (mut h, mut c) = (zero, zero);
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let proj = proj_all
                .iter()
                .map(|&p| Ok(tape.row(p, t)?))
                .collect::<Result<Vec<_>>>()?;
            (h, c) = cell_update(tape, params, cfg, layer, &proj, h, c)?;
            rows.push(h);
        }
        input = tape.concat_rows(&rows)?;
    }
    Ok(input)
}

/// Classification head over hidden states `[T, hidden]`: returns
/// `(logits, probs)`, both `[T, K]`, with `logits = tanh(h W + b)`.
pub fn class_head(tape: &Tape, params: &Binding, hidden: Var) -> Result<(Var, Var)> {
    let z = tape.add_bias(tape.matmul(hidden, params.var(CLS_W)?)?, params.var(CLS_B)?)?;
    let logits = tape.tanh(z);
    let probs = tape.softmax(logits)?;
    Ok((logits, probs))
}

/// Per-frame class scores and their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = func::softmax(&logits);
        Self { logits, probs }
    }

    pub fn predicted(&self) -> usize {
        func::argmax(&self.probs)
    }
}

/// Splits `[T, K]` logits into per-frame distributions.
pub fn distributions(logits: &Tensor) -> Vec<ClassDistribution> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| ClassDistribution::from_logits(row.to_vec()))
        .collect()
}

/// Keeps the most recent `max_unroll` items.
pub fn truncate_front<T>(items: &[T], max_unroll: usize) -> &[T] {
    &items[items.len().saturating_sub(max_unroll)..]
}

/// Recurrent stack plus classification head on a feature sequence; one
/// distribution per (kept) frame.
pub fn rnn_forward(
    features: &[FeatureVector],
    store: &ParameterStore,
    cfg: &LstmConfig,
) -> Result<Vec<ClassDistribution>> {
    if features.is_empty() {
        return invalid("feature sequence", "sequence is empty");
    }
    let kept = truncate_front(features, cfg.max_unroll);
    let dim = kept[0].0.len();
    if kept.iter().any(|f| f.0.len() != dim) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let data: Vec<f64> = kept.iter().flat_map(|f| f.0.iter().copied()).collect();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let x = tape.constant(Tensor::new(&[kept.len(), dim], data)?);
    let hidden = run_layers(&tape, &params, cfg, x)?;
    let (logits, _) = class_head(&tape, &params, hidden)?;
    let out = distributions(&tape.value(logits));
    Ok(out)
}
