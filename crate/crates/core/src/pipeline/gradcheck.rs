//! Finite-difference checks of the composite multi-task and refining losses
//! on a tiny model, with respect to every parameter at once.

use prnn_tensor::{func, grad_check, Binding, ParameterStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CellKind, EncoderConfig, LstmConfig, ModelConfig, Scale, REGRESSION_DIM};
use crate::error::Result;
use crate::pipeline::data::Sample;
use crate::pipeline::losses::{multitask_term, refining_term};
use crate::pipeline::model::{forward, init_store, ALL_GROUPS, EMBED_WE};

/// Smallest configuration that exercises every layer: 32×32 input, two
/// channels per conv stage, 4 features, two 3-unit LSTM layers, K = 2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: 32,
            conv_channels: vec![2; 5],
            feature_dim: 4,
            scale: Scale::Desk,
        },
        lstm: LstmConfig {
            num_layers: 2,
            hidden_units: 3,
            max_unroll: 3,
            cell: CellKind::Lstm,
        },
        num_classes: 2,
        num_joints: 6,
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Random parameters (biases included, so no unit starts exactly at a
/// kink) and a random two-frame sample.
fn instance(cfg: &ModelConfig, seed: u64) -> Result<(ParameterStore, Sample)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<_> = ALL_GROUPS.to_vec();
    let base = init_store(cfg, &groups, &mut rng)?;
    let mut store = ParameterStore::new();
    for (name, t) in base.iter() {
        if name == EMBED_WE {
            continue;
        }
        let v = if t.rank() == 1 { uniform(t.shape(), &mut rng).map(|x| 0.1 * x) } else { t.clone() };
        store.insert(name, v)?;
    }
    let t_len = 2;
    let side = cfg.encoder.input_size;
    let sample = Sample {
        id: format!("check{seed}"),
        label: rng.gen_range(0..cfg.num_classes),
        frames: uniform(&[t_len, side, side, 1], &mut rng),
        skeleton: None,
        targets: Some(uniform(&[t_len, REGRESSION_DIM], &mut rng).map(|x| 0.9 * x)),
    };
    Ok((store, sample))
}

fn check(
    store: &ParameterStore,
    h: f64,
    loss: impl Fn(&Tape, &Binding) -> Result<Var>,
) -> Result<f64> {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let point: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let err = grad_check(
        |tape, vars| {
            let binding = Binding::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            loss(tape, &binding).map_err(|e| prnn_tensor::TensorError::Invalid(e.to_string()))
        },
        &point,
        h,
    )?;
    Ok(err)
}

/// Max relative gradient error of the multi-task loss (λ = 0.7).
pub fn multitask_error(seed: u64, h: f64) -> Result<f64> {
    let cfg = tiny_config();
    let (store, sample) = instance(&cfg, seed)?;
    check(&store, h, |tape, params| {
        let x = tape.constant(sample.frames.clone());
        let fwd = forward(tape, params, &cfg, x, None)?;
        multitask_term(tape, &fwd, &sample, 0.7)
    })
}

/// Max relative gradient error of the refining loss (β = 0.5) with a random
/// soft target.
pub fn refining_error(seed: u64, h: f64) -> Result<f64> {
    let cfg = tiny_config();
    let (store, sample) = instance(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let raw: Vec<f64> = (0..cfg.num_classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let target = func::softmax(&raw);
    check(&store, h, |tape, params| {
        let x = tape.constant(sample.frames.clone());
        let fwd = forward(tape, params, &cfg, x, None)?;
        refining_term(tape, &fwd, &target, sample.label, 0.5)
    })
}
