//! Composite losses: component oracles, degenerate cases and finite-difference
//! gradients on a tiny model.

use prnn_core::pipeline::data::Sample;
use prnn_core::pipeline::gradcheck::{multitask_error, refining_error, tiny_config};
use prnn_core::pipeline::losses::{
    classification_loss, multitask_loss, multitask_term, refining_loss, refining_term, regression_loss,
};
use prnn_core::pipeline::model::{forward, init_store, pretrain_embed, Group, EMBED_B, EMBED_W, EMBED_WE};
use prnn_tensor::{func, grad_check, Binding, ParameterStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn setup(seed: u64) -> (ParameterStore, Vec<Sample>) {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [Group::Encoder, Group::Embed, Group::Recurrent, Group::Regression, Group::Secondary];
    let store = init_store(&cfg, &groups, &mut rng).unwrap();
    let samples = (0..2)
        .map(|j| Sample {
            id: format!("s{j}"),
            label: j % 2,
            frames: uniform(&[2 + j, 32, 32, 1], &mut rng),
            skeleton: None,
            targets: Some(uniform(&[2 + j, 12], &mut rng)),
        })
        .collect();
    (store, samples)
}

/// Final-frame probabilities and per-frame regression outputs, read off a
/// forward pass.
fn outputs(store: &ParameterStore, s: &Sample) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = tiny_config();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let fwd = forward(&tape, &params, &cfg, tape.constant(s.frames.clone()), None).unwrap();
    let last = tape.value(fwd.final_probs(&tape).unwrap()).data().to_vec();
    let reg = tape.value(fwd.regression.unwrap()).data().to_vec();
    let sec = tape.value(fwd.sec_probs.unwrap()).data().to_vec();
    (last, reg, sec)
}

fn frame_pairs(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks(2).map(|c| [c[0], c[1]]).collect()
}

#[test]
fn multitask_matches_component_sum() {
    let cfg = tiny_config();
    let (store, samples) = setup(1);
    let lambda = 0.3;
    let mut oracle = 0.0;
    for s in &samples {
        let (last, reg, _) = outputs(&store, s);
        oracle += classification_loss(&last, s.label).unwrap();
        let targets = s.targets.as_ref().unwrap().data();
        for t in 0..s.len() {
            let frame = t * 12..(t + 1) * 12;
            oracle += lambda * regression_loss(&frame_pairs(&reg[frame.clone()]), &frame_pairs(&targets[frame])).unwrap();
        }
    }
    let tape = Tape::new();
    let params = store.bind(&tape);
    let total = multitask_loss(&tape, &params, &cfg, &samples, lambda).unwrap();
    assert!((tape.value(total).item() - oracle).abs() < 1e-12);
}

#[test]
fn multitask_degenerate_weights() {
    let cfg = tiny_config();
    let (store, samples) = setup(2);
    let cls: f64 = samples
        .iter()
        .map(|s| classification_loss(&outputs(&store, s).0, s.label).unwrap())
        .sum();
    let tape = Tape::new();
    let params = store.bind(&tape);
    let l0 = multitask_loss(&tape, &params, &cfg, &samples, 0.0).unwrap();
    assert!((tape.value(l0).item() - cls).abs() < 1e-12);

    // Targets equal to the predictions: the regression term vanishes.
    let perfect: Vec<Sample> = samples
        .iter()
        .map(|s| {
            let (_, reg, _) = outputs(&store, s);
            Sample {
                targets: Some(Tensor::new(&[s.len(), 12], reg).unwrap()),
                ..s.clone()
            }
        })
        .collect();
    let l1 = multitask_loss(&tape, &params, &cfg, &perfect, 1.0).unwrap();
    assert!((tape.value(l1).item() - cls).abs() < 1e-12);
}

#[test]
fn lambda_zero_leaves_regression_head_untouched() {
    let cfg = tiny_config();
    let (store, samples) = setup(3);
    let tape = Tape::new();
    let params = store.bind(&tape);
    let fwd = forward(&tape, &params, &cfg, tape.constant(samples[0].frames.clone()), None).unwrap();
    let loss = multitask_term(&tape, &fwd, &samples[0], 0.0).unwrap();
    let grads = params.collect(&tape, &tape.backward(loss).unwrap());
    assert!(grads["head.reg.w"].data().iter().all(|&g| g == 0.0));
    assert!(grads["head.cls.w"].data().iter().any(|&g| g != 0.0));
}

#[test]
fn refining_reduces_to_classification() {
    let cfg = tiny_config();
    let (store, samples) = setup(4);
    let s = &samples[0];
    let (last, _, sec) = outputs(&store, s);
    let tape = Tape::new();
    let params = store.bind(&tape);
    let fwd = forward(&tape, &params, &cfg, tape.constant(s.frames.clone()), None).unwrap();
    let plain = tape.value(refining_term(&tape, &fwd, &func::one_hot(2, s.label), s.label, 0.0).unwrap()).item();
    assert_eq!(plain, classification_loss(&last, s.label).unwrap());

    // Target equal to the prediction: the first term is its entropy.
    let entropy: f64 = -last.iter().map(|p| p * p.ln()).sum::<f64>();
    let self_ce = tape.value(refining_term(&tape, &fwd, &last, s.label, 0.0).unwrap()).item();
    assert!((self_ce - entropy).abs() < 1e-12);

    // Both terms, against the component oracle.
    let u = [0.3, 0.7];
    let both = tape.value(refining_term(&tape, &fwd, &u, s.label, 0.5).unwrap()).item();
    let oracle = func::cross_entropy(&u, &last).unwrap() + 0.5 * classification_loss(&sec, s.label).unwrap();
    assert!((both - oracle).abs() < 1e-12);

    let batch = refining_loss(&tape, &params, &cfg, &samples, &[u.to_vec(), u.to_vec()], 0.5).unwrap();
    let (last1, _, sec1) = outputs(&store, &samples[1]);
    let oracle_batch = oracle
        + func::cross_entropy(&u, &last1).unwrap()
        + 0.5 * classification_loss(&sec1, samples[1].label).unwrap();
    assert!((tape.value(batch).item() - oracle_batch).abs() < 1e-12);
}

#[test]
fn composite_gradients_pass_finite_differences() {
    for seed in 0..20 {
        let a = multitask_error(seed, 1e-6).unwrap();
        let b = refining_error(seed, 1e-6).unwrap();
        assert!(a < 1e-5 && b < 1e-5, "seed {seed}: multitask {a}, refining {b}");
    }
}

fn embed_store(seed: u64, zero_we: bool) -> ParameterStore {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = init_store(&cfg, &[Group::Embed, Group::PiEmbed], &mut rng).unwrap();
    if zero_we {
        store.set(EMBED_WE, Tensor::zeros(&[18, 4])).unwrap();
    }
    store.set(EMBED_B, uniform(&[4], &mut rng)).unwrap();
    store
}

fn embed(store: &ParameterStore, x: &Tensor, e: Option<&Tensor>) -> Vec<f64> {
    let tape = Tape::new();
    let params = store.bind(&tape);
    let out = pretrain_embed(&tape, &params, tape.constant(x.clone()), e.map(|e| tape.constant(e.clone()))).unwrap();
    let v = tape.value(out).data().to_vec();
    v
}

#[test]
fn pretrain_embedding_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&[3, 4], &mut rng);
    let e1 = uniform(&[3, 18], &mut rng);
    let e2 = uniform(&[3, 18], &mut rng);
    let store = embed_store(9, true);
    let without = embed(&store, &x, None);
    assert_eq!(embed(&store, &x, Some(&e1)), without);
    assert_eq!(embed(&store, &x, Some(&e2)), without);

    let zero = ParameterStore::new();
    let mut zero = zero;
    zero.insert(EMBED_W, Tensor::zeros(&[4, 4])).unwrap();
    zero.insert(EMBED_B, Tensor::zeros(&[4])).unwrap();
    zero.insert(EMBED_WE, Tensor::zeros(&[18, 4])).unwrap();
    assert!(embed(&zero, &x, Some(&e1)).iter().all(|&v| v == 0.0));
}

#[test]
fn skeleton_weights_receive_checked_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = uniform(&[3, 4], &mut rng);
    let e = uniform(&[3, 18], &mut rng);
    let store = embed_store(10, false);
    let point = vec![store.require(EMBED_WE).unwrap().clone()];
    let fixed = store.clone();
    let loss = |tape: &Tape, vars: &[prnn_tensor::Var]| {
        let mut pairs = vec![(EMBED_WE.to_string(), vars[0])];
        pairs.push((EMBED_W.into(), tape.constant(fixed.require(EMBED_W).unwrap().clone())));
        pairs.push((EMBED_B.into(), tape.constant(fixed.require(EMBED_B).unwrap().clone())));
        let params = Binding::from_vars(pairs);
        let out = pretrain_embed(tape, &params, tape.constant(x.clone()), Some(tape.constant(e.clone())))
            .map_err(|err| prnn_tensor::TensorError::Invalid(err.to_string()))?;
        Ok(tape.sum(tape.mul(out, out)?))
    };
    let err = grad_check(loss, &point, 1e-6).unwrap();
    assert!(err < 1e-5, "{err}");

    let tape = Tape::new();
    let params = store.bind(&tape);
    let out = pretrain_embed(&tape, &params, tape.constant(x.clone()), Some(tape.constant(e.clone()))).unwrap();
    let l = tape.sum(tape.mul(out, out).unwrap());
    let grads = params.collect(&tape, &tape.backward(l).unwrap());
    assert!(grads[EMBED_WE].max_abs() > 0.0);
}
