//! Stage drivers on small synthetic datasets.

use prnn_core::config::{Hyperparams, ModelConfig};
use prnn_core::pipeline::checkpoint;
use prnn_core::pipeline::latent::ROW_TOL;
use prnn_core::pipeline::losses::regression_term;
use prnn_core::pipeline::model::{check_shapes, forward, group_shapes, Group, EMBED_WE, REG_W};
use prnn_core::pipeline::train::{
    evaluate, predict, run_learning, run_pretrain, run_refining, train_three_step, Split,
};
use prnn_core::pipeline::Sample;
use prnn_core::synth::{generate_dataset, SplitName, SynthConfig};
use prnn_core::Error;
use prnn_tensor::{ParameterStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn samples(cfg: &SynthConfig, model: &ModelConfig) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (split, id, seq) in generate_dataset(cfg).unwrap() {
        let s = Sample::prepare(id, &seq.frames, Some(&seq.skeleton), seq.label, model).unwrap();
        match split {
            SplitName::Train => out.0.push(s),
            SplitName::Val => out.1.push(s),
            SplitName::Test => out.2.push(s),
        }
    }
    out
}

fn small() -> (Split, ModelConfig) {
    let cfg = SynthConfig {
        num_classes: 2,
        per_class: 5,
        t_min: 6,
        t_max: 10,
        ..SynthConfig::default()
    };
    let model = ModelConfig::desk(2);
    let (train, val, _) = samples(&cfg, &model);
    (Split { train, val }, model)
}

fn same_params(a: &ParameterStore, b: &ParameterStore) -> bool {
    a.names().eq(b.names()) && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data() == y.data())
}

fn quick() -> Hyperparams {
    Hyperparams {
        pretrain_epochs: 2,
        learn_epochs: 2,
        em_max_iters: 2,
        ..Hyperparams::default()
    }
}

#[test]
fn one_class_data_reaches_the_head_floor() {
    let (split, model) = small();
    let only = |v: &[Sample]| -> Vec<Sample> { v.iter().filter(|s| s.label == 0).cloned().collect() };
    let split = Split {
        train: only(&split.train),
        val: only(&split.val),
    };
    let hp = Hyperparams {
        batch: 1,
        lr: 1e-2,
        patience: 1000,
        ..Hyperparams::default()
    };
    let r = run_pretrain(&split, &model, &hp, 40, false, 3).unwrap();
    let score = evaluate(&r.params, &model, &split.train, false).unwrap();
    assert_eq!(score.accuracy, 1.0);
    // Logits are tanh-bounded, so −ln p ≥ ln(1 + e^{−2}) for K = 2.
    let floor = (1.0 + (-2.0f64).exp()).ln();
    assert!(score.loss >= floor - 1e-12 && score.loss < floor + 0.05, "loss {}", score.loss);
}

#[test]
fn empty_training_set_is_rejected() {
    let (_, model) = small();
    let split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    let err = run_pretrain(&split, &model, &quick(), 1, true, 0).unwrap_err();
    assert!(matches!(err, Error::Validation { .. }));
}

#[test]
fn stages_are_deterministic() {
    let (split, model) = small();
    let hp = quick();
    let a = train_three_step(&split, &model, &hp, 9).unwrap();
    let b = train_three_step(&split, &model, &hp, 9).unwrap();
    assert!(same_params(&a.pretrain.params, &b.pretrain.params));
    assert!(same_params(&a.learn.params, &b.learn.params));
    assert!(same_params(&a.refine.stage.params, &b.refine.stage.params));
    assert_eq!(a.refine.bridging, b.refine.bridging);
    assert_eq!(a.refine.stage.log, b.refine.stage.log);
    let c = run_pretrain(&split, &model, &hp, 2, true, 10).unwrap();
    assert!(!same_params(&a.pretrain.params, &c.params));
}

#[test]
fn stage_outputs_chain_without_shape_errors() {
    let (split, model) = small();
    let out = train_three_step(&split, &model, &quick(), 1).unwrap();
    assert!(out.pretrain.params.contains(EMBED_WE));
    for store in [&out.pretrain.params, &out.learn.params, &out.refine.stage.params] {
        check_shapes(store, &model).unwrap();
    }
    assert!(!out.learn.params.contains(EMBED_WE));
    assert!(out.learn.params.contains(REG_W));

    // Paper preset: the same group bookkeeping holds without allocating it.
    let paper = ModelConfig::paper(10);
    let sec = group_shapes(&paper, Group::Secondary);
    assert_eq!(sec[0].1, vec![12 * 100, 10]);
    assert_eq!(group_shapes(&paper, Group::PiEmbed)[0].1, vec![60, 1000]);
    assert_eq!(group_shapes(&paper, Group::Embed)[0].1, vec![1000, 1000]);
}

#[test]
fn em_with_zero_iterations_returns_input() {
    let (split, model) = small();
    let learned = run_learning(&split, None, &model, &quick(), 1, 2).unwrap();
    let hp = Hyperparams {
        em_max_iters: 0,
        ..quick()
    };
    let r = run_refining(&split, &learned.params, &model, &hp, 2).unwrap();
    assert!(same_params(&r.stage.params, &learned.params));
    assert!(r.em.is_empty());
}

#[test]
fn em_invariants_hold_every_iteration() {
    let (split, model) = small();
    let learned = run_learning(&split, None, &model, &quick(), 2, 4).unwrap();
    let hp = Hyperparams {
        em_max_iters: 4,
        em_tol: 0.0,
        ..quick()
    };
    let r = run_refining(&split, &learned.params, &model, &hp, 4).unwrap();
    assert_eq!(r.em.len(), 4);
    for it in &r.em {
        for u in &it.posteriors {
            assert!(u.0.iter().all(|&v| v >= 0.0));
            assert!((u.0.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for s in it.bridging.row_sums() {
            assert!((s - 1.0).abs() <= ROW_TOL);
        }
        assert!(it.q_after >= it.q_before - 1e-9);
    }
    assert!(r.stage.log.iter().all(|e| e.q.is_some()));
}

#[test]
fn learning_requires_regression_targets() {
    let (split, model) = small();
    let bare = Split {
        train: split.train.iter().map(Sample::depth_only).collect(),
        val: split.val.clone(),
    };
    assert!(matches!(
        run_learning(&bare, None, &model, &quick(), 1, 0),
        Err(Error::Validation { .. })
    ));
}

fn regression_total(store: &ParameterStore, model: &ModelConfig, samples: &[Sample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let params = store.bind(&tape);
            let fwd = forward(&tape, &params, model, tape.constant(s.frames.clone()), None).unwrap();
            let l = regression_term(&tape, fwd.regression.unwrap(), s.targets.as_ref().unwrap()).unwrap();
            let loss = tape.value(l).item();
            loss
        })
        .sum()
}

#[test]
fn first_epoch_lowers_training_losses() {
    let cfg = SynthConfig::default();
    let model = ModelConfig::desk(4);
    let (train, val, _) = samples(&cfg, &model);
    let split = Split { train, val };
    let hp = Hyperparams::default();
    for seed in 0..5 {
        let pre = run_pretrain(&split, &model, &hp, 1, true, seed).unwrap();
        let init = run_pretrain(&split, &model, &hp, 0, true, seed).unwrap();
        let before = evaluate(&init.params, &model, &split.train, true).unwrap().loss;
        let after = evaluate(&pre.last, &model, &split.train, true).unwrap().loss;
        assert!(after <= before, "seed {seed}: classification {before} -> {after}");

        let l0 = run_learning(&split, Some(&pre.last), &model, &hp, 0, seed).unwrap();
        let l1 = run_learning(&split, Some(&pre.last), &model, &hp, 1, seed).unwrap();
        let before = regression_total(&l0.params, &model, &split.train);
        let after = regression_total(&l1.last, &model, &split.train);
        assert!(after < before, "seed {seed}: regression {before} -> {after}");
    }
}

#[test]
fn trained_model_is_order_sensitive() {
    let (split, model) = small();
    let r = run_pretrain(&split, &model, &quick(), 3, false, 5).unwrap();
    let s = &split.train[0];
    let t = s.len();
    let per = 32 * 32;
    let base = predict(&r.params, &model, &s.frames, None).unwrap();
    let last = |p: &Tensor| p.data()[p.len() - 2..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut changed = 0;
    for _ in 0..100 {
        let mut order: Vec<usize> = (0..t).collect();
        while order.iter().enumerate().all(|(i, &j)| i == j) {
            order.shuffle(&mut rng);
        }
        let data: Vec<f64> = order.iter().flat_map(|&j| s.frames.data()[j * per..(j + 1) * per].to_vec()).collect();
        let permuted = Tensor::new(s.frames.shape(), data).unwrap();
        if last(&predict(&r.params, &model, &permuted, None).unwrap()) != last(&base) {
            changed += 1;
        }
    }
    assert!(changed >= 95, "{changed}/100");
}

#[test]
fn checkpoint_roundtrip() {
    let (split, model) = small();
    let out = train_three_step(&split, &model, &quick(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stage = dir.path().join("refine");
    checkpoint::save(&stage, &model, &out.refine.stage.params, Some(&out.refine.bridging), &out.refine.stage.log)
        .unwrap();
    let ck = checkpoint::load(&stage).unwrap();
    assert_eq!(ck.model, model);
    assert!(same_params(&ck.params, &out.refine.stage.params));
    assert_eq!(ck.bridging.as_ref(), Some(&out.refine.bridging));
    assert_eq!(ck.log, out.refine.stage.log);
    assert!(stage.join("bridging_matrix.ptns").exists());

    // A checkpoint whose config disagrees with its tensors is a shape error.
    let mut other = model.clone();
    other.lstm.hidden_units = 32;
    std::fs::write(stage.join("model.json"), serde_json::to_string(&other).unwrap()).unwrap();
    assert!(matches!(checkpoint::load(&stage), Err(Error::Shape(_))));
}
