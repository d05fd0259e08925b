//! Tape gradients against central finite differences (h = 1e-6), 20 seeds
//! per case.

use prnn_tensor::gradcheck::{primitive_suite, relative_error};
use prnn_tensor::{func, grad_check, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_primitive_matches_finite_differences() {
    let results = primitive_suite(SEEDS, H).unwrap();
    assert_eq!(results.len(), 18);
    for (name, err) in results {
        assert!(err < TOL, "{name}: rel error {err}");
    }
}

#[test]
fn extra_shapes() {
    let check = |name: &str, shapes: &[&[usize]], f: &dyn Fn(&Tape, &[Var]) -> Result<Var>| {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = grad_check(f, &point, H).unwrap();
            assert!(err < TOL, "{name} seed {seed}: rel error {err}");
        }
    };
    check("matmul-square", &[&[3, 3], &[3, 3]], &|t, v| Ok(t.sum(t.matmul(v[0], v[1])?)));
    check("conv2d_same-unbatched", &[&[5, 5, 2], &[3, 3, 2, 3], &[3]], &|t, v| {
        let y = t.conv2d_same(v[0], v[1], v[2])?;
        Ok(t.sum(t.mul(y, y)?))
    });
    check("maxpool2-even", &[&[4, 4, 1]], &|t, v| {
        let y = t.maxpool2(v[0])?;
        Ok(t.sum(t.mul(y, y)?))
    });
    check("softmax-row", &[&[1, 5]], &|t, v| {
        let p = t.softmax(v[0])?;
        Ok(t.sum(t.mul(p, p)?))
    });
}

#[test]
fn sum_of_squares_and_linear() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[6], &mut rng);
        let err = grad_check(|t, v| Ok(t.sum(t.mul(v[0], v[0])?)), std::slice::from_ref(&x), H).unwrap();
        assert!(err < 1e-7, "sum of squares: {err}");
        // Dyadic point, weights and step keep the differences exact, so
        // the only error left is the derivative itself.
        let dyadic = |rng: &mut ChaCha8Rng| {
            Tensor::vector((0..6).map(|_| f64::from(rng.gen_range(-64..64)) / 32.0).collect())
        };
        let (x, w) = (dyadic(&mut rng), dyadic(&mut rng));
        let err = grad_check(
            |t, v| {
                let w = t.constant(w.clone());
                Ok(t.sum(t.mul(v[0], w)?))
            },
            &[x],
            2f64.powi(-20),
        )
        .unwrap();
        assert!(err < 1e-10, "linear: {err}");
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    assert!(relative_error(1e-9, 0.0) < 1e-5);
}

#[test]
fn softmax_tape_matches_func() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
    let p = tape.softmax(y).unwrap();
    assert_eq!(tape.value(p).data(), func::softmax(&[0.3, -1.0, 2.0]).as_slice());
}
