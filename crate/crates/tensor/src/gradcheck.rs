//! Central finite-difference validation of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradient
/// components are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Maximum relative error between tape gradients of `f` at `point` and
/// central differences `(f(x+h) − f(x−h)) / 2h`, over every coordinate of
/// every input.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(point)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (input, g) in analytic.iter().enumerate() {
        for j in 0..point[input].len() {
            let x = point[input].data()[j];
            probe[input].data_mut()[j] = x + h;
            let up = eval(&f, &probe)?;
            probe[input].data_mut()[j] = x - h;
            let down = eval(&f, &probe)?;
            probe[input].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

type Case = fn(&Tape, &[Var], &Tensor) -> Result<Var>;

/// `Σ y ⊙ w` for a fixed weight tensor, so that every output element
/// contributes a distinct gradient.
fn weighted(tape: &Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.reshape(&tape.shape(y))?);
    Ok(tape.sum(tape.mul(y, w)?))
}

/// Every differentiable tape primitive: name, input shapes, output size and
/// the scalar function under test.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, usize, Case)> {
    vec![
        ("matmul", vec![vec![2, 4], vec![4, 3]], 6, |t, v, w| weighted(t, t.matmul(v[0], v[1])?, w)),
        ("add", vec![vec![2, 3], vec![2, 3]], 6, |t, v, w| weighted(t, t.add(v[0], v[1])?, w)),
        ("sub", vec![vec![2, 3], vec![2, 3]], 6, |t, v, w| weighted(t, t.sub(v[0], v[1])?, w)),
        ("mul", vec![vec![2, 3], vec![2, 3]], 6, |t, v, w| weighted(t, t.mul(v[0], v[1])?, w)),
        ("add_bias", vec![vec![4, 3], vec![3]], 12, |t, v, w| weighted(t, t.add_bias(v[0], v[1])?, w)),
        ("scale", vec![vec![5]], 5, |t, v, w| weighted(t, t.scale(v[0], -2.5), w)),
        ("tanh", vec![vec![7]], 7, |t, v, w| weighted(t, t.tanh(v[0]), w)),
        ("sigmoid", vec![vec![7]], 7, |t, v, w| weighted(t, t.sigmoid(v[0]), w)),
        ("relu", vec![vec![7]], 7, |t, v, w| weighted(t, t.relu(v[0]), w)),
        ("sum", vec![vec![3, 2]], 1, |t, v, w| weighted(t, t.sum(v[0]), w)),
        ("reshape", vec![vec![2, 6]], 12, |t, v, w| weighted(t, t.reshape(v[0], &[3, 4])?, w)),
        ("row", vec![vec![3, 4]], 4, |t, v, w| weighted(t, t.row(v[0], 1)?, w)),
        ("concat_rows", vec![vec![1, 3], vec![2, 3]], 12, |t, v, w| {
            weighted(t, t.concat_rows(&[v[0], v[1], v[0]])?, w)
        }),
        ("pad_cols", vec![vec![2, 3]], 10, |t, v, w| weighted(t, t.pad_cols(v[0], 5)?, w)),
        ("conv2d_same", vec![vec![2, 4, 3, 1], vec![3, 3, 1, 2], vec![2]], 48, |t, v, w| {
            weighted(t, t.conv2d_same(v[0], v[1], v[2])?, w)
        }),
        ("maxpool2", vec![vec![5, 3, 2]], 12, |t, v, w| weighted(t, t.maxpool2(v[0])?, w)),
        ("softmax", vec![vec![3, 4]], 12, |t, v, w| weighted(t, t.softmax(v[0])?, w)),
        ("cross_entropy", vec![vec![1, 4]], 4, |t, v, w| {
            let target = Tensor::new(&[1, 4], crate::func::softmax(w.data()))?;
            t.cross_entropy(&target, t.softmax(v[0])?)
        }),
    ]
}

/// Runs [`grad_check`] on every tape primitive at `seeds` random points
/// (entries uniform in [−1, 1]) and returns the worst error per primitive.
pub fn primitive_suite(seeds: u64, h: f64) -> Result<Vec<(&'static str, f64)>> {
    use rand::{Rng, SeedableRng};
    let random = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let mut out = Vec::new();
    for (name, shapes, out_len, f) in primitive_cases() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let point = shapes
                .iter()
                .map(|s| Tensor::new(s, random(s.iter().product(), &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let w = Tensor::vector(random(out_len, &mut rng));
            worst = worst.max(grad_check(|t, v| f(t, v, &w), &point, h)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}
