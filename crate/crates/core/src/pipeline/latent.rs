//! Latent-PI EM machinery: the bridging matrix `M` (rows `p(g | y′ = k)`),
//! posterior estimation, label disturbance, the closed-form `M` update and
//! the marginal log-likelihood `Q`.

use prnn_tensor::{func, Tensor};
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Row-stochastic tolerance for [`BridgingMatrix`].
pub const ROW_TOL: f64 = 1e-12;

/// K×K nonnegative matrix whose rows sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgingMatrix {
    k: usize,
    m: Vec<f64>,
}

impl BridgingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return invalid("bridging matrix", "must be square and non-empty");
        }
        let m: Vec<f64> = rows.into_iter().flatten().collect();
        let out = Self { k, m };
        out.validate()?;
        Ok(out)
    }

    pub fn identity(k: usize) -> Self {
        Self::smoothed_identity(k, 0.0)
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            k,
            m: vec![1.0 / k as f64; k * k],
        }
    }

    /// `(1 − eps)·I + eps/K`.
    pub fn smoothed_identity(k: usize, eps: f64) -> Self {
        let off = eps / k as f64;
        let m = (0..k * k)
            .map(|i| if i / k == i % k { 1.0 - eps + off } else { off })
            .collect();
        Self { k, m }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.m[row * self.k + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.m[row * self.k..(row + 1) * self.k]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.k).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return invalid("bridging matrix", "entries must be finite and nonnegative");
        }
        for (r, s) in self.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > ROW_TOL {
                return invalid("bridging matrix", format!("row {r} sums to {s}"));
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.k, self.k], self.m.clone()).expect("k×k data")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [r, c] = *t.shape() else {
            return Err(Error::Shape(format!("bridging matrix must be rank 2, got {:?}", t.shape())));
        };
        if r != c {
            return Err(Error::Shape(format!("bridging matrix must be square, got {r}×{c}")));
        }
        let out = Self {
            k: r,
            m: t.data().to_vec(),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Per-sequence class posterior `u` on the K-simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPi(pub Vec<f64>);

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return invalid("label", format!("class {label} out of range for K = {k}"));
    }
    Ok(())
}

/// `u_k = M_{k,g} e^{s_k} / Σ_l M_{l,g} e^{s_l}`, evaluated in the log domain.
pub fn estep_latent_pi(logits: &[f64], label: usize, m: &BridgingMatrix) -> Result<LatentPi> {
    let k = m.k();
    if logits.len() != k {
        return Err(Error::Shape(format!("{} logits for K = {k}", logits.len())));
    }
    check_label(label, k)?;
    if (0..k).all(|r| m.get(r, label) == 0.0) {
        return Err(Error::DegeneratePosterior(label));
    }
    let scores: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(r, &s)| m.get(r, label).ln() + s)
        .collect();
    let norm = func::log_sum_exp(&scores);
    if !norm.is_finite() {
        return Err(Error::Numeric("posterior normalizer".into()));
    }
    Ok(LatentPi(scores.iter().map(|&w| (w - norm).exp()).collect()))
}

/// Disturbance distribution: the true class keeps `1 − (K−1)α/K`, every
/// other class gets `α/K`.
pub fn disturbance_probs(k: usize, label: usize, alpha: f64) -> Vec<f64> {
    let other = alpha / k as f64;
    let mut p = vec![other; k];
    p[label] = 1.0 - (k as f64 - 1.0) * other;
    p
}

/// Draws `ĝ` from the disturbance distribution. Keeping the true class
/// yields the latent posterior `u` as a soft target; any other draw yields
/// `one_hot(ĝ)`.
pub fn sample_disturbed_target<R: Rng>(u: &LatentPi, label: usize, alpha: f64, rng: &mut R) -> Result<(usize, Vec<f64>)> {
    let k = u.0.len();
    check_label(label, k)?;
    if !(0.0..=1.0).contains(&alpha) {
        return invalid("alpha", format!("{alpha} outside [0, 1]"));
    }
    let probs = disturbance_probs(k, label, alpha);
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut drawn = label;
    for (c, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            drawn = c;
            break;
        }
    }
    let target = if drawn == label {
        u.0.clone()
    } else {
        func::one_hot(k, drawn)
    };
    Ok((drawn, target))
}

/// Closed-form maximizer `M_{kl} = Σ_j u_{jk} δ(l − g_j) / Σ_j u_{jk}`.
/// Rows with no posterior mass become uniform.
pub fn mstep_bridging(us: &[LatentPi], labels: &[usize]) -> Result<BridgingMatrix> {
    if us.is_empty() {
        return invalid("M-step input", "no sequences");
    }
    if us.len() != labels.len() {
        return Err(Error::Shape(format!("{} posteriors vs {} labels", us.len(), labels.len())));
    }
    let k = us[0].0.len();
    let mut num = vec![0.0; k * k];
    let mut mass = vec![0.0; k];
    for (u, &g) in us.iter().zip(labels) {
        if u.0.len() != k {
            return Err(Error::Shape("posteriors differ in length".into()));
        }
        check_label(g, k)?;
        for (row, &w) in u.0.iter().enumerate() {
            num[row * k + g] += w;
            mass[row] += w;
        }
    }
    let mut m = vec![0.0; k * k];
    for row in 0..k {
        if mass[row] > 0.0 {
            for col in 0..k {
                m[row * k + col] = num[row * k + col] / mass[row];
            }
            // Rescale so rounding in the division cannot push the row sum off 1.
            let s: f64 = m[row * k..(row + 1) * k].iter().sum();
            for v in &mut m[row * k..(row + 1) * k] {
                *v /= s;
            }
        } else {
            m[row * k..(row + 1) * k].fill(1.0 / k as f64);
        }
    }
    Ok(BridgingMatrix { k, m })
}

/// `Q = Σ_j ln Σ_k softmax(s_j)_k · M_{k, g_j}`, log-sum-exp stabilized.
pub fn q_loglik_from_logits(logits: &[Vec<f64>], labels: &[usize], m: &BridgingMatrix) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows vs {} labels", logits.len(), labels.len())));
    }
    let k = m.k();
    let mut total = 0.0;
    for (s, &g) in logits.iter().zip(labels) {
        if s.len() != k {
            return Err(Error::Shape(format!("{} logits for K = {k}", s.len())));
        }
        check_label(g, k)?;
        let log_norm = func::log_sum_exp(s);
        let terms: Vec<f64> = s
            .iter()
            .enumerate()
            .map(|(c, &v)| v - log_norm + m.get(c, g).ln())
            .collect();
        total += func::log_sum_exp(&terms);
    }
    Ok(total)
}
