//! Distribution distances and training losses over per-position
//! distributions.
//!
//! Conventions shared by every function here:
//!
//! * `p` rows are model distributions (softmax of logits), `q` rows are
//!   reference distributions (one-hot or smoothed targets).
//! * Logs are floored: every `ln` argument gets `+ epsilon` so exact zeros
//!   are safe. With `epsilon = 1e-12` the identities below hold to 1e-9.
//! * Loss values are averaged over positions (`1/n` for an n-token
//!   sentence); gradient rows are returned per position, one per logit row.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::numerics::Tensor;

/// Skew and flooring constants shared by the loss family.
#[derive(Clone, Copy, Debug)]
pub struct SkewConfig<F> {
    /// Skew amount `alpha` in `[0, 1]`; the reference blend is
    /// `(1-alpha) * other + alpha * self`.
    pub alpha: F,
    /// Log floor added to every `ln` argument.
    pub epsilon: F,
}

impl<F: Real> Default for SkewConfig<F> {
    fn default() -> Self {
        SkewConfig { alpha: F::from_f64(0.01), epsilon: F::from_f64(1e-12) }
    }
}

impl<F: Real> SkewConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let a = self.alpha.as_f64();
        if !(0.0..=1.0).contains(&a) || !a.is_finite() {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", a)));
        }
        let e = self.epsilon.as_f64();
        if !(e > 0.0) || e > 1e-6 {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1e-6], got {}",
                e
            )));
        }
        Ok(())
    }
}

/// Direction of a KL evaluation relative to the `(q, p)` argument order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlDirection {
    /// `D(q || p)`: expectation under the reference.
    Forward,
    /// `D(p || q)`: expectation under the model.
    Reverse,
}

/// How per-position divergences combine into the per-sentence signal `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UAggregation {
    MeanPerToken,
    SumPerSentence,
}

/// A loss value together with its gradient with respect to each row of
/// logits.
#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    pub value: F,
    pub grad_logits: Vec<Tensor<F>>,
}

/// One-hot distribution over `v` classes.
pub fn one_hot<F: Real>(v: usize, target: usize) -> Result<Tensor<F>> {
    if target >= v {
        return Err(Error::Data(format!("target {} outside vocab {}", target, v)));
    }
    let mut t = Tensor::zeros(&[v]);
    t.data_mut()[target] = F::one();
    Ok(t)
}

/// Label-smoothed target: `1 - s` on the target class, `s / (v - 1)`
/// elsewhere.
pub fn smoothed_target<F: Real>(v: usize, target: usize, smoothing: F) -> Result<Tensor<F>> {
    let s = smoothing.as_f64();
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Config(format!("smoothing must be in [0, 1), got {}", s)));
    }
    if v < 2 {
        return Err(Error::Data(format!("smoothing needs at least 2 classes, got {}", v)));
    }
    if target >= v {
        return Err(Error::Data(format!("target {} outside vocab {}", target, v)));
    }
    let off = smoothing / F::from_f64((v - 1) as f64);
    let mut t = Tensor::filled(&[v], off);
    t.data_mut()[target] = F::one() - smoothing;
    Ok(t)
}

fn check_pair<F: Real>(q: &Tensor<F>, p: &Tensor<F>) -> Result<()> {
    if q.rank() != 1 || p.rank() != 1 || q.len() != p.len() {
        return Err(Error::Dim(format!(
            "distribution pair with shapes {:?} and {:?}",
            q.shape(),
            p.shape()
        )));
    }
    if q.len() < 2 {
        return Err(Error::Data("distributions need at least 2 classes".into()));
    }
    for t in [q, p] {
        let mut sum = F::zero();
        for &x in t.data() {
            if !(x >= F::zero()) {
                return Err(Error::Data(format!("negative or NaN probability {}", x)));
            }
            sum += x;
        }
        if (sum - F::one()).abs().as_f64() > 1e-9 {
            return Err(Error::Data(format!("probabilities sum to {}", sum)));
        }
    }
    Ok(())
}

/// `KL(q || p)` (Forward) or `KL(p || q)` (Reverse), with both log
/// arguments floored by `epsilon`.
pub fn kl<F: Real>(q: &Tensor<F>, p: &Tensor<F>, direction: KlDirection, epsilon: F) -> Result<F> {
    check_pair(q, p)?;
    let (a, b) = match direction {
        KlDirection::Forward => (q, p),
        KlDirection::Reverse => (p, q),
    };
    let mut total = F::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        total += x * ((x + epsilon).ln() - (y + epsilon).ln());
    }
    Ok(total)
}

/// Alpha-skew divergence `KL(first || alpha * first + (1 - alpha) * second)`.
/// At `alpha = 1` the blend equals `first` and the result is exactly 0; at
/// `alpha -> 0` it approaches `KL(first || second)`.
pub fn skew_divergence<F: Real>(
    first: &Tensor<F>,
    second: &Tensor<F>,
    alpha: F,
    epsilon: F,
) -> Result<F> {
    check_pair(first, second)?;
    let a = alpha.as_f64();
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {}", a)));
    }
    let one = F::one();
    let mut total = F::zero();
    for (&f, &s) in first.data().iter().zip(second.data()) {
        let blend = alpha * f + (one - alpha) * s;
        total += f * ((f + epsilon).ln() - (blend + epsilon).ln());
    }
    Ok(total)
}

/// Cross entropy `-(1/n) sum_j sum_k q_jk ln(p_jk + eps)` between reference
/// rows and model rows. Value-only; see [`cross_entropy`] for the training
/// path that differentiates through the softmax.
pub fn cross_entropy_value<F: Real>(
    q_rows: &[Tensor<F>],
    p_rows: &[Tensor<F>],
    epsilon: F,
) -> Result<F> {
    if q_rows.len() != p_rows.len() {
        return Err(Error::Dim(format!(
            "{} reference rows vs {} model rows",
            q_rows.len(),
            p_rows.len()
        )));
    }
    if q_rows.is_empty() {
        return Err(Error::Data("cross entropy of zero positions".into()));
    }
    let mut total = F::zero();
    for (q, p) in q_rows.iter().zip(p_rows) {
        check_pair(q, p)?;
        for (&qk, &pk) in q.data().iter().zip(p.data()) {
            total -= qk * (pk + epsilon).ln();
        }
    }
    Ok(total / F::from_f64(q_rows.len() as f64))
}

/// Pull a per-distribution gradient back through the softmax:
/// `g_z = p .* (g_p - (g_p . p))`.
fn softmax_vjp<F: Real>(p: &Tensor<F>, g_p: &Tensor<F>) -> Tensor<F> {
    let inner = g_p.dot(p);
    let mut out = Tensor::zeros(p.shape());
    for ((o, &pk), &gk) in out.data_mut().iter_mut().zip(p.data()).zip(g_p.data()) {
        *o = pk * (gk - inner);
    }
    out
}

/// Smoothed cross entropy of targets under `logits_rows`, averaged over
/// positions, with the closed-form gradient with respect to the logits.
pub fn cross_entropy<F: Real>(
    logits_rows: &[Tensor<F>],
    targets: &[usize],
    smoothing: F,
    epsilon: F,
) -> Result<LossOutput<F>> {
    if logits_rows.len() != targets.len() {
        return Err(Error::Dim(format!(
            "{} logit rows vs {} targets",
            logits_rows.len(),
            targets.len()
        )));
    }
    if logits_rows.is_empty() {
        return Err(Error::Data("cross entropy of zero positions".into()));
    }
    let n = F::from_f64(targets.len() as f64);
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(targets.len());
    for (z, &tgt) in logits_rows.iter().zip(targets) {
        let v = z.len();
        let q = smoothed_target(v, tgt, smoothing)?;
        let p = z.softmax_1d()?;
        let mut g_p = Tensor::zeros(p.shape());
        for ((g, &qk), &pk) in g_p.data_mut().iter_mut().zip(q.data()).zip(p.data()) {
            value -= qk * (pk + epsilon).ln();
            *g = -qk / (pk + epsilon);
        }
        let mut g_z = softmax_vjp(&p, &g_p);
        g_z.scale(F::one() / n);
        grads.push(g_z);
    }
    Ok(LossOutput { value: value / n, grad_logits: grads })
}

/// Per-position dual-skew bracket and its gradient with respect to the model
/// row `p`. With `m1 = (1-a) p + a q + eps` and `m3 = (1-a) q + a p + eps`:
///
/// value   = -(beta q . ln m1 - (1-beta) p . ln(p + eps) + (1-beta) p . ln m3)
/// d/dp_k  = -(beta q_k (1-a) / m1_k
///            - (1-beta) (ln(p_k + eps) + p_k / (p_k + eps))
///            + (1-beta) (ln m3_k + a p_k / m3_k))
fn dsd_position<F: Real>(
    q: &Tensor<F>,
    p: &Tensor<F>,
    cfg: &SkewConfig<F>,
    beta: F,
    want_grad: bool,
) -> Result<(F, Option<Tensor<F>>)> {
    check_pair(q, p)?;
    let one = F::one();
    let a = cfg.alpha;
    let eps = cfg.epsilon;
    let bm = one - beta;
    let mut value = F::zero();
    let mut grad = want_grad.then(|| Tensor::zeros(p.shape()));
    for k in 0..p.len() {
        let qk = q.data()[k];
        let pk = p.data()[k];
        let m1 = (one - a) * pk + a * qk + eps;
        let m3 = (one - a) * qk + a * pk + eps;
        let lp = (pk + eps).ln();
        value -= beta * qk * m1.ln() - bm * pk * lp + bm * pk * m3.ln();
        if let Some(g) = grad.as_mut() {
            g.data_mut()[k] = -(beta * qk * (one - a) / m1 - bm * (lp + pk / (pk + eps))
                + bm * (m3.ln() + a * pk / m3));
        }
    }
    Ok((value, grad))
}

/// Dual-skew divergence of reference rows against model rows, averaged over
/// positions. `beta = 1` leaves only the reference-skew direction and
/// `beta = 0` only the model-skew direction. Value-only counterpart of
/// [`dsd_loss`].
pub fn dsd_value<F: Real>(
    q_rows: &[Tensor<F>],
    p_rows: &[Tensor<F>],
    cfg: &SkewConfig<F>,
    beta: F,
) -> Result<F> {
    cfg.validate()?;
    check_beta(beta)?;
    if q_rows.len() != p_rows.len() {
        return Err(Error::Dim(format!(
            "{} reference rows vs {} model rows",
            q_rows.len(),
            p_rows.len()
        )));
    }
    if q_rows.is_empty() {
        return Err(Error::Data("dual-skew loss of zero positions".into()));
    }
    let mut total = F::zero();
    for (q, p) in q_rows.iter().zip(p_rows) {
        total += dsd_position(q, p, cfg, beta, false)?.0;
    }
    Ok(total / F::from_f64(q_rows.len() as f64))
}

fn check_beta<F: Real>(beta: F) -> Result<()> {
    let b = beta.as_f64();
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::Config(format!("beta must be in [0, 1], got {}", b)));
    }
    Ok(())
}

/// Dual-skew loss of one-hot targets under `logits_rows` with a fixed
/// mixing weight `beta`, averaged over positions, plus the closed-form
/// gradient with respect to the logits.
pub fn dsd_loss<F: Real>(
    logits_rows: &[Tensor<F>],
    targets: &[usize],
    cfg: &SkewConfig<F>,
    beta: F,
) -> Result<LossOutput<F>> {
    cfg.validate()?;
    check_beta(beta)?;
    if logits_rows.len() != targets.len() {
        return Err(Error::Dim(format!(
            "{} logit rows vs {} targets",
            logits_rows.len(),
            targets.len()
        )));
    }
    if logits_rows.is_empty() {
        return Err(Error::Data("dual-skew loss of zero positions".into()));
    }
    let n = F::from_f64(targets.len() as f64);
    let mut value = F::zero();
    let mut grads = Vec::with_capacity(targets.len());
    for (z, &tgt) in logits_rows.iter().zip(targets) {
        let q = one_hot(z.len(), tgt)?;
        let p = z.softmax_1d()?;
        let (v, g_p) = dsd_position(&q, &p, cfg, beta, true)?;
        value += v;
        let mut g_z = softmax_vjp(&p, &g_p.expect("grad requested"));
        g_z.scale(F::one() / n);
        grads.push(g_z);
    }
    Ok(LossOutput { value: value / n, grad_logits: grads })
}

/// Controlled dual-skew loss: identical bracket with the controller's
/// current `beta_t` substituted for the fixed weight.
pub fn cdsd_loss<F: Real>(
    logits_rows: &[Tensor<F>],
    targets: &[usize],
    cfg: &SkewConfig<F>,
    beta_t: F,
) -> Result<LossOutput<F>> {
    dsd_loss(logits_rows, targets, cfg, beta_t)
}

/// Observed divergence signal `u` for one sentence: the reference-skew
/// direction `s_alpha(q_j, p_j)` per position, combined by `mode`.
pub fn sample_divergence<F: Real>(
    q_rows: &[Tensor<F>],
    p_rows: &[Tensor<F>],
    alpha: F,
    epsilon: F,
    mode: UAggregation,
) -> Result<F> {
    if q_rows.len() != p_rows.len() {
        return Err(Error::Dim(format!(
            "{} reference rows vs {} model rows",
            q_rows.len(),
            p_rows.len()
        )));
    }
    if q_rows.is_empty() {
        return Err(Error::Data("divergence signal over zero positions".into()));
    }
    let mut total = F::zero();
    for (q, p) in q_rows.iter().zip(p_rows) {
        total += skew_divergence(q, p, alpha, epsilon)?;
    }
    match mode {
        UAggregation::SumPerSentence => Ok(total),
        UAggregation::MeanPerToken => Ok(total / F::from_f64(q_rows.len() as f64)),
    }
}
