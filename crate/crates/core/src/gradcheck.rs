//! Bundled gradient audits: every loss's closed-form logit gradient is
//! checked against central differences on random batches, and the full
//! model path (tape backward fed by seeded logit gradients) is checked
//! against differences on raw parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::corpus::EOS;
use crate::divergences::{
    cdsd_loss, cross_entropy, cross_entropy_value, dsd_loss, one_hot, LossOutput, SkewConfig,
};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::seq2seq::{forward_teacher_forced, Seq2SeqConfig, Seq2SeqParams};

const FD_EPS: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &str, max_rel_err: f64, tol: f64) -> Self {
        CheckResult { name: name.to_string(), max_rel_err, tol, pass: max_rel_err < tol }
    }
}

fn rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn random_logits(rng: &mut ChaCha20Rng, positions: usize, vocab: usize) -> Vec<Tensor<f64>> {
    (0..positions)
        .map(|_| {
            Tensor::vector((0..vocab).map(|_| rng.gen_range(-4.0..4.0)).collect())
        })
        .collect()
}

fn random_targets(rng: &mut ChaCha20Rng, positions: usize, vocab: usize) -> Vec<usize> {
    (0..positions).map(|_| rng.gen_range(0..vocab)).collect()
}

type LossFn = Box<dyn Fn(&[Tensor<f64>], &[usize]) -> Result<LossOutput<f64>>>;

fn loss_table(skew: SkewConfig<f64>) -> Vec<(&'static str, LossFn)> {
    vec![
        (
            "xent",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| cross_entropy(l, t, 0.0, skew.epsilon))
                as LossFn,
        ),
        (
            "xent-smoothed",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| cross_entropy(l, t, 0.1, skew.epsilon)),
        ),
        (
            "dsd-beta0",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| dsd_loss(l, t, &skew, 0.0)),
        ),
        (
            "dsd-beta0.5",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| dsd_loss(l, t, &skew, 0.5)),
        ),
        (
            "dsd-beta1",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| dsd_loss(l, t, &skew, 1.0)),
        ),
        (
            "cdsd",
            Box::new(move |l: &[Tensor<f64>], t: &[usize]| cdsd_loss(l, t, &skew, 0.9)),
        ),
    ]
}

/// Check every loss's logit gradient on `trials` random batches
/// (4 positions over an 8-way vocabulary each).
pub fn loss_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let positions = 4;
    let vocab = 8;
    let skew = SkewConfig::default();
    let mut out = Vec::new();
    for (name, loss) in loss_table(skew) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let logits = random_logits(&mut rng, positions, vocab);
            let targets = random_targets(&mut rng, positions, vocab);
            let analytic = loss(&logits, &targets)?;
            for pos in 0..positions {
                for k in 0..vocab {
                    let mut probe = logits.clone();
                    probe[pos].data_mut()[k] += FD_EPS;
                    let up = loss(&probe, &targets)?.value;
                    probe[pos].data_mut()[k] -= 2.0 * FD_EPS;
                    let down = loss(&probe, &targets)?.value;
                    let numeric = (up - down) / (2.0 * FD_EPS);
                    worst = worst.max(rel(analytic.grad_logits[pos].data()[k], numeric));
                }
            }
        }
        out.push(CheckResult::new(name, worst, LOSS_TOL));
    }
    Ok(out)
}

/// Check the full parameter gradient of a tiny model: closed-form logit
/// gradients seeded into the tape versus central differences on a sample
/// of coordinates from every parameter tensor.
pub fn model_check(seed: u64) -> Result<CheckResult> {
    let config = Seq2SeqConfig {
        src_vocab: 6,
        tgt_vocab: 6,
        embed_dim: 3,
        hidden_dim: 4,
        attn_dim: 3,
        max_src_len: 5,
        max_tgt_len: 5,
        init_seed: seed,
    };
    let params = Seq2SeqParams::init(&config)?;
    let src = vec![4u32, 5, 3];
    let sup = vec![5u32, 4, EOS];
    let targets: Vec<usize> = sup.iter().map(|&t| t as usize).collect();
    let eps_floor = SkewConfig::default().epsilon;

    let value_of = |p: &Seq2SeqParams<f64>| -> Result<f64> {
        let trace = forward_teacher_forced(p, &src, &sup)?;
        let q_rows: Vec<Tensor<f64>> = targets
            .iter()
            .map(|&t| one_hot(config.tgt_vocab, t))
            .collect::<Result<_>>()?;
        cross_entropy_value(&q_rows, &trace.dists, eps_floor)
    };

    let trace = forward_teacher_forced(&params, &src, &sup)?;
    let logits: Vec<Tensor<f64>> = trace
        .logit_ids
        .iter()
        .map(|&id| trace.tape.value(id).clone())
        .collect();
    let loss = cross_entropy(&logits, &targets, 0.0, eps_floor)?;
    let seeds: Vec<_> = trace
        .logit_ids
        .iter()
        .copied()
        .zip(loss.grad_logits)
        .collect();
    let mut grads = trace.tape.backward_seeded(&seeds)?;

    let mut worst = 0.0f64;
    let named = params.named_tensors();
    for (ti, (_, tensor)) in named.iter().enumerate() {
        let len = tensor.len();
        let analytic_tensor = grads
            .take(trace.param_ids[ti])
            .expect("every parameter feeds the loss");
        // A couple of spread-out coordinates per tensor keeps this fast.
        for k in 0..2usize {
            let coord = (ti * 31 + k).wrapping_mul(2654435761) % len;
            let mut up = params.clone();
            up.tensors_mut()[ti].data_mut()[coord] += FD_EPS;
            let mut down = params.clone();
            down.tensors_mut()[ti].data_mut()[coord] -= FD_EPS;
            let numeric = (value_of(&up)? - value_of(&down)?) / (2.0 * FD_EPS);
            worst = worst.max(rel(analytic_tensor.data()[coord], numeric));
        }
    }
    Ok(CheckResult::new("seq2seq-end-to-end", worst, MODEL_TOL))
}

/// The whole battery: loss gradients plus the end-to-end model path.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = loss_checks(trials, seed)?;
    results.push(model_check(seed)?);
    Ok(results)
}
