use crate::error::{Error, Result};
use crate::num::Real;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Real> Default for AdamHyper<F> {
    fn default() -> Self {
        AdamHyper {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
        }
    }
}

/// First and second moment estimates, one tensor pair per parameter
/// tensor, plus the bias-correction step count.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn zeros_like(tensors: &[&Tensor<F>]) -> Self {
        AdamState {
            m: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<F> {
    Sgd,
    Adam { hyper: AdamHyper<F>, state: AdamState<F> },
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, tensors: &[&Tensor<F>]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                hyper: AdamHyper::default(),
                state: AdamState::zeros_like(tensors),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Sgd => 0,
            Optimizer::Adam { state, .. } => state.t,
        }
    }

    /// Apply one update in place. `params` and `grads` are aligned
    /// canonical-order tensor lists; gradients must be finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>], lr: F) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dim(format!(
                "{} parameter tensors vs {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        let l = lr.as_f64();
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and > 0, got {}", l)));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dim(format!(
                    "tensor {}: parameter shape {:?} vs gradient shape {:?}",
                    i,
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {}", i)));
            }
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam { hyper, state } => {
                state.t += 1;
                let one = F::one();
                let t = state.t as i32;
                let bc1 = one - hyper.beta1.powi(t);
                let bc2 = one - hyper.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                {
                    for ((pv, &gv), (mv, vv)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    {
                        *mv = hyper.beta1 * *mv + (one - hyper.beta1) * gv;
                        *vv = hyper.beta2 * *vv + (one - hyper.beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + hyper.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: F) -> F {
    let mut sq = F::zero();
    for g in grads.iter() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensors(vals: &[&[f64]]) -> Vec<Tensor<f64>> {
        vals.iter().map(|v| Tensor::vector(v.to_vec())).collect()
    }

    #[test]
    fn sgd_subtracts_scaled_gradient_exactly() {
        let mut params = tensors(&[&[1.0, 2.0], &[3.0]]);
        let grads = tensors(&[&[0.5, -1.0], &[2.0]]);
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        let mut opt = Optimizer::Sgd;
        opt.step(&mut refs, &grads, 0.1).unwrap();
        assert_eq!(params[0].data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(params[1].data(), &[3.0 - 0.2]);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut params = tensors(&[&[1.0, -2.0]]);
        let grads = tensors(&[&[0.0, 0.0]]);
        let snapshot = params[0].data().to_vec();
        let views: Vec<&Tensor<f64>> = params.iter().collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &views);
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.5).unwrap();
        assert_eq!(params[0].data(), snapshot.as_slice());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr_times_sign() {
        // After bias correction the first update is
        // lr * g / (|g| + eps) ~ lr * sign(g).
        let mut params = tensors(&[&[0.0, 0.0, 0.0]]);
        let grads = tensors(&[&[3.0, -0.004, 1e4]]);
        let views: Vec<&Tensor<f64>> = params.iter().collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &views);
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.01).unwrap();
        for (&p, &g) in params[0].data().iter().zip(grads[0].data()) {
            assert!((p + 0.01 * g.signum()).abs() < 1e-6, "p {} g {}", p, g);
        }
    }

    #[test]
    fn adam_moments_follow_the_update_rule() {
        let mut params = tensors(&[&[1.0]]);
        let grads = tensors(&[&[2.0]]);
        let views: Vec<&Tensor<f64>> = params.iter().collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &views);
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        opt.step(&mut refs, &grads, 0.1).unwrap();
        let Optimizer::Adam { state, hyper } = &opt else { panic!() };
        assert!((state.m[0].data()[0] - 0.1 * 2.0).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.001 * 4.0).abs() < 1e-15);
        let mhat: f64 = 0.2 / (1.0 - 0.9);
        let vhat: f64 = 0.004 / (1.0 - 0.999);
        let expect = 1.0 - 0.1 * mhat / (vhat.sqrt() + hyper.eps.as_f64());
        assert!((params[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradients_are_numeric_errors() {
        let mut params = tensors(&[&[1.0]]);
        let grads = tensors(&[&[f64::NAN]]);
        let mut refs: Vec<&mut Tensor<f64>> = params.iter_mut().collect();
        let mut opt = Optimizer::Sgd;
        assert!(matches!(
            opt.step(&mut refs, &grads, 0.1),
            Err(Error::Numeric(_))
        ));
        let grads = tensors(&[&[1.0, 2.0]]);
        assert!(matches!(opt.step(&mut refs, &grads, 0.1), Err(Error::Dim(_))));
        let grads = tensors(&[&[1.0]]);
        assert!(matches!(
            opt.step(&mut refs, &grads, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn clipping_rescales_only_above_the_threshold() {
        let mut grads = tensors(&[&[3.0, 4.0]]);
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        assert!((grads[0].data()[0] - 1.5).abs() < 1e-15);
        assert!((grads[0].data()[1] - 2.0).abs() < 1e-15);
        let after: f64 = grads[0].data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 2.5).abs() < 1e-12);
    }
}
