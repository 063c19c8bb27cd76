use crate::error::{Error, Result};
use crate::num::Real;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Worst relative disagreement between two gradients of the same shape:
/// `max_i |a_i - n_i| / max(1, |a_i|)`. The unit floor keeps tiny components
/// from inflating the error.
pub fn max_rel_err<F: Real>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> F {
    assert_eq!(analytic.shape(), numeric.shape(), "gradients differ in shape");
    let mut worst = F::zero();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let rel = (a - n).abs() / F::one().max(a.abs());
        worst = worst.max(rel);
    }
    worst
}

/// Central-difference gradient of a scalar function: component `i` is
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn central_diff<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    check_eps(eps)?;
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let two = F::from_f64(2.0);
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (hi - lo) / (two * eps);
    }
    Ok(out)
}

/// Compare the tape's reverse-mode gradient of a scalar-valued program with
/// central differences. `build` must construct the same program on any tape
/// it is given; returns the worst relative error over all components of `x`.
pub fn grad_check<F: Real>(
    build: impl Fn(&mut Tape<F>, NodeId) -> Result<NodeId>,
    x: &Tensor<F>,
    eps: F,
) -> Result<F> {
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = build(&mut tape, xid)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::Dim("grad_check program must end in a scalar".into()));
    }
    let grads = tape.backward(root)?;
    let analytic = grads
        .wrt(xid)
        .ok_or_else(|| Error::Data("program does not depend on x".into()))?;
    let numeric = central_diff(
        |probe: &Tensor<F>| {
            let mut t = Tape::new();
            let id = t.leaf(probe.clone());
            let r = build(&mut t, id)?;
            Ok(t.value(r).item())
        },
        x,
        eps,
    )?;
    Ok(max_rel_err(analytic, &numeric))
}

fn check_eps<F: Real>(eps: F) -> Result<()> {
    let e = eps.as_f64();
    if !(e > 0.0 && e <= 1e-3) {
        return Err(Error::Config(format!(
            "finite-difference step must be in (0, 1e-3], got {}",
            e
        )));
    }
    Ok(())
}
