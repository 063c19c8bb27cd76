//! Nonlinear PI controller for the mixing weight `beta(t)`.
//!
//! Each step observes a divergence signal `u(t)`, forms the error
//! `e(t) = set_point - u(t)`, and emits
//!
//! ```text
//! raw(t)  = k_p / (1 + exp(e(t))) - k_i * I(t) + beta_min
//! beta(t) = clamp(raw(t), beta_min, beta_max)
//! ```
//!
//! where `I(t)` is the accumulated error. Errors are buffered and folded
//! into `I` in windows of `window` steps. Anti-windup: a window is committed
//! only when the resulting `raw` lands inside `[beta_min, beta_max]`;
//! saturated steps leave the integral untouched so it cannot run away while
//! the output is pinned at a bound.

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Clone, Copy, Debug)]
pub struct ControllerConfig<F> {
    pub k_p: F,
    pub k_i: F,
    pub beta_min: F,
    pub beta_max: F,
    /// Target value `u*` for the observed divergence signal.
    pub set_point: F,
    /// Error accumulation window `T >= 1`, in steps.
    pub window: usize,
    /// Mixing weight reported before the first step.
    pub beta_init: F,
}

impl<F: Real> ControllerConfig<F> {
    /// Gains and bounds used throughout: `k_p = 0.01`, `k_i = 1e-4`,
    /// `beta in [0.85, 0.95]`, window 1, `beta(0) = 1`.
    pub fn with_set_point(set_point: F) -> Self {
        ControllerConfig {
            k_p: F::from_f64(0.01),
            k_i: F::from_f64(1e-4),
            beta_min: F::from_f64(0.85),
            beta_max: F::from_f64(0.95),
            set_point,
            window: 1,
            beta_init: F::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.beta_min.as_f64(), self.beta_max.as_f64());
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 <= min < max <= 1, got [{}, {}]",
                lo, hi
            )));
        }
        for (name, v) in [("k_p", self.k_p), ("k_i", self.k_i)] {
            let v = v.as_f64();
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        if !self.set_point.as_f64().is_finite() {
            return Err(Error::Config("set point must be finite".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        let b0 = self.beta_init.as_f64();
        if !(0.0..=1.0).contains(&b0) {
            return Err(Error::Config(format!("beta_init must be in [0, 1], got {}", b0)));
        }
        Ok(())
    }
}

/// Serializable controller state for checkpoints, always in `f64`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControllerSnapshot {
    pub k_p: f64,
    pub k_i: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub set_point: f64,
    pub window: usize,
    pub beta_init: f64,
    pub t: u64,
    pub integral: f64,
    pub last_beta: f64,
    pub pending: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Controller<F> {
    cfg: ControllerConfig<F>,
    t: u64,
    integral: F,
    last_beta: F,
    /// Errors observed since the last window boundary.
    pending: Vec<F>,
}

impl<F: Real> Controller<F> {
    pub fn new(cfg: ControllerConfig<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Controller {
            last_beta: cfg.beta_init,
            cfg,
            t: 0,
            integral: F::zero(),
            pending: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig<F> {
        &self.cfg
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn integral(&self) -> F {
        self.integral
    }

    /// Most recently emitted `beta` (`beta_init` before any step).
    pub fn beta(&self) -> F {
        self.last_beta
    }

    /// Observe `u(t)` and emit `beta(t)`.
    pub fn step(&mut self, u: F) -> Result<F> {
        if !u.is_finite() {
            return Err(Error::Numeric(format!("controller observed non-finite u = {}", u)));
        }
        let e = self.cfg.set_point - u;
        self.pending.push(e);
        let boundary = self.pending.len() >= self.cfg.window;
        let candidate = if boundary {
            self.integral + self.pending.iter().copied().sum::<F>()
        } else {
            self.integral
        };
        let one = F::one();
        let raw = self.cfg.k_p / (one + e.exp()) - self.cfg.k_i * candidate + self.cfg.beta_min;
        if boundary {
            if raw >= self.cfg.beta_min && raw <= self.cfg.beta_max {
                self.integral = candidate;
            }
            self.pending.clear();
        }
        let beta = raw.max(self.cfg.beta_min).min(self.cfg.beta_max);
        self.t += 1;
        self.last_beta = beta;
        Ok(beta)
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            k_p: self.cfg.k_p.as_f64(),
            k_i: self.cfg.k_i.as_f64(),
            beta_min: self.cfg.beta_min.as_f64(),
            beta_max: self.cfg.beta_max.as_f64(),
            set_point: self.cfg.set_point.as_f64(),
            window: self.cfg.window,
            beta_init: self.cfg.beta_init.as_f64(),
            t: self.t,
            integral: self.integral.as_f64(),
            last_beta: self.last_beta.as_f64(),
            pending: self.pending.iter().map(|e| e.as_f64()).collect(),
        }
    }

    pub fn restore(snap: &ControllerSnapshot) -> Result<Self> {
        let cfg = ControllerConfig {
            k_p: F::from_f64(snap.k_p),
            k_i: F::from_f64(snap.k_i),
            beta_min: F::from_f64(snap.beta_min),
            beta_max: F::from_f64(snap.beta_max),
            set_point: F::from_f64(snap.set_point),
            window: snap.window,
            beta_init: F::from_f64(snap.beta_init),
        };
        let mut c = Controller::new(cfg)?;
        c.t = snap.t;
        c.integral = F::from_f64(snap.integral);
        c.last_beta = F::from_f64(snap.last_beta);
        c.pending = snap.pending.iter().map(|&e| F::from_f64(e)).collect();
        Ok(c)
    }
}

/// Run a fresh controller over a recorded `u` trajectory; returns one beta
/// per observation.
pub fn simulate<F: Real>(cfg: &ControllerConfig<F>, us: &[F]) -> Result<Vec<F>> {
    if us.is_empty() {
        return Err(Error::Data("controller simulation needs at least one observation".into()));
    }
    let mut c = Controller::new(*cfg)?;
    us.iter().map(|&u| c.step(u)).collect()
}
