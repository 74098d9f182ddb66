//! Mixed-noise observation model.
//!
//! Observations follow `y = F(x) + noise` where the noise is Gaussian with
//! per-component variance `sigma_i(x) = a^2 + b^2 f_i(x)^2`: an additive
//! floor `a^2` plus a multiplicative term scaling with the signal. The pair
//! `theta = (a^2, b^2)` is the unknown this workspace estimates.
//!
//! This module carries the likelihood, its exact first and second
//! derivatives in `theta`, the joint density with a prior, and forward
//! simulation. The derivative formulas are the closed forms of the model,
//! not autodiff output; tests validate them against finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::prior::Prior;
use crate::rng::{standard_normal, Stream};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Noise-parameter pair `(a^2, b^2)`: additive variance and multiplicative
/// variance scale. Always finite with `a2 > 0`, `b2 >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub a2: f64,
    pub b2: f64,
}

impl Theta {
    pub fn new(a2: f64, b2: f64) -> Result<Self> {
        if !a2.is_finite() || !b2.is_finite() {
            return Err(Error::NonFinite(format!("theta ({a2}, {b2})")));
        }
        if a2 <= 0.0 || b2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "theta requires a2 > 0 and b2 >= 0, got ({a2}, {b2})"
            )));
        }
        Ok(Self { a2, b2 })
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.a2, self.b2]
    }

    /// Euclidean distance in (a2, b2) space.
    pub fn distance(self, other: Theta) -> f64 {
        let da = self.a2 - other.a2;
        let db = self.b2 - other.b2;
        (da * da + db * db).sqrt()
    }
}

/// Box constraints for `Theta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
}

impl ThetaBox {
    pub fn new(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> Result<Self> {
        let all = [a_min, a_max, b_min, b_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta box bounds".into()));
        }
        if !(a_min > 0.0 && a_min <= a_max && b_min >= 0.0 && b_min <= b_max) {
            return Err(Error::InvalidArgument(format!(
                "theta box requires 0 < a_min <= a_max and 0 <= b_min <= b_max, got \
                 a in [{a_min}, {a_max}], b in [{b_min}, {b_max}]"
            )));
        }
        Ok(Self {
            a_min,
            a_max,
            b_min,
            b_max,
        })
    }

    pub fn contains(&self, theta: Theta) -> bool {
        theta.a2 >= self.a_min
            && theta.a2 <= self.a_max
            && theta.b2 >= self.b_min
            && theta.b2 <= self.b_max
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, theta: Theta) -> Theta {
        Theta {
            a2: theta.a2.clamp(self.a_min, self.a_max),
            b2: theta.b2.clamp(self.b_min, self.b_max),
        }
    }

    pub fn midpoint(&self) -> Theta {
        Theta {
            a2: 0.5 * (self.a_min + self.a_max),
            b2: 0.5 * (self.b_min + self.b_max),
        }
    }
}

/// One observed vector in R^n.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation entries".into()));
        }
        Ok(Self(y))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Symmetric 2x2 matrix over theta space (Hessians, Fisher blocks).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub aa: f64,
    pub ab: f64,
    pub bb: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 {
        aa: 0.0,
        ab: 0.0,
        bb: 0.0,
    };

    /// Eigenvalues as (min, max).
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.aa + self.bb);
        let half_diff = 0.5 * (self.aa - self.bb);
        let radius = (half_diff * half_diff + self.ab * self.ab).sqrt();
        (mid - radius, mid + radius)
    }

    pub fn det(&self) -> f64 {
        self.aa * self.bb - self.ab * self.ab
    }

    pub fn trace(&self) -> f64 {
        self.aa + self.bb
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.aa * self.aa + 2.0 * self.ab * self.ab + self.bb * self.bb).sqrt()
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.aa * v[0] + self.ab * v[1],
            self.ab * v[0] + self.bb * v[1],
        ]
    }

    pub fn add(&self, other: Sym2) -> Sym2 {
        Sym2 {
            aa: self.aa + other.aa,
            ab: self.ab + other.ab,
            bb: self.bb + other.bb,
        }
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2 {
            aa: self.aa * s,
            ab: self.ab * s,
            bb: self.bb * s,
        }
    }

    pub fn neg(&self) -> Sym2 {
        self.scale(-1.0)
    }
}

/// Everything a posterior or EM routine needs to know about one problem
/// instance: physics, prior, and the admissible parameter box.
#[derive(Clone)]
pub struct ModelBundle {
    pub forward: ForwardModel,
    pub prior: Prior,
    pub theta_box: ThetaBox,
}

impl ModelBundle {
    pub fn new(forward: ForwardModel, prior: Prior, theta_box: ThetaBox) -> Result<Self> {
        if forward.input_dim() != prior.dim() {
            return Err(Error::DimMismatch(format!(
                "forward input dim {} vs prior dim {}",
                forward.input_dim(),
                prior.dim()
            )));
        }
        Ok(Self {
            forward,
            prior,
            theta_box,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.forward.input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.forward.output_dim()
    }
}

// ---------------------------------------------------------------------------
// Scalar per-component kernels. All vector operations and every quadrature
// path reduce to these.
// ---------------------------------------------------------------------------

#[inline]
pub fn sigma_scalar(theta: Theta, fx: f64) -> f64 {
    theta.a2 + theta.b2 * fx * fx
}

/// One component of the Gaussian log-likelihood, normalization included.
#[inline]
pub fn log_likelihood_term(theta: Theta, fx: f64, y: f64) -> f64 {
    let s = sigma_scalar(theta, fx);
    let r = y - fx;
    -0.5 * (LN_2PI + s.ln() + r * r / s)
}

/// One component of the theta-gradient: (d/da2, d/db2).
#[inline]
pub fn grad_term(theta: Theta, fx: f64, y: f64) -> [f64; 2] {
    let s = sigma_scalar(theta, fx);
    let r = y - fx;
    let core = 1.0 / s - (r * r) / (s * s);
    [-0.5 * core, -0.5 * fx * fx * core]
}

/// One component of the theta-Hessian.
#[inline]
pub fn hessian_term(theta: Theta, fx: f64, y: f64) -> Sym2 {
    let s = sigma_scalar(theta, fx);
    let r = y - fx;
    let core = 1.0 / (s * s) - 2.0 * r * r / (s * s * s);
    let f2 = fx * fx;
    Sym2 {
        aa: 0.5 * core,
        ab: 0.5 * f2 * core,
        bb: 0.5 * f2 * f2 * core,
    }
}

// ---------------------------------------------------------------------------
// Vector operations.
// ---------------------------------------------------------------------------

/// Noise variances `sigma_i = a^2 + b^2 fx_i^2`.
pub fn sigma(theta: Theta, fx: &[f64]) -> Vec<f64> {
    fx.iter().map(|&f| sigma_scalar(theta, f)).collect()
}

fn check_dims(fx: &[f64], y: &[f64]) -> Result<()> {
    if fx.len() != y.len() {
        return Err(Error::DimMismatch(format!(
            "fx has {} components, y has {}",
            fx.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Log density of `y` given the noiseless prediction `fx`, including the
/// Gaussian normalization constant so the value is a true log-density.
pub fn log_likelihood(theta: Theta, fx: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(fx, y)?;
    Ok(fx
        .iter()
        .zip(y)
        .map(|(&f, &yi)| log_likelihood_term(theta, f, yi))
        .sum())
}

/// Exact gradient of the log-likelihood in `(a^2, b^2)`.
pub fn grad_theta_log_likelihood(theta: Theta, fx: &[f64], y: &[f64]) -> Result<[f64; 2]> {
    check_dims(fx, y)?;
    let mut g = [0.0, 0.0];
    for (&f, &yi) in fx.iter().zip(y) {
        let t = grad_term(theta, f, yi);
        g[0] += t[0];
        g[1] += t[1];
    }
    Ok(g)
}

/// Exact theta-Hessian of the log-likelihood.
pub fn hessian_theta_log_likelihood(theta: Theta, fx: &[f64], y: &[f64]) -> Result<Sym2> {
    check_dims(fx, y)?;
    let mut h = Sym2::ZERO;
    for (&f, &yi) in fx.iter().zip(y) {
        h = h.add(hessian_term(theta, f, yi));
    }
    Ok(h)
}

/// Joint log-density `log p(x, y | theta)`; the prior does not depend on
/// theta, so theta-derivatives of this equal those of the likelihood.
pub fn joint_log_density(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    if x.len() != forward.input_dim() {
        return Err(Error::DimMismatch(format!(
            "x has {} entries, forward expects {}",
            x.len(),
            forward.input_dim()
        )));
    }
    let fx = forward.evaluate(x);
    Ok(log_likelihood(theta, &fx, y)? + prior.log_density(x))
}

/// Draw `y_i = f_i(x) + sqrt(sigma_i(x)) * xi_i` with i.i.d. standard normal
/// `xi`. Deterministic given the stream state.
pub fn sample_observation(
    theta: Theta,
    forward: &ForwardModel,
    x: &[f64],
    rng: &mut Stream,
) -> Observation {
    let fx = forward.evaluate(x);
    let y = fx
        .iter()
        .map(|&f| f + sigma_scalar(theta, f).sqrt() * standard_normal(rng))
        .collect();
    Observation(y)
}
