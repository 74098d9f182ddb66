//! Latent prior.
//!
//! Independent Gaussian components cover every experiment in this
//! workspace; correlated or non-Gaussian priors are out of scope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LN_2PI;
use crate::rng::{standard_normal, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Prior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimMismatch(format!(
                "prior mean has {} entries, variance {}",
                mean.len(),
                var.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::InvalidArgument("prior dimension 0".into()));
        }
        if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior parameters".into()));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument(
                "prior variances must be positive".into(),
            ));
        }
        Ok(Self { mean, var })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&xi, (&m, &v))| {
                let d = xi - m;
                -0.5 * (LN_2PI + v.ln() + d * d / v)
            })
            .sum()
    }

    pub fn sample_into(&self, rng: &mut Stream, out: &mut [f64]) {
        for (o, (&m, &v)) in out.iter_mut().zip(self.mean.iter().zip(&self.var)) {
            *o = m + v.sqrt() * standard_normal(rng);
        }
    }

    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.sample_into(rng, &mut x);
        x
    }

    /// Independent components: always true for this family.
    pub fn factorizes(&self) -> bool {
        true
    }

    pub fn component_mean(&self, k: usize) -> f64 {
        self.mean[k]
    }

    pub fn component_std(&self, k: usize) -> f64 {
        self.var[k].sqrt()
    }

    pub fn component_log_density(&self, k: usize, x: f64) -> f64 {
        let d = x - self.mean[k];
        -0.5 * (LN_2PI + self.var[k].ln() + d * d / self.var[k])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }
}
