//! Concrete forward operators.
//!
//! Four families: identity (denoising), dense linear maps (enables the
//! conjugate-Gaussian oracle), componentwise bounded-gradient nonlinearities,
//! and a 1-D discrete blur as the smoothing-physics stand-in.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarKind {
    Tanh,
    Sin,
    Logistic,
}

impl ScalarKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Self::Tanh),
            "sin" => Ok(Self::Sin),
            "logistic" => Ok(Self::Logistic),
            other => Err(Error::InvalidArgument(format!(
                "unknown scalar nonlinearity '{other}' (expected tanh, sin, or logistic)"
            ))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Sin => x.sin(),
            Self::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - x.tanh().powi(2),
            Self::Sin => x.cos(),
            Self::Logistic => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    /// Uniform bound on |d/dx|.
    fn gradient_bound(self) -> f64 {
        match self {
            Self::Tanh | Self::Sin => 1.0,
            Self::Logistic => 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForwardModel {
    Identity { dim: usize },
    Linear { matrix: DMatrix<f64> },
    Scalar { kind: ScalarKind, dim: usize },
    Blur { kernel: Vec<f64>, dim: usize },
}

impl ForwardModel {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("identity forward needs dim >= 1".into()));
        }
        Ok(Self::Identity { dim })
    }

    pub fn linear(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::InvalidArgument("linear forward needs a nonempty matrix".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear forward matrix".into()));
        }
        Ok(Self::Linear { matrix })
    }

    /// Row-major, header-free CSV.
    pub fn linear_from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|cell| {
                    cell.trim().parse::<f64>().map_err(|_| {
                        Error::Format(format!(
                            "line {}: cannot parse '{}' as a number",
                            lineno + 1,
                            cell.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::Format(format!(
                        "line {}: expected {} columns, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Format("empty matrix CSV".into()));
        }
        let (n, m) = (rows.len(), rows[0].len());
        let matrix = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
        Self::linear(matrix)
    }

    pub fn scalar_nonlinear(name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("scalar forward needs dim >= 1".into()));
        }
        Ok(Self::Scalar {
            kind: ScalarKind::parse(name)?,
            dim,
        })
    }

    /// 1-D blur: convolution with a normalized Gaussian-tap kernel of
    /// half-width `width`. Boundary rows renormalize so every row of the
    /// Jacobian sums to exactly 1.
    pub fn blur(dim: usize, width: usize) -> Result<Self> {
        if dim == 0 || width == 0 {
            return Err(Error::InvalidArgument("blur needs dim >= 1 and width >= 1".into()));
        }
        let s = width as f64 / 2.0;
        let kernel: Vec<f64> = (-(width as i64)..=width as i64)
            .map(|k| (-0.5 * (k as f64 / s).powi(2)).exp())
            .collect();
        Ok(Self::Blur { kernel, dim })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Identity { dim } | Self::Scalar { dim, .. } | Self::Blur { dim, .. } => *dim,
            Self::Linear { matrix } => matrix.ncols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Identity { dim } | Self::Scalar { dim, .. } | Self::Blur { dim, .. } => *dim,
            Self::Linear { matrix } => matrix.nrows(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.evaluate_into(x, &mut out);
        out
    }

    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(out.len(), self.output_dim());
        match self {
            Self::Identity { .. } => out.copy_from_slice(x),
            Self::Scalar { kind, .. } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = kind.apply(xi);
                }
            }
            Self::Linear { matrix } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = matrix.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Self::Blur { kernel, dim } => {
                let half = (kernel.len() - 1) / 2;
                for i in 0..*dim {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for (t, &w) in kernel.iter().enumerate() {
                        let j = i as i64 + t as i64 - half as i64;
                        if j >= 0 && (j as usize) < *dim {
                            acc += w * x[j as usize];
                            norm += w;
                        }
                    }
                    out[i] = acc / norm;
                }
            }
        }
    }

    pub fn component(&self, i: usize, x: &[f64]) -> f64 {
        match self {
            Self::Identity { .. } => x[i],
            Self::Scalar { kind, .. } => kind.apply(x[i]),
            _ => self.evaluate(x)[i],
        }
    }

    /// True when `f_i(x)` depends only on `x_i`; those models admit
    /// per-component posterior factorization under a factorizing prior.
    pub fn is_componentwise(&self) -> bool {
        matches!(self, Self::Identity { .. } | Self::Scalar { .. })
    }

    /// Scalar section `f_i` of a componentwise model.
    #[inline]
    pub fn componentwise_scalar(&self, xi: f64) -> f64 {
        match self {
            Self::Identity { .. } => xi,
            Self::Scalar { kind, .. } => kind.apply(xi),
            _ => panic!("componentwise_scalar on a coupling forward model"),
        }
    }

    /// Jacobian at `x`; constant for identity, linear, and blur.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (n, m) = (self.output_dim(), self.input_dim());
        match self {
            Self::Identity { .. } => DMatrix::identity(n, m),
            Self::Linear { matrix } => matrix.clone(),
            Self::Scalar { kind, .. } => {
                DMatrix::from_fn(n, m, |i, j| if i == j { kind.derivative(x[i]) } else { 0.0 })
            }
            Self::Blur { kernel, dim } => {
                let half = (kernel.len() - 1) / 2;
                let mut jac = DMatrix::zeros(n, m);
                for i in 0..*dim {
                    let mut norm = 0.0;
                    for (t, &w) in kernel.iter().enumerate() {
                        let j = i as i64 + t as i64 - half as i64;
                        if j >= 0 && (j as usize) < *dim {
                            norm += w;
                        }
                    }
                    for (t, &w) in kernel.iter().enumerate() {
                        let j = i as i64 + t as i64 - half as i64;
                        if j >= 0 && (j as usize) < *dim {
                            jac[(i, j as usize)] = w / norm;
                        }
                    }
                }
                jac
            }
        }
    }

    /// Uniform bound on the component gradient norms, when one is known.
    pub fn gradient_bound(&self) -> Option<f64> {
        match self {
            Self::Identity { .. } => Some(1.0),
            Self::Scalar { kind, .. } => Some(kind.gradient_bound()),
            // Each blur row is a probability vector, so its 2-norm is <= 1.
            Self::Blur { .. } => Some(1.0),
            Self::Linear { matrix } => Some(
                (0..matrix.nrows())
                    .map(|i| matrix.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max),
            ),
        }
    }
}
