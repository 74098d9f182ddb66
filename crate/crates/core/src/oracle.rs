//! Ground-truth posterior machinery.
//!
//! Three oracle families back the EM E-step and every flow-matching test:
//! dense-grid quadrature posteriors (1-D/2-D, or per-component products for
//! componentwise models with factorizing priors), the exact conjugate
//! Gaussian posterior for linear forwards with purely additive noise, and a
//! random-walk Metropolis fallback.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::model::{self, Observation, Theta, LN_2PI};
use crate::prior::Prior;
use crate::rng::{self, Stream};

/// Anything that can produce i.i.d. posterior draws.
pub trait PosteriorSampler: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>>;
}

// ---------------------------------------------------------------------------
// Grid posteriors.
// ---------------------------------------------------------------------------

/// Settings for grid-quadrature posteriors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Nodes per axis.
    pub resolution: usize,
    /// Half-width of the range in prior standard deviations.
    pub half_width_stds: f64,
    /// How many times the range may be widened when the boundary check
    /// fails before giving up.
    pub max_widenings: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 2001,
            half_width_stds: 8.0,
            max_widenings: 5,
        }
    }
}

impl GridSpec {
    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }
}

/// Mass allowed on the boundary nodes; beyond this the grid is considered
/// too narrow.
const BOUNDARY_MASS_LIMIT: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub step: f64,
    pub len: usize,
}

impl GridAxis {
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        self.lo + self.step * j as f64
    }

    pub fn hi(&self) -> f64 {
        self.node(self.len - 1)
    }
}

/// Normalize log-weights in place to probabilities; returns the
/// log-sum-exp. Stable under additive shifts of the inputs.
pub(crate) fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for lw in log_w.iter_mut() {
        *lw = (*lw - max).exp();
        sum += *lw;
    }
    for w in log_w.iter_mut() {
        *w /= sum;
    }
    max + sum.ln()
}

/// Posterior represented by normalized weights on a uniform grid.
#[derive(Clone, Debug)]
pub struct GridPosterior {
    axes: Vec<GridAxis>,
    /// Normalized node weights, row-major over the axes.
    weights: Vec<f64>,
    cdf: Vec<f64>,
    /// Forward values at the nodes, node-major, `obs_dim` entries each.
    fx: Vec<f64>,
    log_prior: Vec<f64>,
    obs_dim: usize,
    log_marginal: f64,
}

impl GridPosterior {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// Log of the quadrature estimate of the marginal density of `y`.
    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn node_into(&self, idx: usize, out: &mut [f64]) {
        match self.axes.len() {
            1 => out[0] = self.axes[0].node(idx),
            2 => {
                let cols = self.axes[1].len;
                out[0] = self.axes[0].node(idx / cols);
                out[1] = self.axes[1].node(idx % cols);
            }
            _ => unreachable!(),
        }
    }

    pub fn fx_at(&self, idx: usize) -> &[f64] {
        &self.fx[idx * self.obs_dim..(idx + 1) * self.obs_dim]
    }

    pub fn log_prior_at(&self, idx: usize) -> f64 {
        self.log_prior[idx]
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut node = vec![0.0; d];
        for (idx, &w) in self.weights.iter().enumerate() {
            self.node_into(idx, &mut node);
            for k in 0..d {
                mean[k] += w * node[k];
            }
        }
        mean
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mean = self.mean();
        let mut cov = DMatrix::zeros(d, d);
        let mut node = vec![0.0; d];
        for (idx, &w) in self.weights.iter().enumerate() {
            self.node_into(idx, &mut node);
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += w * (node[i] - mean[i]) * (node[j] - mean[j]);
                }
            }
        }
        cov
    }

    pub fn variance(&self) -> Vec<f64> {
        let cov = self.covariance();
        (0..self.dim()).map(|k| cov[(k, k)]).collect()
    }

    /// Posterior expectation of a vector-valued integrand. Rejects
    /// non-finite integrand values.
    pub fn expectation<F>(&self, integrand: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let mut node = vec![0.0; self.dim()];
        let mut acc: Option<Vec<f64>> = None;
        for (idx, &w) in self.weights.iter().enumerate() {
            self.node_into(idx, &mut node);
            let vals = integrand(&node);
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "integrand at node {node:?}"
                )));
            }
            match acc.as_mut() {
                None => acc = Some(vals.iter().map(|v| v * w).collect()),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&vals) {
                        *a += w * v;
                    }
                }
            }
        }
        acc.ok_or_else(|| Error::InvalidArgument("empty grid".into()))
    }

    /// Normalized density values at the nodes (weights over the cell
    /// volume), usable with `metrics::tv_grid`.
    pub fn density(&self) -> Vec<f64> {
        let volume: f64 = self.axes.iter().map(|a| a.step).product();
        self.weights.iter().map(|w| w / volume).collect()
    }

    /// Total mass sitting on the outermost nodes.
    pub fn boundary_mass(&self) -> f64 {
        match self.axes.len() {
            1 => self.weights[0] + self.weights[self.len() - 1],
            2 => {
                let (rows, cols) = (self.axes[0].len, self.axes[1].len);
                let mut mass = 0.0;
                for i in 0..rows {
                    for j in 0..cols {
                        if i == 0 || j == 0 || i == rows - 1 || j == cols - 1 {
                            mass += self.weights[i * cols + j];
                        }
                    }
                }
                mass
            }
            _ => unreachable!(),
        }
    }

    fn sample_index(&self, rng: &mut Stream) -> usize {
        let u: f64 = rng.gen();
        match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i,
            Err(i) => i.min(self.cdf.len() - 1),
        }
    }
}

impl PosteriorSampler for GridPosterior {
    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut node = vec![0.0; d];
            self.node_into(self.sample_index(rng), &mut node);
            out.push(node);
        }
        Ok(out)
    }
}

fn build_grid(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y: &[f64],
    axes: Vec<GridAxis>,
) -> Result<GridPosterior> {
    let obs_dim = forward.output_dim();
    if y.len() != obs_dim {
        return Err(Error::DimMismatch(format!(
            "observation has {} entries, forward produces {}",
            y.len(),
            obs_dim
        )));
    }
    let total: usize = axes.iter().map(|a| a.len).product();
    let dim = axes.len();

    let mut log_w = vec![0.0; total];
    let mut fx = vec![0.0; total * obs_dim];
    let mut log_prior = vec![0.0; total];

    let mut node = vec![0.0; dim];
    for idx in 0..total {
        match dim {
            1 => node[0] = axes[0].node(idx),
            2 => {
                let cols = axes[1].len;
                node[0] = axes[0].node(idx / cols);
                node[1] = axes[1].node(idx % cols);
            }
            _ => unreachable!(),
        }
        let fslice = &mut fx[idx * obs_dim..(idx + 1) * obs_dim];
        forward.evaluate_into(&node, fslice);
        let lp = prior.log_density(&node);
        log_prior[idx] = lp;
        log_w[idx] = model::log_likelihood(theta, fslice, y)? + lp;
    }

    let lse = normalize_log_weights(&mut log_w);
    let volume: f64 = axes.iter().map(|a| a.step).product();
    let log_marginal = lse + volume.ln();

    let mut cdf = Vec::with_capacity(total);
    let mut acc = 0.0;
    for &w in &log_w {
        acc += w;
        cdf.push(acc);
    }
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }

    Ok(GridPosterior {
        axes,
        weights: log_w,
        cdf,
        fx,
        log_prior,
        obs_dim,
        log_marginal,
    })
}

fn default_axes(prior: &Prior, half_width_stds: f64, resolution: usize) -> Vec<GridAxis> {
    (0..prior.dim())
        .map(|k| {
            let center = prior.component_mean(k);
            let half = half_width_stds * prior.component_std(k);
            GridAxis {
                lo: center - half,
                step: 2.0 * half / (resolution - 1) as f64,
                len: resolution,
            }
        })
        .collect()
}

/// Grid posterior over a fixed range per axis (no auto-widening).
pub fn grid_posterior_with_axes(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y: &[f64],
    axes: Vec<GridAxis>,
) -> Result<GridPosterior> {
    let dim = forward.input_dim();
    if dim != axes.len() || dim > 2 {
        return Err(Error::InvalidArgument(format!(
            "grid posterior needs 1 or 2 axes matching the latent dim, got {} axes for dim {dim}",
            axes.len()
        )));
    }
    build_grid(theta, forward, prior, y, axes)
}

/// Dense-grid posterior for latent dimension 1 or 2. The range defaults to
/// the prior mean plus/minus `half_width_stds` prior standard deviations
/// and widens automatically while the boundary check fails.
pub fn grid_posterior(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y: &[f64],
    spec: &GridSpec,
) -> Result<GridPosterior> {
    let dim = forward.input_dim();
    if dim > 2 {
        return Err(Error::InvalidArgument(format!(
            "grid posterior supports latent dim 1 or 2 (got {dim}); use the factorized \
             form for componentwise models"
        )));
    }
    if spec.resolution < 3 {
        return Err(Error::InvalidArgument("grid resolution must be >= 3".into()));
    }
    let mut half_width = spec.half_width_stds;
    for _ in 0..=spec.max_widenings {
        let axes = default_axes(prior, half_width, spec.resolution);
        let grid = build_grid(theta, forward, prior, y, axes)?;
        let boundary = grid.boundary_mass();
        if boundary <= BOUNDARY_MASS_LIMIT {
            return Ok(grid);
        }
        half_width *= 1.6;
    }
    Err(Error::GridBoundaryMass {
        boundary_mass: f64::NAN,
        limit: BOUNDARY_MASS_LIMIT,
        half_width,
    })
}

/// Product of per-component 1-D grid posteriors. Valid for componentwise
/// forwards (identity, scalar nonlinearities) with factorizing priors, at
/// any latent dimension.
#[derive(Clone, Debug)]
pub struct FactorizedGridPosterior {
    comps: Vec<GridPosterior>,
}

impl FactorizedGridPosterior {
    pub fn components(&self) -> &[GridPosterior] {
        &self.comps
    }

    pub fn log_marginal(&self) -> f64 {
        self.comps.iter().map(|c| c.log_marginal()).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.comps.iter().map(|c| c.mean()[0]).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.comps.iter().map(|c| c.variance()[0]).collect()
    }
}

impl PosteriorSampler for FactorizedGridPosterior {
    fn dim(&self) -> usize {
        self.comps.len()
    }

    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; self.comps.len()]; count];
        for (k, comp) in self.comps.iter().enumerate() {
            for row in out.iter_mut() {
                let mut v = [0.0];
                comp.node_into(comp.sample_index(rng), &mut v);
                row[k] = v[0];
            }
        }
        Ok(out)
    }
}

/// Scalar section of a componentwise forward as a standalone 1-D model.
fn component_model(forward: &ForwardModel) -> Result<ForwardModel> {
    match forward {
        ForwardModel::Identity { .. } => ForwardModel::identity(1),
        ForwardModel::Scalar { kind, .. } => {
            let name = match kind {
                crate::forward::ScalarKind::Tanh => "tanh",
                crate::forward::ScalarKind::Sin => "sin",
                crate::forward::ScalarKind::Logistic => "logistic",
            };
            ForwardModel::scalar_nonlinear(name, 1)
        }
        _ => Err(Error::InvalidArgument(
            "factorized posterior needs a componentwise forward".into(),
        )),
    }
}

pub fn factorized_posterior(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y: &[f64],
    spec: &GridSpec,
) -> Result<FactorizedGridPosterior> {
    if !forward.is_componentwise() || !prior.factorizes() {
        return Err(Error::InvalidArgument(
            "factorized posterior needs a componentwise forward and a factorizing prior".into(),
        ));
    }
    if y.len() != forward.output_dim() {
        return Err(Error::DimMismatch(format!(
            "observation has {} entries, forward produces {}",
            y.len(),
            forward.output_dim()
        )));
    }
    let scalar_forward = component_model(forward)?;
    let comps = (0..forward.input_dim())
        .map(|k| {
            let sub_prior = Prior::new(
                vec![prior.component_mean(k)],
                vec![prior.component_std(k).powi(2)],
            )?;
            grid_posterior(theta, &scalar_forward, &sub_prior, &[y[k]], spec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorizedGridPosterior { comps })
}

/// Build one posterior per observation in parallel (componentwise models
/// factorize; otherwise the latent dimension must be 1 or 2).
pub fn grid_posteriors_for(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y_set: &[Observation],
    spec: &GridSpec,
) -> Result<Vec<PosteriorKind>> {
    y_set
        .par_iter()
        .map(|y| {
            if forward.input_dim() <= 2 && !(forward.is_componentwise() && prior.factorizes()) {
                Ok(PosteriorKind::Grid(grid_posterior(
                    theta,
                    forward,
                    prior,
                    y.as_slice(),
                    spec,
                )?))
            } else if forward.is_componentwise() && prior.factorizes() {
                Ok(PosteriorKind::Factorized(factorized_posterior(
                    theta,
                    forward,
                    prior,
                    y.as_slice(),
                    spec,
                )?))
            } else {
                Err(Error::InvalidArgument(
                    "no grid posterior available: latent dim > 2 and model does not factorize"
                        .into(),
                ))
            }
        })
        .collect()
}

/// Either flavor of grid posterior.
#[derive(Clone, Debug)]
pub enum PosteriorKind {
    Grid(GridPosterior),
    Factorized(FactorizedGridPosterior),
}

impl PosteriorKind {
    pub fn log_marginal(&self) -> f64 {
        match self {
            Self::Grid(g) => g.log_marginal(),
            Self::Factorized(f) => f.log_marginal(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Self::Grid(g) => g.mean(),
            Self::Factorized(f) => f.mean(),
        }
    }
}

impl PosteriorSampler for PosteriorKind {
    fn dim(&self) -> usize {
        match self {
            Self::Grid(g) => g.dim(),
            Self::Factorized(f) => PosteriorSampler::dim(f),
        }
    }

    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Grid(g) => g.sample(count, rng),
            Self::Factorized(f) => f.sample(count, rng),
        }
    }
}

// ---------------------------------------------------------------------------
// Conjugate Gaussian posterior (linear forward, b^2 = 0).
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConjugateGaussianPosterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl ConjugateGaussianPosterior {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

impl PosteriorSampler for ConjugateGaussianPosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        let d = self.mean.len();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(d, |_, _| rng::standard_normal(rng));
            let x = &self.mean + &self.chol_lower * z;
            out.push(x.iter().cloned().collect());
        }
        Ok(out)
    }
}

/// Exact posterior for `y = A x + noise`, Gaussian prior, additive noise
/// variance `a2` (requires `b^2 = 0`). Rejects singular prior covariance.
pub fn exact_linear_gaussian_posterior(
    a: &DMatrix<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    a2: f64,
    y: &[f64],
) -> Result<ConjugateGaussianPosterior> {
    let (n, m) = (a.nrows(), a.ncols());
    if prior_mean.len() != m || prior_cov.nrows() != m || prior_cov.ncols() != m {
        return Err(Error::DimMismatch("prior dims do not match the operator".into()));
    }
    if y.len() != n {
        return Err(Error::DimMismatch(format!(
            "observation has {} entries, operator produces {n}",
            y.len()
        )));
    }
    if a2 <= 0.0 {
        return Err(Error::InvalidArgument("conjugate posterior needs a2 > 0".into()));
    }
    let prior_chol = prior_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("singular prior covariance".into()))?;
    let prior_precision = prior_chol.inverse();

    let precision = a.transpose() * a / a2 + &prior_precision;
    let post_chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("singular posterior precision".into()))?;
    let cov = post_chol.inverse();

    let yv = DVector::from_column_slice(y);
    let rhs = a.transpose() * yv / a2 + &prior_precision * prior_mean;
    let mean = &cov * rhs;

    let chol_lower = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("posterior covariance not positive definite".into()))?
        .l();

    Ok(ConjugateGaussianPosterior {
        mean,
        cov,
        chol_lower,
    })
}

/// Log marginal density of `y` under the same model: `y ~ N(A mu0, a2 I + A
/// Sigma0 A^T)`.
pub fn linear_gaussian_log_marginal(
    a: &DMatrix<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    a2: f64,
    y: &[f64],
) -> Result<f64> {
    let n = a.nrows();
    if y.len() != n {
        return Err(Error::DimMismatch("observation length".into()));
    }
    let mean = a * prior_mean;
    let cov = a * prior_cov * a.transpose() + DMatrix::identity(n, n) * a2;
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("singular marginal covariance".into()))?;
    let diff = DVector::from_column_slice(y) - mean;
    let solved = chol.solve(&diff);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(-0.5 * (n as f64 * LN_2PI + log_det + diff.dot(&solved)))
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature (for Gaussian posterior expectations).
// ---------------------------------------------------------------------------

/// Nodes and weights such that `E[g(X)] = sum_i w_i g(mu + sigma t_i)` for
/// `X ~ N(mu, sigma^2)`. Computed via the Golub-Welsch eigenproblem.
pub fn gauss_hermite_normalized(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Probabilists' Hermite recurrence: off-diagonal sqrt(k).
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

// ---------------------------------------------------------------------------
// Random-walk Metropolis.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MetropolisSpec {
    /// Per-dimension proposal standard deviations; `None` means half the
    /// prior standard deviation.
    pub proposal_scale: Option<Vec<f64>>,
    pub burn_in: usize,
    pub thinning: usize,
}

impl Default for MetropolisSpec {
    fn default() -> Self {
        Self {
            proposal_scale: None,
            burn_in: 2000,
            thinning: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetropolisRun {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
}

/// Random-walk Metropolis targeting the joint log-density at fixed `y`.
pub fn metropolis_sample(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    y: &[f64],
    count: usize,
    spec: &MetropolisSpec,
    rng: &mut Stream,
) -> Result<MetropolisRun> {
    if count == 0 {
        return Err(Error::InvalidArgument("metropolis needs count >= 1".into()));
    }
    let dim = forward.input_dim();
    let scale: Vec<f64> = match &spec.proposal_scale {
        Some(s) => {
            if s.len() != dim {
                return Err(Error::DimMismatch("proposal scale length".into()));
            }
            s.clone()
        }
        None => (0..dim).map(|k| 0.5 * prior.component_std(k)).collect(),
    };

    let thinning = spec.thinning.max(1);
    let mut x: Vec<f64> = (0..dim).map(|k| prior.component_mean(k)).collect();
    let mut log_p = model::joint_log_density(theta, forward, prior, &x, y)?;
    let mut proposal = vec![0.0; dim];

    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let mut samples = Vec::with_capacity(count);
    let total_iters = spec.burn_in + count * thinning;

    for iter in 0..total_iters {
        for (p, (&xi, &s)) in proposal.iter_mut().zip(x.iter().zip(&scale)) {
            *p = xi + s * rng::standard_normal(rng);
        }
        let log_q = model::joint_log_density(theta, forward, prior, &proposal, y)?;
        let accept = log_q - log_p >= 0.0 || rng.gen::<f64>().ln() < log_q - log_p;
        if iter >= spec.burn_in {
            proposed += 1;
        }
        if accept {
            x.copy_from_slice(&proposal);
            log_p = log_q;
            if iter >= spec.burn_in {
                accepted += 1;
            }
        }
        if iter >= spec.burn_in && (iter - spec.burn_in + 1) % thinning == 0 {
            samples.push(x.clone());
        }
    }

    let acceptance_rate = accepted as f64 / proposed.max(1) as f64;
    log::debug!("metropolis acceptance rate {acceptance_rate:.3}");
    if accepted == 0 {
        return Err(Error::ZeroAcceptance {
            scale: scale.iter().cloned().fold(0.0, f64::max),
        });
    }
    samples.truncate(count);
    Ok(MetropolisRun {
        samples,
        acceptance_rate,
    })
}

/// Sampler wrapper around `metropolis_sample` for trait-object use.
#[derive(Clone, Debug)]
pub struct MetropolisSampler {
    pub theta: Theta,
    pub forward: ForwardModel,
    pub prior: Prior,
    pub y: Vec<f64>,
    pub spec: MetropolisSpec,
}

impl PosteriorSampler for MetropolisSampler {
    fn dim(&self) -> usize {
        self.forward.input_dim()
    }

    fn sample(&self, count: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>> {
        Ok(
            metropolis_sample(self.theta, &self.forward, &self.prior, &self.y, count, &self.spec, rng)?
                .samples,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn theta(a2: f64, b2: f64) -> Theta {
        Theta::new(a2, b2).unwrap()
    }

    fn std_setup() -> (ForwardModel, Prior) {
        (ForwardModel::identity(1).unwrap(), Prior::standard_normal(1))
    }

    #[test]
    fn conjugate_equal_precision_fusion() {
        let a = DMatrix::identity(1, 1);
        let post = exact_linear_gaussian_posterior(
            &a,
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            1.0,
            &[0.0],
        )
        .unwrap();
        assert!((post.mean()[0]).abs() < 1e-14);
        assert!((post.covariance()[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn conjugate_formula_1d() {
        let a = DMatrix::identity(1, 1);
        for (a2, y) in [(0.3, 1.2), (2.0, -0.7), (0.05, 0.4)] {
            let post = exact_linear_gaussian_posterior(
                &a,
                &DVector::zeros(1),
                &DMatrix::identity(1, 1),
                a2,
                &[y],
            )
            .unwrap();
            assert!((post.mean()[0] - y / (1.0 + a2)).abs() < 1e-12);
            assert!((post.covariance()[(0, 0)] - a2 / (1.0 + a2)).abs() < 1e-12);
        }
    }

    #[test]
    fn conjugate_rejects_singular_prior() {
        let a = DMatrix::identity(2, 2);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(exact_linear_gaussian_posterior(
            &a,
            &DVector::zeros(2),
            &singular,
            1.0,
            &[0.0, 0.0]
        )
        .is_err());
    }

    #[test]
    fn conjugate_matches_grid_in_2d() {
        let mut r = rng::seeded(71);
        let a = DMatrix::from_fn(2, 2, |_, _| rng::standard_normal(&mut r));
        let a2 = 0.4;
        let y = [0.8, -0.3];
        let post = exact_linear_gaussian_posterior(
            &a,
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            a2,
            &y,
        )
        .unwrap();

        let forward = ForwardModel::linear(a).unwrap();
        let prior = Prior::standard_normal(2);
        let spec = GridSpec {
            resolution: 401,
            ..Default::default()
        };
        let grid = grid_posterior(theta(a2, 0.0), &forward, &prior, &y, &spec).unwrap();
        let gm = grid.mean();
        let gc = grid.covariance();
        for k in 0..2 {
            assert!((gm[k] - post.mean()[k]).abs() < 1e-3, "mean comp {k}");
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((gc[(i, j)] - post.covariance()[(i, j)]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn grid_matches_conjugate_closed_form() {
        let (forward, prior) = std_setup();
        let th = theta(0.5, 0.0);
        let y = [0.9];
        let grid = grid_posterior(th, &forward, &prior, &y, &GridSpec::default()).unwrap();
        let mean = grid.mean()[0];
        let var = grid.variance()[0];
        assert!((mean - 0.9 / 1.5).abs() < 1e-4, "mean {mean}");
        assert!((var - 0.5 / 1.5).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn grid_uninformative_likelihood_recovers_prior() {
        let (forward, prior) = std_setup();
        let th = theta(1e6, 0.0);
        let grid = grid_posterior(th, &forward, &prior, &[123.0], &GridSpec::default()).unwrap();
        assert!(grid.mean()[0].abs() < 1e-3);
        assert!((grid.variance()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn grid_resolution_self_consistency() {
        let (forward, prior) = std_setup();
        let th = theta(0.15, 0.3);
        let y = [1.4];
        let coarse = grid_posterior(th, &forward, &prior, &y, &GridSpec::with_resolution(2001))
            .unwrap();
        let fine = grid_posterior(th, &forward, &prior, &y, &GridSpec::with_resolution(4001))
            .unwrap();
        assert!((coarse.mean()[0] - fine.mean()[0]).abs() <= 1e-6);
    }

    #[test]
    fn grid_weights_sum_to_one() {
        let (forward, prior) = std_setup();
        let grid =
            grid_posterior(theta(0.2, 0.4), &forward, &prior, &[0.7], &GridSpec::default())
                .unwrap();
        let sum: f64 = grid.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(grid.weights().iter().all(|&w| w >= 0.0));
        assert!(grid.boundary_mass() <= 1e-9);
    }

    #[test]
    fn log_sum_exp_shift_stable() {
        let base = vec![-700.0, -701.0, -702.5];
        for shift in [0.0, 500.0, -3000.0, 12345.0] {
            let mut a = base.clone();
            let mut b: Vec<f64> = base.iter().map(|v| v + shift).collect();
            let la = normalize_log_weights(&mut a);
            let lb = normalize_log_weights(&mut b);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
            assert!((lb - la - shift).abs() < 1e-9 * (1.0 + shift.abs()));
        }
    }

    #[test]
    fn expectation_normalization_and_symmetry() {
        let (forward, prior) = std_setup();
        let grid =
            grid_posterior(theta(1.0, 0.0), &forward, &prior, &[0.0], &GridSpec::default())
                .unwrap();
        let one = grid.expectation(|_| vec![1.0]).unwrap();
        assert!((one[0] - 1.0).abs() < 1e-12);
        // Posterior symmetric around 0 here.
        let mean = grid.expectation(|x| vec![x[0]]).unwrap();
        assert!(mean[0].abs() < 1e-10);
        // Non-finite integrand rejected.
        assert!(grid.expectation(|x| vec![1.0 / (x[0] - x[0])]).is_err());
    }

    #[test]
    fn expectation_matches_monte_carlo_resampling() {
        let (forward, prior) = std_setup();
        let th = theta(0.3, 0.2);
        let y = [0.8];
        let grid = grid_posterior(th, &forward, &prior, &y, &GridSpec::default()).unwrap();
        let exact = grid
            .expectation(|x| {
                let fx = [x[0]];
                model::grad_theta_log_likelihood(th, &fx, &y).unwrap().to_vec()
            })
            .unwrap();
        let mut r = rng::seeded(5);
        let n = 40_000;
        let samples = grid.sample(n, &mut r).unwrap();
        let mut mean = [0.0, 0.0];
        let mut sq = [0.0, 0.0];
        for s in &samples {
            let g = model::grad_theta_log_likelihood(th, &[s[0]], &y).unwrap();
            for k in 0..2 {
                mean[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..2 {
            let m = mean[k] / n as f64;
            let se = ((sq[k] / n as f64 - m * m) / n as f64).sqrt();
            assert!(
                (m - exact[k]).abs() <= 3.0 * se.max(1e-12),
                "comp {k}: {m} vs {} (se {se})",
                exact[k]
            );
        }
    }

    #[test]
    fn factorized_matches_full_grid_in_2d() {
        let forward = ForwardModel::identity(2).unwrap();
        let prior = Prior::standard_normal(2);
        let th = theta(0.2, 0.3);
        let y = [0.5, -1.0];
        let spec = GridSpec::with_resolution(1201);
        let full = grid_posterior(th, &forward, &prior, &y, &spec).unwrap();
        let fact = factorized_posterior(th, &forward, &prior, &y, &spec).unwrap();
        let fm = full.mean();
        let gm = fact.mean();
        for k in 0..2 {
            assert!((fm[k] - gm[k]).abs() < 1e-9, "component {k}");
        }
        assert!((full.log_marginal() - fact.log_marginal()).abs() < 1e-9);
    }

    #[test]
    fn mixed_noise_posterior_is_non_gaussian() {
        // With b^2 > 0 the posterior acquires visible excess kurtosis.
        let (forward, prior) = std_setup();
        let th = theta(0.05, 0.8);
        let grid = grid_posterior(th, &forward, &prior, &[0.8], &GridSpec::default()).unwrap();
        let mean = grid.mean()[0];
        let var = grid.variance()[0];
        let fourth = grid
            .expectation(|x| vec![(x[0] - mean).powi(4)])
            .unwrap()[0];
        let excess = fourth / (var * var) - 3.0;
        assert!(excess.abs() > 0.1, "excess kurtosis {excess}");
    }

    #[test]
    fn gauss_hermite_moments() {
        let (nodes, weights) = gauss_hermite_normalized(32);
        let (mu, sd) = (0.7, 1.3);
        let moment = |p: i32| -> f64 {
            nodes
                .iter()
                .zip(&weights)
                .map(|(&t, &w)| w * (mu + sd * t).powi(p))
                .sum()
        };
        assert!((moment(1) - mu).abs() < 1e-12);
        assert!((moment(2) - (mu * mu + sd * sd)).abs() < 1e-12);
        // Fourth central moment of a Gaussian: 3 sigma^4.
        let m4: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&t, &w)| w * (sd * t).powi(4))
            .sum();
        assert!((m4 - 3.0 * sd.powi(4)).abs() < 1e-10);
    }

    #[test]
    fn metropolis_matches_conjugate_mean() {
        let (forward, prior) = std_setup();
        let th = theta(0.5, 0.0);
        let y = [1.1];
        let run = metropolis_sample(
            th,
            &forward,
            &prior,
            &y,
            20_000,
            &MetropolisSpec::default(),
            &mut rng::seeded(12),
        )
        .unwrap();
        let exact_mean = 1.1 / 1.5;
        let n = run.samples.len() as f64;
        let mean: f64 = run.samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let var: f64 =
            run.samples.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / n;
        // Thinned chains still carry some autocorrelation; allow a modest
        // inflation over the i.i.d. standard error.
        let se = (var / n).sqrt() * 3.0;
        assert!((mean - exact_mean).abs() <= 3.0 * se, "{mean} vs {exact_mean}");
        assert!(run.acceptance_rate > 0.1 && run.acceptance_rate < 0.9);
    }

    #[test]
    fn metropolis_tiny_proposals_accept_everything() {
        let (forward, prior) = std_setup();
        let spec = MetropolisSpec {
            proposal_scale: Some(vec![1e-4]),
            burn_in: 200,
            thinning: 1,
        };
        let run = metropolis_sample(
            theta(0.5, 0.1),
            &forward,
            &prior,
            &[0.3],
            2000,
            &spec,
            &mut rng::seeded(3),
        )
        .unwrap();
        assert!(run.acceptance_rate >= 0.99, "{}", run.acceptance_rate);
    }

    #[test]
    fn metropolis_reproducible() {
        let (forward, prior) = std_setup();
        let spec = MetropolisSpec::default();
        let run = |seed: u64| {
            metropolis_sample(
                theta(0.4, 0.2),
                &forward,
                &prior,
                &[0.5],
                100,
                &spec,
                &mut rng::seeded(seed),
            )
            .unwrap()
            .samples
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn oracle_agreement_triangle() {
        // Conjugate, grid, and Metropolis agree on a 1-D b^2 = 0 model.
        let (forward, prior) = std_setup();
        let a2 = 0.6;
        let y = [0.4];
        let th = theta(a2, 0.0);

        let conj = exact_linear_gaussian_posterior(
            &DMatrix::identity(1, 1),
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            a2,
            &y,
        )
        .unwrap();
        let grid = grid_posterior(th, &forward, &prior, &y, &GridSpec::default()).unwrap();
        let mh = metropolis_sample(
            th,
            &forward,
            &prior,
            &y,
            30_000,
            &MetropolisSpec::default(),
            &mut rng::seeded(21),
        )
        .unwrap();

        let mh_n = mh.samples.len() as f64;
        let mh_mean: f64 = mh.samples.iter().map(|s| s[0]).sum::<f64>() / mh_n;
        let mh_var: f64 =
            mh.samples.iter().map(|s| (s[0] - mh_mean).powi(2)).sum::<f64>() / mh_n;
        let mh_se = 3.0 * (mh_var / mh_n).sqrt();

        let cm = conj.mean()[0];
        let gm = grid.mean()[0];
        assert!((cm - gm).abs() < 1e-4);
        assert!((mh_mean - cm).abs() <= 3.0 * mh_se);
        assert!((mh_mean - gm).abs() <= 3.0 * mh_se);
    }

    #[test]
    fn grid_sampling_reproduces_moments() {
        let (forward, prior) = std_setup();
        let th = theta(0.25, 0.4);
        let y = [1.0];
        let grid = grid_posterior(th, &forward, &prior, &y, &GridSpec::default()).unwrap();
        let mut r = rng::seeded(33);
        let samples = grid.sample(50_000, &mut r).unwrap();
        let mean: f64 = samples.iter().map(|s| s[0]).sum::<f64>() / samples.len() as f64;
        assert!((mean - grid.mean()[0]).abs() < 0.01);
    }
}
