//! Numerical convergence diagnostics.
//!
//! Estimates the quantities the convergence theory is phrased in: the
//! Fisher information with its A/B/C integrals, local strong-concavity and
//! smoothness constants of the Q-function, the gradient-smoothness
//! constant, the feasible step-size interval, contraction rates for both
//! the exact EM operator and its gradient variant, and the
//! Wasserstein-Lipschitz stability of the posterior in theta.
//!
//! Suprema over continua are estimated on finite deterministic ball grids;
//! reported values are grid estimates, not certified bounds.

use serde::Serialize;

use crate::em::{
    population_em_operator, q_objective_for, AscentOptions, OracleBackend, YSource,
};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::model::{ModelBundle, Observation, Sym2, Theta};
use crate::oracle::{grid_posterior_with_axes, GridAxis, GridPosterior, GridSpec};
use crate::prior::Prior;

// ---------------------------------------------------------------------------
// Fisher information.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct FisherInfo {
    /// Integral of `1/sigma_i^2` against the prior, summed over components.
    pub a: f64,
    /// Integral of `f_i^2/sigma_i^2`.
    pub b: f64,
    /// Integral of `f_i^4/sigma_i^2`.
    pub c: f64,
    /// One half of [[A, B], [B, C]].
    pub matrix: Sym2,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Both leading principal minors strictly positive.
    pub positive_definite: bool,
    pub quadrature_nodes: usize,
}

/// Fisher information of the noise parameters by prior-space quadrature.
/// Supports scalar models on grids (latent dim 1 or 2) and componentwise
/// models with factorizing priors at any dimension.
pub fn fisher_information(
    theta: Theta,
    forward: &ForwardModel,
    prior: &Prior,
    spec: &GridSpec,
) -> Result<FisherInfo> {
    let m = forward.input_dim();
    let res = spec.resolution;
    if res < 3 {
        return Err(Error::InvalidArgument("fisher quadrature needs resolution >= 3".into()));
    }

    let mut a = 0.0;
    let mut b = 0.0;
    let mut c = 0.0;
    let mut nodes_used = 0usize;

    let mut accumulate = |fx: f64, mass: f64| {
        let s = crate::model::sigma_scalar(theta, fx);
        let inv2 = 1.0 / (s * s);
        let f2 = fx * fx;
        a += mass * inv2;
        b += mass * f2 * inv2;
        c += mass * f2 * f2 * inv2;
    };

    if forward.is_componentwise() && prior.factorizes() {
        for k in 0..m {
            let center = prior.component_mean(k);
            let half = spec.half_width_stds * prior.component_std(k);
            let step = 2.0 * half / (res - 1) as f64;
            for j in 0..res {
                let x = center - half + step * j as f64;
                let fx = forward.componentwise_scalar(x);
                let mass = prior.component_log_density(k, x).exp() * step;
                accumulate(fx, mass);
            }
            nodes_used += res;
        }
    } else if m <= 2 {
        let axes: Vec<GridAxis> = (0..m)
            .map(|k| {
                let center = prior.component_mean(k);
                let half = spec.half_width_stds * prior.component_std(k);
                GridAxis {
                    lo: center - half,
                    step: 2.0 * half / (res - 1) as f64,
                    len: res,
                }
            })
            .collect();
        let volume: f64 = axes.iter().map(|ax| ax.step).product();
        let total: usize = axes.iter().map(|ax| ax.len).product();
        let n_out = forward.output_dim();
        let mut x = vec![0.0; m];
        let mut fx = vec![0.0; n_out];
        for idx in 0..total {
            match m {
                1 => x[0] = axes[0].node(idx),
                2 => {
                    let cols = axes[1].len;
                    x[0] = axes[0].node(idx / cols);
                    x[1] = axes[1].node(idx % cols);
                }
                _ => unreachable!(),
            }
            forward.evaluate_into(&x, &mut fx);
            let mass = prior.log_density(&x).exp() * volume;
            for &f in &fx {
                accumulate(f, mass);
            }
        }
        nodes_used = total;
    } else {
        return Err(Error::InvalidArgument(
            "fisher quadrature needs latent dim <= 2 or a factorizing componentwise model"
                .into(),
        ));
    }

    let matrix = Sym2 {
        aa: 0.5 * a,
        ab: 0.5 * b,
        bb: 0.5 * c,
    };
    let (eig_min, eig_max) = matrix.eigenvalues();
    let positive_definite = matrix.aa > 0.0 && matrix.det() > 0.0;
    Ok(FisherInfo {
        a,
        b,
        c,
        matrix,
        eig_min,
        eig_max,
        positive_definite,
        quadrature_nodes: nodes_used,
    })
}

// ---------------------------------------------------------------------------
// Ball grids and constants estimation.
// ---------------------------------------------------------------------------

/// Deterministic grid over a ball around theta*: `directions` rays times
/// `radii` shells (the center is not included).
#[derive(Clone, Copy, Debug)]
pub struct BallGrid {
    pub directions: usize,
    pub radii: usize,
}

impl Default for BallGrid {
    fn default() -> Self {
        Self {
            directions: 16,
            radii: 4,
        }
    }
}

impl BallGrid {
    pub fn points(&self, center: Theta, epsilon: f64) -> Vec<Theta> {
        let mut pts = Vec::with_capacity(self.directions * self.radii);
        for d in 0..self.directions {
            let angle = 2.0 * std::f64::consts::PI * d as f64 / self.directions as f64;
            for r in 1..=self.radii {
                let radius = epsilon * r as f64 / self.radii as f64;
                pts.push(Theta {
                    a2: center.a2 + radius * angle.cos(),
                    b2: center.b2 + radius * angle.sin(),
                });
            }
        }
        pts
    }
}

fn require_ball_in_box(bundle: &ModelBundle, points: &[Theta]) -> Result<()> {
    for p in points {
        if p.a2 <= 0.0 || p.b2 < 0.0 || !bundle.theta_box.contains(*p) {
            return Err(Error::InvalidArgument(format!(
                "ball point ({}, {}) leaves the theta box; shrink epsilon",
                p.a2, p.b2
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConcavitySmoothness {
    /// Smallest eigenvalue of `-hess Q(theta, theta*)` over the ball.
    pub lambda_hat: f64,
    /// Largest eigenvalue over the ball.
    pub mu_hat: f64,
    /// Set when the Hessian fails to be negative definite somewhere.
    pub concavity_violated: bool,
}

/// Estimate the local strong-concavity constant (lambda) and smoothness
/// constant (mu) of `Q(., theta*)` on a ball grid.
pub fn estimate_lambda_mu(
    bundle: &ModelBundle,
    theta_star: Theta,
    epsilon: f64,
    ysrc: &YSource,
    backend: &OracleBackend,
    ball: &BallGrid,
) -> Result<ConcavitySmoothness> {
    let mut points = ball.points(theta_star, epsilon);
    points.push(theta_star);
    require_ball_in_box(bundle, &points)?;
    let qobj = q_objective_for(bundle, theta_star, ysrc, backend)?;
    let mut lambda_hat = f64::INFINITY;
    let mut mu_hat = f64::NEG_INFINITY;
    for p in &points {
        let neg_hess = qobj.hessian(*p).neg();
        let (lo, hi) = neg_hess.eigenvalues();
        lambda_hat = lambda_hat.min(lo);
        mu_hat = mu_hat.max(hi);
    }
    Ok(ConcavitySmoothness {
        lambda_hat,
        mu_hat,
        concavity_violated: lambda_hat <= 0.0,
    })
}

/// Estimate the gradient-smoothness constant: the largest ratio
/// `|grad_1 Q(theta, theta) - grad_1 Q(theta, theta*)| / |theta - theta*|`
/// over the ball grid. Rebuilds the conditioning posterior at every grid
/// point by construction.
pub fn estimate_gamma(
    bundle: &ModelBundle,
    theta_star: Theta,
    epsilon: f64,
    ysrc: &YSource,
    backend: &OracleBackend,
    ball: &BallGrid,
) -> Result<f64> {
    let points = ball.points(theta_star, epsilon);
    require_ball_in_box(bundle, &points)?;
    let at_star = q_objective_for(bundle, theta_star, ysrc, backend)?;
    let mut gamma_hat: f64 = 0.0;
    for p in &points {
        let dist = p.distance(theta_star);
        if dist < 1e-14 {
            continue;
        }
        let at_p = q_objective_for(bundle, *p, ysrc, backend)?;
        let g_self = at_p.grad(*p);
        let g_star = at_star.grad(*p);
        let diff =
            ((g_self[0] - g_star[0]).powi(2) + (g_self[1] - g_star[1]).powi(2)).sqrt();
        gamma_hat = gamma_hat.max(diff / dist);
    }
    Ok(gamma_hat)
}

/// First-order-stability variant: the gradients are compared at the EM
/// operator image `M(theta)` instead of at `theta`. Costs one inner
/// maximization per grid point.
pub fn estimate_fos_gamma(
    bundle: &ModelBundle,
    theta_star: Theta,
    epsilon: f64,
    ysrc: &YSource,
    backend: &OracleBackend,
    ball: &BallGrid,
    ascent: &AscentOptions,
) -> Result<f64> {
    let points = ball.points(theta_star, epsilon);
    require_ball_in_box(bundle, &points)?;
    let at_star = q_objective_for(bundle, theta_star, ysrc, backend)?;
    let mut gamma_hat: f64 = 0.0;
    for p in &points {
        let dist = p.distance(theta_star);
        if dist < 1e-14 {
            continue;
        }
        let image = population_em_operator(bundle, *p, ysrc, backend, ascent)?;
        let at_p = q_objective_for(bundle, *p, ysrc, backend)?;
        let g_self = at_p.grad(image);
        let g_star = at_star.grad(image);
        let diff =
            ((g_self[0] - g_star[0]).powi(2) + (g_self[1] - g_star[1]).powi(2)).sqrt();
        gamma_hat = gamma_hat.max(diff / dist);
    }
    Ok(gamma_hat)
}

// ---------------------------------------------------------------------------
// Step-size lemma.
// ---------------------------------------------------------------------------

/// `c = 2 mu lambda / (mu + lambda)`.
pub fn harmonic_c(lambda: f64, mu: f64) -> f64 {
    2.0 * mu * lambda / (mu + lambda)
}

/// Contraction factor `sqrt(1 - tau c) + tau gamma` of one gradient EM
/// step; `None` when `tau c > 1` (the square root leaves the reals).
pub fn gradient_step_factor(tau: f64, c: f64, gamma: f64) -> Option<f64> {
    let inner = 1.0 - tau * c;
    if inner < 0.0 {
        None
    } else {
        Some(inner.sqrt() + tau * gamma)
    }
}

/// Feasible step sizes for the gradient EM update: the open interval of
/// `tau` with `sqrt(1 - tau c) + tau gamma < 1`. Empty (`None`) exactly
/// when `gamma >= c`.
pub fn step_size_interval(lambda: f64, mu: f64, gamma: f64) -> Result<Option<(f64, f64)>> {
    if lambda <= 0.0 || mu <= 0.0 {
        return Err(Error::InvalidArgument(
            "step_size_interval needs lambda > 0 and mu > 0".into(),
        ));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 0".into()));
    }
    let c = harmonic_c(lambda, mu);
    if gamma >= c {
        return Ok(None);
    }
    if gamma == 0.0 {
        return Ok(Some((0.0, 1.0 / c)));
    }
    let lo = ((2.0 * gamma - c) / (gamma * gamma)).max(0.0);
    let hi = (1.0 / c).min(1.0 / gamma);
    Ok(Some((lo, hi)))
}

// ---------------------------------------------------------------------------
// Contraction diagnostics.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ContractionMode {
    /// Iterate the exact population EM operator.
    EmOperator,
    /// Projected gradient EM steps with a fixed step size.
    Gradient { tau: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub mode: String,
    pub tau: Option<f64>,
    /// Iterates including the start point.
    pub iterates: Vec<(f64, f64)>,
    /// Distances to theta*.
    pub distances: Vec<f64>,
    /// Per-step distance ratios (skipped below the resolution floor).
    pub ratios: Vec<f64>,
    /// Five consecutive expanding steps were observed.
    pub diverged: bool,
}

/// Track per-step contraction toward theta* for either EM iteration mode.
/// Divergence is reported in the result, not raised.
pub fn contraction_diagnostics(
    bundle: &ModelBundle,
    theta_star: Theta,
    theta_0: Theta,
    ysrc: &YSource,
    backend: &OracleBackend,
    mode: ContractionMode,
    rounds: usize,
) -> Result<ContractionReport> {
    let mut theta = bundle.theta_box.project(theta_0);
    let mut iterates = vec![(theta.a2, theta.b2)];
    let mut distances = vec![theta.distance(theta_star)];
    let mut ratios = Vec::new();
    let mut expanding_streak = 0usize;
    let mut diverged = false;

    for _ in 0..rounds {
        let next = match mode {
            ContractionMode::EmOperator => population_em_operator(
                bundle,
                theta,
                ysrc,
                backend,
                &AscentOptions::default(),
            )?,
            ContractionMode::Gradient { tau } => {
                let qobj = q_objective_for(bundle, theta, ysrc, backend)?;
                let g = qobj.grad(theta);
                bundle.theta_box.project(Theta {
                    a2: theta.a2 + tau * g[0],
                    b2: theta.b2 + tau * g[1],
                })
            }
        };
        let prev_dist = theta.distance(theta_star);
        let dist = next.distance(theta_star);
        if prev_dist > 1e-12 {
            let ratio = dist / prev_dist;
            ratios.push(ratio);
            if ratio > 1.0 {
                expanding_streak += 1;
                if expanding_streak >= 5 {
                    diverged = true;
                }
            } else {
                expanding_streak = 0;
            }
        }
        theta = next;
        iterates.push((theta.a2, theta.b2));
        distances.push(dist);
    }

    Ok(ContractionReport {
        mode: match mode {
            ContractionMode::EmOperator => "em_operator".into(),
            ContractionMode::Gradient { .. } => "gradient".into(),
        },
        tau: match mode {
            ContractionMode::Gradient { tau } => Some(tau),
            ContractionMode::EmOperator => None,
        },
        iterates,
        distances,
        ratios,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Posterior stability probe.
// ---------------------------------------------------------------------------

/// Wasserstein-1 between two 1-D grid posteriors sharing an axis: the L1
/// distance of their cumulative weights times the node spacing.
pub fn w1_grid_1d(p: &GridPosterior, q: &GridPosterior) -> Result<f64> {
    if p.dim() != 1 || q.dim() != 1 || p.axes() != q.axes() {
        return Err(Error::InvalidArgument(
            "w1_grid_1d needs two 1-D posteriors on the same axis".into(),
        ));
    }
    let step = p.axes()[0].step;
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut total = 0.0;
    for (wp, wq) in p.weights().iter().zip(q.weights()) {
        cp += wp;
        cq += wq;
        total += (cp - cq).abs();
    }
    Ok(total * step)
}

/// Empirical Lipschitz constant of `theta -> posterior(. | y, theta)` in
/// W1: the largest W1-to-parameter-distance ratio over the given pairs.
/// Scalar latent only.
pub fn posterior_lipschitz_probe(
    bundle: &ModelBundle,
    y: &Observation,
    theta_pairs: &[(Theta, Theta)],
    spec: &GridSpec,
) -> Result<f64> {
    if bundle.latent_dim() != 1 {
        return Err(Error::InvalidArgument(
            "posterior_lipschitz_probe supports latent dim 1".into(),
        ));
    }
    if theta_pairs.is_empty() {
        return Err(Error::InvalidArgument("need at least one theta pair".into()));
    }
    let prior = &bundle.prior;
    let center = prior.component_mean(0);
    let half = spec.half_width_stds * prior.component_std(0);
    let axes = vec![GridAxis {
        lo: center - half,
        step: 2.0 * half / (spec.resolution - 1) as f64,
        len: spec.resolution,
    }];

    let mut l_hat: f64 = 0.0;
    for (t1, t2) in theta_pairs {
        let dist = t1.distance(*t2);
        if dist < 1e-14 {
            return Err(Error::InvalidArgument(
                "theta pair with zero separation".into(),
            ));
        }
        let p1 = grid_posterior_with_axes(*t1, &bundle.forward, prior, y.as_slice(), axes.clone())?;
        let p2 = grid_posterior_with_axes(*t2, &bundle.forward, prior, y.as_slice(), axes.clone())?;
        l_hat = l_hat.max(w1_grid_1d(&p1, &p2)? / dist);
    }
    Ok(l_hat)
}

// ---------------------------------------------------------------------------
// Assembled report.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TheoryReport {
    pub theta_star: (f64, f64),
    pub epsilon: f64,
    pub fisher: FisherInfo,
    pub lambda_hat: f64,
    pub mu_hat: f64,
    pub gamma_hat: f64,
    pub concavity_violated: bool,
    pub c: f64,
    pub tau_interval: Option<(f64, f64)>,
    pub fos_gamma_hat: Option<f64>,
    pub contraction_rate_predicted: Option<f64>,
    pub contraction_rate_observed: Option<f64>,
    pub contraction_runs: Vec<ContractionReport>,
}

#[derive(Clone, Copy, Debug)]
pub struct TheoryOptions {
    pub epsilon: f64,
    pub ball: BallGrid,
    pub contraction_rounds: usize,
    /// Also estimate the first-order-stability constant (expensive).
    pub estimate_fos: bool,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            ball: BallGrid::default(),
            contraction_rounds: 12,
            estimate_fos: false,
        }
    }
}

/// Run the full diagnostic battery around theta*.
pub fn theory_report(
    bundle: &ModelBundle,
    theta_star: Theta,
    ysrc: &YSource,
    backend: &OracleBackend,
    opts: &TheoryOptions,
) -> Result<TheoryReport> {
    let grid_spec = match backend {
        OracleBackend::Grid(spec) => *spec,
        OracleBackend::Conjugate => GridSpec::default(),
    };
    let fisher = fisher_information(theta_star, &bundle.forward, &bundle.prior, &grid_spec)?;
    let cs = estimate_lambda_mu(bundle, theta_star, opts.epsilon, ysrc, backend, &opts.ball)?;
    let gamma_hat = estimate_gamma(bundle, theta_star, opts.epsilon, ysrc, backend, &opts.ball)?;
    let fos_gamma_hat = if opts.estimate_fos {
        Some(estimate_fos_gamma(
            bundle,
            theta_star,
            opts.epsilon,
            ysrc,
            backend,
            &opts.ball,
            &AscentOptions::default(),
        )?)
    } else {
        None
    };

    let (c, tau_interval, predicted) = if cs.concavity_violated {
        (f64::NAN, None, None)
    } else {
        let c = harmonic_c(cs.lambda_hat, cs.mu_hat);
        let interval = step_size_interval(cs.lambda_hat, cs.mu_hat, gamma_hat)?;
        let predicted =
            1.0 - 2.0 * (cs.lambda_hat - gamma_hat) / (cs.mu_hat + cs.lambda_hat);
        (c, interval, Some(predicted))
    };

    // Start contraction runs from the ball boundary along the first axis.
    let theta_0 = bundle.theta_box.project(Theta {
        a2: theta_star.a2 + opts.epsilon,
        b2: theta_star.b2,
    });
    let mut contraction_runs = Vec::new();
    let mut observed = None;
    if !cs.concavity_violated {
        let em_run = contraction_diagnostics(
            bundle,
            theta_star,
            theta_0,
            ysrc,
            backend,
            ContractionMode::EmOperator,
            opts.contraction_rounds,
        )?;
        let tau = 2.0 / (cs.mu_hat + cs.lambda_hat);
        let grad_run = contraction_diagnostics(
            bundle,
            theta_star,
            theta_0,
            ysrc,
            backend,
            ContractionMode::Gradient { tau },
            opts.contraction_rounds,
        )?;
        observed = grad_run
            .ratios
            .iter()
            .cloned()
            .fold(None, |acc: Option<f64>, r| {
                Some(acc.map_or(r, |a| a.max(r)))
            });
        contraction_runs.push(em_run);
        contraction_runs.push(grad_run);
    }

    Ok(TheoryReport {
        theta_star: (theta_star.a2, theta_star.b2),
        epsilon: opts.epsilon,
        fisher,
        lambda_hat: cs.lambda_hat,
        mu_hat: cs.mu_hat,
        gamma_hat,
        concavity_violated: cs.concavity_violated,
        c,
        tau_interval,
        fos_gamma_hat,
        contraction_rate_predicted: predicted,
        contraction_rate_observed: observed,
        contraction_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::YQuadSpec;
    use crate::model::ThetaBox;
    use crate::rng;
    use rand::Rng;

    fn theta(a2: f64, b2: f64) -> Theta {
        Theta::new(a2, b2).unwrap()
    }

    fn bundle_1d() -> ModelBundle {
        ModelBundle::new(
            ForwardModel::identity(1).unwrap(),
            Prior::standard_normal(1),
            ThetaBox::new(1e-4, 10.0, 0.0, 10.0).unwrap(),
        )
        .unwrap()
    }

    fn quad_ysrc(theta_star: Theta) -> YSource<'static> {
        YSource::MarginalQuad {
            theta_star,
            spec: YQuadSpec {
                y_nodes: 401,
                half_width_stds: 8.0,
                grid: GridSpec::with_resolution(1201),
            },
        }
    }

    #[test]
    fn fisher_constant_forward_is_rank_one() {
        let forward = ForwardModel::linear(nalgebra::DMatrix::zeros(1, 1)).unwrap();
        let prior = Prior::standard_normal(1);
        let info =
            fisher_information(theta(0.5, 0.3), &forward, &prior, &GridSpec::default()).unwrap();
        assert!((info.b * info.b - info.a * info.c).abs() < 1e-10);
        assert!(info.eig_min.abs() < 1e-10);
        assert!(!info.positive_definite);
    }

    #[test]
    fn fisher_identity_model_monte_carlo_cross_check() {
        let forward = ForwardModel::identity(1).unwrap();
        let prior = Prior::standard_normal(1);
        let info =
            fisher_information(theta(1.0, 1.0), &forward, &prior, &GridSpec::default()).unwrap();
        assert!(info.positive_definite);

        let mut r = rng::seeded(101);
        let n = 1_000_000;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = rng::standard_normal(&mut r);
            let s = 1.0 + x * x;
            let inv2 = 1.0 / (s * s);
            a += inv2;
            b += x * x * inv2;
            c += x.powi(4) * inv2;
        }
        let nf = n as f64;
        assert!((info.a - a / nf).abs() / (a / nf) < 0.01, "A {} vs {}", info.a, a / nf);
        assert!((info.b - b / nf).abs() / (b / nf) < 0.01);
        assert!((info.c - c / nf).abs() / (c / nf) < 0.01);
    }

    #[test]
    fn fisher_matches_negative_posterior_expected_hessian() {
        // Independent route: simulate y, build grid posteriors, average the
        // posterior-expected theta-Hessian of the joint log-density.
        let bundle = bundle_1d();
        let th = theta(1.0, 1.0);
        let info =
            fisher_information(th, &bundle.forward, &bundle.prior, &GridSpec::default()).unwrap();
        let mut r = rng::seeded(103);
        let draws = 30_000;
        let spec = GridSpec::with_resolution(601);
        let mut acc = Sym2::ZERO;
        for _ in 0..draws {
            let x = bundle.prior.sample(&mut r);
            let y = crate::model::sample_observation(th, &bundle.forward, &x, &mut r);
            let grid = crate::oracle::grid_posterior(
                th,
                &bundle.forward,
                &bundle.prior,
                y.as_slice(),
                &spec,
            )
            .unwrap();
            let h = grid
                .expectation(|xv| {
                    let hess = crate::model::hessian_theta_log_likelihood(
                        th,
                        &[xv[0]],
                        y.as_slice(),
                    )
                    .unwrap();
                    vec![hess.aa, hess.ab, hess.bb]
                })
                .unwrap();
            acc = acc.add(Sym2 {
                aa: h[0],
                ab: h[1],
                bb: h[2],
            });
        }
        let mean_neg = acc.scale(-1.0 / draws as f64);
        let err = mean_neg.add(info.matrix.neg()).frobenius_norm();
        let rel = err / info.matrix.frobenius_norm();
        assert!(rel < 0.01, "relative deviation {rel}");
    }

    #[test]
    fn lambda_mu_bracket_fisher_at_small_ball() {
        let bundle = bundle_1d();
        let th = theta(1.0, 1.0);
        let info =
            fisher_information(th, &bundle.forward, &bundle.prior, &GridSpec::with_resolution(1201))
                .unwrap();
        let ysrc = quad_ysrc(th);
        let cs = estimate_lambda_mu(
            &bundle,
            th,
            1e-3,
            &ysrc,
            &OracleBackend::Grid(GridSpec::with_resolution(1201)),
            &BallGrid::default(),
        )
        .unwrap();
        assert!(!cs.concavity_violated);
        assert!(cs.lambda_hat <= cs.mu_hat);
        assert!(
            (cs.lambda_hat - info.eig_min).abs() / info.eig_min < 0.02,
            "lambda {} vs fisher {}",
            cs.lambda_hat,
            info.eig_min
        );
        assert!(
            (cs.mu_hat - info.eig_max).abs() / info.eig_max < 0.02,
            "mu {} vs fisher {}",
            cs.mu_hat,
            info.eig_max
        );
    }

    #[test]
    fn gamma_zero_for_theta_independent_posterior() {
        // Constant forward: the likelihood factor does not depend on x, so
        // the posterior equals the prior at every theta.
        let bundle = ModelBundle::new(
            ForwardModel::linear(nalgebra::DMatrix::zeros(1, 1)).unwrap(),
            Prior::standard_normal(1),
            ThetaBox::new(1e-4, 10.0, 0.0, 10.0).unwrap(),
        )
        .unwrap();
        let th = theta(0.5, 0.2);
        let y_set = vec![Observation(vec![0.3]), Observation(vec![-0.9])];
        let gamma = estimate_gamma(
            &bundle,
            th,
            0.05,
            &YSource::Observations(&y_set),
            &OracleBackend::Grid(GridSpec::with_resolution(801)),
            &BallGrid::default(),
        )
        .unwrap();
        assert!(gamma < 1e-10, "gamma {gamma}");
    }

    #[test]
    fn gamma_non_increasing_in_epsilon() {
        let bundle = bundle_1d();
        let th = theta(0.5, 0.5);
        let ysrc = quad_ysrc(th);
        let backend = OracleBackend::Grid(GridSpec::with_resolution(801));
        let ball = BallGrid::default();
        let g: Vec<f64> = [0.1, 0.05, 0.01]
            .iter()
            .map(|&eps| estimate_gamma(&bundle, th, eps, &ysrc, &backend, &ball).unwrap())
            .collect();
        assert!(g[1] <= g[0] * 1.05, "{g:?}");
        assert!(g[2] <= g[1] * 1.05, "{g:?}");
    }

    #[test]
    fn step_size_examples() {
        let c = harmonic_c(0.2, 1.0);
        assert!((c - 1.0 / 3.0).abs() < 1e-12);

        // Feasible interval at gamma = 0.1.
        let interval = step_size_interval(0.2, 1.0, 0.1).unwrap().unwrap();
        assert!((interval.0 - 0.0).abs() < 1e-12, "lo {}", interval.0);
        assert!((interval.1 - 3.0).abs() < 1e-12, "hi {}", interval.1);
        // Verify the defining inequality inside and failure just outside.
        let k = 10_000;
        for i in 1..k {
            let tau = interval.0 + (interval.1 - interval.0) * i as f64 / k as f64;
            let f = gradient_step_factor(tau, c, 0.1).unwrap();
            assert!(f < 1.0 - 1e-12, "tau {tau}: factor {f}");
        }
        match gradient_step_factor(interval.1 + 1e-6, c, 0.1) {
            Some(f) => assert!(f >= 1.0 || (interval.1 + 1e-6) * c > 1.0),
            None => {}
        }

        // gamma >= c: empty.
        assert!(step_size_interval(0.2, 1.0, 0.4).unwrap().is_none());
        assert!(step_size_interval(0.2, 1.0, c).unwrap().is_none());

        // Guards.
        assert!(step_size_interval(0.0, 1.0, 0.1).is_err());
        assert!(step_size_interval(0.2, 1.0, -0.1).is_err());
    }

    #[test]
    fn step_size_lemma_random_feasibility() {
        let mut r = rng::seeded(1234);
        let mut feasible_seen = 0;
        for _ in 0..1000 {
            let lambda = r.gen_range(0.01..2.0);
            let mu = lambda * r.gen_range(1.0..20.0);
            let c = harmonic_c(lambda, mu);
            let gamma = r.gen_range(0.0..1.5 * c);
            let interval = step_size_interval(lambda, mu, gamma).unwrap();
            if gamma >= c {
                assert!(interval.is_none());
                continue;
            }
            feasible_seen += 1;
            let (lo, hi) = interval.expect("gamma < c must be feasible");
            assert!(lo < hi, "empty interval for gamma {gamma} < c {c}");
            let k = 64;
            for i in 1..k {
                let tau = lo + (hi - lo) * i as f64 / k as f64;
                let f = gradient_step_factor(tau, c, gamma).unwrap();
                assert!(f < 1.0 - 1e-12, "factor {f} at tau {tau}");
            }
        }
        assert!(feasible_seen > 300);
    }

    #[test]
    fn c_dominates_lambda_for_larger_mu() {
        let mut r = rng::seeded(77);
        for _ in 0..500 {
            let lambda = r.gen_range(0.01..3.0);
            let mu = lambda * r.gen_range(1.0..10.0);
            let c = harmonic_c(lambda, mu);
            assert!(c >= lambda - 1e-12);
            if (mu - lambda).abs() < 1e-12 {
                assert!((c - lambda).abs() < 1e-12);
            } else {
                assert!(c > lambda);
            }
        }
    }

    #[test]
    fn em_operator_fixed_point_at_theta_star() {
        let bundle = bundle_1d();
        let th_star = theta(0.2, 0.3);
        let report = contraction_diagnostics(
            &bundle,
            th_star,
            th_star,
            &quad_ysrc(th_star),
            &OracleBackend::Grid(GridSpec::with_resolution(1201)),
            ContractionMode::EmOperator,
            3,
        )
        .unwrap();
        for d in &report.distances {
            assert!(*d < 1e-4, "distance {d}");
        }
        assert!(!report.diverged);
    }

    #[test]
    fn gradient_contraction_obeys_predicted_rate() {
        // Weak-likelihood regime: most of the complete-data information
        // about theta survives marginalization, which is what pushes the
        // gradient-smoothness constant below the concavity constant.
        let bundle = ModelBundle::new(
            ForwardModel::identity(1).unwrap(),
            Prior::standard_normal(1),
            ThetaBox::new(1e-4, 100.0, 0.0, 100.0).unwrap(),
        )
        .unwrap();
        let th_star = theta(32.0, 8.0);
        let ysrc = quad_ysrc(th_star);
        let backend = OracleBackend::Grid(GridSpec::with_resolution(1201));
        let eps = 0.5;
        let cs =
            estimate_lambda_mu(&bundle, th_star, eps, &ysrc, &backend, &BallGrid::default())
                .unwrap();
        let gamma =
            estimate_gamma(&bundle, th_star, eps, &ysrc, &backend, &BallGrid::default()).unwrap();
        assert!(
            gamma < cs.lambda_hat,
            "toy needs gamma {gamma} < lambda {}",
            cs.lambda_hat
        );
        let tau = 2.0 / (cs.mu_hat + cs.lambda_hat);
        let report = contraction_diagnostics(
            &bundle,
            th_star,
            theta(th_star.a2 + eps / 2.0, th_star.b2 + eps / 2.0),
            &ysrc,
            &backend,
            ContractionMode::Gradient { tau },
            10,
        )
        .unwrap();
        let predicted = 1.0 - 2.0 * (cs.lambda_hat - gamma) / (cs.mu_hat + cs.lambda_hat);
        for ratio in &report.ratios {
            assert!(
                *ratio <= predicted + 0.05,
                "ratio {ratio} vs predicted {predicted}"
            );
        }
        assert!(!report.diverged);
    }

    #[test]
    fn w1_grid_requires_common_axis() {
        let bundle = bundle_1d();
        let spec = GridSpec::with_resolution(801);
        let p = crate::oracle::grid_posterior(
            theta(0.3, 0.1),
            &bundle.forward,
            &bundle.prior,
            &[0.5],
            &spec,
        )
        .unwrap();
        let q = crate::oracle::grid_posterior(
            theta(0.4, 0.1),
            &bundle.forward,
            &bundle.prior,
            &[0.5],
            &GridSpec::with_resolution(401),
        )
        .unwrap();
        assert!(w1_grid_1d(&p, &q).is_err());
        assert!(w1_grid_1d(&p, &p).unwrap().abs() < 1e-14);
    }

    #[test]
    fn lipschitz_probe_rejects_identical_pair() {
        let bundle = bundle_1d();
        let th = theta(0.3, 0.3);
        let result = posterior_lipschitz_probe(
            &bundle,
            &Observation(vec![1.0]),
            &[(th, th)],
            &GridSpec::default(),
        );
        assert!(result.is_err());
    }

    #[test]
    fn lipschitz_probe_stable_under_refinement() {
        let bundle = bundle_1d();
        let pairs = vec![
            (theta(0.3, 0.3), theta(0.33, 0.3)),
            (theta(0.3, 0.3), theta(0.3, 0.33)),
            (theta(0.32, 0.28), theta(0.30, 0.31)),
        ];
        let y = Observation(vec![1.0]);
        let l1 = posterior_lipschitz_probe(&bundle, &y, &pairs, &GridSpec::with_resolution(2001))
            .unwrap();
        let l2 = posterior_lipschitz_probe(&bundle, &y, &pairs, &GridSpec::with_resolution(4001))
            .unwrap();
        assert!(l1.is_finite() && l1 > 0.0);
        assert!((l1 - l2).abs() / l2 < 0.02, "{l1} vs {l2}");
    }

    #[test]
    fn lipschitz_probe_growth_in_y_is_at_most_quadratic() {
        let bundle = bundle_1d();
        let base = theta(0.3, 0.3);
        let pairs = vec![
            (base, theta(0.32, 0.3)),
            (base, theta(0.3, 0.32)),
        ];
        let spec = GridSpec::with_resolution(2001);
        let ys = [1.0, 2.0, 4.0, 8.0];
        let ls: Vec<f64> = ys
            .iter()
            .map(|&y| {
                posterior_lipschitz_probe(&bundle, &Observation(vec![y]), &pairs, &spec).unwrap()
            })
            .collect();
        // Log-log slope between consecutive points stays below 2.3.
        for i in 1..ys.len() {
            let slope = (ls[i] / ls[i - 1]).ln() / (ys[i] / ys[i - 1]).ln();
            assert!(slope <= 2.3, "slope {slope} between y {} and {}", ys[i - 1], ys[i]);
        }
    }

    #[test]
    fn theory_report_internally_consistent() {
        let bundle = bundle_1d();
        let th_star = theta(1.0, 1.0);
        let report = theory_report(
            &bundle,
            th_star,
            &quad_ysrc(th_star),
            &OracleBackend::Grid(GridSpec::with_resolution(801)),
            &TheoryOptions {
                epsilon: 0.05,
                contraction_rounds: 6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.concavity_violated);
        assert!(report.lambda_hat > 0.0 && report.lambda_hat <= report.mu_hat);
        let c = harmonic_c(report.lambda_hat, report.mu_hat);
        assert!((report.c - c).abs() < 1e-12);
        // Interval exists exactly when gamma < c.
        assert_eq!(report.tau_interval.is_some(), report.gamma_hat < c);
        assert_eq!(report.contraction_runs.len(), 2);
        // Serialization works.
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("lambda_hat"));
    }
}
