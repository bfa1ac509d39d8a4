//! Single-trajectory identification of `[A B]` by regularized least squares,
//! the finite-sample error bound that goes with it, and diagnostics for the
//! probabilistic events the bound conditions on.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::controllers::{run_closed_loop, ControllerKind, LoopContext};
use crate::lti::SystemModel;
use crate::topology::{build_information_graph, compute_delay_matrix, DirectedDelayGraph};

#[derive(Debug, Error)]
pub enum SysidError {
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error(transparent)]
    Controller(#[from] crate::controllers::ControllerError),
}

/// Stacked regressors `z(t) = [x(t); u(t)]` and targets `x(t+1)` from one
/// open-loop trajectory, plus the realized disturbances for diagnostics.
#[derive(Debug, Clone)]
pub struct IdentificationData {
    /// `(n+m) x N`, columns time ordered.
    pub z: DMatrix<f64>,
    /// `n x N`, column `t` holds `x(t+1)`.
    pub x_next: DMatrix<f64>,
    /// `n x N`, column `t` holds `w(t)`.
    pub w: DMatrix<f64>,
    pub sigma_u: f64,
    pub n: usize,
    pub m: usize,
}

impl IdentificationData {
    pub fn samples(&self) -> usize {
        self.z.ncols()
    }
}

/// Estimate `Theta^ = [A^ B^]` with its regularizer.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub theta: DMatrix<f64>,
    pub lambda: f64,
}

impl Estimate {
    pub fn a_hat(&self) -> DMatrix<f64> {
        let n = self.theta.nrows();
        self.theta.columns(0, n).into_owned()
    }

    pub fn b_hat(&self) -> DMatrix<f64> {
        let n = self.theta.nrows();
        let m = self.theta.ncols() - n;
        self.theta.columns(n, m).into_owned()
    }

    pub fn to_json(&self) -> EstimateJson {
        EstimateJson {
            lambda: self.lambda,
            a_hat: crate::lti::matrix_to_rows(&self.a_hat()),
            b_hat: crate::lti::matrix_to_rows(&self.b_hat()),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EstimateJson {
    pub lambda: f64,
    pub a_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
}

/// Runs the plant open loop for `N` steps under i.i.d. Gaussian exploration
/// inputs of std `sigma_u` and collects the regression data.  Deterministic
/// per seed.
pub fn collect(
    model: &SystemModel,
    graph: &DirectedDelayGraph,
    n_samples: usize,
    sigma_u: f64,
    seed: u64,
) -> Result<IdentificationData, SysidError> {
    let delay = compute_delay_matrix(graph);
    let ig = build_information_graph(&delay);
    let ctx = LoopContext {
        model,
        delay: &delay,
        ig: &ig,
        views: &[],
        true_gains: None,
        a_hat: None,
        b_hat: None,
        gains_hat: None,
    };
    let run = run_closed_loop(
        &ctx,
        ControllerKind::ExternalInputs { sigma_u },
        n_samples,
        seed,
    )?;
    Ok(pack_data(model, &run.trajectory, sigma_u))
}

/// Stacks an existing trajectory into regression form.
pub fn pack_data(
    model: &SystemModel,
    traj: &crate::lti::Trajectory,
    sigma_u: f64,
) -> IdentificationData {
    let (n, m) = (model.n(), model.m());
    let n_samples = traj.horizon();
    let mut z = DMatrix::zeros(n + m, n_samples);
    let mut x_next = DMatrix::zeros(n, n_samples);
    let mut w = DMatrix::zeros(n, n_samples);
    for t in 0..n_samples {
        z.view_mut((0, t), (n, 1)).copy_from(&traj.x[t]);
        z.view_mut((n, t), (m, 1)).copy_from(&traj.u[t]);
        x_next.set_column(t, &traj.x[t + 1]);
        w.set_column(t, &traj.w[t]);
    }
    IdentificationData {
        z,
        x_next,
        w,
        sigma_u,
        n,
        m,
    }
}

/// Ridge regression `Theta^ = X+ Z' (lambda I + Z Z')^-1`, the unique
/// minimizer of `lambda ||Y||_F^2 + sum_t ||x(t+1) - Y z(t)||^2`, solved
/// through a Cholesky factorization of the regularized Gram matrix.
pub fn estimate(data: &IdentificationData, lambda: f64) -> Estimate {
    let d = data.n + data.m;
    let mut gram = DMatrix::identity(d, d) * lambda;
    gram += &data.z * data.z.transpose();
    let chol = gram
        .cholesky()
        .expect("lambda > 0 makes the Gram matrix positive definite");
    // Theta' = G^-1 Z X+'
    let rhs = &data.z * data.x_next.transpose();
    let theta_t = chol.solve(&rhs);
    Estimate {
        theta: theta_t.transpose(),
        lambda,
    }
}

/// Gradient of the ridge objective at the estimate, for optimality checks:
/// `2 lambda Theta + 2 (Theta Z Z' - X+ Z')`.
pub fn ridge_gradient_norm(data: &IdentificationData, est: &Estimate) -> f64 {
    let zt = &est.theta * &data.z;
    let grad = 2.0 * est.lambda * &est.theta + 2.0 * (zt * data.z.transpose())
        - 2.0 * (&data.x_next * data.z.transpose());
    grad.norm()
}

/// Inputs to the finite-sample error bound.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundParams {
    pub n: usize,
    pub m: usize,
    pub n_samples: usize,
    pub delta: f64,
    pub lambda: f64,
    pub sigma_w: f64,
    pub sigma_u: f64,
    pub kappa0: f64,
    pub gamma0: f64,
    pub norm_b: f64,
    /// Upper bound on `max(||A||, ||B||)`.
    pub vartheta: f64,
}

/// Smallest regularizer the bound's preconditions accept.
pub fn default_lambda(sigma_w: f64, sigma_u: f64) -> f64 {
    let s = sigma_w.min(sigma_u);
    s * s / 40.0
}

/// Minimum sample count the bound's preconditions accept.
pub fn min_samples(n: usize, m: usize, delta: f64) -> usize {
    (200.0 * (n + m) as f64 * (48.0 / delta).ln()).ceil() as usize
}

/// Evaluates the high-probability regressor bound `z_b` and the estimation
/// error bound `eps_0` such that `||Theta^ - Theta|| <= eps_0` with
/// probability at least `1 - delta`.
pub fn error_bound(p: &ErrorBoundParams) -> Result<(f64, f64), SysidError> {
    let min_n = min_samples(p.n, p.m, p.delta);
    if p.n_samples < min_n {
        return Err(SysidError::PreconditionViolated(format!(
            "N = {} < 200 (n+m) log(48/delta) = {}",
            p.n_samples, min_n
        )));
    }
    let sigma_lo = p.sigma_w.min(p.sigma_u);
    let lambda_min = sigma_lo * sigma_lo / 40.0;
    if p.lambda < lambda_min * (1.0 - 1e-12) {
        return Err(SysidError::PreconditionViolated(format!(
            "lambda = {} < sigma_min^2/40 = {}",
            p.lambda, lambda_min
        )));
    }
    if p.vartheta <= 0.0 {
        return Err(SysidError::PreconditionViolated(
            "vartheta must be positive".into(),
        ));
    }
    let sigma_hi = p.sigma_w.max(p.sigma_u);
    let n_f = p.n_samples as f64;
    let log_term = (4.0 * n_f / p.delta).ln();
    let z_b = 5.0 * p.kappa0 / (1.0 - p.gamma0)
        * sigma_hi
        * ((p.norm_b * p.norm_b * p.m as f64 + p.m as f64 + p.n as f64) * log_term).sqrt();
    let inner = 2.0
        * p.n as f64
        * p.sigma_w
        * p.sigma_w
        * (p.n + p.m) as f64
        * ((n_f + z_b * z_b / p.lambda) / p.delta).ln()
        + p.lambda * p.n as f64 * p.vartheta * p.vartheta;
    let eps0 = 4.0 * (160.0 / (n_f * sigma_lo * sigma_lo) * inner).sqrt();
    Ok((z_b, eps0))
}

/// Empirical status of the probabilistic events behind the bound.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EventReport {
    /// `max ||w(t)|| <= sigma_w sqrt(5 n log(4N/delta))`.
    pub noise_bounded: bool,
    /// `max ||u(t)|| <= sigma_u sqrt(5 m log(4N/delta))`.
    pub input_bounded: bool,
    /// `sum z z' >= (N-1) sigma_min^2 / 40 I`.
    pub excitation: bool,
    /// Self-normalized estimate deviation, when the true model is known.
    pub estimate_within_bound: Option<bool>,
    /// Whether `N` meets the bound's sample-count precondition.
    pub sample_count_ok: bool,
}

impl EventReport {
    pub fn all_hold(&self) -> bool {
        self.noise_bounded
            && self.input_bounded
            && self.excitation
            && self.estimate_within_bound.unwrap_or(true)
    }
}

/// Checks the realized trajectory against the events' inequalities; the
/// self-normalized estimate event needs the true parameters.
pub fn event_diagnostics(
    data: &IdentificationData,
    lambda: f64,
    true_theta: Option<&DMatrix<f64>>,
    sigma_w: f64,
    delta: f64,
) -> EventReport {
    let n_samples = data.samples();
    let n_f = n_samples as f64;
    let log_term = (4.0 * n_f / delta).ln();

    let max_w = (0..n_samples)
        .map(|t| data.w.column(t).norm())
        .fold(0.0, f64::max);
    let noise_bounded = max_w <= sigma_w * (5.0 * data.n as f64 * log_term).sqrt();

    let max_u = (0..n_samples)
        .map(|t| data.z.view((data.n, t), (data.m, 1)).norm())
        .fold(0.0, f64::max);
    let input_bounded = max_u <= data.sigma_u * (5.0 * data.m as f64 * log_term).sqrt();

    let gram = &data.z * data.z.transpose();
    let min_eig = gram
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let sigma_lo = sigma_w.min(data.sigma_u);
    let excitation = min_eig >= (n_f - 1.0) * sigma_lo * sigma_lo / 40.0;

    let estimate_within_bound = true_theta.map(|theta| {
        let est = estimate(data, lambda);
        let delta_mat = theta - &est.theta;
        let d = data.n + data.m;
        let v = DMatrix::identity(d, d) * lambda + &gram;
        let lhs = (&delta_mat * &v * delta_mat.transpose()).trace();
        let logdet_ratio: f64 = v
            .cholesky()
            .map(|c| {
                2.0 * (0..d).map(|i| c.l()[(i, i)].ln()).sum::<f64>() - d as f64 * lambda.ln()
            })
            .unwrap_or(f64::INFINITY);
        let rhs = 4.0
            * sigma_w
            * sigma_w
            * data.n as f64
            * ((4.0 * data.n as f64 / delta).ln() + logdet_ratio)
            + 2.0 * lambda * theta.norm_squared();
        lhs <= rhs
    });

    EventReport {
        noise_bounded,
        input_bounded,
        excitation,
        estimate_within_bound,
        sample_count_ok: n_samples >= min_samples(data.n, data.m, delta),
    }
}

/// `||Theta^ - Theta||` in spectral norm.
pub fn estimation_error(est: &Estimate, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let m = b.ncols();
    let mut theta = DMatrix::zeros(n, n + m);
    theta.view_mut((0, 0), (n, n)).copy_from(a);
    theta.view_mut((0, n), (n, m)).copy_from(b);
    crate::lti::spectral_norm(&(&est.theta - theta))
}
