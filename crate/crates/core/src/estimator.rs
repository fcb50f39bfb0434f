//! Per-agent time-varying parameter estimator for the zero-order gradient.
//!
//! Each agent fits the local model `dl/dt = [1, du_i^T] theta_i` to its own
//! measured cost output, where `theta_i = (theta0_i, theta1_i)` and
//! `theta1_i` is the partial gradient the controller needs. The state is
//! `(l_hat, eta_hat, theta_hat, c, Sigma)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::sets::{project, project_tangent_cone, ConvexSet};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub l_hat: f64,
    pub eta_hat: f64,
    pub theta_hat: DVector<f64>,
    pub c: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorTuning {
    /// Observer gain `K_i`.
    pub k: f64,
    /// Forgetting rate `rho_i` of the excitation matrix.
    pub rho: f64,
    /// Regularization `sigma_i`.
    pub sigma: f64,
    pub sigma0: DMatrix<f64>,
    /// Admissible parameter box `Theta_i`.
    pub theta_set: ConvexSet,
}

pub type EstimatorDerivatives = EstimatorState;

impl EstimatorTuning {
    pub fn new(k: f64, rho: f64, sigma: f64, sigma0: DMatrix<f64>, theta_set: ConvexSet) -> Result<Self> {
        for (name, v) in [("K", k), ("rho", rho), ("sigma", sigma)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("estimator gain {name} = {v} must be positive")));
            }
        }
        let n = sigma0.nrows();
        if sigma0.ncols() != n || theta_set.dim() != n {
            return Err(Error::Dimension {
                what: "estimator tuning",
                expected: n,
                got: theta_set.dim(),
            });
        }
        if (&sigma0 - sigma0.transpose()).amax() > 1e-12
            || SymmetricEigen::new(sigma0.clone()).eigenvalues.min() <= 0.0
        {
            return Err(Error::Invalid("Sigma0 must be symmetric positive definite".into()));
        }
        let ConvexSet::Box { lower, upper } = &theta_set else {
            return Err(Error::Invalid("Theta must be a box".into()));
        };
        if lower.iter().chain(upper.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("Theta must be bounded".into()));
        }
        Ok(Self { k, rho, sigma, sigma0, theta_set })
    }

    /// `Sigma0 = sigma0_scale * I` and `Theta = [-bound, bound]^(m_i + 1)`.
    pub fn isotropic(m_i: usize, k: f64, rho: f64, sigma: f64, sigma0_scale: f64, bound: f64) -> Result<Self> {
        let n = m_i + 1;
        Self::new(
            k,
            rho,
            sigma,
            DMatrix::identity(n, n) * sigma0_scale,
            ConvexSet::uniform_box(n, -bound, bound)?,
        )
    }

    pub fn param_dim(&self) -> usize {
        self.sigma0.nrows()
    }
}

impl EstimatorState {
    /// Zero-information start: `l_hat` = first measured output, everything else zero,
    /// `Sigma = Sigma0`.
    pub fn initial(tune: &EstimatorTuning, first_output: f64) -> Self {
        let n = tune.param_dim();
        Self {
            l_hat: first_output,
            eta_hat: 0.0,
            theta_hat: DVector::zeros(n),
            c: DVector::zeros(n),
            sigma: tune.sigma0.clone(),
        }
    }

    /// Gradient part `theta1_hat`.
    pub fn theta1(&self) -> DVector<f64> {
        self.theta_hat.rows(1, self.theta_hat.len() - 1).into_owned()
    }

    /// Number of scalars in the flat layout.
    pub fn flat_len(param_dim: usize) -> usize {
        2 + 2 * param_dim + param_dim * param_dim
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        let n = self.theta_hat.len();
        out[0] = self.l_hat;
        out[1] = self.eta_hat;
        out[2..2 + n].copy_from_slice(self.theta_hat.as_slice());
        out[2 + n..2 + 2 * n].copy_from_slice(self.c.as_slice());
        out[2 + 2 * n..2 + 2 * n + n * n].copy_from_slice(self.sigma.as_slice());
    }

    pub fn read_flat(param_dim: usize, buf: &[f64]) -> Self {
        let n = param_dim;
        Self {
            l_hat: buf[0],
            eta_hat: buf[1],
            theta_hat: DVector::from_column_slice(&buf[2..2 + n]),
            c: DVector::from_column_slice(&buf[2 + n..2 + 2 * n]),
            sigma: DMatrix::from_column_slice(n, n, &buf[2 + 2 * n..2 + 2 * n + n * n]),
        }
    }

    /// Per-step cleanup: clamp `theta_hat` into `Theta`, symmetrize `Sigma`.
    pub fn post_step(&mut self, tune: &EstimatorTuning) {
        if let Ok(p) = project(&tune.theta_set, &self.theta_hat) {
            self.theta_hat = p;
        }
        self.sigma = (&self.sigma + self.sigma.transpose()) * 0.5;
    }

    pub fn sigma_min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.sigma.clone()).eigenvalues.min()
    }
}

/// Time derivatives of the estimator state.
///
/// `u_dot_i` is the agent's own decision velocity and `e_i` the estimation
/// error (`l_i - l_hat` for static agents, `y_i - l_hat` for dynamical ones).
/// `theta_dot` is evaluated first since `l_hat_dot` depends on it.
pub fn estimator_rhs(
    st: &EstimatorState,
    tune: &EstimatorTuning,
    u_dot_i: &DVector<f64>,
    e_i: f64,
) -> Result<EstimatorDerivatives> {
    let n = tune.param_dim();
    if u_dot_i.len() + 1 != n || st.theta_hat.len() != n {
        return Err(Error::Dimension {
            what: "estimator input",
            expected: n - 1,
            got: u_dot_i.len(),
        });
    }
    let mut regressor = DVector::zeros(n);
    regressor[0] = 1.0;
    regressor.rows_mut(1, n - 1).copy_from(u_dot_i);

    let drive = &st.c * (e_i - st.eta_hat) - &st.theta_hat * tune.sigma;
    let chol = st.sigma.clone().cholesky().ok_or_else(|| {
        let eig = SymmetricEigen::new(st.sigma.clone()).eigenvalues;
        Error::SingularCovariance {
            cond: eig.max().abs() / eig.min().abs().max(f64::MIN_POSITIVE),
        }
    })?;
    let raw = chol.solve(&drive);
    // Intermediate integrator stages can sit marginally outside Theta; the
    // cone is taken at the nearest admissible point.
    let anchor = project(&tune.theta_set, &st.theta_hat)?;
    let theta_dot = project_tangent_cone(&tune.theta_set, &anchor, &raw)?;

    let l_dot = regressor.dot(&st.theta_hat) + tune.k * e_i + st.c.dot(&theta_dot);
    let c_dot = -&st.c * tune.k + &regressor;
    let eta_dot = -tune.k * st.eta_hat;
    let sigma_dot =
        &st.c * st.c.transpose() - &st.sigma * tune.rho + DMatrix::identity(n, n) * tune.sigma;

    Ok(EstimatorState {
        l_hat: l_dot,
        eta_hat: eta_dot,
        theta_hat: theta_dot,
        c: c_dot,
        sigma: sigma_dot,
    })
}

/// Empirical persistence-of-excitation level: the smallest eigenvalue of
/// `int_t^{t+T} c c^T` over all sliding windows (trapezoidal rule on a
/// uniformly sampled path).
pub fn pe_metric(times: &[f64], c_path: &[DVector<f64>], window: f64) -> Result<f64> {
    if times.len() != c_path.len() || times.len() < 2 {
        return Err(Error::Invalid("PE metric needs at least two aligned samples".into()));
    }
    let dt = times[1] - times[0];
    let span = times[times.len() - 1] - times[0];
    if window > span + 1e-12 * span.abs().max(1.0) {
        return Err(Error::Invalid(format!(
            "window {window} is longer than the trajectory span {span}"
        )));
    }
    let steps = ((window / dt).round() as usize).max(1);
    let n = c_path[0].len();

    // Cumulative trapezoidal Gram integrals.
    let mut cumulative = Vec::with_capacity(c_path.len());
    let mut acc = DMatrix::<f64>::zeros(n, n);
    cumulative.push(acc.clone());
    for k in 1..c_path.len() {
        let a = &c_path[k - 1] * c_path[k - 1].transpose();
        let b = &c_path[k] * c_path[k].transpose();
        acc += (a + b) * (0.5 * (times[k] - times[k - 1]));
        cumulative.push(acc.clone());
    }
    let mut alpha = f64::INFINITY;
    for start in 0..c_path.len() - steps {
        let gram = &cumulative[start + steps] - &cumulative[start];
        let sym = (&gram + gram.transpose()) * 0.5;
        alpha = alpha.min(SymmetricEigen::new(sym).eigenvalues.min());
    }
    Ok(alpha.max(0.0))
}

/// Ground-truth parameters per agent:
/// `theta0_i = grad_{u_-i} J_i^T du_-i`, `theta1_i = grad_{u_i} J_i`.
///
/// Verification use only; the controller never sees these.
pub fn theta_truth(
    game: &GameSpec,
    u: &DVector<f64>,
    u_dot: &DVector<f64>,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let mut out = Vec::with_capacity(game.n_agents());
    for i in 0..game.n_agents() {
        let g = game.full_gradient(i, u)?;
        let own = game.block(i, &g);
        let own_rate = own.dot(&game.block(i, u_dot));
        out.push((g.dot(u_dot) - own_rate, own));
    }
    Ok(out)
}
