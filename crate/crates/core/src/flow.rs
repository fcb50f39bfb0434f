//! Full-information projected primal-dual flow and its preconditioned
//! forward-backward reading.
//!
//! The flow is
//!
//! ```text
//! du      = -u + proj_Omega(u - Gamma (F(u) + A^T lambda))
//! dlambda = -lambda + proj_{>=0}(lambda + gamma0 (A u - b + 2 A du))
//! ```
//!
//! where `du` is evaluated first and substituted into the dual row, which
//! makes the right-hand side an explicit function of the state.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::sets::{project, project_nonneg, ConvexSet};

#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    pub gamma: Vec<f64>,
    pub gamma0: f64,
}

impl StepSizes {
    pub fn new(gamma: Vec<f64>, gamma0: f64) -> Result<Self> {
        if let Some(bad) = gamma.iter().chain(std::iter::once(&gamma0)).find(|g| !(**g > 0.0)) {
            return Err(Error::Invalid(format!("step size {bad} must be positive")));
        }
        Ok(Self { gamma, gamma0 })
    }

    pub fn uniform(n_agents: usize, gamma: f64, gamma0: f64) -> Result<Self> {
        Self::new(vec![gamma; n_agents], gamma0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl PrimalDualState {
    pub fn new(u: DVector<f64>, lambda: DVector<f64>) -> Self {
        Self { u, lambda }
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.u.len() + self.lambda.len());
        w.rows_mut(0, self.u.len()).copy_from(&self.u);
        w.rows_mut(self.u.len(), self.lambda.len()).copy_from(&self.lambda);
        w
    }

    pub fn from_stacked(w: &DVector<f64>, m: usize) -> Self {
        Self {
            u: w.rows(0, m).into_owned(),
            lambda: w.rows(m, w.len() - m).into_owned(),
        }
    }
}

/// Agent-local primal update
/// `du_i = -u_i + proj_{Omega_i}(u_i - gamma_i (g_i + A_i^T lambda) + d_i)`.
///
/// `coupling_force` is `A_i^T lambda`, i.e. the agent's column block of `A`
/// applied to the broadcast dual variable.
pub fn local_primal_rhs(
    u_i: &DVector<f64>,
    omega_i: &ConvexSet,
    gamma_i: f64,
    gradient_i: &DVector<f64>,
    coupling_force: &DVector<f64>,
    dither_i: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let mut arg = u_i - (gradient_i + coupling_force) * gamma_i;
    if let Some(d) = dither_i {
        arg += d;
    }
    Ok(project(omega_i, &arg)? - u_i)
}

/// Coordinator dual update with the primal velocity substituted.
pub fn dual_rhs(
    game: &GameSpec,
    steps: &StepSizes,
    u: &DVector<f64>,
    u_dot: &DVector<f64>,
    lambda: &DVector<f64>,
) -> DVector<f64> {
    let a = game.coupling_a();
    let arg = lambda + (a * u - game.coupling_b() + a * u_dot * 2.0) * steps.gamma0;
    project_nonneg(&arg) - lambda
}

/// Collective primal-dual right-hand side driven by a gradient surrogate
/// (exact `F(u)` or an estimate) and an optional dither.
pub fn primal_dual_rhs(
    game: &GameSpec,
    steps: &StepSizes,
    state: &PrimalDualState,
    gradient: &DVector<f64>,
    dither: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = game.dim();
    if state.u.len() != m || gradient.len() != m {
        return Err(Error::Dimension {
            what: "primal state",
            expected: m,
            got: state.u.len().min(gradient.len()),
        });
    }
    if state.lambda.len() != game.n_coupling() {
        return Err(Error::Dimension {
            what: "dual state",
            expected: game.n_coupling(),
            got: state.lambda.len(),
        });
    }
    if steps.gamma.len() != game.n_agents() {
        return Err(Error::Dimension {
            what: "step sizes",
            expected: game.n_agents(),
            got: steps.gamma.len(),
        });
    }
    let force = game.coupling_a().transpose() * &state.lambda;
    let mut du = DVector::zeros(m);
    for i in 0..game.n_agents() {
        let d_i = dither.map(|d| game.block(i, d));
        let du_i = local_primal_rhs(
            &game.block(i, &state.u),
            &game.local_sets()[i],
            steps.gamma[i],
            &game.block(i, gradient),
            &game.block(i, &force),
            d_i.as_ref(),
        )?;
        du.rows_mut(game.offset(i), game.dims()[i]).copy_from(&du_i);
    }
    let dlambda = dual_rhs(game, steps, &state.u, &du, &state.lambda);
    Ok((du, dlambda))
}

pub fn full_info_rhs(
    game: &GameSpec,
    steps: &StepSizes,
    state: &PrimalDualState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let f = game.pseudo_gradient(&state.u)?;
    if !f.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("pseudo-gradient"));
    }
    primal_dual_rhs(game, steps, state, &f, None)
}

/// Operator matrices of the preconditioned forward-backward reading.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub gamma_blk_inv: DMatrix<f64>,
    pub norm_a: f64,
    /// Lower bound on the eigenvalues of `Phi^-1`.
    pub sigma_min: f64,
    /// Upper bound on the eigenvalues of `Phi^-1`.
    pub sigma_max: f64,
    /// Largest elementwise deviation of `Gamma^-1 - Ahat - (Phi + Psi)`.
    pub identity_error: f64,
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |m, &s| m.max(s))
}

pub fn preconditioner(game: &GameSpec, steps: &StepSizes) -> Result<Preconditioner> {
    let norm_a = spectral_norm(game.coupling_a());

    let mut inv_gammas: Vec<(String, f64)> = (0..game.n_agents())
        .map(|i| (format!("gamma_{}", i + 1), steps.gamma[i]))
        .collect();
    inv_gammas.push(("gamma_0".into(), steps.gamma0));
    let (worst_name, worst_gamma) = inv_gammas
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, g| if g.1 > acc.1 { g } else { acc });
    if 1.0 / worst_gamma <= norm_a {
        return Err(Error::StepSize {
            which: worst_name,
            gamma: worst_gamma,
            inv: 1.0 / worst_gamma,
            norm_a,
        });
    }
    let p = operator_matrices(game, steps);
    if p.identity_error > 1e-12 {
        return Err(Error::Identity(p.identity_error));
    }
    Ok(p)
}

/// The same matrices without the step-size guard; `sigma_min`/`sigma_max`
/// are meaningless when some `1/gamma <= ||A||`.
pub fn operator_matrices(game: &GameSpec, steps: &StepSizes) -> Preconditioner {
    let m = game.dim();
    let q = game.n_coupling();
    let a = game.coupling_a();
    let norm_a = spectral_norm(a);
    let inv: Vec<f64> = steps.gamma.iter().chain(std::iter::once(&steps.gamma0)).map(|g| 1.0 / g).collect();
    let max_inv = inv.iter().copied().fold(0.0, f64::max);
    let min_inv = inv.iter().copied().fold(f64::INFINITY, f64::min);

    let mut gamma_blk_inv = DMatrix::zeros(m + q, m + q);
    for i in 0..game.n_agents() {
        for k in 0..game.dims()[i] {
            let r = game.offset(i) + k;
            gamma_blk_inv[(r, r)] = 1.0 / steps.gamma[i];
        }
    }
    for r in m..m + q {
        gamma_blk_inv[(r, r)] = 1.0 / steps.gamma0;
    }

    let mut phi = gamma_blk_inv.clone();
    let mut psi = DMatrix::zeros(m + q, m + q);
    let mut a_hat = DMatrix::zeros(m + q, m + q);
    phi.view_mut((0, m), (m, q)).copy_from(&(-a.transpose()));
    phi.view_mut((m, 0), (q, m)).copy_from(&(-a));
    psi.view_mut((0, m), (m, q)).copy_from(&a.transpose());
    psi.view_mut((m, 0), (q, m)).copy_from(&(-a));
    a_hat.view_mut((m, 0), (q, m)).copy_from(&(a * 2.0));

    let identity_error = (&gamma_blk_inv - &a_hat - (&phi + &psi)).amax();
    Preconditioner {
        phi,
        psi,
        a_hat,
        gamma_blk_inv,
        norm_a,
        sigma_min: 1.0 / (max_inv + norm_a),
        sigma_max: 1.0 / (min_inv - norm_a),
        identity_error,
    }
}

impl Preconditioner {
    /// Exact extreme eigenvalues of the symmetric matrix `Phi`.
    pub fn phi_eigen_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.phi.clone()).eigenvalues;
        (eig.min(), eig.max())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub beta: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub pass: bool,
    /// Constants came from sampling rather than from the caller.
    pub empirical: bool,
    pub note: Option<String>,
}

/// Checks `beta * sigma_min >= sigma_max^2` with `beta = mu / ell^2`.
pub fn step_size_certificate(
    game: &GameSpec,
    steps: &StepSizes,
    mu: f64,
    ell: f64,
) -> CertificateReport {
    let beta = if ell > 0.0 { (mu / (ell * ell)).max(0.0) } else { 0.0 };
    match preconditioner(game, steps) {
        Ok(p) => {
            let pass = mu > 0.0 && beta * p.sigma_min >= p.sigma_max * p.sigma_max;
            log::info!(
                "step-size certificate: beta = {beta:.4e}, sigma_min = {:.4e}, sigma_max = {:.4e} -> {}",
                p.sigma_min,
                p.sigma_max,
                if pass { "pass" } else { "fail" }
            );
            CertificateReport {
                beta,
                sigma_min: p.sigma_min,
                sigma_max: p.sigma_max,
                pass,
                empirical: false,
                note: None,
            }
        }
        Err(e) => CertificateReport {
            beta,
            sigma_min: f64::NAN,
            sigma_max: f64::NAN,
            pass: false,
            empirical: false,
            note: Some(e.to_string()),
        },
    }
}

/// Certificate fed by sampled monotonicity constants.
pub fn empirical_certificate(
    game: &GameSpec,
    steps: &StepSizes,
    pairs: &[(DVector<f64>, DVector<f64>)],
) -> Result<CertificateReport> {
    let est = game.estimate_monotonicity(pairs)?;
    let mut rep = step_size_certificate(game, steps, est.mu_hat, est.ell_hat.max(est.mu_hat));
    rep.empirical = true;
    Ok(rep)
}

/// Forward-backward operator `T w = w + rhs(w)`.
pub fn fb_operator(game: &GameSpec, steps: &StepSizes, w: &DVector<f64>) -> Result<DVector<f64>> {
    let state = PrimalDualState::from_stacked(w, game.dim());
    let (du, dl) = full_info_rhs(game, steps, &state)?;
    Ok(w + PrimalDualState::new(du, dl).stacked())
}

/// Slack of the firm-nonexpansiveness inequality behind the convergence
/// argument, evaluated in the `Phi` inner product in which the resolvent
/// of `Phi^-1 (N + Psi)` is firmly nonexpansive:
///
/// `(Tx - x*)^T Phi (x - Tx) - (Tx - x*)^T (Bx - Bx*)`, with `B w = col(F(u), b)`.
///
/// Nonnegative for every `x` when `x*` is a fixed point.
pub fn lemma1_probe(
    game: &GameSpec,
    steps: &StepSizes,
    x: &DVector<f64>,
    fixed_point: &DVector<f64>,
) -> Result<f64> {
    let p = preconditioner(game, steps)?;
    let (tx, bdiff) = lemma1_terms(game, steps, x, fixed_point)?;
    let a = &tx - fixed_point;
    Ok(a.dot(&(&p.phi * (x - &tx))) - a.dot(&bdiff))
}

/// Same slack in the plain Euclidean inner product with `B~ = Phi^-1 B`.
pub fn lemma1_probe_euclidean(
    game: &GameSpec,
    steps: &StepSizes,
    x: &DVector<f64>,
    fixed_point: &DVector<f64>,
) -> Result<f64> {
    let p = preconditioner(game, steps)?;
    let (tx, bdiff) = lemma1_terms(game, steps, x, fixed_point)?;
    let scaled = p
        .phi
        .clone()
        .lu()
        .solve(&bdiff)
        .ok_or_else(|| Error::Invalid("Phi is singular".into()))?;
    let a = &tx - fixed_point;
    Ok(a.dot(&(x - &tx)) - a.dot(&scaled))
}

fn lemma1_terms(
    game: &GameSpec,
    steps: &StepSizes,
    x: &DVector<f64>,
    fixed_point: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = game.dim();
    let tx = fb_operator(game, steps, x)?;
    let fx = game.pseudo_gradient(&x.rows(0, m).into_owned())?;
    let fs = game.pseudo_gradient(&fixed_point.rows(0, m).into_owned())?;
    // The constant b block cancels in B x - B x*.
    let mut bdiff = DVector::zeros(x.len());
    bdiff.rows_mut(0, m).copy_from(&(fx - fs));
    Ok((tx, bdiff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{two_agent_quadratic, FnCosts, GameSpec, QuadraticCosts};
    use nalgebra::dvector;
    use std::sync::Arc;

    fn one_agent(target: f64, lo: f64, hi: f64) -> GameSpec {
        let costs = FnCosts {
            costs: vec![Arc::new(move |u: &DVector<f64>| 0.5 * (u[0] - target).powi(2))],
            grads: Some(vec![Arc::new(move |u: &DVector<f64>| dvector![u[0] - target])]),
        };
        GameSpec::new(
            vec![1],
            Arc::new(costs),
            vec![ConvexSet::uniform_box(1, lo, hi).unwrap()],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap()
    }

    #[test]
    fn rhs_vanishes_at_vgne() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let st = PrimalDualState::new(dvector![0.5, 0.5], dvector![1.0]);
        assert!(g.kkt_residual(&st.u, &st.lambda).unwrap() < 1e-12);
        let (du, dl) = full_info_rhs(&g, &steps, &st).unwrap();
        assert!(du.norm() < 1e-15 && dl.norm() < 1e-15);
    }

    #[test]
    fn inactive_projection_gives_scaled_gradient_step() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[1.0, -2.0])),
            vec![
                ConvexSet::uniform_box(1, -1e6, 1e6).unwrap(),
                ConvexSet::uniform_box(1, -1e6, 1e6).unwrap(),
            ],
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
        )
        .unwrap();
        let steps = StepSizes::new(vec![0.1, 0.3], 0.1).unwrap();
        let st = PrimalDualState::new(dvector![3.0, 4.0], dvector![0.0]);
        let (du, dl) = full_info_rhs(&g, &steps, &st).unwrap();
        let f = g.pseudo_gradient(&st.u).unwrap();
        assert!((du - dvector![-0.1 * f[0], -0.3 * f[1]]).norm() < 1e-12);
        assert_eq!(dl, dvector![0.0]);
    }

    #[test]
    fn boundary_equilibrium_one_agent() {
        let g = one_agent(2.0, 0.0, 1.0);
        let steps = StepSizes::uniform(1, 1.0, 1.0).unwrap();
        let st = PrimalDualState::new(dvector![1.0], DVector::zeros(0));
        let (du, _) = full_info_rhs(&g, &steps, &st).unwrap();
        assert_eq!(du, dvector![0.0]);
    }

    #[test]
    fn decoupled_preconditioner() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[0.0, 0.0])),
            vec![
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
            ],
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
        )
        .unwrap();
        let steps = StepSizes::new(vec![0.1, 0.2], 0.05).unwrap();
        let p = preconditioner(&g, &steps).unwrap();
        assert_eq!(p.phi, DMatrix::from_diagonal(&dvector![10.0, 5.0, 20.0]));
        assert!((p.sigma_min - 0.05).abs() < 1e-15);
        assert!((p.sigma_max - 0.2).abs() < 1e-15);
    }

    #[test]
    fn scalar_preconditioner_bounds() {
        let g = one_agent(0.0, -1.0, 1.0);
        let g = GameSpec::new(
            vec![1],
            g.costs().clone(),
            g.local_sets().to_vec(),
            DMatrix::from_element(1, 1, 1.0),
            dvector![0.0],
        )
        .unwrap();
        let steps = StepSizes::uniform(1, 0.1, 0.1).unwrap();
        let p = preconditioner(&g, &steps).unwrap();
        assert!((p.sigma_min - 1.0 / 11.0).abs() < 1e-15);
        assert!((p.sigma_max - 1.0 / 9.0).abs() < 1e-15);
        assert!(p.identity_error <= 1e-12);
    }

    #[test]
    fn preconditioner_rejects_large_steps() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 1.0, 1.0).unwrap();
        assert!(matches!(preconditioner(&g, &steps), Err(Error::StepSize { .. })));
    }

    #[test]
    fn certificate_arithmetic() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[0.0, 0.0])),
            vec![
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
            ],
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
        )
        .unwrap();
        let small = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let rep = step_size_certificate(&g, &small, 2.0, 2.0);
        assert!((rep.beta - 0.5).abs() < 1e-15);
        assert!((rep.sigma_min - 0.1).abs() < 1e-15 && (rep.sigma_max - 0.1).abs() < 1e-15);
        assert!(rep.pass);
        let big = StepSizes::uniform(2, 10.0, 10.0).unwrap();
        assert!(!step_size_certificate(&g, &big, 2.0, 2.0).pass);
        assert!(!step_size_certificate(&g, &small, 0.0, 2.0).pass);
    }

    #[test]
    fn lemma1_zero_at_fixed_point() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let star = dvector![0.5, 0.5, 1.0];
        assert!(lemma1_probe(&g, &steps, &star, &star).unwrap().abs() < 1e-15);
    }
}
