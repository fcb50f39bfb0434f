//! Game definitions: costs, local and coupling constraints, pseudo-gradient,
//! KKT residual and monotonicity probes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sets::{project, project_nonneg, ConvexSet};

/// Relative central-difference step: `h = FD_REL_STEP * max(1, |u_k|)`.
pub const FD_REL_STEP: f64 = 1e-5;

/// Per-agent cost evaluators `J_i(u)` over the collective decision `u`.
///
/// Gradients are optional. When absent, callers fall back to central finite
/// differences, which is only permitted on the verification side.
pub trait CostModel: Send + Sync + fmt::Debug {
    fn n_agents(&self) -> usize;

    fn cost(&self, agent: usize, u: &DVector<f64>) -> f64;

    /// `grad_u J_i(u)` over the full collective vector.
    fn full_gradient(&self, _agent: usize, _u: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn as_quadratic(&self) -> Option<&QuadraticCosts> {
        None
    }
}

/// `J_i(u) = 0.5 u^T Q_i u + c_i^T u + r_i`.
#[derive(Debug, Clone)]
pub struct QuadraticCosts {
    pub q: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub r: Vec<f64>,
}

impl QuadraticCosts {
    /// Symmetrizes each `Q_i`.
    pub fn new(q: Vec<DMatrix<f64>>, c: Vec<DVector<f64>>, r: Vec<f64>) -> Result<Self> {
        if q.len() != c.len() || q.len() != r.len() {
            return Err(Error::Invalid("quadratic cost blocks disagree in agent count".into()));
        }
        let m = c.first().map_or(0, |v| v.len());
        for (qi, ci) in q.iter().zip(&c) {
            if qi.nrows() != m || qi.ncols() != m || ci.len() != m {
                return Err(Error::Dimension {
                    what: "quadratic cost",
                    expected: m,
                    got: qi.nrows().max(ci.len()),
                });
            }
        }
        let q = q.into_iter().map(|qi| (&qi + qi.transpose()) * 0.5).collect();
        Ok(Self { q, c, r })
    }

    /// Separable game `J_i = (u_i - target_i)^2` with scalar decisions.
    pub fn separable_targets(targets: &[f64]) -> Self {
        let m = targets.len();
        let mut q = Vec::with_capacity(m);
        let mut c = Vec::with_capacity(m);
        let mut r = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let mut qi = DMatrix::zeros(m, m);
            qi[(i, i)] = 2.0;
            let mut ci = DVector::zeros(m);
            ci[i] = -2.0 * t;
            q.push(qi);
            c.push(ci);
            r.push(t * t);
        }
        Self { q, c, r }
    }

    /// Connectivity costs `||u_i - s_i||^2 + w * sum_{j != i} ||u_i - u_j||^2`
    /// for planar decisions.
    pub fn connectivity(sources: &[[f64; 2]], weight: f64) -> Self {
        let n = sources.len();
        let m = 2 * n;
        let mut q = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for (i, s) in sources.iter().enumerate() {
            let mut qi = DMatrix::zeros(m, m);
            let mut ci = DVector::zeros(m);
            for k in 0..2 {
                qi[(2 * i + k, 2 * i + k)] += 2.0;
                ci[2 * i + k] = -2.0 * s[k];
            }
            for j in (0..n).filter(|&j| j != i) {
                for k in 0..2 {
                    let (a, b) = (2 * i + k, 2 * j + k);
                    qi[(a, a)] += 2.0 * weight;
                    qi[(b, b)] += 2.0 * weight;
                    qi[(a, b)] -= 2.0 * weight;
                    qi[(b, a)] -= 2.0 * weight;
                }
            }
            q.push(qi);
            c.push(ci);
            r.push(s[0] * s[0] + s[1] * s[1]);
        }
        Self { q, c, r }
    }

    pub fn dim(&self) -> usize {
        self.c.first().map_or(0, |v| v.len())
    }

    /// Pseudo-gradient as the affine map `F(u) = M u + p`.
    pub fn affine_pseudo_gradient(&self, dims: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.dim();
        let mut mat = DMatrix::zeros(m, m);
        let mut p = DVector::zeros(m);
        let mut off = 0;
        for (i, &mi) in dims.iter().enumerate() {
            mat.rows_mut(off, mi).copy_from(&self.q[i].rows(off, mi));
            p.rows_mut(off, mi).copy_from(&self.c[i].rows(off, mi));
            off += mi;
        }
        (mat, p)
    }
}

impl CostModel for QuadraticCosts {
    fn n_agents(&self) -> usize {
        self.q.len()
    }

    fn cost(&self, agent: usize, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.q[agent] * u)) + self.c[agent].dot(u) + self.r[agent]
    }

    fn full_gradient(&self, agent: usize, u: &DVector<f64>) -> Option<DVector<f64>> {
        Some(&self.q[agent] * u + &self.c[agent])
    }

    fn as_quadratic(&self) -> Option<&QuadraticCosts> {
        Some(self)
    }
}

pub type CostFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Costs given as closures, with optional full gradients.
#[derive(Clone)]
pub struct FnCosts {
    pub costs: Vec<CostFn>,
    pub grads: Option<Vec<GradFn>>,
}

impl fmt::Debug for FnCosts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnCosts")
            .field("agents", &self.costs.len())
            .field("analytic_gradients", &self.grads.is_some())
            .finish()
    }
}

impl CostModel for FnCosts {
    fn n_agents(&self) -> usize {
        self.costs.len()
    }

    fn cost(&self, agent: usize, u: &DVector<f64>) -> f64 {
        (self.costs[agent])(u)
    }

    fn full_gradient(&self, agent: usize, u: &DVector<f64>) -> Option<DVector<f64>> {
        self.grads.as_ref().map(|g| (g[agent])(u))
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    costs: Arc<dyn CostModel>,
    local_sets: Vec<ConvexSet>,
    coupling_a: DMatrix<f64>,
    coupling_b: DVector<f64>,
}

/// Sampled strong-monotonicity and Lipschitz estimates of the pseudo-gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityEstimate {
    pub mu_hat: f64,
    pub ell_hat: f64,
    pub pairs_used: usize,
}

impl GameSpec {
    pub fn new(
        dims: Vec<usize>,
        costs: Arc<dyn CostModel>,
        local_sets: Vec<ConvexSet>,
        coupling_a: DMatrix<f64>,
        coupling_b: DVector<f64>,
    ) -> Result<Self> {
        let n = dims.len();
        if costs.n_agents() != n {
            return Err(Error::Dimension {
                what: "cost model agents",
                expected: n,
                got: costs.n_agents(),
            });
        }
        if local_sets.len() != n {
            return Err(Error::Dimension {
                what: "local sets",
                expected: n,
                got: local_sets.len(),
            });
        }
        for (i, (set, &mi)) in local_sets.iter().zip(&dims).enumerate() {
            if set.dim() != mi {
                return Err(Error::Invalid(format!(
                    "local set of agent {i} has dimension {}, decision has {mi}",
                    set.dim()
                )));
            }
        }
        let m: usize = dims.iter().sum();
        if coupling_a.ncols() != m {
            return Err(Error::Dimension {
                what: "coupling matrix columns",
                expected: m,
                got: coupling_a.ncols(),
            });
        }
        if coupling_b.len() != coupling_a.nrows() {
            return Err(Error::Dimension {
                what: "coupling vector",
                expected: coupling_a.nrows(),
                got: coupling_b.len(),
            });
        }
        let offsets = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        Ok(Self {
            dims,
            offsets,
            costs,
            local_sets,
            coupling_a,
            coupling_b,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offset(&self, agent: usize) -> usize {
        self.offsets[agent]
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn n_coupling(&self) -> usize {
        self.coupling_b.len()
    }

    pub fn costs(&self) -> &Arc<dyn CostModel> {
        &self.costs
    }

    pub fn local_sets(&self) -> &[ConvexSet] {
        &self.local_sets
    }

    pub fn coupling_a(&self) -> &DMatrix<f64> {
        &self.coupling_a
    }

    pub fn coupling_b(&self) -> &DVector<f64> {
        &self.coupling_b
    }

    pub fn block(&self, agent: usize, v: &DVector<f64>) -> DVector<f64> {
        v.rows(self.offsets[agent], self.dims[agent]).into_owned()
    }

    fn check_dim(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::Dimension {
                what: "decision vector",
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    fn checked_cost(&self, agent: usize, u: &DVector<f64>) -> Result<f64> {
        let v = self.costs.cost(agent, u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteCost { agent })
        }
    }

    pub fn cost(&self, agent: usize, u: &DVector<f64>) -> Result<f64> {
        self.check_dim(u)?;
        self.checked_cost(agent, u)
    }

    /// `grad_u J_i(u)`, analytic when available, otherwise central differences.
    pub fn full_gradient(&self, agent: usize, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        match self.costs.full_gradient(agent, u) {
            Some(g) => {
                if g.iter().all(|x| x.is_finite()) {
                    Ok(g)
                } else {
                    Err(Error::NonFiniteCost { agent })
                }
            }
            None => self.fd_gradient(agent, u, 0..self.dim()),
        }
    }

    fn fd_gradient(
        &self,
        agent: usize,
        u: &DVector<f64>,
        coords: std::ops::Range<usize>,
    ) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(coords.len());
        let mut probe = u.clone();
        for (slot, k) in coords.enumerate() {
            let h = FD_REL_STEP * u[k].abs().max(1.0);
            probe[k] = u[k] + h;
            let fp = self.checked_cost(agent, &probe)?;
            probe[k] = u[k] - h;
            let fm = self.checked_cost(agent, &probe)?;
            probe[k] = u[k];
            g[slot] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// Stacked partial gradients `F(u) = col(grad_{u_i} J_i(u))`.
    pub fn pseudo_gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        let mut f = DVector::zeros(self.dim());
        for i in 0..self.n_agents() {
            let (off, mi) = (self.offsets[i], self.dims[i]);
            let block = match self.costs.full_gradient(i, u) {
                Some(g) => g.rows(off, mi).into_owned(),
                None => self.fd_gradient(i, u, off..off + mi)?,
            };
            if !block.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteCost { agent: i });
            }
            f.rows_mut(off, mi).copy_from(&block);
        }
        Ok(f)
    }

    /// Pseudo-gradient by central differences only, ignoring analytic gradients.
    pub fn pseudo_gradient_fd(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        let mut f = DVector::zeros(self.dim());
        for i in 0..self.n_agents() {
            let (off, mi) = (self.offsets[i], self.dims[i]);
            let block = self.fd_gradient(i, u, off..off + mi)?;
            f.rows_mut(off, mi).copy_from(&block);
        }
        Ok(f)
    }

    /// Projection onto the product of local sets.
    pub fn project_local(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(u)?;
        let mut out = DVector::zeros(u.len());
        for (i, set) in self.local_sets.iter().enumerate() {
            let (off, mi) = (self.offsets[i], self.dims[i]);
            let p = project(set, &u.rows(off, mi).into_owned())?;
            out.rows_mut(off, mi).copy_from(&p);
        }
        Ok(out)
    }

    pub fn local_violation(&self, u: &DVector<f64>) -> f64 {
        self.local_sets
            .iter()
            .enumerate()
            .map(|(i, s)| s.violation(&self.block(i, u)))
            .fold(0.0, f64::max)
    }

    /// `max(A u - b)_+`.
    pub fn coupling_violation(&self, u: &DVector<f64>) -> f64 {
        (&self.coupling_a * u - &self.coupling_b)
            .iter()
            .fold(0.0, |m, &r| m.max(r))
    }

    /// Natural-map KKT residual, zero iff `(u, lambda)` solves the v-GNE KKT system.
    pub fn kkt_residual(&self, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
        self.check_dim(u)?;
        if lambda.len() != self.n_coupling() {
            return Err(Error::Dimension {
                what: "dual vector",
                expected: self.n_coupling(),
                got: lambda.len(),
            });
        }
        let f = self.pseudo_gradient(u)?;
        let primal = u - self.project_local(&(u - &f - self.coupling_a.transpose() * lambda))?;
        let dual = lambda - project_nonneg(&(lambda + &self.coupling_a * u - &self.coupling_b));
        Ok(primal.norm() + dual.norm())
    }

    /// Sampled monotonicity constants over pairs; coincident pairs are skipped.
    pub fn estimate_monotonicity(
        &self,
        pairs: &[(DVector<f64>, DVector<f64>)],
    ) -> Result<MonotonicityEstimate> {
        let mut mu = f64::INFINITY;
        let mut ell: f64 = 0.0;
        let mut used = 0;
        for (u, v) in pairs {
            let diff = u - v;
            let dist2 = diff.norm_squared();
            if dist2 == 0.0 {
                continue;
            }
            let df = self.pseudo_gradient(u)? - self.pseudo_gradient(v)?;
            mu = mu.min(diff.dot(&df) / dist2);
            ell = ell.max(df.norm() / dist2.sqrt());
            used += 1;
        }
        if used == 0 {
            return Err(Error::DegenerateSamples);
        }
        if mu <= 0.0 {
            log::warn!("sampled strong-monotonicity constant {mu:.3e} <= 0: assumption violated on samples");
        }
        Ok(MonotonicityEstimate {
            mu_hat: mu,
            ell_hat: ell,
            pairs_used: used,
        })
    }
}

/// Two-agent scalar test game `J_i = (u_i - 1)^2`, `u_1 + u_2 <= 1`, `u_i in [-10, 10]`.
pub fn two_agent_quadratic() -> GameSpec {
    let costs = QuadraticCosts::separable_targets(&[1.0, 1.0]);
    let sets = vec![
        ConvexSet::uniform_box(1, -10.0, 10.0).expect("valid box"),
        ConvexSet::uniform_box(1, -10.0, 10.0).expect("valid box"),
    ];
    GameSpec::new(
        vec![1, 1],
        Arc::new(costs),
        sets,
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_element(1, 1.0),
    )
    .expect("consistent two-agent game")
}
