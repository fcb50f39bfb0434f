//! Closed convex sets and Euclidean projections onto them.
//!
//! Three variants are supported: axis-aligned boxes (possibly with infinite
//! bounds), Euclidean balls, and polyhedra given as intersections of
//! halfspaces `C x <= d`. Polyhedral projections use a dual active-set
//! method (Goldfarb-Idnani with identity Hessian), which also detects empty
//! sets at construction time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance below which a box bound counts as active for tangent-cone purposes.
pub const ACTIVE_BOUND_TOL: f64 = 1e-9;

const QP_MAX_ITERS: usize = 500;
const QP_FEAS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ConvexSet {
    Box {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
    Ball {
        center: DVector<f64>,
        radius: f64,
    },
    /// `{x : C x <= d}`; rows are stored normalized to unit length.
    Halfspaces { c: DMatrix<f64>, d: DVector<f64> },
}

impl ConvexSet {
    pub fn new_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for k in 0..lower.len() {
            if lower[k].is_nan() || upper[k].is_nan() || lower[k] > upper[k] {
                return Err(Error::InvalidSet(format!(
                    "box component {k}: lower {} > upper {}",
                    lower[k], upper[k]
                )));
            }
        }
        Ok(ConvexSet::Box { lower, upper })
    }

    /// Box with identical scalar bounds in every coordinate.
    pub fn uniform_box(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new_box(
            DVector::from_element(dim, lower),
            DVector::from_element(dim, upper),
        )
    }

    pub fn new_ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidSet(format!("ball radius {radius} must be positive")));
        }
        Ok(ConvexSet::Ball { center, radius })
    }

    /// Builds `{x : C x <= d}` and verifies it is nonempty.
    pub fn new_halfspaces(c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if c.nrows() != d.len() {
            return Err(Error::Dimension {
                what: "halfspace offsets",
                expected: c.nrows(),
                got: d.len(),
            });
        }
        let mut c = c;
        let mut d = d;
        for j in 0..c.nrows() {
            let norm = c.row(j).norm();
            if norm == 0.0 {
                if d[j] < 0.0 {
                    return Err(Error::InvalidSet(format!("row {j} reads 0 <= {}", d[j])));
                }
                continue;
            }
            c.row_mut(j).scale_mut(1.0 / norm);
            d[j] /= norm;
        }
        let set = ConvexSet::Halfspaces { c, d };
        // Projecting any point succeeds iff the polyhedron is nonempty.
        let origin = DVector::zeros(set.dim());
        project_halfspaces(&set, &origin)?;
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
            ConvexSet::Halfspaces { c, .. } => c.ncols(),
        }
    }

    /// Largest constraint violation of `v` (zero when inside).
    pub fn violation(&self, v: &DVector<f64>) -> f64 {
        match self {
            ConvexSet::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .map(|(&x, (&lo, &hi))| (lo - x).max(x - hi).max(0.0))
                .fold(0.0, f64::max),
            ConvexSet::Ball { center, radius } => ((v - center).norm() - radius).max(0.0),
            ConvexSet::Halfspaces { c, d } => (c * v - d).iter().fold(0.0, |m, &r| m.max(r)),
        }
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.violation(v) <= tol
    }

    /// True when `v` lies within `tol` of some active face.
    pub fn on_boundary(&self, v: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConvexSet::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .any(|(&x, (&lo, &hi))| (x - lo).abs() <= tol || (hi - x).abs() <= tol),
            ConvexSet::Ball { center, radius } => ((v - center).norm() - radius).abs() <= tol,
            ConvexSet::Halfspaces { c, d } => (c * v - d).iter().any(|r| r.abs() <= tol),
        }
    }
}

/// Euclidean projection of `v` onto `set`.
pub fn project(set: &ConvexSet, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != set.dim() {
        return Err(Error::Dimension {
            what: "projection input",
            expected: set.dim(),
            got: v.len(),
        });
    }
    match set {
        ConvexSet::Box { lower, upper } => Ok(DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(lower.iter().zip(upper.iter()))
                .map(|(&x, (&lo, &hi))| x.max(lo).min(hi)),
        )),
        ConvexSet::Ball { center, radius } => {
            let offset = v - center;
            let dist = offset.norm();
            if dist <= *radius {
                Ok(v.clone())
            } else {
                Ok(center + offset * (*radius / dist))
            }
        }
        ConvexSet::Halfspaces { .. } => project_halfspaces(set, v),
    }
}

/// Componentwise `max(v, 0)`.
pub fn project_nonneg(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Projection of `v` onto the tangent cone of a box at `point`.
///
/// Components pointing out of the box at an active bound are zeroed.
pub fn project_tangent_cone(
    set: &ConvexSet,
    point: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let ConvexSet::Box { lower, upper } = set else {
        return Err(Error::Invalid(
            "tangent-cone projection is implemented for boxes only".into(),
        ));
    };
    if point.len() != lower.len() || v.len() != lower.len() {
        return Err(Error::Dimension {
            what: "tangent cone",
            expected: lower.len(),
            got: point.len().max(v.len()),
        });
    }
    let violation = set.violation(point);
    if violation > ACTIVE_BOUND_TOL {
        return Err(Error::OutsideSet { violation });
    }
    let mut w = v.clone();
    for k in 0..w.len() {
        let at_lower = point[k] - lower[k] <= ACTIVE_BOUND_TOL;
        let at_upper = upper[k] - point[k] <= ACTIVE_BOUND_TOL;
        if (at_lower && w[k] < 0.0) || (at_upper && w[k] > 0.0) {
            w[k] = 0.0;
        }
    }
    Ok(w)
}

// Dual active-set projection onto {x : C x <= d}. In the ">=" convention each
// row reads n_j^T x >= e_j with n_j = -C_j and e_j = -d_j.
fn project_halfspaces(set: &ConvexSet, v: &DVector<f64>) -> Result<DVector<f64>> {
    let ConvexSet::Halfspaces { c, d } = set else {
        unreachable!("project_halfspaces called on a non-polyhedral set")
    };
    let n_rows = c.nrows();
    let normal = |j: usize| -> DVector<f64> { -c.row(j).transpose() };
    let slack = |x: &DVector<f64>, j: usize| -> f64 { d[j] - c.row(j).dot(&x.transpose()) };

    let mut x = v.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let tol = QP_FEAS_TOL * (1.0 + v.amax());

    for _ in 0..QP_MAX_ITERS {
        let mut worst: Option<(usize, f64)> = None;
        for j in 0..n_rows {
            if active.contains(&j) {
                continue;
            }
            let s = slack(&x, j);
            if s < -tol && worst.map_or(true, |(_, w)| s < w) {
                worst = Some((j, s));
            }
        }
        let Some((p, _)) = worst else {
            return Ok(x);
        };
        let np = normal(p);
        let mut mult_p = 0.0;

        let mut inner = 0;
        loop {
            inner += 1;
            if inner > QP_MAX_ITERS {
                return Err(Error::ProjectionFailed {
                    residual: set.violation(&x),
                });
            }
            let k = active.len();
            let (r, z) = if k == 0 {
                (DVector::zeros(0), np.clone())
            } else {
                let nmat = DMatrix::from_columns(
                    &active.iter().map(|&j| normal(j)).collect::<Vec<_>>(),
                );
                let gram = nmat.transpose() * &nmat;
                let rhs = nmat.transpose() * &np;
                let r = gram
                    .lu()
                    .solve(&rhs)
                    .ok_or(Error::ProjectionFailed { residual: set.violation(&x) })?;
                let z = &np - &nmat * &r;
                (r, z)
            };

            let mut t1 = f64::INFINITY;
            let mut drop_idx = None;
            for l in 0..k {
                if r[l] > 1e-14 {
                    let ratio = mult[l] / r[l];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_idx = Some(l);
                    }
                }
            }
            let zz = z.dot(&np);
            let t2 = if z.norm() > 1e-12 {
                // n_p^T x - e_p equals the (negative) slack of row p
                -slack(&x, p) / zz
            } else {
                f64::INFINITY
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::InvalidSet(
                    "halfspace system is infeasible (empty set)".into(),
                ));
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += &z * t;
            }
            for l in 0..k {
                mult[l] -= t * r[l];
            }
            mult_p += t;
            if t2 <= t1 {
                active.push(p);
                mult.push(mult_p);
                break;
            }
            let l = drop_idx.expect("partial step always has a blocking constraint");
            active.remove(l);
            mult.remove(l);
        }
    }
    Err(Error::ProjectionFailed {
        residual: set.violation(&x),
    })
}
