//! Reference v-GNE solvers: active-set enumeration of the linear KKT system
//! for quadratic games, and projected extragradient for general monotone
//! games. Results can be cached in a JSON sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::sets::{project_nonneg, ConvexSet};

/// Largest number of active-set combinations the enumeration will visit.
pub const MAX_ACTIVE_SETS: u64 = 1 << 12;

const KKT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub coupling: Vec<usize>,
    pub bounds: Vec<(usize, BoundSide)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub u: Vec<f64>,
    pub lambda: Vec<f64>,
    pub residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_set: Option<ActiveSet>,
}

impl OracleSolution {
    pub fn u(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u)
    }

    pub fn lambda(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.lambda)
    }
}

fn box_bounds(game: &GameSpec) -> Result<(DVector<f64>, DVector<f64>)> {
    let m = game.dim();
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    for (i, set) in game.local_sets().iter().enumerate() {
        match set {
            ConvexSet::Box { lower, upper } => {
                lo.rows_mut(game.offset(i), lower.len()).copy_from(lower);
                hi.rows_mut(game.offset(i), upper.len()).copy_from(upper);
            }
            _ => {
                return Err(Error::Oracle(format!(
                    "active-set enumeration needs box local sets (agent {i})"
                )))
            }
        }
    }
    Ok((lo, hi))
}

/// Solves the KKT system of a quadratic game by enumerating active sets of
/// the coupling rows and the finite box bounds.
pub fn solve_quadratic_kkt(game: &GameSpec) -> Result<OracleSolution> {
    let quad = game
        .costs()
        .as_quadratic()
        .ok_or_else(|| Error::Oracle("game costs are not quadratic".into()))?;
    let (mat, p) = quad.affine_pseudo_gradient(game.dims());
    let sym = (&mat + mat.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::Oracle(format!(
            "pseudo-gradient is not strongly monotone (min eigenvalue {min_eig:e})"
        )));
    }
    let (lo, hi) = box_bounds(game)?;
    let a = game.coupling_a();
    let b = game.coupling_b();
    let (m, q) = (game.dim(), game.n_coupling());

    // Per coordinate: free, or pinned at a finite bound.
    let choices: Vec<Vec<Option<BoundSide>>> = (0..m)
        .map(|k| {
            let mut c = vec![None];
            if lo[k].is_finite() {
                c.push(Some(BoundSide::Lower));
            }
            if hi[k].is_finite() && hi[k] != lo[k] {
                c.push(Some(BoundSide::Upper));
            }
            c
        })
        .collect();
    let total = choices
        .iter()
        .try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64))
        .and_then(|acc| acc.checked_mul(1u64.checked_shl(q as u32)?))
        .unwrap_or(u64::MAX);
    if total > MAX_ACTIVE_SETS {
        return Err(Error::Oracle(format!(
            "{total} active-set combinations exceed {MAX_ACTIVE_SETS}; use the extragradient solver"
        )));
    }

    let mut candidates: Vec<(Vec<Option<BoundSide>>, Vec<usize>)> = Vec::new();
    let mut pinned = vec![0usize; m];
    loop {
        let bounds: Vec<Option<BoundSide>> = (0..m).map(|k| choices[k][pinned[k]]).collect();
        for mask in 0..(1u64 << q) {
            let rows = (0..q).filter(|r| mask >> r & 1 == 1).collect();
            candidates.push((bounds.clone(), rows));
        }
        let mut k = 0;
        while k < m {
            pinned[k] += 1;
            if pinned[k] < choices[k].len() {
                break;
            }
            pinned[k] = 0;
            k += 1;
        }
        if k == m {
            break;
        }
    }
    candidates.sort_by_key(|(bd, rows)| bd.iter().filter(|x| x.is_some()).count() + rows.len());

    for (bounds, rows) in candidates {
        if let Some(sol) = try_active_set(&mat, &p, a, b, &lo, &hi, &bounds, &rows) {
            let residual = game.kkt_residual(&sol.0, &sol.1)?;
            return Ok(OracleSolution {
                u: sol.0.as_slice().to_vec(),
                lambda: sol.1.as_slice().to_vec(),
                residual,
                active_set: Some(ActiveSet {
                    coupling: rows,
                    bounds: bounds
                        .iter()
                        .enumerate()
                        .filter_map(|(k, s)| s.map(|s| (k, s)))
                        .collect(),
                }),
            });
        }
    }
    Err(Error::Oracle("no active set satisfies the KKT conditions".into()))
}

#[allow(clippy::too_many_arguments)]
fn try_active_set(
    mat: &DMatrix<f64>,
    p: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    bounds: &[Option<BoundSide>],
    rows: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = mat.nrows();
    let free: Vec<usize> = (0..m).filter(|&k| bounds[k].is_none()).collect();
    let mut u = DVector::zeros(m);
    for k in 0..m {
        match bounds[k] {
            Some(BoundSide::Lower) => u[k] = lo[k],
            Some(BoundSide::Upper) => u[k] = hi[k],
            None => {}
        }
    }
    let (nf, nw) = (free.len(), rows.len());
    let mut kkt = DMatrix::zeros(nf + nw, nf + nw);
    let mut rhs = DVector::zeros(nf + nw);
    for (r, &k) in free.iter().enumerate() {
        for (c, &l) in free.iter().enumerate() {
            kkt[(r, c)] = mat[(k, l)];
        }
        for (c, &w) in rows.iter().enumerate() {
            kkt[(r, nf + c)] = a[(w, k)];
        }
        rhs[r] = -p[k] - (0..m).filter(|l| bounds[*l].is_some()).map(|l| mat[(k, l)] * u[l]).sum::<f64>();
    }
    for (r, &w) in rows.iter().enumerate() {
        for (c, &k) in free.iter().enumerate() {
            kkt[(nf + r, c)] = a[(w, k)];
        }
        rhs[nf + r] = b[w] - (0..m).filter(|l| bounds[*l].is_some()).map(|l| a[(w, l)] * u[l]).sum::<f64>();
    }
    let sol = if nf + nw == 0 {
        DVector::zeros(0)
    } else {
        kkt.clone().lu().solve(&rhs)?
    };
    if (&kkt * &sol - &rhs).norm() > KKT_TOL * (1.0 + rhs.norm()) {
        return None;
    }
    for (r, &k) in free.iter().enumerate() {
        u[k] = sol[r];
    }
    let mut lambda = DVector::zeros(a.nrows());
    for (r, &w) in rows.iter().enumerate() {
        lambda[w] = sol[nf + r];
    }
    let scale = 1.0 + u.amax() + lambda.amax();
    let tol = KKT_TOL * scale;
    if lambda.iter().any(|l| *l < -tol) {
        return None;
    }
    if (0..m).any(|k| u[k] < lo[k] - tol || u[k] > hi[k] + tol) {
        return None;
    }
    if (a * &u - b).iter().any(|r| *r > tol) {
        return None;
    }
    let grad = mat * &u + p + a.transpose() * &lambda;
    for k in 0..m {
        match bounds[k] {
            Some(BoundSide::Lower) if grad[k] < -tol => return None,
            Some(BoundSide::Upper) if grad[k] > tol => return None,
            _ => {}
        }
    }
    Some((u, project_nonneg(&lambda)))
}

/// Options for [`solve_extragradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtragradientOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Samples used to estimate the Lipschitz constant of the primal-dual operator.
    pub lipschitz_samples: usize,
}

impl Default for ExtragradientOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 2_000_000,
            seed: 0,
            lipschitz_samples: 64,
        }
    }
}

const CHECK_EVERY: usize = 500;

fn pd_operator(game: &GameSpec, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let a = game.coupling_a();
    let gu = game.pseudo_gradient(u)? + a.transpose() * lambda;
    let gl = game.coupling_b() - a * u;
    Ok((gu, gl))
}

fn random_point(game: &GameSpec, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(game.dim());
    for (i, set) in game.local_sets().iter().enumerate() {
        let off = game.offset(i);
        let mi = game.dims()[i];
        let sample: DVector<f64> = match set {
            ConvexSet::Box { lower, upper } => DVector::from_fn(mi, |k, _| {
                let (l, h) = (lower[k].max(-1e3), upper[k].min(1e3));
                if h > l {
                    rng.gen_range(l..=h)
                } else {
                    l
                }
            }),
            ConvexSet::Ball { center, radius } => {
                DVector::from_fn(mi, |k, _| center[k] + radius * rng.gen_range(-1.0..=1.0))
            }
            ConvexSet::Halfspaces { .. } => DVector::from_fn(mi, |_, _| rng.gen_range(-10.0..=10.0)),
        };
        v.rows_mut(off, mi).copy_from(&crate::sets::project(set, &sample)?);
    }
    Ok(v)
}

/// Sampled Lipschitz constant of `(u, lambda) -> (F(u) + A^T lambda, b - A u)`.
pub fn primal_dual_lipschitz(game: &GameSpec, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = game.n_coupling();
    let mut ell: f64 = 0.0;
    for _ in 0..samples.max(2) {
        let u = random_point(game, &mut rng)?;
        let v = random_point(game, &mut rng)?;
        let l1 = DVector::from_fn(q, |_, _| rng.gen_range(0.0..1.0));
        let l2 = DVector::from_fn(q, |_, _| rng.gen_range(0.0..1.0));
        let (g1u, g1l) = pd_operator(game, &u, &l1)?;
        let (g2u, g2l) = pd_operator(game, &v, &l2)?;
        let dist = ((&u - &v).norm_squared() + (&l1 - &l2).norm_squared()).sqrt();
        if dist > 0.0 {
            let dg = ((g1u - g2u).norm_squared() + (g1l - g2l).norm_squared()).sqrt();
            ell = ell.max(dg / dist);
        }
    }
    // Coupling alone contributes ||A||, which random pairs may undersample.
    Ok(ell.max(crate::flow::spectral_norm(game.coupling_a())).max(f64::MIN_POSITIVE))
}

/// Projected extragradient on the primal-dual operator over `Omega x R^q_+`.
pub fn solve_extragradient(
    game: &GameSpec,
    start: Option<(&DVector<f64>, &DVector<f64>)>,
    opts: ExtragradientOptions,
) -> Result<OracleSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("extragradient tolerance must be positive".into()));
    }
    let ell = primal_dual_lipschitz(game, opts.lipschitz_samples, opts.seed)?;
    let mut alpha = 0.9 / ell;
    let (mut u, mut lambda) = match start {
        Some((u0, l0)) => (game.project_local(u0)?, project_nonneg(l0)),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (random_point(game, &mut rng)?, DVector::zeros(game.n_coupling()))
        }
    };
    let mut last_check = game.kkt_residual(&u, &lambda)?;
    let mut best = (last_check, u.clone(), lambda.clone());
    for it in 0..opts.max_iters {
        let (gu, gl) = pd_operator(game, &u, &lambda)?;
        let u_half = game.project_local(&(&u - alpha * gu))?;
        let l_half = project_nonneg(&(&lambda - alpha * gl));
        let (hu, hl) = pd_operator(game, &u_half, &l_half)?;
        u = game.project_local(&(&u - alpha * hu))?;
        lambda = project_nonneg(&(&lambda - alpha * hl));
        if (it + 1) % CHECK_EVERY == 0 || it + 1 == opts.max_iters {
            let res = game.kkt_residual(&u, &lambda)?;
            if !res.is_finite() {
                return Err(Error::Oracle("extragradient iterates became non-finite".into()));
            }
            if res < best.0 {
                best = (res, u.clone(), lambda.clone());
            }
            if res <= opts.tol {
                return Ok(OracleSolution {
                    u: u.as_slice().to_vec(),
                    lambda: lambda.as_slice().to_vec(),
                    residual: res,
                    active_set: None,
                });
            }
            if res >= last_check {
                alpha *= 0.5;
                log::debug!("extragradient step halved to {alpha:e} at iteration {}", it + 1);
            }
            last_check = res;
        }
    }
    Err(Error::Oracle(format!(
        "extragradient stopped after {} iterations with residual {:e} (best)",
        opts.max_iters, best.0
    )))
}

/// Hex SHA-256 of `key`.
pub fn cache_key(key: &str) -> String {
    Sha256::digest(key.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Looks `key` up in the JSON sidecar at `path`, solving and storing on a miss.
pub fn cached_solve(
    path: &Path,
    key: &str,
    solve: impl FnOnce() -> Result<OracleSolution>,
) -> Result<OracleSolution> {
    let digest = cache_key(key);
    let mut table: BTreeMap<String, OracleSolution> = match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_else(|e| {
            log::warn!("ignoring unreadable oracle cache {}: {e}", path.display());
            BTreeMap::new()
        }),
        Err(_) => BTreeMap::new(),
    };
    if let Some(hit) = table.get(&digest) {
        return Ok(hit.clone());
    }
    let sol = solve()?;
    table.insert(digest, sol.clone());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&table)?)?;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{two_agent_quadratic, QuadraticCosts};
    use nalgebra::dvector;
    use std::sync::Arc;

    fn box1(l: f64, h: f64) -> ConvexSet {
        ConvexSet::uniform_box(1, l, h).unwrap()
    }

    #[test]
    fn two_agent_kkt() {
        let sol = solve_quadratic_kkt(&two_agent_quadratic()).unwrap();
        assert!((sol.u() - dvector![0.5, 0.5]).norm() < 1e-12);
        assert!((sol.lambda[0] - 1.0).abs() < 1e-12);
        assert_eq!(sol.active_set.unwrap().coupling, vec![0]);
    }

    #[test]
    fn interior_optimum_has_zero_dual() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[1.0, -2.0])),
            vec![box1(-10.0, 10.0), box1(-10.0, 10.0)],
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            dvector![5.0],
        )
        .unwrap();
        let sol = solve_quadratic_kkt(&g).unwrap();
        assert!((sol.u() - dvector![1.0, -2.0]).norm() < 1e-12);
        assert_eq!(sol.lambda, vec![0.0]);
    }

    #[test]
    fn box_face_only() {
        let g = GameSpec::new(
            vec![1],
            Arc::new(QuadraticCosts::separable_targets(&[3.0])),
            vec![box1(0.0, 1.0)],
            DMatrix::zeros(1, 1),
            dvector![0.0],
        )
        .unwrap();
        let sol = solve_quadratic_kkt(&g).unwrap();
        assert_eq!(sol.u, vec![1.0]);
        assert_eq!(sol.lambda, vec![0.0]);
        assert_eq!(sol.active_set.unwrap().bounds, vec![(0, BoundSide::Upper)]);
    }

    #[test]
    fn enumeration_limit() {
        let sources = [[-4.0, -8.0], [-12.0, -3.0], [1.0, 7.0], [16.0, 8.0]];
        let (a, b) = crate::plant::pairwise_coupling(4, 2, 14.0);
        let g = GameSpec::new(
            vec![2; 4],
            Arc::new(QuadraticCosts::connectivity(&sources, 0.04)),
            vec![ConvexSet::uniform_box(2, -16.0, 16.0).unwrap(); 4],
            a,
            b,
        )
        .unwrap();
        assert!(matches!(solve_quadratic_kkt(&g), Err(Error::Oracle(_))));
    }

    #[test]
    fn extragradient_agrees_with_enumeration() {
        let g = two_agent_quadratic();
        let eg = solve_extragradient(&g, None, ExtragradientOptions::default()).unwrap();
        assert!((eg.u() - dvector![0.5, 0.5]).norm() < 1e-6);
        assert!(eg.residual <= 1e-9);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.json");
        let first = cached_solve(&path, "k", || solve_quadratic_kkt(&two_agent_quadratic())).unwrap();
        let second = cached_solve(&path, "k", || Err(Error::Oracle("must hit cache".into()))).unwrap();
        assert_eq!(first, second);
        assert_eq!(cache_key("k").len(), 64);
    }
}
