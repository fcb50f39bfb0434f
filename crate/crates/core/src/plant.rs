//! Fast agent dynamics `eps * dx/dt = f(x, u)` and the two bundled plants:
//! unicycles with setpoint regulators and wind turbines with induction lag.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{CostModel, GameSpec, QuadraticCosts};
use crate::harness::rk4_step;
use crate::sets::ConvexSet;

/// Physical state of all agents plus the time-scale separation constant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: DVector<f64>,
    pub epsilon: f64,
}

impl PlantState {
    pub fn new(x: DVector<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { x, epsilon })
    }
}

/// `A u <= b` rows for `|u_i^k - u_j^k| <= b` over all pairs `i < j` and
/// every coordinate `k` (agents share dimension `m_i`).
pub fn pairwise_coupling(n_agents: usize, m_i: usize, bound: f64) -> (DMatrix<f64>, DVector<f64>) {
    let pairs: Vec<(usize, usize)> = (0..n_agents)
        .flat_map(|i| (i + 1..n_agents).map(move |j| (i, j)))
        .collect();
    coupling_from_pairs(&pairs, n_agents, m_i, bound)
}

fn coupling_from_pairs(
    pairs: &[(usize, usize)],
    n_agents: usize,
    m_i: usize,
    bound: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let rows = 2 * m_i * pairs.len();
    let mut a = DMatrix::zeros(rows, n_agents * m_i);
    let mut r = 0;
    for &(i, j) in pairs {
        for k in 0..m_i {
            for sign in [1.0, -1.0] {
                a[(r, i * m_i + k)] = sign;
                a[(r, j * m_i + k)] = -sign;
                r += 1;
            }
        }
    }
    (a, DVector::from_element(rows, bound))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnicycleParams {
    pub k1: Vec<f64>,
    pub k2: Vec<f64>,
    pub sources: Vec<[f64; 2]>,
    pub weight: f64,
    pub coupling_b: f64,
    /// `[x_min, x_max, y_min, y_max]`.
    pub rect: [f64; 4],
}

impl UnicycleParams {
    pub fn new(
        k1: Vec<f64>,
        k2: Vec<f64>,
        sources: Vec<[f64; 2]>,
        weight: f64,
        coupling_b: f64,
        rect: [f64; 4],
    ) -> Result<Self> {
        let p = Self {
            k1,
            k2,
            sources,
            weight,
            coupling_b,
            rect,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sources.len();
        if self.k1.len() != n || self.k2.len() != n {
            return Err(Error::Dimension {
                what: "unicycle gains",
                expected: n,
                got: self.k1.len().min(self.k2.len()),
            });
        }
        if self.k1.iter().chain(&self.k2).any(|k| !(*k > 0.0)) {
            return Err(Error::Invalid("unicycle gains must be positive".into()));
        }
        if !(self.weight > 0.0 && self.coupling_b > 0.0) {
            return Err(Error::Invalid("connectivity weight and bound must be positive".into()));
        }
        let [x0, x1, y0, y1] = self.rect;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::Invalid("traversal rectangle is empty".into()));
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.sources.len()
    }

    pub fn local_set(&self) -> ConvexSet {
        let [x0, x1, y0, y1] = self.rect;
        ConvexSet::new_box(DVector::from_vec(vec![x0, y0]), DVector::from_vec(vec![x1, y1]))
            .expect("validated rectangle")
    }

    /// Game seen through the steady-state map, `J_i(u) = y_i(pi(u))`.
    pub fn game(&self) -> Result<GameSpec> {
        let n = self.n_agents();
        let (a, b) = pairwise_coupling(n, 2, self.coupling_b);
        GameSpec::new(
            vec![2; n],
            Arc::new(QuadraticCosts::connectivity(&self.sources, self.weight)),
            vec![self.local_set(); n],
            a,
            b,
        )
    }

    fn flow(&self, i: usize, s: &[f64], u: &[f64]) -> [f64; 3] {
        let (dx, dy) = (s[0] - u[0], s[1] - u[1]);
        let range = dx.hypot(dy);
        let phi = s[2];
        let bearing = dy.atan2(dx);
        let v = -self.k1[i] * range * phi.cos();
        [
            v * (phi + bearing).cos(),
            v * (phi + bearing).sin(),
            -self.k2[i] * phi,
        ]
    }

    fn output(&self, x: &DVector<f64>) -> Vec<f64> {
        let n = self.n_agents();
        let pos = |i: usize| [x[3 * i], x[3 * i + 1]];
        (0..n)
            .map(|i| {
                let r = pos(i);
                let s = self.sources[i];
                let mut y = (r[0] - s[0]).powi(2) + (r[1] - s[1]).powi(2);
                for j in (0..n).filter(|&j| j != i) {
                    let q = pos(j);
                    y += self.weight * ((r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2));
                }
                y
            })
            .collect()
    }

    /// Positions within the rectangle enlarged by 10% of its extent.
    fn compact_violation(&self, x: &DVector<f64>) -> Option<String> {
        let [x0, x1, y0, y1] = self.rect;
        let (mx, my) = (0.1 * (x1 - x0), 0.1 * (y1 - y0));
        for i in 0..self.n_agents() {
            let (px, py, phi) = (x[3 * i], x[3 * i + 1], x[3 * i + 2]);
            if !(px >= x0 - mx && px <= x1 + mx && py >= y0 - my && py <= y1 + my && phi.abs() <= PI) {
                return Some(format!("unicycle {} left its operating region at ({px:.3}, {py:.3}, {phi:.3})", i + 1));
            }
        }
        None
    }
}

/// Wind blowing along `direction` from time `start` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindInterval {
    pub start: f64,
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFarmParams {
    pub rows: usize,
    pub cols: usize,
    /// Distance between neighbouring turbines, both along rows and columns.
    pub spacing: f64,
    pub rotor_radius: f64,
    pub wake_decay: f64,
    pub rho_air: f64,
    pub u_inf: f64,
    pub tau: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub coupling_b: f64,
    /// Multiplies power in watts, e.g. `1e-6` for megawatts.
    pub power_scale: f64,
    pub schedule: Vec<WindInterval>,
    /// Optional fixed wake matrix (entry `(j, i)` is the influence of `j` on `i`),
    /// used for every direction instead of the geometric kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wake_override: Option<Vec<Vec<f64>>>,
}

impl WindFarmParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.rows == 0 || self.cols == 0 {
            errs.push("wind farm needs at least one row and one column".to_string());
        }
        if !(self.a_min > 0.0 && self.a_min < self.a_max && self.a_max <= 1.0 / 3.0 + 1e-12) {
            errs.push(format!(
                "induction bounds must satisfy 0 < a_min < a_max <= 1/3, got [{}, {}]",
                self.a_min, self.a_max
            ));
        }
        for (name, v) in [
            ("spacing", self.spacing),
            ("rotor_radius", self.rotor_radius),
            ("rho_air", self.rho_air),
            ("u_inf", self.u_inf),
            ("tau", self.tau),
            ("coupling_b", self.coupling_b),
            ("power_scale", self.power_scale),
        ] {
            if !(v > 0.0) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.wake_decay < 0.0 {
            errs.push("wake_decay must be nonnegative".into());
        }
        if self.schedule.is_empty() {
            errs.push("wind schedule is empty".into());
        } else if self.schedule[0].start != 0.0 {
            errs.push("wind schedule must start at t = 0".into());
        }
        if self.schedule.windows(2).any(|w| w[1].start <= w[0].start) {
            errs.push("wind schedule start times must increase".into());
        }
        if self.schedule.iter().any(|w| w.direction[0].hypot(w.direction[1]) == 0.0) {
            errs.push("wind direction must be nonzero".into());
        }
        if let Some(w) = &self.wake_override {
            let n = self.rows * self.cols;
            if w.len() != n || w.iter().any(|r| r.len() != n) {
                errs.push(format!("wake matrix must be {n} x {n}"));
            } else if w.iter().flatten().any(|c| !(*c >= 0.0)) {
                errs.push("wake matrix entries must be nonnegative".into());
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        for k in 0..self.schedule.len() {
            let wake = self.wake_matrix(k);
            let farm = WindFarmCosts::new(self, wake);
            let worst = DVector::from_element(self.n_agents(), self.a_max);
            farm.speeds(&worst)?;
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.rows * self.cols
    }

    /// Turbine `i = col + row * cols` sits at `(col * s, -row * s)`.
    pub fn position(&self, i: usize) -> [f64; 2] {
        let (r, c) = (i / self.cols, i % self.cols);
        [c as f64 * self.spacing, -(r as f64) * self.spacing]
    }

    pub fn interval_at(&self, t: f64) -> usize {
        self.schedule.iter().rposition(|w| w.start <= t).unwrap_or(0)
    }

    /// Jensen top-hat kernel `c_ji = (r0 / (r0 + k d))^2` for turbines `i`
    /// inside the expanding wake of `j` at downstream distance `d`.
    pub fn wake_matrix(&self, interval: usize) -> DMatrix<f64> {
        let n = self.n_agents();
        if let Some(w) = &self.wake_override {
            return DMatrix::from_fn(n, n, |j, i| w[j][i]);
        }
        let dir = self.schedule[interval].direction;
        let norm = dir[0].hypot(dir[1]);
        let (vx, vy) = (dir[0] / norm, dir[1] / norm);
        let r0 = self.rotor_radius;
        DMatrix::from_fn(n, n, |j, i| {
            if i == j {
                return 0.0;
            }
            let (pj, pi) = (self.position(j), self.position(i));
            let (dx, dy) = (pi[0] - pj[0], pi[1] - pj[1]);
            let along = dx * vx + dy * vy;
            if along <= 0.0 {
                return 0.0;
            }
            let lateral = (dx * vy - dy * vx).abs();
            let radius = r0 + self.wake_decay * along;
            if lateral < radius {
                (r0 / radius).powi(2)
            } else {
                0.0
            }
        })
    }

    /// `|a_i - a_j| <= b` for turbines in successive rows.
    pub fn coupling(&self) -> (DMatrix<f64>, DVector<f64>) {
        let c = self.cols;
        let pairs: Vec<(usize, usize)> = (0..self.rows.saturating_sub(1))
            .flat_map(|r| (0..c).flat_map(move |p| (0..c).map(move |q| (r * c + p, (r + 1) * c + q))))
            .collect();
        coupling_from_pairs(&pairs, self.n_agents(), 1, self.coupling_b)
    }

    pub fn costs(&self, interval: usize) -> WindFarmCosts {
        WindFarmCosts::new(self, self.wake_matrix(interval))
    }

    pub fn game(&self, interval: usize) -> Result<GameSpec> {
        let n = self.n_agents();
        let (a, b) = self.coupling();
        GameSpec::new(
            vec![1; n],
            Arc::new(self.costs(interval)),
            vec![ConvexSet::uniform_box(1, self.a_min, self.a_max)?; n],
            a,
            b,
        )
    }
}

/// Potential game where every turbine's cost is the negated farm power.
#[derive(Debug, Clone)]
pub struct WindFarmCosts {
    wake: DMatrix<f64>,
    n: usize,
    u_inf: f64,
    /// `0.5 * rho * A_rot * power_scale`.
    coeff: f64,
}

fn power_coefficient(a: f64) -> f64 {
    a * (1.0 - a).powi(2)
}

fn power_coefficient_slope(a: f64) -> f64 {
    (1.0 - a) * (1.0 - 3.0 * a)
}

impl WindFarmCosts {
    pub fn new(p: &WindFarmParams, wake: DMatrix<f64>) -> Self {
        let area = PI * p.rotor_radius * p.rotor_radius;
        Self {
            n: wake.nrows(),
            wake,
            u_inf: p.u_inf,
            coeff: 0.5 * p.rho_air * area * p.power_scale,
        }
    }

    pub fn wake(&self) -> &DMatrix<f64> {
        &self.wake
    }

    fn deficits(&self, a: &DVector<f64>) -> Vec<f64> {
        (0..self.n)
            .map(|k| {
                (0..self.n)
                    .map(|j| (a[j] * self.wake[(j, k)]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Effective wind speed at every turbine.
    pub fn speeds(&self, a: &DVector<f64>) -> Result<Vec<f64>> {
        self.deficits(a)
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                let v = self.u_inf * (1.0 - 2.0 * s);
                if v < 0.0 {
                    Err(Error::UnphysicalWake { turbine: k, speed: v })
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    /// Total farm power in scaled units.
    pub fn power(&self, a: &DVector<f64>) -> Result<f64> {
        let v = self.speeds(a)?;
        Ok(self.coeff * (0..self.n).map(|k| power_coefficient(a[k]) * v[k].powi(3)).sum::<f64>())
    }

    pub fn power_gradient(&self, a: &DVector<f64>) -> DVector<f64> {
        let s = self.deficits(a);
        let v: Vec<f64> = s.iter().map(|sk| self.u_inf * (1.0 - 2.0 * sk)).collect();
        DVector::from_fn(self.n, |i, _| {
            let mut g = power_coefficient_slope(a[i]) * v[i].powi(3);
            for k in 0..self.n {
                if s[k] > 0.0 {
                    let dv = -2.0 * self.u_inf * a[i] * self.wake[(i, k)].powi(2) / s[k];
                    g += power_coefficient(a[k]) * 3.0 * v[k].powi(2) * dv;
                }
            }
            self.coeff * g
        })
    }
}

impl CostModel for WindFarmCosts {
    fn n_agents(&self) -> usize {
        self.n
    }

    fn cost(&self, _agent: usize, u: &DVector<f64>) -> f64 {
        self.power(u).map(|p| -p).unwrap_or(f64::NAN)
    }

    fn full_gradient(&self, _agent: usize, u: &DVector<f64>) -> Option<DVector<f64>> {
        Some(-self.power_gradient(u))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    Unicycle(UnicycleParams),
    WindFarm(WindFarmParams),
}

/// Exponential envelope fitted to `||x(t) - pi(u)||` under a frozen input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    /// Fitted rate `r` in `||x - pi|| ~ C exp(-r t)`; `None` when the
    /// trajectory started at the steady state.
    pub rate: Option<f64>,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub diverged: bool,
}

impl Plant {
    pub fn n_agents(&self) -> usize {
        match self {
            Plant::Unicycle(p) => p.n_agents(),
            Plant::WindFarm(p) => p.n_agents(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Unicycle(p) => 3 * p.n_agents(),
            Plant::WindFarm(p) => p.n_agents(),
        }
    }

    pub fn decision_dim(&self) -> usize {
        match self {
            Plant::Unicycle(p) => 2 * p.n_agents(),
            Plant::WindFarm(p) => p.n_agents(),
        }
    }

    /// Steady-state map `pi(u)`.
    pub fn steady_state(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Unicycle(p) => {
                let mut x = DVector::zeros(3 * p.n_agents());
                for i in 0..p.n_agents() {
                    x[3 * i] = u[2 * i];
                    x[3 * i + 1] = u[2 * i + 1];
                }
                x
            }
            Plant::WindFarm(_) => u.clone(),
        }
    }

    /// Unscaled vector field `f(x, u)`.
    pub fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            Plant::Unicycle(p) => {
                let mut dx = DVector::zeros(x.len());
                for i in 0..p.n_agents() {
                    let f = p.flow(i, &x.as_slice()[3 * i..3 * i + 3], &u.as_slice()[2 * i..2 * i + 2]);
                    dx.rows_mut(3 * i, 3).copy_from_slice(&f);
                }
                dx
            }
            Plant::WindFarm(p) => (u - x) / p.tau,
        }
    }

    /// `dx/dt = f(x, u) / eps`.
    pub fn plant_rhs(&self, state: &PlantState, u: &DVector<f64>) -> DVector<f64> {
        self.vector_field(&state.x, u) / state.epsilon
    }

    pub fn wind_interval(&self, t: f64) -> usize {
        match self {
            Plant::WindFarm(p) => p.interval_at(t),
            Plant::Unicycle(_) => 0,
        }
    }

    pub fn cost_output(&self, t: f64, x: &DVector<f64>) -> Result<Vec<f64>> {
        match self {
            Plant::Unicycle(p) => Ok(p.output(x)),
            Plant::WindFarm(p) => {
                let power = p.costs(p.interval_at(t)).power(x)?;
                Ok(vec![-power; p.n_agents()])
            }
        }
    }

    /// Game on the steady-state manifold during wind interval `interval`.
    pub fn game(&self, interval: usize) -> Result<GameSpec> {
        match self {
            Plant::Unicycle(p) => p.game(),
            Plant::WindFarm(p) => p.game(interval),
        }
    }

    pub fn n_intervals(&self) -> usize {
        match self {
            Plant::Unicycle(_) => 1,
            Plant::WindFarm(p) => p.schedule.len(),
        }
    }

    pub fn steady_state_residual(&self, u: &DVector<f64>) -> f64 {
        self.vector_field(&self.steady_state(u), u).norm()
    }

    /// Description of the first agent outside its compact operating region.
    pub fn compact_violation(&self, x: &DVector<f64>) -> Option<String> {
        match self {
            Plant::Unicycle(p) => p.compact_violation(x),
            Plant::WindFarm(_) => x
                .iter()
                .position(|a| !(0.0..=0.5).contains(a))
                .map(|i| format!("turbine {} induction {:.4} left [0, 0.5]", i + 1, x[i])),
        }
    }

    /// Simulates the plant with `u` frozen at `u_bar` and fits an exponential
    /// envelope to the distance from the steady state.
    pub fn frozen_input_decay_probe(
        &self,
        u_bar: &DVector<f64>,
        x0: &PlantState,
        horizon: f64,
        step: f64,
    ) -> Result<DecayReport> {
        if !(step > 0.0 && horizon >= step) {
            return Err(Error::Invalid("decay probe needs 0 < step <= horizon".into()));
        }
        let target = self.steady_state(u_bar);
        let gap = |x: &DVector<f64>| (x - &target).norm();
        let initial_gap = gap(&x0.x);
        let n = (horizon / step).round() as usize;
        let mut x = x0.x.clone();
        let mut samples = vec![(0.0, initial_gap)];
        let mut diverged = false;
        for k in 0..n {
            let t = k as f64 * step;
            x = rk4_step(
                &mut |_, s: &DVector<f64>| Ok(self.vector_field(s, u_bar) / x0.epsilon),
                t,
                &x,
                step,
            )?;
            let g = gap(&x);
            if !g.is_finite() || g > 10.0 * initial_gap.max(f64::MIN_POSITIVE) {
                diverged = true;
                break;
            }
            samples.push(((k + 1) as f64 * step, g));
        }
        let final_gap = samples.last().map_or(initial_gap, |s| s.1);
        if initial_gap == 0.0 || diverged {
            return Ok(DecayReport {
                rate: None,
                initial_gap,
                final_gap,
                diverged,
            });
        }
        let floor = initial_gap * 1e-10;
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|(_, g)| *g > floor)
            .map(|&(t, g)| (t, g.ln()))
            .collect();
        let rate = if pts.len() >= 2 {
            let n = pts.len() as f64;
            let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
            Some(-sxy / sxx)
        } else {
            None
        };
        Ok(DecayReport {
            rate,
            initial_gap,
            final_gap,
            diverged,
        })
    }
}

#[cfg(test)]
pub(crate) fn test_wind_farm() -> WindFarmParams {
    WindFarmParams {
        rows: 3,
        cols: 3,
        spacing: 400.0,
        rotor_radius: 40.0,
        wake_decay: 0.075,
        rho_air: 1.225,
        u_inf: 8.0,
        tau: 10.0,
        a_min: 0.1,
        a_max: 1.0 / 3.0,
        coupling_b: 0.03,
        power_scale: 1e-6,
        schedule: vec![
            WindInterval { start: 0.0, direction: [2.0, -1.0] },
            WindInterval { start: 300.0, direction: [0.0, -1.0] },
            WindInterval { start: 600.0, direction: [-1.0, -1.0] },
        ],
        wake_override: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn unicycles() -> UnicycleParams {
        UnicycleParams::new(
            vec![3.0; 4],
            vec![6.0; 4],
            vec![[-4.0, -8.0], [-12.0, -3.0], [1.0, 7.0], [16.0, 8.0]],
            0.04,
            14.0,
            [-16.0, 16.0, -6.0, 6.0],
        )
        .unwrap()
    }

    #[test]
    fn wind_farm_steady_state_and_lag() {
        let plant = Plant::WindFarm(test_wind_farm());
        let u = DVector::from_element(9, 0.3);
        assert_eq!(plant.vector_field(&u, &u), DVector::zeros(9));
        let mut x = DVector::from_element(9, 0.3);
        x[0] = 0.2;
        let f = plant.vector_field(&x, &u);
        assert!((f[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn single_turbine_greedy_power() {
        let mut p = test_wind_farm();
        p.rows = 1;
        p.cols = 1;
        let costs = p.costs(0);
        let a = dvector![1.0 / 3.0];
        let area = PI * 40.0 * 40.0;
        let expected = 0.5 * 1.225 * area * (4.0 / 27.0) * 512.0 * 1e-6;
        assert!((costs.power(&a).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn wind_farm_outputs_identical() {
        let plant = Plant::WindFarm(test_wind_farm());
        let a = DVector::from_fn(9, |i, _| 0.1 + 0.02 * i as f64);
        let y = plant.cost_output(0.0, &a).unwrap();
        assert!(y.iter().all(|v| *v == y[0]));
    }

    #[test]
    fn every_direction_has_wakes() {
        let p = test_wind_farm();
        for k in 0..3 {
            let w = p.wake_matrix(k);
            assert!(w.iter().any(|c| *c > 0.0), "direction {k}");
            assert!((0..9).all(|i| w[(i, i)] == 0.0));
        }
    }

    #[test]
    fn overwaked_matrix_rejected() {
        let mut p = test_wind_farm();
        p.wake_override = Some(vec![vec![3.0; 9]; 9]);
        assert!(p.validate().is_err());
        assert!(test_wind_farm().validate().is_ok());
    }

    #[test]
    fn wind_gradient_matches_differences() {
        let p = test_wind_farm();
        for k in 0..3 {
            let g = p.game(k).unwrap();
            let a = DVector::from_fn(9, |i, _| 0.12 + 0.023 * i as f64);
            let an = g.pseudo_gradient(&a).unwrap();
            let fd = g.pseudo_gradient_fd(&a).unwrap();
            assert!((&an - &fd).norm() <= 1e-6 * an.norm().max(1.0), "{an} {fd}");
        }
    }

    #[test]
    fn row_coupling_reproduces_inequalities() {
        let p = test_wind_farm();
        let (a, b) = p.coupling();
        assert_eq!(a.nrows(), 36);
        let u = DVector::from_fn(9, |i, _| 0.1 + 0.011 * ((i * 7) % 9) as f64);
        let rows = &a * &u - &b;
        let mut r = 0;
        for row in 0..2 {
            for pcol in 0..3 {
                for qcol in 0..3 {
                    let (i, j) = (row * 3 + pcol, (row + 1) * 3 + qcol);
                    assert!((rows[r] - (u[i] - u[j] - 0.03)).abs() < 1e-15);
                    assert!((rows[r + 1] - (u[j] - u[i] - 0.03)).abs() < 1e-15);
                    r += 2;
                }
            }
        }
    }

    #[test]
    fn connectivity_coupling_rows() {
        let (a, b) = pairwise_coupling(4, 2, 14.0);
        assert_eq!(a.nrows(), 24);
        let u = dvector![0.0, 0.0, 15.0, 0.0, 0.0, -3.0, 1.0, 1.0];
        let worst = (&a * &u - &b).max();
        assert!((worst - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unicycle_at_setpoint_is_still() {
        let plant = Plant::Unicycle(unicycles());
        let u = dvector![-4.0, -5.0, -12.0, -3.0, 1.0, 6.0, 14.0, 6.0];
        let x = plant.steady_state(&u);
        assert_eq!(plant.vector_field(&x, &u), DVector::zeros(12));
        assert_eq!(plant.steady_state_residual(&u), 0.0);
    }

    #[test]
    fn unicycle_output_at_source() {
        let mut p = unicycles();
        p.sources.truncate(1);
        p.k1.truncate(1);
        p.k2.truncate(1);
        let plant = Plant::Unicycle(p);
        let y = plant.cost_output(0.0, &dvector![-4.0, -8.0, 0.3]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn coincident_robots_no_coupling_cost() {
        let p = unicycles();
        let x = DVector::from_vec(vec![1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
        let y = p.output(&x);
        assert_eq!(y[0], (1.0f64 + 4.0).powi(2) + 10f64.powi(2));
    }

    #[test]
    fn wind_farm_decay_rate_is_exact() {
        let plant = Plant::WindFarm(test_wind_farm());
        let u = DVector::from_element(9, 0.25);
        let x0 = PlantState::new(DVector::from_element(9, 1.0 / 3.0), 0.005).unwrap();
        let rep = plant.frozen_input_decay_probe(&u, &x0, 0.5, 1e-4).unwrap();
        let rate = rep.rate.unwrap();
        assert!((rate - 1.0 / (10.0 * 0.005)).abs() < 1e-6 * 20.0, "{rate}");
    }

    #[test]
    fn unicycle_decays_from_offset() {
        let plant = Plant::Unicycle(unicycles());
        let u = dvector![-4.0, -5.0, -12.0, -3.0, 1.0, 6.0, 14.0, 6.0];
        let mut x = plant.steady_state(&u);
        for (i, phi) in [1.2, -1.0, 0.5, -1.5].iter().enumerate() {
            x[3 * i] += 1.0;
            x[3 * i + 1] -= 0.5;
            x[3 * i + 2] = *phi;
        }
        let rep = plant
            .frozen_input_decay_probe(&u, &PlantState::new(x, 0.1).unwrap(), 3.0, 1e-3)
            .unwrap();
        assert!(!rep.diverged);
        assert!(rep.rate.unwrap() > 0.0);
        assert!(rep.final_gap < 1e-6 * rep.initial_gap);
    }

    #[test]
    fn constant_at_steady_state() {
        let plant = Plant::Unicycle(unicycles());
        let u = dvector![-4.0, -5.0, -12.0, -3.0, 1.0, 6.0, 14.0, 6.0];
        let x0 = PlantState::new(plant.steady_state(&u), 0.1).unwrap();
        let rep = plant.frozen_input_decay_probe(&u, &x0, 1.0, 1e-2).unwrap();
        assert_eq!(rep.rate, None);
        assert_eq!(rep.final_gap, 0.0);
    }
}
