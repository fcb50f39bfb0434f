//! Fixed-step integration of the composed closed loop, run metrics and
//! parameter sweeps.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{controller_rhs, messages, DitherSpec};
use crate::error::{Error, Result};
use crate::estimator::{estimator_rhs, EstimatorState, EstimatorTuning};
use crate::flow::{full_info_rhs, PrimalDualState, StepSizes};
use crate::game::GameSpec;
use crate::plant::Plant;

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "GNE_ESC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullInfo,
    StaticZeroOrder,
    DynamicZeroOrder,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FullInfo => "full_info",
            Mode::StaticZeroOrder => "static_zero_order",
            Mode::DynamicZeroOrder => "dynamic_zero_order",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_info" => Ok(Mode::FullInfo),
            "static_zero_order" => Ok(Mode::StaticZeroOrder),
            "dynamic_zero_order" => Ok(Mode::DynamicZeroOrder),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected full_info, static_zero_order or dynamic_zero_order)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub step: f64,
    pub horizon: f64,
    pub sample_stride: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Invalid(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon >= self.step) {
            return Err(Error::Invalid(format!(
                "horizon {} must be at least one step {}",
                self.horizon, self.step
            )));
        }
        if self.sample_stride == 0 {
            return Err(Error::Invalid("sample_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NonFinite { t: f64 },
    LeftCompactSet { t: f64, detail: String },
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Completed => "ok",
            RunStatus::NonFinite { .. } => "non_finite",
            RunStatus::LeftCompactSet { .. } => "left_compact_set",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub status: RunStatus,
}

/// One classic Runge-Kutta step.
pub fn rk4_step<F>(f: &mut F, t: f64, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(x + &k3 * h))?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Fixed-step RK4 with a post-step hook. The hook may return a reason to stop
/// (e.g. leaving the operating region). Non-finite states stop the run with
/// the last finite sample kept.
pub fn integrate<F, P>(mut rhs: F, mut post: P, x0: DVector<f64>, cfg: &RunConfig) -> Result<Trajectory>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    P: FnMut(f64, &mut DVector<f64>) -> Option<String>,
{
    cfg.validate()?;
    let first = rhs(0.0, &x0)?;
    if !first.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("right-hand side at the initial state"));
    }
    let n = cfg.n_steps();
    let mut times = Vec::with_capacity(n / cfg.sample_stride + 2);
    let mut states = Vec::with_capacity(n / cfg.sample_stride + 2);
    times.push(0.0);
    states.push(x0.clone());
    let mut x = x0;
    let mut status = RunStatus::Completed;
    for k in 0..n {
        let t = k as f64 * cfg.step;
        let t_next = (k + 1) as f64 * cfg.step;
        let mut next = match rk4_step(&mut rhs, t, &x, cfg.step) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) | Err(Error::NonFiniteCost { .. }) => {
                status = RunStatus::NonFinite { t };
                break;
            }
            Err(e) => return Err(e),
        };
        if !next.iter().all(|v| v.is_finite()) {
            status = RunStatus::NonFinite { t: t_next };
            break;
        }
        if let Some(detail) = post(t_next, &mut next) {
            x = next;
            times.push(t_next);
            states.push(x.clone());
            status = RunStatus::LeftCompactSet { t: t_next, detail };
            break;
        }
        x = next;
        if (k + 1) % cfg.sample_stride == 0 || k + 1 == n {
            times.push(t_next);
            states.push(x.clone());
        }
    }
    Ok(Trajectory { times, states, status })
}

/// Offsets of the blocks in the flat closed-loop state
/// `[u, lambda, estimator_1, ..., estimator_N, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub m: usize,
    pub q: usize,
    pub estimators: Vec<(usize, usize)>,
    pub plant: Option<(usize, usize)>,
    pub len: usize,
}

/// Per-agent quantities recomputed at a sample for tracing.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub du: DVector<f64>,
    pub dlambda: DVector<f64>,
    pub outputs: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Controller, estimators and (optionally) plants composed into one system.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub mode: Mode,
    /// One game per wind interval (a single entry without a schedule).
    pub games: Vec<GameSpec>,
    pub steps: StepSizes,
    pub dither: DitherSpec,
    pub tuning: Vec<EstimatorTuning>,
    pub plant: Option<Plant>,
    pub epsilon: f64,
}

impl ClosedLoop {
    pub fn new(
        mode: Mode,
        games: Vec<GameSpec>,
        steps: StepSizes,
        dither: DitherSpec,
        tuning: Vec<EstimatorTuning>,
        plant: Option<Plant>,
        epsilon: f64,
    ) -> Result<Self> {
        let game = games.first().ok_or_else(|| Error::Invalid("closed loop needs a game".into()))?;
        let n = game.n_agents();
        if mode != Mode::FullInfo {
            if dither.n_agents() != n || tuning.len() != n {
                return Err(Error::Dimension {
                    what: "dither/estimator agents",
                    expected: n,
                    got: dither.n_agents().min(tuning.len()),
                });
            }
            for i in 0..n {
                if dither.base_frequencies[i].len() != game.dims()[i] {
                    return Err(Error::Invalid(format!("agent {i} needs one dither channel per decision")));
                }
                if tuning[i].param_dim() != game.dims()[i] + 1 {
                    return Err(Error::Invalid(format!("agent {i} estimator has the wrong parameter size")));
                }
            }
        }
        if mode == Mode::DynamicZeroOrder {
            let p = plant
                .as_ref()
                .ok_or_else(|| Error::Invalid("dynamic mode requires a plant".into()))?;
            if p.decision_dim() != game.dim() {
                return Err(Error::Dimension {
                    what: "plant inputs",
                    expected: game.dim(),
                    got: p.decision_dim(),
                });
            }
            if !(epsilon > 0.0) {
                return Err(Error::Invalid("epsilon must be positive".into()));
            }
        }
        Ok(Self {
            mode,
            games,
            steps,
            dither,
            tuning,
            plant,
            epsilon,
        })
    }

    pub fn layout(&self) -> Layout {
        let g = &self.games[0];
        let (m, q) = (g.dim(), g.n_coupling());
        let mut off = m + q;
        let mut estimators = Vec::new();
        if self.mode != Mode::FullInfo {
            for t in &self.tuning {
                let len = EstimatorState::flat_len(t.param_dim());
                estimators.push((off, len));
                off += len;
            }
        }
        let plant = match (&self.plant, self.mode) {
            (Some(p), Mode::DynamicZeroOrder) => {
                let r = (off, p.state_dim());
                off += p.state_dim();
                Some(r)
            }
            _ => None,
        };
        Layout {
            m,
            q,
            estimators,
            plant,
            len: off,
        }
    }

    pub fn game_at(&self, t: f64) -> &GameSpec {
        let k = self.plant.as_ref().map_or(0, |p| p.wind_interval(t));
        &self.games[k.min(self.games.len() - 1)]
    }

    /// Measured cost outputs: `J_i(u)` for static agents, `y_i(x)` for plants.
    fn outputs(&self, t: f64, w: &DVector<f64>, lay: &Layout) -> Result<Vec<f64>> {
        match (self.mode, lay.plant) {
            (Mode::DynamicZeroOrder, Some((off, len))) => {
                let x = w.rows(off, len).into_owned();
                self.plant.as_ref().expect("plant present").cost_output(t, &x)
            }
            _ => {
                let g = self.game_at(t);
                let u = w.rows(0, lay.m).into_owned();
                (0..g.n_agents()).map(|i| g.cost(i, &u)).collect()
            }
        }
    }

    /// Assembles the initial flat state. Estimators start from the first
    /// measured output.
    pub fn initial_state(
        &self,
        u0: &DVector<f64>,
        lambda0: &DVector<f64>,
        x0: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let lay = self.layout();
        if u0.len() != lay.m || lambda0.len() != lay.q {
            return Err(Error::Dimension {
                what: "initial primal-dual state",
                expected: lay.m + lay.q,
                got: u0.len() + lambda0.len(),
            });
        }
        let mut w = DVector::zeros(lay.len);
        w.rows_mut(0, lay.m).copy_from(u0);
        w.rows_mut(lay.m, lay.q).copy_from(lambda0);
        if let Some((off, len)) = lay.plant {
            let x = match x0 {
                Some(x) => x.clone(),
                None => self.plant.as_ref().expect("plant present").steady_state(u0),
            };
            if x.len() != len {
                return Err(Error::Dimension {
                    what: "initial plant state",
                    expected: len,
                    got: x.len(),
                });
            }
            w.rows_mut(off, len).copy_from(&x);
        }
        if !lay.estimators.is_empty() {
            let y0 = self.outputs(0.0, &w, &lay)?;
            for (i, &(off, len)) in lay.estimators.iter().enumerate() {
                EstimatorState::initial(&self.tuning[i], y0[i]).write_flat(&mut w.as_mut_slice()[off..off + len]);
            }
        }
        Ok(w)
    }

    pub fn estimator(&self, w: &DVector<f64>, i: usize) -> EstimatorState {
        let (off, len) = self.layout().estimators[i];
        EstimatorState::read_flat(self.tuning[i].param_dim(), &w.as_slice()[off..off + len])
    }

    /// Full evaluation of the closed loop at `(t, w)`, in the order dither,
    /// agents, coordinator, estimators, plants.
    pub fn evaluate(&self, t: f64, w: &DVector<f64>) -> Result<(DVector<f64>, Evaluation)> {
        let lay = self.layout();
        let game = self.game_at(t);
        let state = PrimalDualState::new(w.rows(0, lay.m).into_owned(), w.rows(lay.m, lay.q).into_owned());
        let mut dw = DVector::zeros(lay.len);
        if self.mode == Mode::FullInfo {
            let (du, dl) = full_info_rhs(game, &self.steps, &state)?;
            dw.rows_mut(0, lay.m).copy_from(&du);
            dw.rows_mut(lay.m, lay.q).copy_from(&dl);
            return Ok((
                dw,
                Evaluation {
                    du,
                    dlambda: dl,
                    outputs: Vec::new(),
                    errors: Vec::new(),
                },
            ));
        }
        let ests: Vec<EstimatorState> = (0..game.n_agents()).map(|i| self.estimator(w, i)).collect();
        let mut theta1 = DVector::zeros(lay.m);
        for (i, est) in ests.iter().enumerate() {
            theta1.rows_mut(game.offset(i), game.dims()[i]).copy_from(&est.theta1());
        }
        let (du, dl) = controller_rhs(game, &self.steps, &self.dither, &state, &theta1, t)?;
        dw.rows_mut(0, lay.m).copy_from(&du);
        dw.rows_mut(lay.m, lay.q).copy_from(&dl);

        let outputs = self.outputs(t, w, &lay)?;
        let mut errors = Vec::with_capacity(ests.len());
        for (i, est) in ests.iter().enumerate() {
            let e = outputs[i] - est.l_hat;
            errors.push(e);
            let d = estimator_rhs(est, &self.tuning[i], &game.block(i, &du), e)?;
            let (off, len) = lay.estimators[i];
            d.write_flat(&mut dw.as_mut_slice()[off..off + len]);
        }
        if let Some((off, len)) = lay.plant {
            let x = w.rows(off, len).into_owned();
            let fx = self.plant.as_ref().expect("plant present").vector_field(&x, &state.u) / self.epsilon;
            dw.rows_mut(off, len).copy_from(&fx);
        }
        Ok((
            dw,
            Evaluation {
                du,
                dlambda: dl,
                outputs,
                errors,
            },
        ))
    }

    pub fn rhs(&self, t: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
        let (dw, _) = self.evaluate(t, w)?;
        if dw.iter().all(|v| v.is_finite()) {
            Ok(dw)
        } else {
            Err(Error::NonFinite("closed-loop right-hand side"))
        }
    }

    /// Clamps `theta_hat` into `Theta` and symmetrizes `Sigma`; reports a
    /// plant that left its compact operating region.
    pub fn post_step(&self, w: &mut DVector<f64>) -> Option<String> {
        let lay = self.layout();
        for (i, &(off, len)) in lay.estimators.iter().enumerate() {
            let slice = &mut w.as_mut_slice()[off..off + len];
            let mut est = EstimatorState::read_flat(self.tuning[i].param_dim(), slice);
            est.post_step(&self.tuning[i]);
            est.write_flat(slice);
        }
        match (lay.plant, &self.plant) {
            (Some((off, len)), Some(p)) => p.compact_violation(&w.rows(off, len).into_owned()),
            _ => None,
        }
    }

    pub fn simulate(&self, w0: DVector<f64>, cfg: &RunConfig) -> Result<Trajectory> {
        if self.mode == Mode::DynamicZeroOrder && cfg.step > self.epsilon / 10.0 {
            log::warn!(
                "step {} exceeds epsilon/10 = {}; the fast subsystem may be under-resolved",
                cfg.step,
                self.epsilon / 10.0
            );
        }
        integrate(|t, w| self.rhs(t, w), |_, w| self.post_step(w), w0, cfg)
    }

    /// Fraction of tail samples in which the projected target `u + du` of
    /// `agent` sits on a face of its local set.
    pub fn saturation_fraction(&self, traj: &Trajectory, agent: usize) -> Result<f64> {
        let (Some(&t0), Some(&t1)) = (traj.times.first(), traj.times.last()) else {
            return Err(Error::Invalid("empty trajectory".into()));
        };
        let k0 = tail_start(&traj.times, t0, t1, TAIL_FRACTION);
        let mut hits = 0usize;
        for k in k0..traj.times.len() {
            let (t, w) = (traj.times[k], &traj.states[k]);
            let game = self.game_at(t);
            let (_, ev) = self.evaluate(t, w)?;
            let m = game.dim();
            let target = game.block(agent, &(w.rows(0, m).into_owned() + &ev.du));
            if game.local_sets()[agent].on_boundary(&target, 1e-9) {
                hits += 1;
            }
        }
        Ok(hits as f64 / (traj.times.len() - k0) as f64)
    }

    pub fn u_path(&self, traj: &Trajectory) -> Vec<DVector<f64>> {
        let m = self.layout().m;
        traj.states.iter().map(|w| w.rows(0, m).into_owned()).collect()
    }
}

/// Summary of one run against the reference equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Distance of the tail-averaged decision from `u*`.
    pub dist_to_vgne: f64,
    pub dist_per_agent: Vec<f64>,
    /// First time after which the decision stays in the `eps`-ball for one
    /// sustain window; `None` if it never does.
    pub entry_time: Option<f64>,
    pub entry_time_per_agent: Vec<Option<f64>>,
    /// `max (A u - b)_+` over the tail.
    pub max_violation: f64,
    pub tail_mean: Vec<f64>,
    pub status: String,
}

/// Fraction of the horizon used for tail averages.
pub const TAIL_FRACTION: f64 = 0.1;

fn tail_start(times: &[f64], from: f64, to: f64, fraction: f64) -> usize {
    let cut = to - fraction * (to - from);
    times.iter().position(|&t| t >= cut).unwrap_or(times.len().saturating_sub(1))
}

fn entry_time<D: Fn(usize) -> f64>(times: &[f64], dist: D, eps: f64, sustain: f64) -> Option<f64> {
    let end = *times.last()?;
    let mut start: Option<usize> = None;
    for k in 0..times.len() {
        if dist(k) <= eps {
            let s = *start.get_or_insert(k);
            if times[k] - times[s] >= sustain {
                return Some(times[s]);
            }
        } else {
            start = None;
        }
    }
    match start {
        Some(s) if sustain.is_infinite() || end - times[s] >= sustain => Some(times[s]),
        Some(s) if s == 0 => Some(times[0]),
        _ => None,
    }
}

/// Tail-averaged distance, sustained ball entry and tail coupling violation.
pub fn run_metrics(
    times: &[f64],
    u_path: &[DVector<f64>],
    game: &GameSpec,
    u_star: &DVector<f64>,
    eps_ball: f64,
    sustain: f64,
    status: &RunStatus,
) -> Result<SweepResult> {
    if times.is_empty() || times.len() != u_path.len() {
        return Err(Error::Invalid("metrics need a nonempty aligned trajectory".into()));
    }
    let t0 = times[0];
    let t1 = *times.last().expect("nonempty");
    let k0 = tail_start(times, t0, t1, TAIL_FRACTION);
    let tail = &u_path[k0..];
    let mean = tail.iter().fold(DVector::zeros(u_star.len()), |acc, u| acc + u) / tail.len() as f64;
    let gap = &mean - u_star;
    let dist_per_agent = (0..game.n_agents()).map(|i| game.block(i, &gap).norm()).collect();
    let max_violation = tail.iter().map(|u| game.coupling_violation(u)).fold(0.0, f64::max);
    let sustain = if sustain.is_finite() { sustain } else { 0.0 };
    let entry = entry_time(times, |k| (&u_path[k] - u_star).norm(), eps_ball, sustain);
    let entry_per_agent = (0..game.n_agents())
        .map(|i| {
            entry_time(
                times,
                |k| game.block(i, &(&u_path[k] - u_star)).norm(),
                eps_ball,
                sustain,
            )
        })
        .collect();
    Ok(SweepResult {
        dist_to_vgne: gap.norm(),
        dist_per_agent,
        entry_time: entry,
        entry_time_per_agent: entry_per_agent,
        max_violation,
        tail_mean: mean.as_slice().to_vec(),
        status: status.label().to_string(),
    })
}

/// Tail-averaged value of a scalar signal over `[from, to)`.
pub fn tail_average(times: &[f64], values: &[f64], from: f64, to: f64, fraction: f64) -> Option<f64> {
    let cut = to - fraction * (to - from);
    let picked: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= cut && **t < to)
        .map(|(_, v)| *v)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

/// Named axes of a Cartesian sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<(String, Vec<f64>)>,
}

impl SweepGrid {
    pub fn new(axes: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Invalid("sweep grid needs nonempty axes".into()));
        }
        Ok(Self { axes })
    }

    /// Cells in row-major order (last axis fastest).
    pub fn cells(&self) -> Vec<Vec<(String, f64)>> {
        let mut cells = vec![Vec::new()];
        for (name, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((name.clone(), *v));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: Vec<(String, f64)>,
    pub result: std::result::Result<SweepResult, String>,
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|n| *n > 0)
}

/// Runs every cell independently; a failing cell is recorded and the sweep continues.
pub fn sweep<F>(grid: &SweepGrid, run_cell: F) -> Result<Vec<SweepRow>>
where
    F: Fn(&[(String, f64)]) -> Result<SweepResult> + Sync,
{
    let cells = grid.cells();
    let work = || {
        cells
            .par_iter()
            .map(|cell| SweepRow {
                cell: cell.clone(),
                result: run_cell(cell).map_err(|e| e.to_string()),
            })
            .collect::<Vec<_>>()
    };
    let rows = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "inf".to_string(), |x| x.to_string())
}

/// `cell_axes...,dist_to_vgne,entry_time,max_violation,status`.
pub fn write_sweep_csv<W: Write>(out: W, grid: &SweepGrid, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = grid.axes.iter().map(|(n, _)| n.clone()).collect();
    header.extend(["dist_to_vgne", "entry_time", "max_violation", "status"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec: Vec<String> = row.cell.iter().map(|(_, v)| v.to_string()).collect();
        match &row.result {
            Ok(r) => rec.extend([
                r.dist_to_vgne.to_string(),
                fmt_opt(r.entry_time),
                r.max_violation.to_string(),
                r.status.clone(),
            ]),
            Err(e) => rec.extend(["nan".into(), "inf".into(), "nan".into(), format!("failed: {e}")]),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean distance and mean entry time per value of each axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Marginal {
    pub axis: String,
    pub value: f64,
    pub mean_dist: f64,
    /// `None` when some cell at this value never entered the ball.
    pub mean_entry: Option<f64>,
    pub cells: usize,
}

pub fn marginals(grid: &SweepGrid, rows: &[SweepRow]) -> Vec<Marginal> {
    let mut out = Vec::new();
    for (a, (name, values)) in grid.axes.iter().enumerate() {
        for &v in values {
            let picked: Vec<&SweepResult> = rows
                .iter()
                .filter(|r| r.cell[a].1 == v)
                .filter_map(|r| r.result.as_ref().ok())
                .collect();
            if picked.is_empty() {
                continue;
            }
            let n = picked.len() as f64;
            let entries: Option<Vec<f64>> = picked.iter().map(|r| r.entry_time).collect();
            out.push(Marginal {
                axis: name.clone(),
                value: v,
                mean_dist: picked.iter().map(|r| r.dist_to_vgne).sum::<f64>() / n,
                mean_entry: entries.map(|e| e.iter().sum::<f64>() / n),
                cells: picked.len(),
            });
        }
    }
    out
}

pub fn write_marginals_csv<W: Write>(out: W, marginals: &[Marginal]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["axis", "value", "mean_dist_to_vgne", "mean_entry_time", "cells"])
        .map_err(csv_err)?;
    for m in marginals {
        w.write_record([
            m.axis.clone(),
            m.value.to_string(),
            m.mean_dist.to_string(),
            fmt_opt(m.mean_entry),
            m.cells.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Options for trajectory CSV output.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TraceOptions {
    pub wide: bool,
    pub estimator: bool,
    pub messages: bool,
}

/// Writes a trajectory in long form `t,agent,var,value` (agent 0 is the
/// coordinator) or wide form `t,u_1..,lambda_1..[,x_1..]`.
pub fn write_trajectory_csv<W: Write>(
    out: W,
    cl: &ClosedLoop,
    traj: &Trajectory,
    opts: TraceOptions,
) -> Result<()> {
    let lay = cl.layout();
    let game = &cl.games[0];
    let mut w = csv::Writer::from_writer(out);
    if opts.wide {
        let mut header = vec!["t".to_string()];
        header.extend((1..=lay.m).map(|k| format!("u_{k}")));
        header.extend((1..=lay.q).map(|k| format!("lambda_{k}")));
        if let Some((_, len)) = lay.plant {
            header.extend((1..=len).map(|k| format!("x_{k}")));
        }
        w.write_record(&header).map_err(csv_err)?;
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let mut rec = vec![t.to_string()];
            rec.extend(s.rows(0, lay.m + lay.q).iter().map(|v| v.to_string()));
            if let Some((off, len)) = lay.plant {
                rec.extend(s.rows(off, len).iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        return Ok(());
    }
    w.write_record(["t", "agent", "var", "value"]).map_err(csv_err)?;
    let per_agent_state = cl.plant.as_ref().map(|p| p.state_dim() / p.n_agents());
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let ts = t.to_string();
        let mut row = |agent: usize, var: String, value: f64| {
            w.write_record([ts.as_str(), &agent.to_string(), &var, &value.to_string()])
        };
        for i in 0..game.n_agents() {
            for k in 0..game.dims()[i] {
                row(i + 1, format!("u[{k}]"), s[game.offset(i) + k]).map_err(csv_err)?;
            }
        }
        for r in 0..lay.q {
            row(0, format!("lambda[{r}]"), s[lay.m + r]).map_err(csv_err)?;
        }
        if let (Some((off, _)), Some(per)) = (lay.plant, per_agent_state) {
            for i in 0..game.n_agents() {
                for k in 0..per {
                    row(i + 1, format!("x[{k}]"), s[off + i * per + k]).map_err(csv_err)?;
                }
            }
        }
        if opts.estimator || opts.messages {
            let (_, ev) = cl.evaluate(*t, s)?;
            if opts.estimator && !lay.estimators.is_empty() {
                for i in 0..game.n_agents() {
                    let est = cl.estimator(s, i);
                    for (k, v) in est.theta_hat.iter().enumerate() {
                        row(i + 1, format!("theta_hat[{k}]"), *v).map_err(csv_err)?;
                    }
                    row(i + 1, "l_hat".into(), est.l_hat).map_err(csv_err)?;
                    row(i + 1, "eta_hat".into(), est.eta_hat).map_err(csv_err)?;
                    row(i + 1, "e".into(), ev.errors[i]).map_err(csv_err)?;
                    row(i + 1, "sigma_min_eig".into(), est.sigma_min_eigenvalue()).map_err(csv_err)?;
                }
            }
            if opts.messages {
                let u = s.rows(0, lay.m).into_owned();
                for msg in messages(game, &u, &ev.du) {
                    for (k, v) in msg.u.iter().enumerate() {
                        row(msg.agent + 1, format!("msg_u[{k}]"), *v).map_err(csv_err)?;
                    }
                    for (k, v) in msg.u_dot.iter().enumerate() {
                        row(msg.agent + 1, format!("msg_u_dot[{k}]"), *v).map_err(csv_err)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::two_agent_quadratic;
    use nalgebra::dvector;

    fn cfg(step: f64, horizon: f64) -> RunConfig {
        RunConfig {
            step,
            horizon,
            sample_stride: 1,
            seed: 0,
            mode: Mode::FullInfo,
        }
    }

    #[test]
    fn exponential_decay() {
        let traj = integrate(|_, x| Ok(-x), |_, _| None, dvector![1.0], &cfg(0.01, 1.0)).unwrap();
        let last = traj.states.last().unwrap()[0];
        assert!((last - (-1f64).exp()).abs() < 1e-9);
        assert_eq!(traj.status, RunStatus::Completed);
        assert!((traj.times.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_constant() {
        let x0 = dvector![1.0, -2.0];
        let traj = integrate(|_, x: &DVector<f64>| Ok(x * 0.0), |_, _| None, x0.clone(), &cfg(0.1, 1.0)).unwrap();
        assert!(traj.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn non_finite_aborts_with_last_finite() {
        let traj = integrate(|_, x: &DVector<f64>| Ok(x.map(|v| v * v * 1e3)), |_, _| None, dvector![1.0], &cfg(0.1, 10.0)).unwrap();
        assert!(matches!(traj.status, RunStatus::NonFinite { .. }));
        assert!(traj.states.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn sampling_stride() {
        let mut c = cfg(0.1, 1.0);
        c.sample_stride = 3;
        let traj = integrate(|_, x| Ok(-x), |_, _| None, dvector![1.0], &c).unwrap();
        assert_eq!(traj.times.len(), 1 + 3 + 1);
    }

    #[test]
    fn metrics_at_equilibrium() {
        let g = two_agent_quadratic();
        let u = dvector![0.5, 0.5];
        let times: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let path = vec![u.clone(); 100];
        let r = run_metrics(&times, &path, &g, &u, 0.1, 5.0, &RunStatus::Completed).unwrap();
        assert_eq!(r.dist_to_vgne, 0.0);
        assert_eq!(r.entry_time, Some(0.0));
        assert_eq!(r.max_violation, 0.0);
    }

    #[test]
    fn tail_average_of_sinusoid() {
        let g = two_agent_quadratic();
        let u = dvector![0.5, 0.5];
        let a = 0.3;
        let times: Vec<f64> = (0..=20000).map(|k| k as f64 * 0.01).collect();
        let path: Vec<DVector<f64>> = times
            .iter()
            .map(|t| &u + dvector![a * (2.0 * t).sin(), a * (3.0 * t).sin()])
            .collect();
        let r = run_metrics(&times, &path, &g, &u, 1.0, 1.0, &RunStatus::Completed).unwrap();
        assert!(r.dist_to_vgne < a / 10.0, "{}", r.dist_to_vgne);
    }

    #[test]
    fn never_entering_is_a_sentinel() {
        let g = two_agent_quadratic();
        let times = vec![0.0, 1.0, 2.0];
        let path = vec![dvector![5.0, 5.0]; 3];
        let r = run_metrics(&times, &path, &g, &dvector![0.5, 0.5], 0.1, 1.0, &RunStatus::Completed).unwrap();
        assert_eq!(r.entry_time, None);
    }

    #[test]
    fn grid_cells_and_singleton() {
        let g = SweepGrid::new(vec![("a".into(), vec![1.0, 2.0, 3.0]), ("b".into(), vec![0.5, 1.0, 2.0])]).unwrap();
        assert_eq!(g.cells().len(), 9);
        let one = SweepGrid::new(vec![("a".into(), vec![1.0])]).unwrap();
        assert_eq!(one.cells(), vec![vec![("a".to_string(), 1.0)]]);
        assert!(SweepGrid::new(vec![("a".into(), vec![])]).is_err());
    }

    #[test]
    fn failing_cell_does_not_stop_sweep() {
        let g = SweepGrid::new(vec![("a".into(), vec![1.0, 2.0])]).unwrap();
        let rows = sweep(&g, |cell| {
            if cell[0].1 > 1.5 {
                Err(Error::Invalid("boom".into()))
            } else {
                Ok(SweepResult {
                    dist_to_vgne: cell[0].1,
                    dist_per_agent: vec![],
                    entry_time: None,
                    entry_time_per_agent: vec![],
                    max_violation: 0.0,
                    tail_mean: vec![],
                    status: "ok".into(),
                })
            }
        })
        .unwrap();
        assert!(rows[0].result.is_ok());
        assert!(rows[1].result.is_err());
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &g, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,dist_to_vgne,entry_time,max_violation,status\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
