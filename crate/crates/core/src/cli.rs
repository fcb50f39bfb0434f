//! Command-line front end: `run`, `sweep` and `verify`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid scenario or arguments.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::pe_metric;
use crate::flow::{lemma1_probe, operator_matrices, step_size_certificate, PrimalDualState};
use crate::game::GameSpec;
use crate::harness::{
    marginals, run_metrics, sweep, write_marginals_csv, write_sweep_csv, write_trajectory_csv, Mode,
    RunStatus, SweepGrid, SweepResult, TraceOptions, Trajectory,
};
use crate::oracle::{cached_solve, solve_extragradient, solve_quadratic_kkt, ExtragradientOptions, OracleSolution};
use crate::scenario::{Built, Overrides, Provenance, Scenario, ScenarioFile};
use crate::sets::{project, ConvexSet};

#[derive(Debug, Parser)]
#[command(name = "gne-esc", version, about = "Generalized Nash equilibrium learning with extremum seeking")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one scenario and write trajectory, metrics and manifest.
    Run(RunArgs),
    /// Run a scenario over a grid of parameter values.
    Sweep(SweepArgs),
    /// Check the standing assumptions of a scenario.
    Verify(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    pub scenario: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long = "k-omega")]
    pub k_omega: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir", default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Add estimator states to the trajectory CSV.
    #[arg(long = "trace-estimator")]
    pub trace_estimator: bool,
    /// Add agent and coordinator messages to the trajectory CSV.
    #[arg(long = "trace-messages")]
    pub trace_messages: bool,
    /// One column per state instead of `t,agent,var,value` rows.
    #[arg(long)]
    pub wide: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// TOML file with a `[grid]` table of axis = [values].
    pub grid: PathBuf,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            step: self.step,
            horizon: self.horizon,
            amplitude: self.amplitude,
            k_omega: self.k_omega,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }

    fn override_notes(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut note = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("{k}={val}"));
            }
        };
        note("mode", self.mode.map(|m| m.as_str().to_string()));
        note("step", self.step.map(|x| x.to_string()));
        note("horizon", self.horizon.map(|x| x.to_string()));
        note("amplitude", self.amplitude.map(|x| x.to_string()));
        note("k_omega", self.k_omega.map(|x| x.to_string()));
        note("epsilon", self.epsilon.map(|x| x.to_string()));
        note("seed", self.seed.map(|x| x.to_string()));
        v
    }
}

/// A failure tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        match self.error {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Tail power of one wind interval against the two reference setpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub greedy: f64,
    pub algorithm: f64,
    pub oracle: f64,
    /// `(algorithm - greedy) / (oracle - greedy)`.
    pub gap_closure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    pub u_star: Vec<f64>,
    pub lambda_star: Vec<f64>,
    pub oracle_residual: f64,
    pub metrics: SweepResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<PowerSummary>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub mode: Mode,
    pub status: String,
    /// Metrics of the last interval (the whole run for a single game).
    pub summary: SweepResult,
    /// Fraction of tail samples in which each agent's projected target sits on
    /// a face of its local set.
    pub saturation: Vec<f64>,
    pub intervals: Vec<IntervalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_power: Option<f64>,
}

pub struct RunOutcome {
    pub built: Built,
    pub trajectory: Trajectory,
    pub metrics: RunMetrics,
}

fn solve_game(game: &GameSpec) -> Result<OracleSolution> {
    if game.costs().as_quadratic().is_some() {
        match solve_quadratic_kkt(game) {
            Ok(sol) => return Ok(sol),
            Err(e) => log::info!("active-set oracle declined ({e}); using extragradient"),
        }
    }
    solve_extragradient(game, None, ExtragradientOptions::default())
}

/// Reference equilibrium of every interval, through the cache when given.
pub fn oracles(sc: &Scenario, cache: Option<&Path>) -> Result<Vec<OracleSolution>> {
    sc.games()?
        .iter()
        .enumerate()
        .map(|(k, g)| match cache {
            Some(path) => cached_solve(path, &sc.oracle_key(k)?, || solve_game(g)),
            None => solve_game(g),
        })
        .collect()
}

/// Decision or plant state whose power is reported for a wind farm.
fn power_state(built: &Built, w: &DVector<f64>) -> DVector<f64> {
    let lay = built.closed_loop.layout();
    match (built.closed_loop.mode, lay.plant) {
        (Mode::DynamicZeroOrder, Some((off, len))) => w.rows(off, len).into_owned(),
        _ => w.rows(0, lay.m).into_owned(),
    }
}

/// Metrics of a finished trajectory.
pub fn evaluate(
    sc: &Scenario,
    built: &Built,
    traj: &Trajectory,
    refs: &[OracleSolution],
) -> Result<RunMetrics> {
    let cl = &built.closed_loop;
    let u_path = cl.u_path(traj);
    let sustain = cl.dither.slowest_period();
    let wind = sc.wind_farm();
    let mut intervals = Vec::new();
    for (k, &(start, end)) in built.intervals.iter().enumerate() {
        let idx: Vec<usize> = (0..traj.times.len())
            .filter(|&j| traj.times[j] >= start && (traj.times[j] < end || k + 1 == built.intervals.len()))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let times: Vec<f64> = idx.iter().map(|&j| traj.times[j]).collect();
        let path: Vec<DVector<f64>> = idx.iter().map(|&j| u_path[j].clone()).collect();
        let r = &refs[k];
        let metrics = run_metrics(
            &times,
            &path,
            &cl.games[k],
            &r.u(),
            sc.run.eps_ball,
            sustain,
            &traj.status,
        )?;
        let power = match &wind {
            Some(p) => {
                let costs = p.costs(k);
                let series = idx
                    .iter()
                    .map(|&j| costs.power(&power_state(built, &traj.states[j])))
                    .collect::<Result<Vec<f64>>>()?;
                let algorithm = crate::harness::tail_average(&times, &series, start, end, crate::harness::TAIL_FRACTION)
                    .or_else(|| series.last().copied())
                    .unwrap_or(f64::NAN);
                let greedy = costs.power(&DVector::from_element(p.n_agents(), 1.0 / 3.0))?;
                let oracle = costs.power(&r.u())?;
                Some(PowerSummary {
                    greedy,
                    algorithm,
                    oracle,
                    gap_closure: (algorithm - greedy) / (oracle - greedy),
                })
            }
            None => None,
        };
        intervals.push(IntervalMetrics {
            index: k,
            start,
            end,
            u_star: r.u.clone(),
            lambda_star: r.lambda.clone(),
            oracle_residual: r.residual,
            metrics,
            power,
        });
    }
    let summary = intervals
        .last()
        .map(|i| i.metrics.clone())
        .ok_or_else(|| Error::Invalid("trajectory covers no interval".into()))?;
    let saturation = (0..sc.n_agents())
        .map(|i| cl.saturation_fraction(traj, i))
        .collect::<Result<Vec<_>>>()?;
    let final_power = match (&wind, traj.states.last()) {
        (Some(p), Some(w)) => {
            let t = *traj.times.last().expect("nonempty");
            Some(p.costs(p.interval_at(t)).power(&power_state(built, w))?)
        }
        _ => None,
    };
    Ok(RunMetrics {
        name: sc.scenario.name.clone(),
        mode: sc.scenario.mode,
        status: traj.status.label().to_string(),
        summary,
        saturation,
        intervals,
        final_power,
    })
}

/// Build, solve the reference, integrate and evaluate one scenario.
pub fn execute(
    sc: &Scenario,
    refs: Option<&[OracleSolution]>,
    cache: Option<&Path>,
) -> std::result::Result<RunOutcome, StageError> {
    let built = sc.build().stage("build")?;
    let owned;
    let refs = match refs {
        Some(r) => r,
        None => {
            owned = oracles(sc, cache).stage("oracle")?;
            &owned
        }
    };
    let trajectory = built
        .closed_loop
        .simulate(built.w0.clone(), &built.run)
        .stage("integration")?;
    let metrics = evaluate(sc, &built, &trajectory, refs).stage("metrics")?;
    Ok(RunOutcome {
        built,
        trajectory,
        metrics,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_power_csv(path: &Path, rows: &[(String, &IntervalMetrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut put = |rec: Vec<String>| w.write_record(rec).map_err(|e| Error::Io(std::io::Error::other(e)));
    put(
        ["cell", "interval", "start", "end", "p_greedy", "p_algorithm", "p_oracle", "gap_closure"]
            .map(String::from)
            .to_vec(),
    )?;
    for (cell, iv) in rows {
        if let Some(p) = &iv.power {
            put(vec![
                cell.clone(),
                iv.index.to_string(),
                iv.start.to_string(),
                iv.end.to_string(),
                p.greedy.to_string(),
                p.algorithm.to_string(),
                p.oracle.to_string(),
                p.gap_closure.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.json` and `manifest.toml` (and `power.csv` for a wind farm).
fn write_run_summary(dir: &Path, sc: &Scenario, prov: &Provenance, metrics: &RunMetrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("metrics.json"), metrics)?;
    fs::write(dir.join("manifest.toml"), sc.to_manifest(prov)?)?;
    if metrics.intervals.iter().any(|i| i.power.is_some()) {
        let rows: Vec<_> = metrics.intervals.iter().map(|i| (String::new(), i)).collect();
        write_power_csv(&dir.join("power.csv"), &rows)?;
    }
    Ok(())
}

fn load(args: &CommonArgs) -> std::result::Result<(ScenarioFile, Scenario), StageError> {
    let mut raw = ScenarioFile::load(&args.scenario).stage("scenario")?;
    raw.apply(&args.overrides());
    let sc = raw.resolve().stage("scenario")?;
    Ok((raw, sc))
}

fn cache_path(out_dir: &Path) -> PathBuf {
    out_dir.join("oracle_cache.json")
}

pub fn cmd_run(args: &RunArgs) -> std::result::Result<RunMetrics, StageError> {
    let c = &args.common;
    let (_, sc) = load(c)?;
    fs::create_dir_all(&c.out_dir).map_err(Error::from).stage("output")?;
    let out = execute(&sc, None, Some(&cache_path(&c.out_dir)))?;
    let prov = Provenance::new(&c.scenario.display().to_string(), c.override_notes());
    write_run_summary(&c.out_dir, &sc, &prov, &out.metrics).stage("output")?;
    let file = File::create(c.out_dir.join("trajectory.csv")).map_err(Error::from).stage("output")?;
    write_trajectory_csv(
        BufWriter::new(file),
        &out.built.closed_loop,
        &out.trajectory,
        TraceOptions {
            wide: args.wide,
            estimator: args.trace_estimator,
            messages: args.trace_messages,
        },
    )
    .stage("output")?;
    Ok(out.metrics)
}

#[derive(Debug, Deserialize)]
struct GridFile {
    grid: toml::Table,
}

pub fn load_grid(path: &Path) -> Result<SweepGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
    let file: GridFile = toml::from_str(&text).map_err(|e| Error::Config(vec![format!("grid: {}", e.message())]))?;
    let mut axes = Vec::new();
    let mut errs = Vec::new();
    for (name, v) in file.grid {
        let values: Option<Vec<f64>> = v.as_array().and_then(|a| {
            a.iter()
                .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                .collect()
        });
        match values {
            Some(vs) if !vs.is_empty() => axes.push((name, vs)),
            _ => errs.push(format!("grid.{name} must be a nonempty list of numbers")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    SweepGrid::new(axes)
}

fn cell_label(cell: &[(String, f64)]) -> String {
    cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

pub fn cmd_sweep(args: &SweepArgs) -> std::result::Result<Vec<crate::harness::SweepRow>, StageError> {
    let c = &args.common;
    let (raw, sc) = load(c)?;
    let grid = load_grid(&args.grid).stage("grid")?;
    // Validate every cell before spending time on any of them.
    let mut scenarios = Vec::new();
    let mut errs = Vec::new();
    for cell in grid.cells() {
        let mut r = raw.clone();
        for (axis, v) in &cell {
            if let Err(Error::Config(e)) = r.set_axis(axis, *v) {
                errs.extend(e);
            }
        }
        match r.resolve() {
            Ok(s) => scenarios.push((cell, s)),
            Err(Error::Config(e)) => errs.extend(e.into_iter().map(|m| format!("[{}] {m}", cell_label(&cell)))),
            Err(e) => errs.push(e.to_string()),
        }
    }
    if !errs.is_empty() {
        errs.dedup();
        return Err(StageError {
            stage: "grid",
            error: Error::Config(errs),
        });
    }
    fs::create_dir_all(&c.out_dir).map_err(Error::from).stage("output")?;
    // Grid axes never touch the game, so one reference serves every cell.
    let refs = oracles(&sc, Some(&cache_path(&c.out_dir))).stage("oracle")?;
    let cells_dir = c.out_dir.join("cells");
    let by_label: std::collections::HashMap<String, &Scenario> =
        scenarios.iter().map(|(cell, s)| (cell_label(cell), s)).collect();
    let power_rows = std::sync::Mutex::new(Vec::new());
    let rows = sweep(&grid, |cell| {
        let label = cell_label(cell);
        let s = by_label[&label];
        let out = execute(s, Some(&refs), None).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut notes = c.override_notes();
        notes.extend(cell.iter().map(|(k, v)| format!("{k}={v}")));
        let prov = Provenance::new(&c.scenario.display().to_string(), notes);
        write_run_summary(&cells_dir.join(&label), s, &prov, &out.metrics)?;
        power_rows
            .lock()
            .expect("power rows")
            .extend(out.metrics.intervals.iter().cloned().map(|i| (label.clone(), i)));
        Ok(out.metrics.summary)
    })
    .stage("sweep")?;
    let io = |e: std::io::Error| StageError {
        stage: "output",
        error: Error::Io(e),
    };
    write_sweep_csv(File::create(c.out_dir.join("sweep.csv")).map_err(io)?, &grid, &rows).stage("output")?;
    write_marginals_csv(
        File::create(c.out_dir.join("marginals.csv")).map_err(io)?,
        &marginals(&grid, &rows),
    )
    .stage("output")?;
    let mut power = power_rows.into_inner().expect("power rows");
    if power.iter().any(|(_, i)| i.power.is_some()) {
        power.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.index.cmp(&b.1.index)));
        let refs: Vec<_> = power.iter().map(|(l, i)| (l.clone(), i)).collect();
        write_power_csv(&c.out_dir.join("power.csv"), &refs).stage("output")?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
}

fn check(name: &str, verdict: Verdict, detail: String) -> Check {
    Check {
        name: name.to_string(),
        verdict,
        detail,
    }
}

fn sample_in(set: &ConvexSet, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    match set {
        ConvexSet::Box { lower, upper } => Ok(DVector::from_fn(lower.len(), |k, _| {
            let (lo, hi) = (lower[k].max(-1e3), upper[k].min(1e3));
            if lo < hi {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        })),
        ConvexSet::Ball { center, radius } => {
            let v = DVector::from_fn(center.len(), |_, _| rng.gen_range(-1.0..1.0)) * *radius + center;
            project(set, &v)
        }
        ConvexSet::Halfspaces { .. } => {
            let v = DVector::from_fn(set.dim(), |_, _| rng.gen_range(-10.0..10.0));
            project(set, &v)
        }
    }
}

fn sample_decision(game: &GameSpec, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(game.dim());
    for (i, set) in game.local_sets().iter().enumerate() {
        u.rows_mut(game.offset(i), game.dims()[i]).copy_from(&sample_in(set, rng)?);
    }
    Ok(u)
}

/// Diagnostic probes on the scenario's games, plant and a short pilot run.
pub fn verify(sc: &Scenario) -> Result<Vec<Check>> {
    let games = sc.games()?;
    let steps = sc.steps()?;
    let refs = oracles(sc, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.run.seed);
    let mut out = Vec::new();
    for (k, game) in games.iter().enumerate() {
        let tag = |s: &str| if games.len() > 1 { format!("{s}[{k}]") } else { s.to_string() };
        let pairs = (0..200)
            .map(|_| Ok((sample_decision(game, &mut rng)?, sample_decision(game, &mut rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let est = game.estimate_monotonicity(&pairs)?;
        out.push(check(
            &tag("monotonicity"),
            if est.mu_hat > 0.0 { Verdict::Pass } else { Verdict::Fail },
            format!("mu = {:.4e}, ell = {:.4e} over {} pairs", est.mu_hat, est.ell_hat, est.pairs_used),
        ));
        let cert = step_size_certificate(game, &steps, est.mu_hat, est.ell_hat.max(est.mu_hat));
        out.push(check(
            &tag("step_size_certificate"),
            if cert.pass { Verdict::Pass } else { Verdict::Fail },
            match &cert.note {
                Some(n) => n.clone(),
                None => format!(
                    "beta = {:.4e}, sigma_min = {:.4e}, sigma_max = {:.4e}",
                    cert.beta, cert.sigma_min, cert.sigma_max
                ),
            },
        ));
        let ops = operator_matrices(game, &steps);
        out.push(check(
            &tag("matrix_identity"),
            if ops.identity_error <= 1e-12 { Verdict::Pass } else { Verdict::Fail },
            format!("max deviation {:.3e}", ops.identity_error),
        ));
        let fixed = PrimalDualState::new(refs[k].u(), refs[k].lambda()).stacked();
        if cert.pass {
            let mut worst = f64::INFINITY;
            for _ in 0..1000 {
                let u = sample_decision(game, &mut rng)?;
                let l = DVector::from_fn(game.n_coupling(), |_, _| rng.gen_range(0.0..10.0));
                let x = PrimalDualState::new(u, l).stacked();
                worst = worst.min(lemma1_probe(game, &steps, &x, &fixed)?);
            }
            out.push(check(
                &tag("lemma1_probe"),
                if worst >= -1e-9 { Verdict::Pass } else { Verdict::Fail },
                format!("min slack {worst:.3e} over 1000 points"),
            ));
        } else {
            out.push(check(
                &tag("lemma1_probe"),
                Verdict::Warn,
                "step sizes outside the certified range; probe not meaningful".into(),
            ));
        }
    }
    match sc.plant()? {
        Some(plant) => {
            let mut worst: f64 = 0.0;
            for r in &refs {
                worst = worst.max(plant.steady_state_residual(&r.u()));
            }
            worst = worst.max(plant.steady_state_residual(&DVector::from_column_slice(&sc.initial.u0)));
            out.push(check(
                "steady_state_residual",
                if worst <= 1e-9 { Verdict::Pass } else { Verdict::Fail },
                format!("max |f(pi(u), u)| = {worst:.3e} at u0 and u*"),
            ));
        }
        None => out.push(check("steady_state_residual", Verdict::Skip, "no plant".into())),
    }
    out.push(pilot_pe(sc)?);
    Ok(out)
}

fn pilot_pe(sc: &Scenario) -> Result<Check> {
    let Some(d) = &sc.dither else {
        return Ok(check("pe_metric", Verdict::Skip, "no dither configured".into()));
    };
    let mut pilot = sc.clone();
    if pilot.scenario.mode == Mode::FullInfo {
        pilot.scenario.mode = Mode::StaticZeroOrder;
    }
    let built = pilot.build()?;
    let period = built.closed_loop.dither.slowest_period();
    if !period.is_finite() || d.amplitude.iter().all(|a| *a == 0.0) {
        return Ok(check("pe_metric", Verdict::Warn, "alpha = 0: dither has no excitation".into()));
    }
    let window = 2.0 * period;
    let mut run = built.run.clone();
    run.horizon = (10.0 * window).min(sc.run.horizon).max(2.0 * window);
    run.sample_stride = ((period / 50.0 / run.step).floor() as usize).max(1);
    let traj = built.closed_loop.simulate(built.w0.clone(), &run)?;
    if traj.status != RunStatus::Completed {
        return Ok(check("pe_metric", Verdict::Fail, format!("pilot run stopped: {}", traj.status.label())));
    }
    // Skip the first window while the filters warm up.
    let k0 = traj.times.iter().position(|&t| t >= window).unwrap_or(0);
    let times = &traj.times[k0..];
    let mut alpha = f64::INFINITY;
    for i in 0..sc.n_agents() {
        let path: Vec<DVector<f64>> = traj.states[k0..].iter().map(|w| built.closed_loop.estimator(w, i).c).collect();
        alpha = alpha.min(pe_metric(times, &path, window)?);
    }
    Ok(check(
        "pe_metric",
        if alpha > 1e-9 { Verdict::Pass } else { Verdict::Warn },
        format!("min alpha {alpha:.3e} over windows of {window:.3}"),
    ))
}

pub fn cmd_verify(args: &CommonArgs) -> std::result::Result<Vec<Check>, StageError> {
    let (_, sc) = load(args)?;
    verify(&sc).stage("verify")
}

/// Parses arguments, dispatches and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|m| {
            println!(
                "{}: status {}, dist_to_vgne {:.6e}, entry_time {}, max_violation {:.3e}",
                m.name,
                m.status,
                m.summary.dist_to_vgne,
                m.summary.entry_time.map_or("never".into(), |t| t.to_string()),
                m.summary.max_violation
            );
            for iv in &m.intervals {
                if let Some(p) = &iv.power {
                    println!(
                        "interval {} [{}, {}): greedy {:.6} algorithm {:.6} oracle {:.6} closure {:.3}",
                        iv.index, iv.start, iv.end, p.greedy, p.algorithm, p.oracle, p.gap_closure
                    );
                }
            }
            m.status == "ok"
        }),
        Command::Sweep(a) => cmd_sweep(a).map(|rows| {
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!("{} cells, {failed} failed", rows.len());
            for r in rows.iter().filter(|r| r.result.is_err()) {
                eprintln!("cell {}: {}", cell_label(&r.cell), r.result.as_ref().unwrap_err());
            }
            failed == 0
        }),
        Command::Verify(a) => cmd_verify(a).map(|checks| {
            for c in &checks {
                let v = format!("{:?}", c.verdict).to_uppercase();
                println!("{v:<5} {:<26} {}", c.name, c.detail);
            }
            true
        }),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
