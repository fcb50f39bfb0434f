//! Scenario files: a TOML document with `[scenario]`, `[game]`, `[algorithm]`,
//! `[estimator]`, `[dither]`, `[plant]`, `[run]` and `[initial]` tables.
//!
//! Raw files are parsed with every field optional, then resolved into a
//! [`Scenario`] in which every value is explicit. Resolution reports all
//! offending fields at once. A resolved scenario written back out (with an
//! extra `[provenance]` table) reloads to the same value.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::DitherSpec;
use crate::error::{Error, Result};
use crate::estimator::EstimatorTuning;
use crate::flow::StepSizes;
use crate::game::{GameSpec, QuadraticCosts};
use crate::harness::{ClosedLoop, Mode, RunConfig};
use crate::plant::{Plant, UnicycleParams, WindFarmParams, WindInterval};
use crate::sets::ConvexSet;

/// Scalar broadcast to every agent, or one value per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAgent {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerAgent {
    fn expand(&self, n: usize, field: &str, errs: &mut Vec<String>) -> Vec<f64> {
        match self {
            PerAgent::Scalar(v) => vec![*v; n],
            // n = 0 means the game itself failed to resolve.
            PerAgent::List(v) if v.len() == n || n == 0 => v.clone(),
            PerAgent::List(v) => {
                errs.push(format!("{field}: expected {n} entries, found {}", v.len()));
                vec![f64::NAN; n]
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    pub name: Option<String>,
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGame {
    pub kind: Option<String>,
    pub coupling_b: Option<PerAgent>,
    // quadratic
    pub targets: Option<Vec<f64>>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub coupling_a: Option<Vec<Vec<f64>>>,
    // connectivity
    pub sources: Option<Vec<[f64; 2]>>,
    pub weight: Option<f64>,
    pub rect: Option<[f64; 4]>,
    // wind farm
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub spacing: Option<f64>,
    pub rotor_radius: Option<f64>,
    pub wake_decay: Option<f64>,
    pub rho_air: Option<f64>,
    pub u_inf: Option<f64>,
    pub a_min: Option<f64>,
    pub a_max: Option<f64>,
    pub power_scale: Option<f64>,
    pub schedule: Option<Vec<WindInterval>>,
    pub wake_override: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAlgorithm {
    pub gamma: Option<PerAgent>,
    pub gamma0: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEstimator {
    pub k: Option<f64>,
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma0: Option<f64>,
    pub theta_bound: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDither {
    pub amplitude: Option<PerAgent>,
    pub frequencies: Option<Vec<Vec<f64>>>,
    pub frequency_range: Option<[f64; 2]>,
    pub k_omega: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPlant {
    pub kind: Option<String>,
    pub epsilon: Option<f64>,
    pub k1: Option<PerAgent>,
    pub k2: Option<PerAgent>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub sample_every: Option<f64>,
    pub seed: Option<u64>,
    pub eps_ball: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInitial {
    pub u0: Option<PerAgent>,
    pub lambda0: Option<PerAgent>,
    pub x0: Option<Vec<f64>>,
}

/// Scenario file as written, before defaults and validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub scenario: RawMeta,
    #[serde(default)]
    pub game: RawGame,
    #[serde(default)]
    pub algorithm: RawAlgorithm,
    #[serde(default)]
    pub estimator: RawEstimator,
    #[serde(default)]
    pub dither: RawDither,
    pub plant: Option<RawPlant>,
    #[serde(default)]
    pub run: RawRun,
    #[serde(default)]
    pub initial: RawInitial,
    pub provenance: Option<toml::Table>,
}

/// Command-line overrides, applied to the raw file before resolution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub step: Option<f64>,
    pub horizon: Option<f64>,
    pub amplitude: Option<f64>,
    pub k_omega: Option<f64>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.mode {
            self.scenario.mode = Some(m);
        }
        if let Some(v) = o.step {
            self.run.step = Some(v);
        }
        if let Some(v) = o.horizon {
            self.run.horizon = Some(v);
        }
        if let Some(v) = o.amplitude {
            self.dither.amplitude = Some(PerAgent::Scalar(v));
        }
        if let Some(v) = o.k_omega {
            self.dither.k_omega = Some(v);
        }
        if let Some(v) = o.epsilon {
            self.plant.get_or_insert_with(RawPlant::default).epsilon = Some(v);
        }
        if let Some(v) = o.seed {
            self.run.seed = Some(v);
        }
    }

    /// Sets one named sweep axis. Known axes: `amplitude`, `k_omega`,
    /// `epsilon`, `step`, `horizon`, `seed`, `gamma`, `gamma0`, `k`, `rho`, `sigma`.
    pub fn set_axis(&mut self, axis: &str, value: f64) -> Result<()> {
        match axis {
            "amplitude" => self.dither.amplitude = Some(PerAgent::Scalar(value)),
            "k_omega" => self.dither.k_omega = Some(value),
            "epsilon" => self.plant.get_or_insert_with(RawPlant::default).epsilon = Some(value),
            "step" => self.run.step = Some(value),
            "horizon" => self.run.horizon = Some(value),
            "seed" => self.run.seed = Some(value as u64),
            "gamma" => self.algorithm.gamma = Some(PerAgent::Scalar(value)),
            "gamma0" => self.algorithm.gamma0 = Some(value),
            "k" => self.estimator.k = Some(value),
            "rho" => self.estimator.rho = Some(value),
            "sigma" => self.estimator.sigma = Some(value),
            other => return Err(Error::Config(vec![format!("unknown sweep axis `{other}`")])),
        }
        Ok(())
    }

    /// Fills defaults and validates. Every problem found is reported.
    pub fn resolve(&self) -> Result<Scenario> {
        let mut errs = Vec::new();
        let name = self.scenario.name.clone().unwrap_or_else(|| "scenario".into());
        let mode = self.scenario.mode.unwrap_or(Mode::FullInfo);
        let game = resolve_game(&self.game, &mut errs);
        let n = game.as_ref().map_or(0, GameConfig::n_agents);
        let dims = game.as_ref().map_or(0, GameConfig::agent_dim);

        let algorithm = Algorithm {
            gamma: match &self.algorithm.gamma {
                Some(g) => g.expand(n, "algorithm.gamma", &mut errs),
                None => {
                    errs.push("algorithm.gamma is required".into());
                    Vec::new()
                }
            },
            gamma0: self.algorithm.gamma0.unwrap_or_else(|| {
                errs.push("algorithm.gamma0 is required".into());
                f64::NAN
            }),
        };
        for (i, g) in algorithm.gamma.iter().enumerate() {
            if !(*g > 0.0) {
                errs.push(format!("algorithm.gamma[{i}] must be positive"));
            }
        }
        if algorithm.gamma0.is_finite() && !(algorithm.gamma0 > 0.0) {
            errs.push("algorithm.gamma0 must be positive".into());
        }

        let e = &self.estimator;
        let estimator = Estimator {
            k: e.k.unwrap_or(100.0),
            rho: e.rho.unwrap_or(1.0),
            sigma: e.sigma.unwrap_or(1e-6),
            sigma0: e.sigma0.unwrap_or(0.1),
            theta_bound: e.theta_bound.unwrap_or(100.0),
        };
        for (field, v) in [
            ("estimator.k", estimator.k),
            ("estimator.rho", estimator.rho),
            ("estimator.sigma0", estimator.sigma0),
            ("estimator.theta_bound", estimator.theta_bound),
        ] {
            if !(v > 0.0) {
                errs.push(format!("{field} must be positive"));
            }
        }
        if !(estimator.sigma >= 0.0) {
            errs.push("estimator.sigma must be nonnegative".into());
        }

        let zero_order = mode != Mode::FullInfo;
        let seed = self.run.seed.unwrap_or(0);
        let dither = resolve_dither(&self.dither, n, dims, seed, zero_order, &mut errs);

        let plant = resolve_plant(self.plant.as_ref(), game.as_ref(), n, &mut errs);
        if mode == Mode::DynamicZeroOrder && plant.is_none() {
            errs.push("plant: dynamic_zero_order mode requires a [plant] table".into());
        }

        let step = self.run.step.unwrap_or_else(|| {
            errs.push("run.step is required".into());
            f64::NAN
        });
        let horizon = self.run.horizon.unwrap_or_else(|| {
            errs.push("run.horizon is required".into());
            f64::NAN
        });
        if step.is_finite() && !(step > 0.0) {
            errs.push("run.step must be positive".into());
        }
        if horizon.is_finite() && step.is_finite() && !(horizon >= step) {
            errs.push("run.horizon must be at least run.step".into());
        }
        let run = Run {
            step,
            horizon,
            sample_every: self.run.sample_every.unwrap_or_else(|| {
                if step > 0.0 {
                    step * (0.1 / step).round().max(1.0)
                } else {
                    f64::NAN
                }
            }),
            seed,
            eps_ball: self.run.eps_ball.unwrap_or(1.5),
        };
        if step > 0.0 && !(run.sample_every >= step) {
            errs.push("run.sample_every must be at least run.step".into());
        }
        if !(run.eps_ball > 0.0) {
            errs.push("run.eps_ball must be positive".into());
        }

        if game.is_none() {
            return Err(Error::Config(errs));
        }
        let m = n * dims;
        let q = game.as_ref().map_or(0, GameConfig::n_coupling);
        let initial = Initial {
            u0: match &self.initial.u0 {
                Some(PerAgent::Scalar(v)) => vec![*v; m],
                Some(PerAgent::List(v)) if v.len() == m => v.clone(),
                Some(PerAgent::List(v)) => {
                    errs.push(format!("initial.u0: expected {m} entries, found {}", v.len()));
                    Vec::new()
                }
                None => vec![0.0; m],
            },
            lambda0: match &self.initial.lambda0 {
                Some(PerAgent::Scalar(v)) => vec![*v; q],
                Some(PerAgent::List(v)) if v.len() == q => v.clone(),
                Some(PerAgent::List(v)) => {
                    errs.push(format!("initial.lambda0: expected {q} entries, found {}", v.len()));
                    Vec::new()
                }
                None => vec![0.0; q],
            },
            x0: self.initial.x0.clone(),
        };
        if initial.lambda0.iter().any(|l| *l < 0.0) {
            errs.push("initial.lambda0 must be nonnegative".into());
        }

        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Scenario {
            scenario: Meta { name, mode },
            game: game.expect("no errors"),
            algorithm,
            estimator,
            dither,
            plant,
            run,
            initial,
        })
    }
}

fn resolve_game(g: &RawGame, errs: &mut Vec<String>) -> Option<GameConfig> {
    macro_rules! need {
        ($field:ident) => {
            match g.$field.clone() {
                Some(v) => Some(v),
                None => {
                    errs.push(concat!("game.", stringify!($field), " is required").to_string());
                    None
                }
            }
        };
    }
    let kind = need!(kind)?;
    let b = need!(coupling_b);
    let out = match kind.as_str() {
        "quadratic" => {
            let targets = need!(targets);
            let a = need!(coupling_a);
            let (targets, a, b) = (targets?, a?, b?);
            let rows = a.len();
            let b = b.expand(rows, "game.coupling_b", errs);
            if a.iter().any(|r| r.len() != targets.len()) {
                errs.push(format!("game.coupling_a: every row needs {} columns", targets.len()));
            }
            let (lower, upper) = (g.lower.unwrap_or(-10.0), g.upper.unwrap_or(10.0));
            if !(lower <= upper) {
                errs.push("game.lower must not exceed game.upper".into());
            }
            GameConfig::Quadratic {
                targets,
                lower,
                upper,
                coupling_a: a,
                coupling_b: b,
            }
        }
        "connectivity" => {
            let sources = need!(sources);
            let weight = need!(weight);
            let rect = need!(rect);
            let b = match b? {
                PerAgent::Scalar(v) => v,
                PerAgent::List(_) => {
                    errs.push("game.coupling_b must be a scalar for connectivity".into());
                    return None;
                }
            };
            let (sources, weight, rect) = (sources?, weight?, rect?);
            if let Err(e) = UnicycleParams::new(vec![1.0; sources.len()], vec![1.0; sources.len()], sources.clone(), weight, b, rect) {
                errs.push(format!("game: {e}"));
            }
            GameConfig::Connectivity {
                sources,
                weight,
                rect,
                coupling_b: b,
            }
        }
        "wind_farm" => {
            let b = match b? {
                PerAgent::Scalar(v) => v,
                PerAgent::List(_) => {
                    errs.push("game.coupling_b must be a scalar for wind_farm".into());
                    return None;
                }
            };
            let (rows, cols, schedule) = (need!(rows), need!(cols), need!(schedule));
            let wf = WindFarmGame {
                rows: rows?,
                cols: cols?,
                spacing: g.spacing.unwrap_or(400.0),
                rotor_radius: g.rotor_radius.unwrap_or(40.0),
                wake_decay: g.wake_decay.unwrap_or(0.075),
                rho_air: g.rho_air.unwrap_or(1.225),
                u_inf: g.u_inf.unwrap_or(8.0),
                a_min: g.a_min.unwrap_or(0.1),
                a_max: g.a_max.unwrap_or(1.0 / 3.0),
                coupling_b: b,
                power_scale: g.power_scale.unwrap_or(1e-5),
                schedule: schedule?,
                wake_override: g.wake_override.clone(),
            };
            match wf.params(1.0).validate() {
                Ok(()) => {}
                Err(Error::Config(list)) => errs.extend(list.into_iter().map(|s| format!("game: {s}"))),
                Err(other) => errs.push(format!("game: {other}")),
            }
            GameConfig::WindFarm(wf)
        }
        other => {
            errs.push(format!(
                "game.kind `{other}` is not one of quadratic, connectivity, wind_farm"
            ));
            return None;
        }
    };
    Some(out)
}

fn resolve_dither(
    d: &RawDither,
    n: usize,
    dims: usize,
    seed: u64,
    required: bool,
    errs: &mut Vec<String>,
) -> Option<Dither> {
    let mut local = Vec::new();
    let amplitude = match &d.amplitude {
        Some(a) => a.expand(n, "dither.amplitude", &mut local),
        None => {
            local.push("dither.amplitude is required in zero-order modes".into());
            Vec::new()
        }
    };
    if amplitude.iter().any(|a| !(*a >= 0.0)) {
        local.push("dither.amplitude must be nonnegative".into());
    }
    let frequencies = match (&d.frequencies, d.frequency_range) {
        (Some(f), _) => {
            if f.len() != n || f.iter().any(|fi| fi.len() != dims) {
                local.push(format!("dither.frequencies: expected {n} lists of {dims} entries"));
            }
            f.clone()
        }
        (None, Some([lo, hi])) => {
            if !(0.0 < lo && lo < hi) {
                local.push("dither.frequency_range must satisfy 0 < low < high".into());
                Vec::new()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| (0..dims).map(|_| rng.gen_range(lo..hi)).collect()).collect()
            }
        }
        (None, None) => {
            local.push("dither.frequencies or dither.frequency_range is required in zero-order modes".into());
            Vec::new()
        }
    };
    let k_omega = d.k_omega.unwrap_or(1.0);
    if !(k_omega > 0.0) {
        local.push("dither.k_omega must be positive".into());
    }
    if local.is_empty() {
        Some(Dither {
            amplitude,
            frequencies,
            k_omega,
        })
    } else {
        if required {
            errs.extend(local);
        }
        None
    }
}

fn resolve_plant(
    p: Option<&RawPlant>,
    game: Option<&GameConfig>,
    n: usize,
    errs: &mut Vec<String>,
) -> Option<PlantConfig> {
    let p = p?;
    let default_kind = match game {
        Some(GameConfig::Connectivity { .. }) => "unicycle",
        Some(GameConfig::WindFarm(_)) => "wind_farm",
        _ => "",
    };
    let kind = p.kind.clone().unwrap_or_else(|| default_kind.to_string());
    let epsilon = p.epsilon.unwrap_or_else(|| {
        errs.push("plant.epsilon is required".into());
        f64::NAN
    });
    if epsilon.is_finite() && !(epsilon > 0.0) {
        errs.push("plant.epsilon must be positive".into());
    }
    if kind != default_kind {
        errs.push(format!("plant.kind `{kind}` does not fit this game (expected `{default_kind}`)"));
        return None;
    }
    match kind.as_str() {
        "unicycle" => {
            let gain = |v: &Option<PerAgent>, field: &str, errs: &mut Vec<String>| match v {
                Some(g) => g.expand(n, field, errs),
                None => {
                    errs.push(format!("{field} is required"));
                    Vec::new()
                }
            };
            let k1 = gain(&p.k1, "plant.k1", errs);
            let k2 = gain(&p.k2, "plant.k2", errs);
            if k1.iter().chain(&k2).any(|k| !(*k > 0.0)) {
                errs.push("plant.k1 and plant.k2 must be positive".into());
            }
            Some(PlantConfig::Unicycle { epsilon, k1, k2 })
        }
        _ => {
            let tau = p.tau.unwrap_or_else(|| {
                errs.push("plant.tau is required".into());
                f64::NAN
            });
            if tau.is_finite() && !(tau > 0.0) {
                errs.push("plant.tau must be positive".into());
            }
            Some(PlantConfig::WindFarm { epsilon, tau })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub name: String,
    pub mode: Mode,
}

/// Wind-farm layout and constraints; the lag constant lives in the plant table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindFarmGame {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub rotor_radius: f64,
    pub wake_decay: f64,
    pub rho_air: f64,
    pub u_inf: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub coupling_b: f64,
    pub power_scale: f64,
    pub schedule: Vec<WindInterval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wake_override: Option<Vec<Vec<f64>>>,
}

impl WindFarmGame {
    pub fn params(&self, tau: f64) -> WindFarmParams {
        WindFarmParams {
            rows: self.rows,
            cols: self.cols,
            spacing: self.spacing,
            rotor_radius: self.rotor_radius,
            wake_decay: self.wake_decay,
            rho_air: self.rho_air,
            u_inf: self.u_inf,
            tau,
            a_min: self.a_min,
            a_max: self.a_max,
            coupling_b: self.coupling_b,
            power_scale: self.power_scale,
            schedule: self.schedule.clone(),
            wake_override: self.wake_override.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameConfig {
    /// `J_i = (u_i - target_i)^2`, scalar decisions in `[lower, upper]`.
    Quadratic {
        targets: Vec<f64>,
        lower: f64,
        upper: f64,
        coupling_a: Vec<Vec<f64>>,
        coupling_b: Vec<f64>,
    },
    Connectivity {
        sources: Vec<[f64; 2]>,
        weight: f64,
        rect: [f64; 4],
        coupling_b: f64,
    },
    WindFarm(WindFarmGame),
}

impl GameConfig {
    pub fn n_agents(&self) -> usize {
        match self {
            GameConfig::Quadratic { targets, .. } => targets.len(),
            GameConfig::Connectivity { sources, .. } => sources.len(),
            GameConfig::WindFarm(w) => w.rows * w.cols,
        }
    }

    pub fn agent_dim(&self) -> usize {
        match self {
            GameConfig::Connectivity { .. } => 2,
            _ => 1,
        }
    }

    pub fn n_coupling(&self) -> usize {
        match self {
            GameConfig::Quadratic { coupling_a, .. } => coupling_a.len(),
            GameConfig::Connectivity { sources, .. } => {
                let n = sources.len();
                2 * n * (n - 1)
            }
            GameConfig::WindFarm(w) => w.params(1.0).coupling().1.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Algorithm {
    pub gamma: Vec<f64>,
    pub gamma0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub k: f64,
    pub rho: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub theta_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dither {
    pub amplitude: Vec<f64>,
    pub frequencies: Vec<Vec<f64>>,
    pub k_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    Unicycle { epsilon: f64, k1: Vec<f64>, k2: Vec<f64> },
    WindFarm { epsilon: f64, tau: f64 },
}

impl PlantConfig {
    pub fn epsilon(&self) -> f64 {
        match self {
            PlantConfig::Unicycle { epsilon, .. } | PlantConfig::WindFarm { epsilon, .. } => *epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub step: f64,
    pub horizon: f64,
    pub sample_every: f64,
    pub seed: u64,
    pub eps_ball: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Initial {
    pub u0: Vec<f64>,
    pub lambda0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

/// Fully resolved scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario: Meta,
    pub game: GameConfig,
    pub algorithm: Algorithm,
    pub estimator: Estimator,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dither: Option<Dither>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantConfig>,
    pub run: Run,
    pub initial: Initial,
}

/// Provenance recorded alongside a resolved manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub source: String,
    pub overrides: Vec<String>,
}

impl Provenance {
    pub fn new(source: &str, overrides: Vec<String>) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            source: source.to_string(),
            overrides,
        }
    }
}

/// Everything needed to integrate one scenario.
#[derive(Debug, Clone)]
pub struct Built {
    pub closed_loop: ClosedLoop,
    pub w0: DVector<f64>,
    pub run: RunConfig,
    /// `[start, end)` of each game in `closed_loop.games`.
    pub intervals: Vec<(f64, f64)>,
}

impl Scenario {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut raw = ScenarioFile::load(path)?;
        raw.apply(overrides);
        raw.resolve()
    }

    pub fn n_agents(&self) -> usize {
        self.game.n_agents()
    }

    pub fn wind_farm(&self) -> Option<WindFarmParams> {
        match &self.game {
            GameConfig::WindFarm(w) => {
                let tau = match &self.plant {
                    Some(PlantConfig::WindFarm { tau, .. }) => *tau,
                    _ => 10.0,
                };
                Some(w.params(tau))
            }
            _ => None,
        }
    }

    fn unicycles(&self) -> Result<UnicycleParams> {
        let GameConfig::Connectivity {
            sources,
            weight,
            rect,
            coupling_b,
        } = &self.game
        else {
            return Err(Error::Invalid("not a connectivity game".into()));
        };
        let n = sources.len();
        let (k1, k2) = match &self.plant {
            Some(PlantConfig::Unicycle { k1, k2, .. }) => (k1.clone(), k2.clone()),
            _ => (vec![1.0; n], vec![1.0; n]),
        };
        UnicycleParams::new(k1, k2, sources.clone(), *weight, *coupling_b, *rect)
    }

    /// One game per wind interval (a single game otherwise).
    pub fn games(&self) -> Result<Vec<GameSpec>> {
        match &self.game {
            GameConfig::Quadratic {
                targets,
                lower,
                upper,
                coupling_a,
                coupling_b,
            } => {
                let n = targets.len();
                let a = DMatrix::from_fn(coupling_a.len(), n, |r, c| coupling_a[r][c]);
                let sets = (0..n)
                    .map(|_| ConvexSet::uniform_box(1, *lower, *upper))
                    .collect::<Result<Vec<_>>>()?;
                Ok(vec![GameSpec::new(
                    vec![1; n],
                    Arc::new(QuadraticCosts::separable_targets(targets)),
                    sets,
                    a,
                    DVector::from_column_slice(coupling_b),
                )?])
            }
            GameConfig::Connectivity { .. } => Ok(vec![self.unicycles()?.game()?]),
            GameConfig::WindFarm(_) => {
                let p = self.wind_farm().expect("wind farm");
                (0..p.schedule.len()).map(|k| p.game(k)).collect()
            }
        }
    }

    pub fn plant(&self) -> Result<Option<Plant>> {
        Ok(match &self.plant {
            None => None,
            Some(PlantConfig::Unicycle { .. }) => Some(Plant::Unicycle(self.unicycles()?)),
            Some(PlantConfig::WindFarm { .. }) => Some(Plant::WindFarm(self.wind_farm().expect("wind farm"))),
        })
    }

    pub fn steps(&self) -> Result<StepSizes> {
        StepSizes::new(self.algorithm.gamma.clone(), self.algorithm.gamma0)
    }

    pub fn dither_spec(&self) -> Result<DitherSpec> {
        match &self.dither {
            Some(d) => DitherSpec::new(d.amplitude.clone(), d.frequencies.clone(), d.k_omega),
            None => DitherSpec::new(Vec::new(), Vec::new(), 1.0),
        }
    }

    /// `[start, end)` of each wind interval, or the whole horizon.
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        match &self.game {
            GameConfig::WindFarm(w) => {
                let mut starts: Vec<f64> = w.schedule.iter().map(|s| s.start).collect();
                starts.push(self.run.horizon);
                starts.windows(2).map(|p| (p[0], p[1].min(self.run.horizon))).collect()
            }
            _ => vec![(0.0, self.run.horizon)],
        }
    }

    pub fn build(&self) -> Result<Built> {
        let games = self.games()?;
        let dims = self.game.agent_dim();
        let e = &self.estimator;
        let tuning = (0..self.n_agents())
            .map(|_| EstimatorTuning::isotropic(dims, e.k, e.rho, e.sigma, e.sigma0, e.theta_bound))
            .collect::<Result<Vec<_>>>()?;
        let closed_loop = ClosedLoop::new(
            self.scenario.mode,
            games,
            self.steps()?,
            self.dither_spec()?,
            tuning,
            self.plant()?,
            self.plant.as_ref().map_or(1.0, PlantConfig::epsilon),
        )?;
        let x0 = self.initial.x0.as_ref().map(|x| DVector::from_column_slice(x));
        let w0 = closed_loop.initial_state(
            &DVector::from_column_slice(&self.initial.u0),
            &DVector::from_column_slice(&self.initial.lambda0),
            if closed_loop.layout().plant.is_some() { x0.as_ref() } else { None },
        )?;
        let run = RunConfig {
            step: self.run.step,
            horizon: self.run.horizon,
            sample_stride: ((self.run.sample_every / self.run.step).round() as usize).max(1),
            seed: self.run.seed,
            mode: self.scenario.mode,
        };
        run.validate()?;
        Ok(Built {
            closed_loop,
            w0,
            run,
            intervals: self.intervals(),
        })
    }

    /// Resolved scenario as TOML with a trailing `[provenance]` table.
    pub fn to_manifest(&self, provenance: &Provenance) -> Result<String> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Invalid(e.to_string()))?;
        let prov = toml::Table::try_from(provenance).map_err(|e| Error::Invalid(e.to_string()))?;
        table.insert("provenance".into(), toml::Value::Table(prov));
        toml::to_string(&table).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        ScenarioFile::parse(text)?.resolve()
    }

    /// Stable key for the oracle cache: the game table and an interval index.
    pub fn oracle_key(&self, interval: usize) -> Result<String> {
        let game = serde_json::to_string(&self.game)?;
        Ok(format!("{game}#{interval}"))
    }
}
