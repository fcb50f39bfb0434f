//! Semi-decentralized data-driven learning law.
//!
//! Agents update their own decision from a local view (own decision, the
//! broadcast dual, own gradient estimate, own dither); the coordinator
//! updates the dual from the agents' `(u_i, du_i)` messages.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{dual_rhs, local_primal_rhs, primal_dual_rhs, PrimalDualState, StepSizes};
use crate::game::GameSpec;
use crate::sets::ConvexSet;

/// Sinusoidal dither `d_i(t) = a_i / sqrt(m_i) * col(sin(k_w w_ij t + phi_ij))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitherSpec {
    pub amplitudes: Vec<f64>,
    pub base_frequencies: Vec<Vec<f64>>,
    pub frequency_factor: f64,
    #[serde(default)]
    pub phases: Vec<Vec<f64>>,
}

impl DitherSpec {
    pub fn new(amplitudes: Vec<f64>, base_frequencies: Vec<Vec<f64>>, frequency_factor: f64) -> Result<Self> {
        let phases = base_frequencies.iter().map(|f| vec![0.0; f.len()]).collect();
        let spec = Self {
            amplitudes,
            base_frequencies,
            frequency_factor,
            phases,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != self.base_frequencies.len() {
            return Err(Error::Dimension {
                what: "dither agents",
                expected: self.base_frequencies.len(),
                got: self.amplitudes.len(),
            });
        }
        if let Some(a) = self.amplitudes.iter().find(|a| !(**a >= 0.0)) {
            return Err(Error::Invalid(format!("dither amplitude {a} must be nonnegative")));
        }
        if !self.phases.is_empty() {
            for (p, f) in self.phases.iter().zip(&self.base_frequencies) {
                if p.len() != f.len() {
                    return Err(Error::Invalid("dither phases do not match channels".into()));
                }
            }
        }
        let mut all: Vec<f64> = self.base_frequencies.iter().flatten().copied().collect();
        all.sort_by(|a, b| a.total_cmp(b));
        if all.windows(2).any(|w| (w[1] - w[0]).abs() < 1e-12) {
            log::warn!("dither frequencies collide across channels; excitation may be lost");
        }
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn with_amplitude(&self, a: f64) -> Self {
        Self {
            amplitudes: vec![a; self.amplitudes.len()],
            ..self.clone()
        }
    }

    pub fn with_frequency_factor(&self, k: f64) -> Self {
        Self {
            frequency_factor: k,
            ..self.clone()
        }
    }

    /// Period of the slowest channel, `inf` when there are no channels.
    pub fn slowest_period(&self) -> f64 {
        let w = self
            .base_frequencies
            .iter()
            .flatten()
            .map(|w| (w * self.frequency_factor).abs())
            .fold(f64::INFINITY, f64::min);
        if w > 0.0 && w.is_finite() {
            2.0 * std::f64::consts::PI / w
        } else {
            f64::INFINITY
        }
    }

    pub fn dither(&self, agent: usize, t: f64) -> DVector<f64> {
        let freqs = &self.base_frequencies[agent];
        let m = freqs.len();
        let scale = self.amplitudes[agent] / (m as f64).sqrt();
        DVector::from_iterator(
            m,
            freqs.iter().enumerate().map(|(j, w)| {
                let phase = self.phases.get(agent).and_then(|p| p.get(j)).copied().unwrap_or(0.0);
                scale * (self.frequency_factor * w * t + phase).sin()
            }),
        )
    }

    /// Collective dither `col(d_i(t))`.
    pub fn collective(&self, t: f64) -> DVector<f64> {
        let parts: Vec<f64> = (0..self.n_agents())
            .flat_map(|i| self.dither(i, t).iter().copied().collect::<Vec<_>>())
            .collect();
        DVector::from_vec(parts)
    }
}

/// Message an agent sends to the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMsg {
    pub agent: usize,
    pub u: Vec<f64>,
    pub u_dot: Vec<f64>,
}

/// Broadcast from the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorMsg {
    pub lambda: Vec<f64>,
}

/// Everything an agent may read when computing its update. Other agents'
/// decisions are not reachable from here.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a> {
    pub u_i: &'a DVector<f64>,
    pub omega_i: &'a ConvexSet,
    pub gamma_i: f64,
    /// Agent's own column block of the coupling matrix, `A_i` (q x m_i).
    pub a_i: &'a nalgebra::DMatrix<f64>,
    pub broadcast: &'a CoordinatorMsg,
    pub theta1_hat_i: &'a DVector<f64>,
    pub dither_i: &'a DVector<f64>,
}

/// Local projected update of one agent.
pub fn agent_rhs(view: AgentView<'_>) -> Result<DVector<f64>> {
    let lambda = DVector::from_column_slice(&view.broadcast.lambda);
    if view.a_i.nrows() != lambda.len() {
        return Err(Error::Dimension {
            what: "broadcast dual",
            expected: view.a_i.nrows(),
            got: lambda.len(),
        });
    }
    let force = view.a_i.transpose() * lambda;
    local_primal_rhs(
        view.u_i,
        view.omega_i,
        view.gamma_i,
        view.theta1_hat_i,
        &force,
        Some(view.dither_i),
    )
}

/// Collective data-driven right-hand side:
/// `du = -u + proj_Omega(u - Gamma (theta1_hat + A^T lambda) + d(t))` and the
/// coordinator dual row with `du` substituted.
pub fn controller_rhs(
    game: &GameSpec,
    steps: &StepSizes,
    spec: &DitherSpec,
    state: &PrimalDualState,
    theta1_hat: &DVector<f64>,
    t: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !theta1_hat.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("gradient estimate"));
    }
    let d = spec.collective(t);
    primal_dual_rhs(game, steps, state, theta1_hat, Some(&d))
}

/// Dual derivative assembled purely from agent messages.
pub fn coordinator_step(
    msgs: &[AgentMsg],
    steps: &StepSizes,
    game: &GameSpec,
    lambda: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = game.dim();
    let mut u = DVector::zeros(m);
    let mut u_dot = DVector::zeros(m);
    for i in 0..game.n_agents() {
        let msg = msgs.iter().find(|msg| msg.agent == i).ok_or(Error::MissingMessage(i))?;
        let mi = game.dims()[i];
        if msg.u.len() != mi || msg.u_dot.len() != mi {
            return Err(Error::Dimension {
                what: "agent message",
                expected: mi,
                got: msg.u.len(),
            });
        }
        u.rows_mut(game.offset(i), mi).copy_from_slice(&msg.u);
        u_dot.rows_mut(game.offset(i), mi).copy_from_slice(&msg.u_dot);
    }
    Ok(dual_rhs(game, steps, &u, &u_dot, lambda))
}

/// Messages the agents would send for a given collective state.
pub fn messages(game: &GameSpec, u: &DVector<f64>, u_dot: &DVector<f64>) -> Vec<AgentMsg> {
    (0..game.n_agents())
        .map(|i| AgentMsg {
            agent: i,
            u: game.block(i, u).as_slice().to_vec(),
            u_dot: game.block(i, u_dot).as_slice().to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::full_info_rhs;
    use crate::game::{two_agent_quadratic, QuadraticCosts};
    use nalgebra::{dvector, DMatrix};
    use std::sync::Arc;

    #[test]
    fn zero_amplitude_is_silent() {
        let spec = DitherSpec::new(vec![0.0], vec![vec![3.0, 4.0]], 1.0).unwrap();
        assert_eq!(spec.dither(0, 1.234), DVector::zeros(2));
    }

    #[test]
    fn scalar_dither_value() {
        let spec = DitherSpec::new(vec![1.0], vec![vec![2.0]], 1.0).unwrap();
        let d = spec.dither(0, std::f64::consts::FRAC_PI_4);
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_channel_dither_uses_listed_frequencies() {
        let spec = DitherSpec::new(vec![0.5], vec![vec![5.11, 6.38]], 1.0).unwrap();
        let t = 0.77;
        let s = 0.5 / 2f64.sqrt();
        let d = spec.dither(0, t);
        assert!((d[0] - s * (5.11 * t).sin()).abs() < 1e-15);
        assert!((d[1] - s * (6.38 * t).sin()).abs() < 1e-15);
        assert!(d.norm() <= 0.5 + 1e-15);
    }

    #[test]
    fn reduces_to_full_info() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let spec = DitherSpec::new(vec![0.0, 0.0], vec![vec![1.0], vec![2.0]], 1.0).unwrap();
        let st = PrimalDualState::new(dvector![2.0, -3.0], dvector![0.7]);
        let f = g.pseudo_gradient(&st.u).unwrap();
        let a = controller_rhs(&g, &steps, &spec, &st, &f, 3.3).unwrap();
        let b = full_info_rhs(&g, &steps, &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_perturbation_interior() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[0.0, 0.0])),
            vec![
                ConvexSet::uniform_box(1, -10.0, 10.0).unwrap(),
                ConvexSet::uniform_box(1, -10.0, 10.0).unwrap(),
            ],
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
        )
        .unwrap();
        // Gamma = 0 limit via a vanishing step.
        let steps = StepSizes::uniform(2, 1e-300, 1e-300).unwrap();
        let spec = DitherSpec::new(vec![0.3, 0.4], vec![vec![1.0], vec![2.5]], 1.0).unwrap();
        let st = PrimalDualState::new(dvector![1.0, -2.0], dvector![0.0]);
        let t = 0.9;
        let (du, _) = controller_rhs(&g, &steps, &spec, &st, &dvector![5.0, 5.0], t).unwrap();
        assert!((du - spec.collective(t)).norm() < 1e-15);
    }

    #[test]
    fn non_finite_estimate_rejected() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let spec = DitherSpec::new(vec![0.1, 0.1], vec![vec![1.0], vec![2.0]], 1.0).unwrap();
        let st = PrimalDualState::new(dvector![0.0, 0.0], dvector![0.0]);
        assert!(controller_rhs(&g, &steps, &spec, &st, &dvector![f64::NAN, 0.0], 0.0).is_err());
    }

    #[test]
    fn coordinator_missing_message() {
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let msgs = vec![AgentMsg { agent: 0, u: vec![0.0], u_dot: vec![0.0] }];
        assert!(matches!(
            coordinator_step(&msgs, &steps, &g, &dvector![0.0]),
            Err(Error::MissingMessage(1))
        ));
    }

    #[test]
    fn coordinator_uncoupled_is_stationary() {
        let g = GameSpec::new(
            vec![1, 1],
            Arc::new(QuadraticCosts::separable_targets(&[0.0, 0.0])),
            vec![
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
                ConvexSet::uniform_box(1, -1.0, 1.0).unwrap(),
            ],
            DMatrix::zeros(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let msgs = messages(&g, &dvector![0.3, 0.1], &dvector![1.0, -1.0]);
        let dl = coordinator_step(&msgs, &steps, &g, &dvector![0.0, 2.5]).unwrap();
        assert_eq!(dl, DVector::zeros(2));
    }

    #[test]
    fn negative_dual_recovers() {
        // Explicit Euler on the dual row alone, lambda(0) < 0, coupling violated.
        let g = two_agent_quadratic();
        let steps = StepSizes::uniform(2, 0.1, 0.1).unwrap();
        let u = dvector![1.0, 1.0];
        let zero = dvector![0.0, 0.0];
        let mut lambda = dvector![-2.0];
        let h = 0.01;
        let mut entered = false;
        for _ in 0..2000 {
            let msgs = messages(&g, &u, &zero);
            let dl = coordinator_step(&msgs, &steps, &g, &lambda).unwrap();
            lambda += dl * h;
            if lambda[0] >= 0.0 {
                entered = true;
            }
            if entered {
                assert!(lambda[0] >= 0.0);
            }
        }
        assert!(entered);
    }
}
