//! Scenario configuration: plant + topology + gain options + simulation
//! parameters + leader input + initial-condition distributions.
//!
//! A scenario is one JSON document with sections `plant`, `topology`,
//! `gains`, `sim`, `leader_input`, `init`. The two bundled presets
//! reproduce the worked examples.

use nalgebra::{Complex, DVector};
use serde::{Deserialize, Serialize};

use super::Plant;
use crate::error::{Error, Result};
use crate::matcore::from_rows;
use crate::netgraph::{default_topology, Topology};

/// Grid-alignment tolerance: dt must divide tau this tightly.
pub const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub tau: f64,
}

impl PlantConfig {
    pub fn to_plant(&self) -> Result<Plant> {
        Plant::new(
            from_rows(&self.a)?,
            from_rows(&self.b)?,
            from_rows(&self.e)?,
            from_rows(&self.s)?,
            from_rows(&self.f)?,
            self.tau,
        )
    }
}

/// Scalar broadcast to all followers, or one value per follower.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    PerFollower(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; n]),
            ScalarOrVec::PerFollower(vs) => {
                if vs.len() != n {
                    return Err(Error::Config(format!(
                        "expected {n} per-follower values, got {}",
                        vs.len()
                    )));
                }
                Ok(vs.clone())
            }
        }
    }
}

fn default_mu() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    4.0
}
fn default_beta1() -> f64 {
    1.0
}
fn default_epsilon() -> ScalarOrVec {
    ScalarOrVec::Scalar(0.1)
}
fn default_sigma() -> ScalarOrVec {
    ScalarOrVec::Scalar(0.005)
}
fn default_rescale_q() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainConfig {
    /// 1 = rejection protocol (input-free leader), 2 = attenuation protocol.
    pub theorem: u8,
    /// Desired closed-loop poles as [re, im] pairs.
    pub desired_poles: Vec<[f64; 2]>,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: ScalarOrVec,
    #[serde(default = "default_sigma")]
    pub sigma: ScalarOrVec,
    #[serde(default = "default_rescale_q")]
    pub rescale_q: bool,
}

impl GainConfig {
    pub fn poles(&self) -> Vec<Complex<f64>> {
        self.desired_poles
            .iter()
            .map(|&[re, im]| Complex::new(re, im))
            .collect()
    }
}

fn default_stride() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    /// Sampling stride (seconds) for the recorded trajectory.
    #[serde(default = "default_stride")]
    pub sample_stride: f64,
}

/// One additive term of a leader-input component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeaderTerm {
    Constant { value: f64 },
    ExpDecay { amplitude: f64, rate: f64 },
    Sinusoid { amplitude: f64, omega: f64, phase: f64 },
}

impl LeaderTerm {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            LeaderTerm::Constant { value } => value,
            LeaderTerm::ExpDecay { amplitude, rate } => amplitude * (-rate * t).exp(),
            LeaderTerm::Sinusoid { amplitude, omega, phase } => {
                amplitude * (omega * t + phase).sin()
            }
        }
    }
}

/// Leader input u₀(t): one sum-of-terms expression per input component.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeaderInput {
    pub components: Vec<Vec<LeaderTerm>>,
}

impl LeaderInput {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.components.len(),
            self.components
                .iter()
                .map(|terms| terms.iter().map(|term| term.eval(t)).sum()),
        )
    }

    /// sup‖u₀(t)‖ over [0, horizon], measured on the dt grid.
    pub fn sup_norm(&self, horizon: f64, dt: f64) -> f64 {
        let steps = (horizon / dt).round() as usize;
        (0..=steps)
            .map(|k| self.eval(k as f64 * dt).norm())
            .fold(0.0_f64, f64::max)
    }
}

/// δ ↦ scale·δ + offset with δ ~ U(0,1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct UniformTransform {
    pub scale: f64,
    pub offset: f64,
}

impl UniformTransform {
    pub fn apply(&self, delta: f64) -> f64 {
        self.scale * delta + self.offset
    }
}

fn tf(scale: f64, offset: f64) -> UniformTransform {
    UniformTransform { scale, offset }
}

fn default_x_follower() -> UniformTransform {
    tf(4.0, 1.0)
}
fn default_w_follower() -> UniformTransform {
    tf(10.0, -5.0)
}
fn default_coupling() -> UniformTransform {
    tf(4.0, 1.0)
}
fn default_x_leader() -> UniformTransform {
    tf(3.0, 5.0)
}
fn default_w_leader() -> UniformTransform {
    tf(3.0, 1.0)
}

/// Initial-condition distributions (uniform transforms of δ ~ U(0,1)) plus
/// optional fixed observer seeds. Draw order per run: leader state entries,
/// leader disturbance entries, then per follower its state entries,
/// disturbance entries, and coupling weight.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InitConfig {
    #[serde(default = "default_x_follower")]
    pub x_follower: UniformTransform,
    #[serde(default = "default_w_follower")]
    pub w_follower: UniformTransform,
    #[serde(default = "default_coupling")]
    pub coupling: UniformTransform,
    #[serde(default = "default_x_leader")]
    pub x_leader: UniformTransform,
    #[serde(default = "default_w_leader")]
    pub w_leader: UniformTransform,
    /// Fixed initial consensus-observer state, one vector applied to every
    /// follower; zero when absent.
    #[serde(default)]
    pub observer_v: Option<Vec<f64>>,
    /// Fixed initial disturbance-observer state; zero when absent.
    #[serde(default)]
    pub observer_w_hat: Option<Vec<f64>>,
    /// Force every disturbance to zero (used by the delay-free degeneration
    /// scenario).
    #[serde(default)]
    pub zero_disturbance: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            x_follower: default_x_follower(),
            w_follower: default_w_follower(),
            coupling: default_coupling(),
            x_leader: default_x_leader(),
            w_leader: default_w_leader(),
            observer_v: None,
            observer_w_hat: None,
            zero_disturbance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub plant: PlantConfig,
    pub topology: Topology,
    pub gains: GainConfig,
    pub sim: SimConfig,
    #[serde(default)]
    pub leader_input: Option<LeaderInput>,
    #[serde(default)]
    pub init: InitConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let plant = self.plant.to_plant()?;
        if !(self.sim.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.sim.dt)));
        }
        if self.sim.horizon < plant.tau {
            return Err(Error::Config(format!(
                "horizon {} is shorter than the delay {}",
                self.sim.horizon, plant.tau
            )));
        }
        let ratio = plant.tau / self.sim.dt;
        if (ratio - ratio.round()).abs() > GRID_TOL {
            return Err(Error::Config(format!(
                "dt = {} does not divide tau = {} (history buffers need an aligned grid)",
                self.sim.dt, plant.tau
            )));
        }
        if !(self.sim.sample_stride > 0.0) {
            return Err(Error::Config("sample_stride must be positive".into()));
        }
        let stride_ratio = self.sim.sample_stride / self.sim.dt;
        if (stride_ratio - stride_ratio.round()).abs() > GRID_TOL || stride_ratio < 1.0 - GRID_TOL {
            return Err(Error::Config(
                "sample_stride must be a positive multiple of dt".into(),
            ));
        }
        match self.gains.theorem {
            1 => {
                if self.leader_input.is_some() {
                    return Err(Error::Config(
                        "the rejection protocol assumes an input-free leader; remove leader_input or use theorem 2"
                            .into(),
                    ));
                }
            }
            2 => {}
            other => {
                return Err(Error::Config(format!("theorem must be 1 or 2, got {other}")));
            }
        }
        if let Some(li) = &self.leader_input {
            if li.dim() != plant.input_dim() {
                return Err(Error::Config(format!(
                    "leader input has {} components, plant input dimension is {}",
                    li.dim(),
                    plant.input_dim()
                )));
            }
        }
        if let Some(v) = &self.init.observer_v {
            if v.len() != plant.state_dim() {
                return Err(Error::Config("observer_v length must equal the state dimension".into()));
            }
        }
        if let Some(w) = &self.init.observer_w_hat {
            if w.len() != plant.disturbance_dim() {
                return Err(Error::Config(
                    "observer_w_hat length must equal the disturbance dimension".into(),
                ));
            }
        }
        Ok(())
    }

    /// Numerically measured sup‖u₀‖ over the run horizon (0 for an
    /// input-free leader).
    pub fn leader_bound(&self) -> f64 {
        self.leader_input
            .as_ref()
            .map(|li| li.sup_norm(self.sim.horizon, self.sim.dt))
            .unwrap_or(0.0)
    }
}

fn example_plant_config(tau: f64) -> PlantConfig {
    PlantConfig {
        a: vec![vec![-4.0, 1.0], vec![1.0, 0.0]],
        b: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        e: vec![vec![1.0, 2.0], vec![2.0, 1.0]], // E = BF with F = I
        s: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
        f: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        tau,
    }
}

/// First worked example: rejection protocol, τ = 0.09 s, poles {−5, −10}.
pub fn example1_scenario() -> ScenarioConfig {
    ScenarioConfig {
        plant: example_plant_config(0.09),
        topology: default_topology(),
        gains: GainConfig {
            theorem: 1,
            desired_poles: vec![[-5.0, 0.0], [-10.0, 0.0]],
            mu: default_mu(),
            alpha: default_alpha(),
            beta1: default_beta1(),
            epsilon: default_epsilon(),
            sigma: default_sigma(),
            rescale_q: default_rescale_q(),
        },
        sim: SimConfig { dt: 1e-3, horizon: 10.0, seed: 1, sample_stride: 0.01 },
        leader_input: None,
        init: InitConfig::default(),
    }
}

/// Second worked example: attenuation protocol with
/// u₀(t) = [e^{−t} + 1, 2 + sin(t/2)]ᵀ, α = 4, β₁ = 1, εᵢ = 0.1,
/// σᵢ = 0.005, μ = 2.
pub fn example2_scenario() -> ScenarioConfig {
    let mut sc = example1_scenario();
    sc.gains.theorem = 2;
    sc.leader_input = Some(LeaderInput {
        components: vec![
            vec![
                LeaderTerm::ExpDecay { amplitude: 1.0, rate: 1.0 },
                LeaderTerm::Constant { value: 1.0 },
            ],
            vec![
                LeaderTerm::Constant { value: 2.0 },
                LeaderTerm::Sinusoid { amplitude: 1.0, omega: 0.5, phase: 0.0 },
            ],
        ],
    });
    sc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn presets_validate() {
        example1_scenario().validate().unwrap();
        example2_scenario().validate().unwrap();
    }

    #[test]
    fn example2_leader_input_matches_formula() {
        let sc = example2_scenario();
        let li = sc.leader_input.as_ref().unwrap();
        for t in [0.0, 0.5, 1.0, 3.14, 7.25] {
            let u = li.eval(t);
            assert_relative_eq!(u[0], (-t).exp() + 1.0, epsilon = 1e-14);
            assert_relative_eq!(u[1], 2.0 + (t / 2.0).sin(), epsilon = 1e-14);
        }
        // components stay within [1, 2] and [1, 3], so the sup-norm is
        // bounded by sqrt(13) and must exceed the t=0 norm sqrt(8)
        let b = li.sup_norm(10.0, 1e-3);
        assert!(b > 8.0_f64.sqrt() && b < 13.0_f64.sqrt());
    }

    #[test]
    fn misaligned_grid_is_rejected() {
        let mut sc = example1_scenario();
        sc.sim.dt = 7e-4; // does not divide 0.09
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn horizon_shorter_than_delay_is_rejected() {
        let mut sc = example1_scenario();
        sc.sim.horizon = 0.05;
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn theorem1_with_leader_input_is_rejected() {
        let mut sc = example2_scenario();
        sc.gains.theorem = 1;
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scalar_or_vec_expansion() {
        assert_eq!(ScalarOrVec::Scalar(0.1).expand(3).unwrap(), vec![0.1; 3]);
        let v = ScalarOrVec::PerFollower(vec![1.0, 2.0]);
        assert!(v.expand(3).is_err());
        assert_eq!(v.expand(2).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn json_round_trip() {
        let sc = example2_scenario();
        let text = serde_json::to_string_pretty(&sc).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.leader_input, sc.leader_input);
        assert_eq!(back.topology, sc.topology);
    }
}
