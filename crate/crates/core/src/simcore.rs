//! Deterministic fixed-step integration of the coupled leader / follower /
//! observer / disturbance system with delay buffers.
//!
//! The integrator is classical RK4 over the continuously-evolving states
//! (agent states, observer states, coupling weights). Delayed quantities —
//! the buffered control inputs and the delayed disturbance-error term — are
//! held at their step-start values across the four substages; disturbances
//! advance by exact rotation e^{S·dt}. The per-step control sample is
//! finalized after the state commit, so every stored history sample is the
//! control law evaluated at its own timestamp.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{
    self, HistoryBuffer, ObserverState, ProtocolContext, ProtocolMode,
};
use crate::error::{Error, Result};
use crate::matcore;
use crate::netgraph::{build_laplacian, compute_weights, Topology};
use crate::sysmodel::{
    compute_certificate, synthesize_gains_thm1, synthesize_gains_thm2, AttenuationParams,
    CertificateBundle, GainSet, LeaderInput, ScenarioConfig,
};

/// Any state norm beyond this aborts the run as divergent.
const DIVERGENCE_LIMIT: f64 = 1e9;
/// Coupling-weight decreases beyond this count as monotonicity violations.
const MONOTONICITY_SLACK: f64 = 1e-12;

/// Synthesize the gain set a scenario asks for (theorem 1 or 2), using the
/// numerically measured leader bound for the attenuation checks.
pub fn synthesize_for_scenario(sc: &ScenarioConfig) -> Result<GainSet> {
    sc.validate()?;
    let plant = sc.plant.to_plant()?;
    let poles = sc.gains.poles();
    match sc.gains.theorem {
        1 => synthesize_gains_thm1(&plant, &sc.topology, &poles),
        2 => {
            let params = AttenuationParams {
                mu: sc.gains.mu,
                alpha: sc.gains.alpha,
                beta1: sc.gains.beta1,
                epsilon: sc.gains.epsilon.expand(sc.topology.followers)?,
                sigma: sc.gains.sigma.expand(sc.topology.followers)?,
                leader_bound: sc.leader_bound(),
                rescale_q: sc.gains.rescale_q,
            };
            synthesize_gains_thm2(&plant, &sc.topology, &poles, &params)
        }
        other => Err(Error::Config(format!("theorem must be 1 or 2, got {other}"))),
    }
}

/// Certificate for an attenuation scenario (weights derived from its
/// topology).
pub fn certificate_for_scenario(
    sc: &ScenarioConfig,
    gains: &GainSet,
) -> Result<CertificateBundle> {
    let plant = sc.plant.to_plant()?;
    let parts = build_laplacian(&sc.topology)?;
    let weights = compute_weights(&parts.l1)?;
    compute_certificate(gains, &weights, &sc.topology, &plant, sc.leader_bound())
}

/// The full mutable simulation state at one time instant.
#[derive(Debug, Clone)]
pub struct SimState {
    pub t: f64,
    pub step_index: usize,
    pub x0: DVector<f64>,
    pub w0: DVector<f64>,
    pub x: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub observers: Vec<ObserverState>,
    pub u_hist: Vec<HistoryBuffer>,
    /// Depth 2·m+1: the prediction-identity probe needs ŵ over [t−2τ, t].
    pub w_hat_hist: Vec<HistoryBuffer>,
    pub v_hist: Vec<HistoryBuffer>,
    pub u0_hist: HistoryBuffer,
    pub z_tilde_hist: Vec<HistoryBuffer>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DivergenceRecord {
    pub agent: usize,
    pub t: f64,
}

/// Sampled time series of the quantities the analysis talks about.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub sample_stride: f64,
    pub input_dim: usize,
    pub times: Vec<f64>,
    /// ‖x̃ᵢ‖ per sample per follower.
    pub err: Vec<Vec<f64>>,
    pub coupling: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// ‖ṽᵢ‖ = ‖vᵢ − Z̃ᵢ‖.
    pub v_tilde: Vec<Vec<f64>>,
    /// ‖w̃ᵢ(t)‖ = ‖ŵᵢ − (wᵢ − w₀)‖ at the sample instant.
    pub w_tilde: Vec<Vec<f64>>,
    /// Control inputs, row-major: follower-major then component.
    pub u: Vec<Vec<f64>>,
    /// Running maximum of ‖ϱᵢ(definition) − Σⱼ lᵢⱼṽⱼ‖ over the whole run.
    pub varrho_identity_max: f64,
    /// Certificate overlay for attenuation runs.
    pub residual_radius: Option<Vec<f64>>,
    pub divergence: Option<DivergenceRecord>,
}

impl Trajectory {
    pub fn followers(&self) -> usize {
        self.err.first().map(|r| r.len()).unwrap_or(0)
    }

    /// CSV with the fixed column layout
    /// `t, err_1..err_N, c_1..c_N, rho_1..rho_N, vtil_1..vtil_N,
    /// wtil_1..wtil_N, u_1_1..u_N_p`.
    pub fn to_csv(&self) -> String {
        let n = self.followers();
        let p = self.input_dim;
        let mut out = String::new();
        out.push('t');
        for prefix in ["err", "c", "rho", "vtil", "wtil"] {
            for i in 1..=n {
                out.push_str(&format!(",{prefix}_{i}"));
            }
        }
        for i in 1..=n {
            for j in 1..=p {
                out.push_str(&format!(",u_{i}_{j}"));
            }
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for series in [&self.err, &self.coupling, &self.rho, &self.v_tilde, &self.w_tilde] {
                for v in &series[k] {
                    out.push_str(&format!(",{v}"));
                }
            }
            for v in &self.u[k] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-step diagnostics used by the identity checks; recorded every step,
/// not on the sampling stride.
#[derive(Debug, Clone, Default)]
pub struct ProbeLog {
    pub times: Vec<f64>,
    /// Committed Z̃ᵢ per step.
    pub z_tilde: Vec<Vec<DVector<f64>>>,
    /// The stated derivative of Z̃ᵢ at the same instants:
    /// AZ̃ + B(u − u₀·mode) + Ee^{Sτ}ŵ − e^{Aτ}Ee^{Sτ}w̃(t−τ).
    pub z_rhs: Vec<Vec<DVector<f64>>>,
    /// Norm of the control-substitution identity residual
    /// Z̃ − e^{Aτ}x̃ − ∫e^{A(t−s)}BK₁v(s)ds (rejection mode).
    pub eq11: Vec<Vec<f64>>,
    /// Norm of the prediction-identity residual for t ≥ τ (NaN before).
    pub eq57: Vec<Vec<f64>>,
}

struct Frozen {
    own_integrals: Vec<DVector<f64>>,
    leader_integral: DVector<f64>,
    u_delay: Vec<DVector<f64>>,
    u0_delay: DVector<f64>,
    /// e^{Sτ}·w̃ᵢ(t−τ), the delayed disturbance-error forcing.
    esw_delayed: Vec<DVector<f64>>,
}

/// The engine: owns the immutable pieces (context, topology, scenario) and
/// advances `SimState` step by step.
pub struct Simulator {
    ctx: ProtocolContext,
    scenario: ScenarioConfig,
    topo: Topology,
    l1: DMatrix<f64>,
    leader_input: Option<LeaderInput>,
    e_s_dt: DMatrix<f64>,
    e_s_dt_half: DMatrix<f64>,
    e_s_dt_inv: DMatrix<f64>,
    residual_radius: Option<Vec<f64>>,
    n: usize,
    s: usize,
    p: usize,
    followers: usize,
    steps: usize,
    sample_every: usize,
}

impl Simulator {
    pub fn new(scenario: ScenarioConfig) -> Result<Self> {
        let gains = synthesize_for_scenario(&scenario)?;
        Simulator::with_gains(scenario, gains)
    }

    pub fn with_gains(scenario: ScenarioConfig, gains: GainSet) -> Result<Self> {
        scenario.validate()?;
        let plant = scenario.plant.to_plant()?;
        let dt = scenario.sim.dt;
        let ctx = ProtocolContext::new(plant, gains, scenario.topology.followers, dt)?;
        let parts = build_laplacian(&scenario.topology)?;
        let residual_radius = match ctx.mode {
            ProtocolMode::Attenuation => {
                Some(certificate_for_scenario(&scenario, &ctx.gains)?.residual_radius)
            }
            _ => None,
        };
        let e_s_dt = matcore::mat_exp(&ctx.plant.s, dt)?;
        let e_s_dt_half = matcore::mat_exp(&ctx.plant.s, dt / 2.0)?;
        let e_s_dt_inv = matcore::mat_exp(&ctx.plant.s, -dt)?;
        let steps = (scenario.sim.horizon / dt).round() as usize;
        let sample_every = (scenario.sim.sample_stride / dt).round() as usize;
        let n = ctx.plant.state_dim();
        let s = ctx.plant.disturbance_dim();
        let p = ctx.plant.input_dim();
        let followers = scenario.topology.followers;
        Ok(Simulator {
            l1: parts.l1,
            topo: scenario.topology.clone(),
            leader_input: scenario.leader_input.clone(),
            scenario,
            ctx,
            e_s_dt,
            e_s_dt_half,
            e_s_dt_inv,
            residual_radius,
            n,
            s,
            p,
            followers,
            steps,
            sample_every,
        })
    }

    pub fn context(&self) -> &ProtocolContext {
        &self.ctx
    }

    fn leader_u0(&self, t: f64) -> DVector<f64> {
        match (&self.leader_input, self.ctx.mode) {
            (Some(li), ProtocolMode::Attenuation) => li.eval(t),
            _ => DVector::zeros(self.p),
        }
    }

    /// Seeded initial state. Draw order: leader state entries, leader
    /// disturbance entries, then per follower its state entries,
    /// disturbance entries, and coupling weight.
    pub fn initial_state(&self) -> Result<SimState> {
        let init = &self.scenario.init;
        let mut rng = ChaCha8Rng::seed_from_u64(self.scenario.sim.seed);
        fn draw(
            rng: &mut ChaCha8Rng,
            tf: crate::sysmodel::UniformTransform,
            len: usize,
        ) -> DVector<f64> {
            DVector::from_fn(len, |_, _| tf.apply(rng.random::<f64>()))
        }
        let x0 = draw(&mut rng, init.x_leader, self.n);
        let mut w0 = draw(&mut rng, init.w_leader, self.s);
        let mut x = Vec::with_capacity(self.followers);
        let mut w = Vec::with_capacity(self.followers);
        let mut coupling = Vec::with_capacity(self.followers);
        for _ in 0..self.followers {
            x.push(draw(&mut rng, init.x_follower, self.n));
            w.push(draw(&mut rng, init.w_follower, self.s));
            coupling.push(init.coupling.apply(rng.random::<f64>()));
        }
        if init.zero_disturbance {
            w0.fill(0.0);
            for wi in &mut w {
                wi.fill(0.0);
            }
        }
        let v0 = match &init.observer_v {
            Some(v) => DVector::from_column_slice(v),
            None => DVector::zeros(self.n),
        };
        let w_hat0 = match &init.observer_w_hat {
            Some(wh) => DVector::from_column_slice(wh),
            None => DVector::zeros(self.s),
        };
        if let Some(atten) = &self.ctx.atten {
            if let Some(bad) = coupling.iter().find(|&&c| c < atten.beta1) {
                return Err(Error::Config(format!(
                    "attenuation mode requires c(0) >= beta1 = {}; drew {bad}",
                    atten.beta1
                )));
            }
        }

        let m = self.ctx.delay_steps;
        let dt = self.scenario.sim.dt;
        let observers: Vec<ObserverState> = coupling
            .iter()
            .map(|&c| ObserverState { v: v0.clone(), w_hat: w_hat0.clone(), c })
            .collect();
        let u_hist: Vec<HistoryBuffer> = (0..self.followers)
            .map(|_| HistoryBuffer::constant(dt, m + 1, DVector::zeros(self.p)))
            .collect();
        let w_hat_hist: Vec<HistoryBuffer> = (0..self.followers)
            .map(|_| HistoryBuffer::constant(dt, 2 * m + 1, w_hat0.clone()))
            .collect();
        let v_hist: Vec<HistoryBuffer> = (0..self.followers)
            .map(|_| HistoryBuffer::constant(dt, m + 1, v0.clone()))
            .collect();
        let mut u0_hist = HistoryBuffer::constant(dt, m + 1, DVector::zeros(self.p));
        u0_hist.set_newest(self.leader_u0(0.0));
        let z_tilde_hist: Vec<HistoryBuffer> = (0..self.followers)
            .map(|_| HistoryBuffer::constant(dt, m + 1, DVector::zeros(self.n)))
            .collect();

        let mut state = SimState {
            t: 0.0,
            step_index: 0,
            x0,
            w0,
            x,
            w,
            observers,
            u_hist,
            w_hat_hist,
            v_hist,
            u0_hist,
            z_tilde_hist,
        };
        // Finalize u(0) and Z̃(0); the Z̃ pre-history is held at Z̃(0) per
        // the published convention for the first delay interval.
        self.finalize_controls(&mut state)?;
        let z0: Vec<DVector<f64>> =
            (0..self.followers).map(|i| state.z_tilde_hist[i].newest().clone()).collect();
        for i in 0..self.followers {
            state.z_tilde_hist[i] =
                HistoryBuffer::constant(dt, m + 1, z0[i].clone());
        }
        Ok(state)
    }

    /// Evaluate the control law at the buffer head and store the sample,
    /// then commit the matching transform value. The transform's newest
    /// quadrature node initially sees the previous control sample; the
    /// attenuation law's ζ therefore lags one node, an O(dt²) effect of the
    /// same order as the quadrature itself.
    fn finalize_controls(&self, state: &mut SimState) -> Result<()> {
        let j0 = controller::leader_history_integral(&self.ctx, &state.u0_hist)?;
        for i in 0..self.followers {
            let x_tilde = &state.x[i] - &state.x0;
            let j_pre =
                controller::input_history_integral(&self.ctx, &state.u_hist[i], &state.w_hat_hist[i])?;
            let z_pre = controller::z_tilde_from_parts(&self.ctx, &x_tilde, &j_pre, &j0);
            let u_new = controller::control_input(
                &self.ctx,
                i,
                &state.observers[i].v,
                &state.observers[i].w_hat,
                &z_pre,
            )?;
            state.u_hist[i].set_newest(u_new);
            let j_fin =
                controller::input_history_integral(&self.ctx, &state.u_hist[i], &state.w_hat_hist[i])?;
            let z_fin = controller::z_tilde_from_parts(&self.ctx, &x_tilde, &j_fin, &j0);
            state.z_tilde_hist[i].set_newest(z_fin);
        }
        Ok(())
    }

    fn gather_frozen(&self, state: &SimState) -> Result<Frozen> {
        let m = self.ctx.delay_steps;
        let mut own_integrals = Vec::with_capacity(self.followers);
        for i in 0..self.followers {
            own_integrals.push(controller::input_history_integral(
                &self.ctx,
                &state.u_hist[i],
                &state.w_hat_hist[i],
            )?);
        }
        let leader_integral = controller::leader_history_integral(&self.ctx, &state.u0_hist)?;
        let u_delay: Vec<DVector<f64>> =
            (0..self.followers).map(|i| state.u_hist[i].back(m).clone()).collect();
        let u0_delay = state.u0_hist.back(m).clone();
        let w0_delayed = &self.ctx.e_s_tau_inv * &state.w0;
        let esw_delayed: Vec<DVector<f64>> = (0..self.followers)
            .map(|i| {
                let w_delayed = &self.ctx.e_s_tau_inv * &state.w[i];
                let w_bar = &w_delayed - &w0_delayed;
                &self.ctx.e_s_tau * (state.w_hat_hist[i].back(m) - &w_bar)
            })
            .collect();
        Ok(Frozen { own_integrals, leader_integral, u_delay, u0_delay, esw_delayed })
    }

    fn state_dim_flat(&self) -> usize {
        self.n + self.followers * (2 * self.n + self.s + 1)
    }

    fn pack(&self, state: &SimState) -> DVector<f64> {
        let mut y = DVector::zeros(self.state_dim_flat());
        y.rows_mut(0, self.n).copy_from(&state.x0);
        for i in 0..self.followers {
            y.rows_mut(self.off_x(i), self.n).copy_from(&state.x[i]);
            y.rows_mut(self.off_v(i), self.n).copy_from(&state.observers[i].v);
            y.rows_mut(self.off_w_hat(i), self.s).copy_from(&state.observers[i].w_hat);
            y[self.off_c(i)] = state.observers[i].c;
        }
        y
    }

    fn off_x(&self, i: usize) -> usize {
        self.n + i * self.n
    }
    fn off_v(&self, i: usize) -> usize {
        self.n + self.followers * self.n + i * self.n
    }
    fn off_w_hat(&self, i: usize) -> usize {
        self.n + 2 * self.followers * self.n + i * self.s
    }
    fn off_c(&self, i: usize) -> usize {
        self.n + self.followers * (2 * self.n + self.s) + i
    }

    /// Time derivative of the flattened state given frozen delayed terms and
    /// the substage disturbance values.
    fn deriv(
        &self,
        y: &DVector<f64>,
        w0_stage: &DVector<f64>,
        w_stage: &[DVector<f64>],
        frozen: &Frozen,
    ) -> Result<DVector<f64>> {
        let ctx = &self.ctx;
        let nf = self.followers;
        let x0 = y.rows(0, self.n).into_owned();
        let xs: Vec<DVector<f64>> =
            (0..nf).map(|i| y.rows(self.off_x(i), self.n).into_owned()).collect();
        let vs: Vec<DVector<f64>> =
            (0..nf).map(|i| y.rows(self.off_v(i), self.n).into_owned()).collect();
        let w_hats: Vec<DVector<f64>> =
            (0..nf).map(|i| y.rows(self.off_w_hat(i), self.s).into_owned()).collect();
        let cs: Vec<f64> = (0..nf).map(|i| y[self.off_c(i)]).collect();

        // Z̃ and the stacked errors at this substage (frozen integrals).
        let z_tildes: Vec<DVector<f64>> = (0..nf)
            .map(|i| {
                controller::z_tilde_from_parts(
                    ctx,
                    &(&xs[i] - &x0),
                    &frozen.own_integrals[i],
                    &frozen.leader_integral,
                )
            })
            .collect();
        let es: Vec<DVector<f64>> = (0..nf)
            .map(|i| {
                let v_tilde = &vs[i] - &z_tildes[i];
                let mut e = DVector::zeros(self.n + self.s);
                e.rows_mut(0, self.n).copy_from(&v_tilde);
                e.rows_mut(self.n, self.s).copy_from(&frozen.esw_delayed[i]);
                e
            })
            .collect();
        let e_hats: Vec<DVector<f64>> = (0..nf)
            .map(|i| {
                let mut acc = DVector::zeros(self.n + self.s);
                for (j, ej) in es.iter().enumerate() {
                    let w = self.l1[(i, j)];
                    if w != 0.0 {
                        acc += ej * w;
                    }
                }
                acc
            })
            .collect();

        let mut dy = DVector::zeros(self.state_dim_flat());
        // leader
        let dx0 =
            &ctx.plant.a * &x0 + &ctx.plant.b * &frozen.u0_delay + &ctx.plant.e * w0_stage;
        dy.rows_mut(0, self.n).copy_from(&dx0);

        for i in 0..nf {
            let (c_dot, rho) = controller::adaptive_step(ctx, i, &e_hats[i], cs[i]);
            let xi = controller::compute_xi(i, &xs, &x0, &self.topo);
            let varrho = controller::compute_varrho(
                ctx,
                i,
                &vs,
                &frozen.own_integrals,
                &frozen.leader_integral,
                &xi,
                &self.topo,
            )?;
            let (zeta, zeta_tilde) = if ctx.mode == ProtocolMode::Attenuation {
                let bt_q = ctx.bt_q.as_ref().expect("attenuation context has Q");
                (Some(bt_q * &z_tildes[i]), Some(&ctx.bbar_t_p * &e_hats[i]))
            } else {
                (None, None)
            };
            let dz_bar = controller::eso_step(
                ctx,
                i,
                &vs[i],
                &w_hats[i],
                cs[i],
                rho,
                &varrho,
                zeta.as_ref(),
                zeta_tilde.as_ref(),
            )?;
            let dx = &ctx.plant.a * &xs[i]
                + &ctx.plant.b * &frozen.u_delay[i]
                + &ctx.plant.e * &w_stage[i];
            dy.rows_mut(self.off_x(i), self.n).copy_from(&dx);
            dy.rows_mut(self.off_v(i), self.n)
                .copy_from(&dz_bar.rows(0, self.n).into_owned());
            dy.rows_mut(self.off_w_hat(i), self.s)
                .copy_from(&dz_bar.rows(self.n, self.s).into_owned());
            dy[self.off_c(i)] = c_dot;
        }
        Ok(dy)
    }

    fn check_finite(&self, y: &DVector<f64>, t: f64) -> Result<()> {
        for i in 0..self.followers {
            for (lo, len) in [
                (self.off_x(i), self.n),
                (self.off_v(i), self.n),
                (self.off_w_hat(i), self.s),
                (self.off_c(i), 1),
            ] {
                for k in lo..lo + len {
                    if !y[k].is_finite() || y[k].abs() > DIVERGENCE_LIMIT {
                        return Err(Error::Divergence { agent: i + 1, t });
                    }
                }
            }
        }
        for k in 0..self.n {
            if !y[k].is_finite() || y[k].abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { agent: 0, t });
            }
        }
        Ok(())
    }

    /// Advance the state by one dt: RK4 with held delayed terms, exact
    /// disturbance rotation, then buffer pushes and control finalization.
    pub fn step(&self, state: &mut SimState) -> Result<()> {
        let dt = self.scenario.sim.dt;
        let frozen = self.gather_frozen(state)?;

        let w0_a = state.w0.clone();
        let w_a = state.w.clone();
        let w0_b = &self.e_s_dt_half * &w0_a;
        let w_b: Vec<DVector<f64>> = w_a.iter().map(|w| &self.e_s_dt_half * w).collect();
        let w0_c = &self.e_s_dt_half * &w0_b;
        let w_c: Vec<DVector<f64>> = w_b.iter().map(|w| &self.e_s_dt_half * w).collect();

        let y = self.pack(state);
        let k1 = self.deriv(&y, &w0_a, &w_a, &frozen)?;
        let k2 = self.deriv(&(&y + &k1 * (dt / 2.0)), &w0_b, &w_b, &frozen)?;
        let k3 = self.deriv(&(&y + &k2 * (dt / 2.0)), &w0_b, &w_b, &frozen)?;
        let k4 = self.deriv(&(&y + &k3 * dt), &w0_c, &w_c, &frozen)?;
        let y_new = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        state.step_index += 1;
        let t_new = state.step_index as f64 * dt;
        self.check_finite(&y_new, t_new)?;

        state.x0.copy_from(&y_new.rows(0, self.n));
        for i in 0..self.followers {
            state.x[i].copy_from(&y_new.rows(self.off_x(i), self.n));
            state.observers[i].v.copy_from(&y_new.rows(self.off_v(i), self.n));
            state.observers[i]
                .w_hat
                .copy_from(&y_new.rows(self.off_w_hat(i), self.s));
            state.observers[i].c = y_new[self.off_c(i)];
        }
        state.w0 = &self.e_s_dt * &w0_a;
        for i in 0..self.followers {
            state.w[i] = &self.e_s_dt * &w_a[i];
        }
        state.t = t_new;

        for i in 0..self.followers {
            let w_hat = state.observers[i].w_hat.clone();
            let v = state.observers[i].v.clone();
            state.w_hat_hist[i].push(w_hat);
            state.v_hist[i].push(v);
            // seed the new control slot with the previous sample; it is
            // overwritten by finalize_controls
            let stale = state.u_hist[i].newest().clone();
            state.u_hist[i].push(stale);
            let stale_z = state.z_tilde_hist[i].newest().clone();
            state.z_tilde_hist[i].push(stale_z);
        }
        state.u0_hist.push(self.leader_u0(t_new));
        self.finalize_controls(state)?;
        Ok(())
    }

    /// Current-time observer errors (ṽ, current w̃) and ê-derived ρ for the
    /// trajectory record.
    fn record_row(&self, state: &SimState, traj: &mut Trajectory) {
        let nf = self.followers;
        let m = self.ctx.delay_steps;
        let z_now: Vec<DVector<f64>> =
            (0..nf).map(|i| state.z_tilde_hist[i].newest().clone()).collect();
        let v_now: Vec<DVector<f64>> =
            (0..nf).map(|i| state.observers[i].v.clone()).collect();
        let w_hat_delayed: Vec<DVector<f64>> =
            (0..nf).map(|i| state.w_hat_hist[i].back(m).clone()).collect();
        let w_delayed: Vec<DVector<f64>> =
            (0..nf).map(|i| &self.ctx.e_s_tau_inv * &state.w[i]).collect();
        let w0_delayed = &self.ctx.e_s_tau_inv * &state.w0;
        let errors = controller::compute_error_vectors(
            &self.ctx,
            &v_now,
            &z_now,
            &w_hat_delayed,
            &w_delayed,
            &w0_delayed,
        );
        let e_hats = controller::network_errors(&errors, &self.l1);

        traj.times.push(state.t);
        traj.err
            .push((0..nf).map(|i| (&state.x[i] - &state.x0).norm()).collect());
        traj.coupling.push((0..nf).map(|i| state.observers[i].c).collect());
        traj.rho.push(
            (0..nf)
                .map(|i| (e_hats[i].transpose() * &self.ctx.gains.p * &e_hats[i])[(0, 0)])
                .collect(),
        );
        traj.v_tilde.push(errors.iter().map(|e| e.v_tilde.norm()).collect());
        traj.w_tilde.push(
            (0..nf)
                .map(|i| {
                    let w_bar = &state.w[i] - &state.w0;
                    (&state.observers[i].w_hat - &w_bar).norm()
                })
                .collect(),
        );
        traj.u.push(
            (0..nf)
                .flat_map(|i| {
                    state.u_hist[i].newest().iter().copied().collect::<Vec<f64>>()
                })
                .collect(),
        );
    }

    /// The two algebraically-equal routes to ϱ, evaluated on the committed
    /// state; their gap is the identity instrumentation.
    fn varrho_identity_gap(&self, state: &SimState) -> Result<f64> {
        let nf = self.followers;
        let mut own = Vec::with_capacity(nf);
        for i in 0..nf {
            own.push(controller::input_history_integral(
                &self.ctx,
                &state.u_hist[i],
                &state.w_hat_hist[i],
            )?);
        }
        let j0 = controller::leader_history_integral(&self.ctx, &state.u0_hist)?;
        let xs: Vec<DVector<f64>> = state.x.to_vec();
        let vs: Vec<DVector<f64>> = (0..nf).map(|i| state.observers[i].v.clone()).collect();
        let mut worst = 0.0_f64;
        for i in 0..nf {
            let xi = controller::compute_xi(i, &xs, &state.x0, &self.topo);
            let lhs =
                controller::compute_varrho(&self.ctx, i, &vs, &own, &j0, &xi, &self.topo)?;
            let mut rhs = DVector::zeros(self.n);
            for j in 0..nf {
                let w = self.l1[(i, j)];
                if w != 0.0 {
                    let v_tilde = &vs[j] - state.z_tilde_hist[j].newest();
                    rhs += v_tilde * w;
                }
            }
            worst = worst.max((lhs - rhs).norm());
        }
        Ok(worst)
    }

    fn probe_row(&self, state: &SimState, probe: &mut ProbeLog) -> Result<()> {
        let nf = self.followers;
        let m = self.ctx.delay_steps;
        let ctx = &self.ctx;
        let factor = ctx.leader_factor();
        let u0_now = state.u0_hist.newest().clone();
        let mut z_row = Vec::with_capacity(nf);
        let mut rhs_row = Vec::with_capacity(nf);
        let mut eq11_row = Vec::with_capacity(nf);
        let mut eq57_row = Vec::with_capacity(nf);
        for i in 0..nf {
            let z_now = state.z_tilde_hist[i].newest().clone();
            let u_now = state.u_hist[i].newest();
            let w_hat_now = &state.observers[i].w_hat;
            let w_hat_del = state.w_hat_hist[i].back(m);
            let w_bar_del = &ctx.e_s_tau_inv * (&state.w[i] - &state.w0);
            let w_tilde_del = w_hat_del - &w_bar_del;
            let rhs = &ctx.plant.a * &z_now
                + &ctx.plant.b * (u_now - &u0_now * factor)
                + &ctx.e_estau * w_hat_now
                - &ctx.e_a_tau * (&ctx.e_estau * &w_tilde_del);
            // control-substitution identity (rejection law only)
            let eq11 = if ctx.mode != ProtocolMode::Attenuation {
                let mut acc = &ctx.e_a_tau * (&state.x[i] - &state.x0);
                if ctx.delay_steps > 0 {
                    for k in 0..=ctx.delay_steps {
                        acc += &ctx.grid_exp[k]
                            * (&ctx.plant.b * (&ctx.gains.k1 * state.v_hist[i].back(k)))
                            * ctx.quad_w[k];
                    }
                }
                (&z_now - acc).norm()
            } else {
                f64::NAN
            };
            // prediction identity for t >= tau
            let eq57 = if state.t + 1e-12 >= ctx.plant.tau {
                let mut window = Vec::with_capacity(m + 1);
                let mut w_bar = &ctx.e_s_tau_inv * (&state.w[i] - &state.w0);
                for k in 0..=m {
                    let w_hat_s = state.w_hat_hist[i].back(m + k);
                    window.push(w_hat_s - &w_bar);
                    w_bar = &self.e_s_dt_inv * w_bar;
                }
                let res = controller::prediction_residual(
                    ctx,
                    &(&state.x[i] - &state.x0),
                    state.z_tilde_hist[i].back(m),
                    &window,
                )?;
                res.norm()
            } else {
                f64::NAN
            };
            z_row.push(z_now);
            rhs_row.push(rhs);
            eq11_row.push(eq11);
            eq57_row.push(eq57);
        }
        probe.times.push(state.t);
        probe.z_tilde.push(z_row);
        probe.z_rhs.push(rhs_row);
        probe.eq11.push(eq11_row);
        probe.eq57.push(eq57_row);
        Ok(())
    }

    pub fn run(&self) -> Result<Trajectory> {
        self.run_inner(None).map(|(t, _)| t)
    }

    /// Run with per-step identity diagnostics (used by the verification
    /// suites; the stride-sampled trajectory is unchanged).
    pub fn run_probed(&self) -> Result<(Trajectory, ProbeLog)> {
        let (traj, probe) = self.run_inner(Some(ProbeLog::default()))?;
        Ok((traj, probe.expect("probe requested")))
    }

    fn run_inner(&self, mut probe: Option<ProbeLog>) -> Result<(Trajectory, Option<ProbeLog>)> {
        let mut state = self.initial_state()?;
        let mut traj = Trajectory {
            dt: self.scenario.sim.dt,
            horizon: self.scenario.sim.horizon,
            seed: self.scenario.sim.seed,
            sample_stride: self.scenario.sim.sample_stride,
            input_dim: self.p,
            times: Vec::new(),
            err: Vec::new(),
            coupling: Vec::new(),
            rho: Vec::new(),
            v_tilde: Vec::new(),
            w_tilde: Vec::new(),
            u: Vec::new(),
            varrho_identity_max: 0.0,
            residual_radius: self.residual_radius.clone(),
            divergence: None,
        };
        self.record_row(&state, &mut traj);
        traj.varrho_identity_max = self.varrho_identity_gap(&state)?;
        if let Some(p) = probe.as_mut() {
            self.probe_row(&state, p)?;
        }
        for _ in 0..self.steps {
            match self.step(&mut state) {
                Ok(()) => {}
                Err(Error::Divergence { agent, t }) => {
                    traj.divergence = Some(DivergenceRecord { agent, t });
                    return Ok((traj, probe));
                }
                Err(e) => return Err(e),
            }
            traj.varrho_identity_max =
                traj.varrho_identity_max.max(self.varrho_identity_gap(&state)?);
            if state.step_index % self.sample_every == 0 {
                self.record_row(&state, &mut traj);
            }
            if let Some(p) = probe.as_mut() {
                self.probe_row(&state, p)?;
            }
        }
        Ok((traj, probe))
    }
}

/// One-call convenience: synthesize and simulate.
pub fn run(scenario: &ScenarioConfig) -> Result<Trajectory> {
    Simulator::new(scenario.clone())?.run()
}

/// Sequential batch runner (always available).
pub fn run_batch_sequential(scenarios: &[ScenarioConfig]) -> Vec<Result<Trajectory>> {
    scenarios.iter().map(run).collect()
}

/// Batch runner: rayon data-parallel when the `parallel` feature is on,
/// sequential otherwise. Runs are independent, so the output order (and
/// every byte of it) matches the sequential runner.
#[cfg(feature = "parallel")]
pub fn run_batch(scenarios: &[ScenarioConfig]) -> Vec<Result<Trajectory>> {
    use rayon::prelude::*;
    scenarios.par_iter().map(run).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(scenarios: &[ScenarioConfig]) -> Vec<Result<Trajectory>> {
    run_batch_sequential(scenarios)
}

/// The same scenario replicated over a seed list.
pub fn seed_sweep(base: &ScenarioConfig, seeds: &[u64]) -> Vec<ScenarioConfig> {
    seeds
        .iter()
        .map(|&seed| {
            let mut sc = base.clone();
            sc.sim.seed = seed;
            sc
        })
        .collect()
}

/// Tail statistics per follower.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FollowerMetrics {
    pub sup_tail_err: f64,
    pub sup_tail_v_tilde: f64,
    pub sup_tail_w_tilde: f64,
    pub c_final: f64,
    pub c_max: f64,
    pub c_tail_median: f64,
    /// |c(T) − c(T−1)|.
    pub c_last_second_delta: f64,
    pub c_monotonicity_violations: usize,
    /// Fraction of tail samples with ‖x̃‖ ≤ residual radius (attenuation
    /// runs with a certificate overlay).
    pub tail_within_radius_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tail_start: f64,
    pub varrho_identity_max: f64,
    pub per_follower: Vec<FollowerMetrics>,
    pub divergence: Option<DivergenceRecord>,
}

/// Summarize a trajectory on the tail window [0.8·T, T].
pub fn metrics(traj: &Trajectory, cert: Option<&CertificateBundle>) -> MetricsReport {
    let nf = traj.followers();
    let tail_start = 0.8 * traj.horizon;
    let tail: Vec<usize> = (0..traj.times.len())
        .filter(|&k| traj.times[k] >= tail_start - 1e-12)
        .collect();
    let radius: Option<&Vec<f64>> = cert
        .map(|c| &c.residual_radius)
        .or(traj.residual_radius.as_ref());
    let sup = |series: &Vec<Vec<f64>>, i: usize| -> f64 {
        tail.iter().map(|&k| series[k][i]).fold(f64::NAN, f64::max)
    };
    let last_second_idx = (0..traj.times.len())
        .find(|&k| traj.times[k] >= traj.horizon - 1.0 - 1e-12)
        .unwrap_or(0);
    let per_follower = (0..nf)
        .map(|i| {
            let c_series: Vec<f64> = traj.coupling.iter().map(|row| row[i]).collect();
            let c_final = *c_series.last().unwrap_or(&f64::NAN);
            let violations = c_series
                .windows(2)
                .filter(|w| w[1] < w[0] - MONOTONICITY_SLACK)
                .count();
            let mut c_tail: Vec<f64> = tail.iter().map(|&k| c_series[k]).collect();
            c_tail.sort_by(f64::total_cmp);
            let c_tail_median = if c_tail.is_empty() {
                f64::NAN
            } else {
                c_tail[c_tail.len() / 2]
            };
            let within = radius.map(|r| {
                if tail.is_empty() {
                    f64::NAN
                } else {
                    tail.iter().filter(|&&k| traj.err[k][i] <= r[i]).count() as f64
                        / tail.len() as f64
                }
            });
            FollowerMetrics {
                sup_tail_err: sup(&traj.err, i),
                sup_tail_v_tilde: sup(&traj.v_tilde, i),
                sup_tail_w_tilde: sup(&traj.w_tilde, i),
                c_final,
                c_max: c_series.iter().cloned().fold(f64::NAN, f64::max),
                c_tail_median,
                c_last_second_delta: (c_final - c_series[last_second_idx]).abs(),
                c_monotonicity_violations: violations,
                tail_within_radius_fraction: within,
            }
        })
        .collect();
    MetricsReport {
        tail_start,
        varrho_identity_max: traj.varrho_identity_max,
        per_follower,
        divergence: traj.divergence,
    }
}
