//! Runtime pieces of the distributed protocol: the reduction transform that
//! absorbs the input delay, the network measurement signals, the adaptive
//! extended state observer, and the control laws for all three variants.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matcore;
use crate::netgraph::Topology;
use crate::sysmodel::{GainMode, GainSet, Plant};

/// Which control law the runtime applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolMode {
    /// Delayed input, input-free leader: u = K1·v − Fe^{Sτ}·ŵ.
    Rejection,
    /// No input delay, input-free leader: u = K1·v − F·ŵ.
    NoDelay,
    /// Delayed input, bounded leader input: the rejection law minus
    /// α·z(BᵀQZ̃).
    Attenuation,
}

/// Fixed-stride ring of vector samples covering the recent past.
///
/// `back(0)` is the newest sample, `back(depth-1)` the oldest. Before the
/// buffer has been pushed `depth` times, old slots still hold the declared
/// initial value, which is exactly the pre-history convention the protocol
/// needs (u ≡ 0, observers held at their initial values on [−τ, 0]).
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    step: f64,
    data: VecDeque<DVector<f64>>,
}

impl HistoryBuffer {
    pub fn constant(step: f64, depth: usize, value: DVector<f64>) -> Self {
        assert!(depth >= 1, "history buffer needs at least one slot");
        let mut data = VecDeque::with_capacity(depth);
        for _ in 0..depth {
            data.push_back(value.clone());
        }
        HistoryBuffer { step, data }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn depth(&self) -> usize {
        self.data.len()
    }

    /// Drop the oldest sample and append a new one.
    pub fn push(&mut self, value: DVector<f64>) {
        self.data.pop_front();
        self.data.push_back(value);
    }

    /// Sample `k` steps back from the newest.
    pub fn back(&self, k: usize) -> &DVector<f64> {
        let len = self.data.len();
        assert!(k < len, "history read {k} steps back exceeds depth {len}");
        &self.data[len - 1 - k]
    }

    pub fn newest(&self) -> &DVector<f64> {
        self.back(0)
    }

    /// Overwrite the newest sample in place (used to finalize the control
    /// sample for the current instant after the transform is evaluated).
    pub fn set_newest(&mut self, value: DVector<f64>) {
        let len = self.data.len();
        self.data[len - 1] = value;
    }
}

/// Per-follower observer state: consensus part v, disturbance part ŵ, and
/// the adaptive coupling weight c (ρ is derived from ê each evaluation).
#[derive(Debug, Clone)]
pub struct ObserverState {
    pub v: DVector<f64>,
    pub w_hat: DVector<f64>,
    pub c: f64,
}

/// The stacked observer errors for one follower: ṽ = v − Z̃ and the
/// delay-rotated disturbance error e^{Sτ}·w̃(t−τ), concatenated as e.
#[derive(Debug, Clone)]
pub struct ErrorVector {
    pub v_tilde: DVector<f64>,
    pub w_tilde_delayed: DVector<f64>,
    pub e: DVector<f64>,
}

/// Attenuation-only runtime constants.
#[derive(Debug, Clone)]
pub struct AttenuationRuntime {
    pub alpha: f64,
    pub beta1: f64,
    pub epsilon: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Precomputed constants shared by every protocol evaluation: matrix
/// exponentials, the observer system matrices, and the quadrature grid for
/// the history integrals.
#[derive(Debug, Clone)]
pub struct ProtocolContext {
    pub plant: Plant,
    pub gains: GainSet,
    pub mode: ProtocolMode,
    pub dt: f64,
    /// τ / dt; zero for the delay-free variant.
    pub delay_steps: usize,
    pub e_a_tau: DMatrix<f64>,
    pub e_s_tau: DMatrix<f64>,
    pub e_s_tau_inv: DMatrix<f64>,
    /// blockdiag(A + BK1, S): the autonomous observer dynamics.
    pub a_bar1: DMatrix<f64>,
    /// [K_v; K_w]: the network-correction injection.
    pub a_bar2: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    /// e^{A·k·dt} for k = 0..=delay_steps.
    pub grid_exp: Vec<DMatrix<f64>>,
    /// Composite-trapezoid weights on the same grid.
    pub quad_w: Vec<f64>,
    /// E·e^{Sτ}, the disturbance-feed integrand factor.
    pub e_estau: DMatrix<f64>,
    /// F·e^{Sτ} (plain F in the delay-free variant).
    pub f_dist: DMatrix<f64>,
    /// BᵀQ, present in attenuation mode.
    pub bt_q: Option<DMatrix<f64>>,
    /// B̄ᵀP.
    pub bbar_t_p: DMatrix<f64>,
    pub atten: Option<AttenuationRuntime>,
}

impl ProtocolContext {
    pub fn new(plant: Plant, gains: GainSet, followers: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        let ratio = plant.tau / dt;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dt = {dt} does not divide tau = {} (misaligned buffer grid)",
                plant.tau
            )));
        }
        let delay_steps = ratio.round() as usize;

        let n = plant.state_dim();
        let s = plant.disturbance_dim();
        let p = plant.input_dim();
        let e_a_tau = matcore::mat_exp(&plant.a, plant.tau)?;
        let e_s_tau = matcore::mat_exp(&plant.s, plant.tau)?;
        let e_s_tau_inv = matcore::mat_exp(&plant.s, -plant.tau)?;

        let a_cl = &plant.a + &plant.b * &gains.k1;
        let mut a_bar1 = DMatrix::zeros(n + s, n + s);
        a_bar1.view_mut((0, 0), (n, n)).copy_from(&a_cl);
        a_bar1.view_mut((n, n), (s, s)).copy_from(&plant.s);
        let mut a_bar2 = DMatrix::zeros(n + s, n);
        a_bar2.view_mut((0, 0), (n, n)).copy_from(&gains.k_v);
        a_bar2.view_mut((n, 0), (s, n)).copy_from(&gains.k_w);
        let mut b_bar = DMatrix::zeros(n + s, p);
        b_bar.view_mut((0, 0), (n, p)).copy_from(&plant.b);

        let grid_exp: Vec<DMatrix<f64>> = (0..=delay_steps)
            .map(|k| matcore::mat_exp(&plant.a, k as f64 * dt))
            .collect::<Result<_>>()?;
        let quad_w = trapezoid_weights(delay_steps, dt);

        let e_estau = &plant.e * &e_s_tau;
        let (mode, f_dist) = match (&gains.mode, delay_steps) {
            (GainMode::Rejection, 0) => (ProtocolMode::NoDelay, plant.f.clone()),
            (GainMode::Rejection, _) => (ProtocolMode::Rejection, &plant.f * &e_s_tau),
            (GainMode::Attenuation { .. }, _) => (ProtocolMode::Attenuation, &plant.f * &e_s_tau),
        };
        let (bt_q, atten) = match &gains.mode {
            GainMode::Rejection => (None, None),
            GainMode::Attenuation { alpha, beta1, epsilon, sigma, .. } => {
                let q = gains.requires_q()?;
                let eps = expand_per_follower(epsilon, followers, "epsilon")?;
                let sig = expand_per_follower(sigma, followers, "sigma")?;
                (
                    Some(plant.b.transpose() * q),
                    Some(AttenuationRuntime {
                        alpha: *alpha,
                        beta1: *beta1,
                        epsilon: eps,
                        sigma: sig,
                    }),
                )
            }
        };
        let bbar_t_p = b_bar.transpose() * &gains.p;

        Ok(ProtocolContext {
            plant,
            gains,
            mode,
            dt,
            delay_steps,
            e_a_tau,
            e_s_tau,
            e_s_tau_inv,
            a_bar1,
            a_bar2,
            b_bar,
            grid_exp,
            quad_w,
            e_estau,
            f_dist,
            bt_q,
            bbar_t_p,
            atten,
        })
    }

    /// 1 when the reduction transform subtracts the leader input, 0 otherwise.
    pub fn leader_factor(&self) -> f64 {
        match self.mode {
            ProtocolMode::Attenuation => 1.0,
            _ => 0.0,
        }
    }

    pub fn aug_dim(&self) -> usize {
        self.plant.state_dim() + self.plant.disturbance_dim()
    }

    fn check_buffer(&self, hist: &HistoryBuffer, what: &str) -> Result<()> {
        if (hist.step() - self.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "{what} buffer stride {} does not match dt {}",
                hist.step(),
                self.dt
            )));
        }
        if hist.depth() < self.delay_steps + 1 {
            return Err(Error::Config(format!(
                "{what} buffer depth {} does not cover the delay window ({} samples)",
                hist.depth(),
                self.delay_steps + 1
            )));
        }
        Ok(())
    }
}

fn expand_per_follower(values: &[f64], followers: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; followers]),
        l if l == followers => Ok(values.to_vec()),
        l => Err(Error::Config(format!(
            "{what} has {l} entries; expected 1 or {followers}"
        ))),
    }
}

fn trapezoid_weights(m: usize, dt: f64) -> Vec<f64> {
    if m == 0 {
        return vec![0.0];
    }
    let mut w = vec![dt; m + 1];
    w[0] = dt / 2.0;
    w[m] = dt / 2.0;
    w
}

/// ∫_{t−τ}^{t} e^{A(t−s)}[B·u(s) + Ee^{Sτ}·ŵ(s)] ds on the buffer grid.
pub fn input_history_integral(
    ctx: &ProtocolContext,
    u_hist: &HistoryBuffer,
    w_hat_hist: &HistoryBuffer,
) -> Result<DVector<f64>> {
    ctx.check_buffer(u_hist, "control-history")?;
    ctx.check_buffer(w_hat_hist, "disturbance-observer-history")?;
    let n = ctx.plant.state_dim();
    let mut acc = DVector::zeros(n);
    if ctx.delay_steps == 0 {
        return Ok(acc);
    }
    for k in 0..=ctx.delay_steps {
        let inner = &ctx.plant.b * u_hist.back(k) + &ctx.e_estau * w_hat_hist.back(k);
        acc += &ctx.grid_exp[k] * inner * ctx.quad_w[k];
    }
    Ok(acc)
}

/// ∫_{t−τ}^{t} e^{A(t−s)}·B·u₀(s) ds, the leader part of the attenuation
/// transform.
pub fn leader_history_integral(
    ctx: &ProtocolContext,
    u0_hist: &HistoryBuffer,
) -> Result<DVector<f64>> {
    ctx.check_buffer(u0_hist, "leader-input-history")?;
    let n = ctx.plant.state_dim();
    let mut acc = DVector::zeros(n);
    if ctx.delay_steps == 0 {
        return Ok(acc);
    }
    for k in 0..=ctx.delay_steps {
        acc += &ctx.grid_exp[k] * (&ctx.plant.b * u0_hist.back(k)) * ctx.quad_w[k];
    }
    Ok(acc)
}

/// Z̃ from its precomputed pieces: e^{Aτ}·x̃ + J − factor·J₀.
pub fn z_tilde_from_parts(
    ctx: &ProtocolContext,
    x_tilde: &DVector<f64>,
    own_integral: &DVector<f64>,
    leader_integral: &DVector<f64>,
) -> DVector<f64> {
    let mut z = &ctx.e_a_tau * x_tilde + own_integral;
    let factor = ctx.leader_factor();
    if factor != 0.0 {
        z -= leader_integral * factor;
    }
    z
}

/// The reduction (delay-absorbing) transform for one follower:
/// Z̃ = e^{Aτ}x̃ + ∫ e^{A(t−s)}[B(u(s) − u₀(s)·mode) + Ee^{Sτ}ŵ(s)]ds.
///
/// In rejection/no-delay modes the leader history is ignored.
pub fn reduction_transform(
    ctx: &ProtocolContext,
    x_tilde: &DVector<f64>,
    u_hist: &HistoryBuffer,
    w_hat_hist: &HistoryBuffer,
    u0_hist: Option<&HistoryBuffer>,
) -> Result<DVector<f64>> {
    let own = input_history_integral(ctx, u_hist, w_hat_hist)?;
    let leader = match (ctx.mode, u0_hist) {
        (ProtocolMode::Attenuation, Some(h)) => leader_history_integral(ctx, h)?,
        (ProtocolMode::Attenuation, None) => {
            return Err(Error::Config(
                "attenuation-mode reduction transform needs the leader input history".into(),
            ))
        }
        _ => DVector::zeros(ctx.plant.state_dim()),
    };
    Ok(z_tilde_from_parts(ctx, x_tilde, &own, &leader))
}

/// Relative network measurement ξᵢ = Σⱼ aᵢⱼ(xᵢ − xⱼ) + aᵢ₀(xᵢ − x₀).
pub fn compute_xi(
    i: usize,
    followers: &[DVector<f64>],
    leader: &DVector<f64>,
    topo: &Topology,
) -> DVector<f64> {
    let adj = topo.adjacency();
    let a0 = topo.leader_vector();
    let mut xi = (&followers[i] - leader) * a0[i];
    for (j, xj) in followers.iter().enumerate() {
        if adj[(i, j)] != 0.0 {
            xi += (&followers[i] - xj) * adj[(i, j)];
        }
    }
    xi
}

/// The observable network signal ϱᵢ built from observer states, stored
/// histories, and the relative measurement; algebraically equal to
/// Σⱼ lᵢⱼ·ṽⱼ.
///
/// `own_integrals[j]` is follower j's history integral (the same quantity
/// the reduction transform uses); differences of them reproduce the pairwise
/// integrals of the definition because the integrand is linear in (u, ŵ).
pub fn compute_varrho(
    ctx: &ProtocolContext,
    i: usize,
    v: &[DVector<f64>],
    own_integrals: &[DVector<f64>],
    leader_integral: &DVector<f64>,
    xi_i: &DVector<f64>,
    topo: &Topology,
) -> Result<DVector<f64>> {
    if v.len() != topo.followers || own_integrals.len() != topo.followers {
        return Err(Error::Config(
            "varrho needs observer states and history integrals for every neighbor".into(),
        ));
    }
    let adj = topo.adjacency();
    let a0 = topo.leader_vector();
    let n = ctx.plant.state_dim();
    let mut acc = DVector::zeros(n);
    if a0[i] != 0.0 {
        let mut own = &v[i] - &own_integrals[i];
        if ctx.leader_factor() != 0.0 {
            own += leader_integral * ctx.leader_factor();
        }
        acc += own * a0[i];
    }
    for j in 0..topo.followers {
        if adj[(i, j)] != 0.0 {
            let pair = (&v[i] - &v[j]) - (&own_integrals[i] - &own_integrals[j]);
            acc += pair * adj[(i, j)];
        }
    }
    acc -= &ctx.e_a_tau * xi_i;
    Ok(acc)
}

/// The bounded compensation direction: x/‖x‖ outside the σ-ball, x/σ inside.
/// Continuous at the boundary and never longer than a unit vector.
pub fn z_fn(x: &DVector<f64>, sigma: f64) -> DVector<f64> {
    debug_assert!(sigma > 0.0);
    let norm = x.norm();
    if norm > sigma {
        x / norm
    } else {
        x / sigma
    }
}

/// The control law for follower i.
pub fn control_input(
    ctx: &ProtocolContext,
    i: usize,
    v_i: &DVector<f64>,
    w_hat_i: &DVector<f64>,
    z_tilde_i: &DVector<f64>,
) -> Result<DVector<f64>> {
    let base = &ctx.gains.k1 * v_i - &ctx.f_dist * w_hat_i;
    match ctx.mode {
        ProtocolMode::Rejection | ProtocolMode::NoDelay => Ok(base),
        ProtocolMode::Attenuation => {
            let bt_q = ctx
                .bt_q
                .as_ref()
                .ok_or_else(|| Error::Config("attenuation control law needs Q".into()))?;
            let atten = ctx
                .atten
                .as_ref()
                .ok_or_else(|| Error::Config("attenuation control law needs its parameters".into()))?;
            let zeta = bt_q * z_tilde_i;
            Ok(base - z_fn(&zeta, atten.sigma[i]) * atten.alpha)
        }
    }
}

/// Time derivative of the stacked observer state Z̄ᵢ = [vᵢ; ŵᵢ]:
/// Ā₁Z̄ + Ā₂(c+ρ)ϱ, with the attenuation variant subtracting
/// B̄α[z(ζ) + z(ζ̃)].
#[allow(clippy::too_many_arguments)]
pub fn eso_step(
    ctx: &ProtocolContext,
    i: usize,
    v_i: &DVector<f64>,
    w_hat_i: &DVector<f64>,
    c_i: f64,
    rho_i: f64,
    varrho_i: &DVector<f64>,
    zeta_i: Option<&DVector<f64>>,
    zeta_tilde_i: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let n = ctx.plant.state_dim();
    let s = ctx.plant.disturbance_dim();
    let mut z_bar = DVector::zeros(n + s);
    z_bar.rows_mut(0, n).copy_from(v_i);
    z_bar.rows_mut(n, s).copy_from(w_hat_i);
    let mut dz = &ctx.a_bar1 * &z_bar + &ctx.a_bar2 * varrho_i * (c_i + rho_i);
    if ctx.mode == ProtocolMode::Attenuation {
        let atten = ctx
            .atten
            .as_ref()
            .ok_or_else(|| Error::Config("attenuation observer needs its parameters".into()))?;
        let (zeta, zeta_tilde) = match (zeta_i, zeta_tilde_i) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(
                    "attenuation observer step needs zeta and zeta-tilde".into(),
                ))
            }
        };
        let correction =
            z_fn(zeta, atten.sigma[i]) + z_fn(zeta_tilde, atten.sigma[i]);
        dz -= &ctx.b_bar * correction * atten.alpha;
    }
    Ok(dz)
}

/// Adaptive-weight dynamics: ċ = êᵀΓê (minus the εᵢ(c − β₁) leak in
/// attenuation mode) and the derived ρ = êᵀPê.
pub fn adaptive_step(
    ctx: &ProtocolContext,
    i: usize,
    e_hat_i: &DVector<f64>,
    c_i: f64,
) -> (f64, f64) {
    let rho = (e_hat_i.transpose() * &ctx.gains.p * e_hat_i)[(0, 0)];
    let mut c_dot = (e_hat_i.transpose() * &ctx.gains.gamma * e_hat_i)[(0, 0)];
    if let Some(atten) = &ctx.atten {
        c_dot -= atten.epsilon[i] * (c_i - atten.beta1);
    }
    (c_dot, rho)
}

/// The simulator-resident error vectors: eᵢ = [ṽᵢ; e^{Sτ}w̃ᵢ(t−τ)] with
/// ṽ = v − Z̃ and w̃(t−τ) = ŵ(t−τ) − (w(t−τ) − w₀(t−τ)), and their network
/// combination ê = (L1 ⊗ I)e.
///
/// The w̃ part needs relative disturbances no follower measures, so this is
/// evaluated with global simulator truth by design; it is kept in one place
/// so a relative-information estimate could replace it.
pub fn compute_error_vectors(
    ctx: &ProtocolContext,
    v: &[DVector<f64>],
    z_tilde: &[DVector<f64>],
    w_hat_delayed: &[DVector<f64>],
    w_delayed: &[DVector<f64>],
    w0_delayed: &DVector<f64>,
) -> Vec<ErrorVector> {
    let count = v.len();
    let n = ctx.plant.state_dim();
    let s = ctx.plant.disturbance_dim();
    let mut errors: Vec<ErrorVector> = Vec::with_capacity(count);
    for i in 0..count {
        let v_tilde = &v[i] - &z_tilde[i];
        let w_bar = &w_delayed[i] - w0_delayed;
        let w_tilde_delayed = &ctx.e_s_tau * (&w_hat_delayed[i] - w_bar);
        let mut e = DVector::zeros(n + s);
        e.rows_mut(0, n).copy_from(&v_tilde);
        e.rows_mut(n, s).copy_from(&w_tilde_delayed);
        errors.push(ErrorVector { v_tilde, w_tilde_delayed, e });
    }
    errors
}

/// ê = (L1 ⊗ I)·e row by row.
pub fn network_errors(errors: &[ErrorVector], l1: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let count = errors.len();
    (0..count)
        .map(|i| {
            let mut acc = DVector::zeros(errors[0].e.len());
            for (j, ej) in errors.iter().enumerate() {
                let w = l1[(i, j)];
                if w != 0.0 {
                    acc += &ej.e * w;
                }
            }
            acc
        })
        .collect()
}

/// The prediction identity residual:
/// x̃(t) − Z̃(t−τ) + ∫_{t−τ}^{t} e^{A(t−s)}·Ee^{Sτ}·w̃(s−τ) ds.
///
/// `w_tilde_window[k]` must hold w̃(t − τ − k·dt) for k = 0..=delay_steps
/// (newest first), i.e. the disturbance-observer error over [t−2τ, t−τ].
/// The residual is zero up to quadrature error when the dynamics are
/// integrated consistently.
pub fn prediction_residual(
    ctx: &ProtocolContext,
    x_tilde_now: &DVector<f64>,
    z_tilde_delayed: &DVector<f64>,
    w_tilde_window: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if w_tilde_window.len() != ctx.delay_steps + 1 {
        return Err(Error::Config(format!(
            "prediction residual needs {} disturbance-error samples, got {}",
            ctx.delay_steps + 1,
            w_tilde_window.len()
        )));
    }
    let mut residual = x_tilde_now - z_tilde_delayed;
    for k in 0..=ctx.delay_steps {
        residual += &ctx.grid_exp[k] * (&ctx.e_estau * &w_tilde_window[k]) * ctx.quad_w[k];
    }
    Ok(residual)
}
