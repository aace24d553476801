// scratch: dissect the Eq-8 FD mismatch into its parts
use nalgebra::DVector;
use peso_core::simcore::Simulator;
use peso_core::sysmodel::example1_scenario;

#[test]
fn fd_dissect() {
    let mut sc = example1_scenario();
    sc.sim.horizon = 3.0;
    let sim = Simulator::new(sc).unwrap();
    let ctx = sim.context();
    let (_, probe) = sim.run_probed().unwrap();
    let dt = 1e-3;
    let steps = probe.times.len();
    let nf = probe.z_tilde[0].len();

    // x-tilde and u series are not in the probe; rerun stepwise and record them
    let sim2 = Simulator::new({
        let mut sc = example1_scenario();
        sc.sim.horizon = 3.0;
        sc
    })
    .unwrap();
    let mut state = sim2.initial_state().unwrap();
    let mut xt_series: Vec<Vec<DVector<f64>>> = vec![(0..nf)
        .map(|i| (&state.x[i] - &state.x0))
        .collect()];
    let mut u_series: Vec<Vec<DVector<f64>>> = vec![(0..nf)
        .map(|i| state.u_hist[i].newest().clone())
        .collect()];
    let mut what_series: Vec<Vec<DVector<f64>>> = vec![(0..nf)
        .map(|i| state.observers[i].w_hat.clone())
        .collect()];
    let mut wbar_series: Vec<Vec<DVector<f64>>> = vec![(0..nf)
        .map(|i| (&state.w[i] - &state.w0))
        .collect()];
    for _ in 0..(3.0_f64 / dt).round() as usize {
        sim2.step(&mut state).unwrap();
        xt_series.push((0..nf).map(|i| (&state.x[i] - &state.x0)).collect());
        u_series.push((0..nf).map(|i| state.u_hist[i].newest().clone()).collect());
        what_series.push((0..nf).map(|i| state.observers[i].w_hat.clone()).collect());
        wbar_series.push((0..nf).map(|i| (&state.w[i] - &state.w0)).collect());
    }

    let m = ctx.delay_steps;
    let bands = [(0.3, 0.5), (1.0, 1.5), (2.0, 3.0)];
    for (lo, hi) in bands {
        let mut worst_full = 0.0_f64;
        let mut worst_x = 0.0_f64;
        let mut worst_j = 0.0_f64;
        for k in (m + 2)..steps - 1 {
            let t = probe.times[k];
            if t < lo || t >= hi {
                continue;
            }
            for i in 0..nf {
                let fd = (&probe.z_tilde[k + 1][i] - &probe.z_tilde[k - 1][i]) / (2.0 * dt);
                let rhs = &probe.z_rhs[k][i];
                worst_full = worst_full.max((&fd - rhs).norm() / (1.0 + rhs.norm()));

                // x-part: FD(e^{Aτ}x~) vs e^{Aτ}(A x~ + B u(t-τ) + E w̄)
                let fd_x = &ctx.e_a_tau
                    * ((&xt_series[k + 1][i] - &xt_series[k - 1][i]) / (2.0 * dt));
                let rhs_x = &ctx.e_a_tau
                    * (&ctx.plant.a * &xt_series[k][i]
                        + &ctx.plant.b * &u_series[k - m][i]
                        + &ctx.plant.e * &wbar_series[k][i]);
                worst_x = worst_x.max((&fd_x - &rhs_x).norm() / (1.0 + rhs_x.norm()));

                // J-part: FD(J) vs f(t) - e^{Aτ} f(t-τ) + A J
                let j_of = |kk: usize, ii: usize| {
                    &probe.z_tilde[kk][ii] - &ctx.e_a_tau * &xt_series[kk][ii]
                };
                let fd_j = (j_of(k + 1, i) - j_of(k - 1, i)) / (2.0 * dt);
                let f_now = &ctx.plant.b * &u_series[k][i] + &ctx.e_estau * &what_series[k][i];
                let f_del =
                    &ctx.plant.b * &u_series[k - m][i] + &ctx.e_estau * &what_series[k - m][i];
                let rhs_j = &f_now - &ctx.e_a_tau * &f_del + &ctx.plant.a * j_of(k, i);
                worst_j = worst_j.max((&fd_j - &rhs_j).norm() / (1.0 + rhs_j.norm()));
            }
        }
        println!("band [{lo},{hi}): full {worst_full:.3e}  x-part {worst_x:.3e}  J-part {worst_j:.3e}");
    }
}
