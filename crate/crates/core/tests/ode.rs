use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smurf_core::autodiff::{Graph, Tensor, Var};
use smurf_core::cmbk::{integrate, OdeOptions, Solver};
use smurf_core::Error;

fn opts(solver: Solver, substeps: usize) -> OdeOptions {
    OdeOptions { solver, substeps, tol: 1e-6 }
}

fn solve(f: &dyn Fn(&mut Graph, f64, Var) -> smurf_core::Result<Var>, z0: f64, times: &[f64], o: OdeOptions) -> Vec<f64> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![z0]));
    integrate(&mut g, &f, z, times, &o)
        .unwrap()
        .into_iter()
        .map(|v| g.value(v).item())
        .collect()
}

fn identity(_: &mut Graph, _: f64, z: Var) -> smurf_core::Result<Var> {
    Ok(z)
}

fn decay(g: &mut Graph, _: f64, z: Var) -> smurf_core::Result<Var> {
    g.neg(z)
}

#[test]
fn zero_derivative_keeps_initial_state() {
    let zero = |g: &mut Graph, _: f64, z: Var| g.scale(z, 0.0);
    for solver in [Solver::Euler, Solver::Rk4, Solver::Dopri] {
        let z = solve(&zero, 0.7, &[0.0, 0.25, 0.5, 0.75], opts(solver, 3));
        assert_eq!(z, vec![0.7; 4], "{solver:?}");
    }
}

#[test]
fn euler_recurrence() {
    let z = solve(&identity, 1.0, &[0.0, 0.5, 1.0], opts(Solver::Euler, 1));
    assert_eq!(z, vec![1.0, 1.5, 2.25]);
}

#[test]
fn rk4_matches_its_recurrence_and_approaches_e() {
    let z = solve(&identity, 1.0, &[0.0, 1.0], opts(Solver::Rk4, 10));
    // One classical RK4 step on z' = z multiplies by the degree-4 Taylor
    // polynomial of e^h.
    let h: f64 = 0.1;
    let oracle = (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0).powi(10);
    assert!((z[1] - oracle).abs() < 1e-13);
    assert!((z[1] - std::f64::consts::E).abs() < 2.5e-6);
    let fine = solve(&identity, 1.0, &[0.0, 1.0], opts(Solver::Rk4, 20));
    assert!((fine[1] - std::f64::consts::E).abs() < 1e-6);
}

#[test]
fn dopri_hits_requested_times() {
    let times = [0.0, 0.125, 0.4, 1.0];
    let z = solve(&identity, 1.0, &times, opts(Solver::Dopri, 1));
    for (t, v) in times.iter().zip(&z) {
        assert!((v - t.exp()).abs() < 1e-5, "t={t}: {v}");
    }
}

fn fitted_slope(solver: Solver) -> f64 {
    let hs: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
    let pts: Vec<(f64, f64)> = hs
        .iter()
        .map(|&h| {
            let steps = (1.0 / h).round() as usize;
            let z = solve(&decay, 1.0, &[0.0, 1.0], opts(solver, steps));
            (h.ln(), (z[1] - (-1.0f64).exp()).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn convergence_orders() {
    let euler = fitted_slope(Solver::Euler);
    let rk4 = fitted_slope(Solver::Rk4);
    assert!((euler - 1.0).abs() <= 0.3, "euler slope {euler}");
    assert!((rk4 - 4.0).abs() <= 0.3, "rk4 slope {rk4}");
}

#[test]
fn dopri_agrees_with_fine_rk4_on_a_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 6;
    let w1 = Tensor::new(vec![d + 1, 16], (0..(d + 1) * 16).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
    let w2 = Tensor::new(vec![16, d], (0..16 * d).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
    let net = move |g: &mut Graph, t: f64, z: Var| {
        let tt = g.constant(Tensor::new(vec![2, 1], vec![t; 2])?);
        let x = g.concat(&[z, tt], 1)?;
        let a = g.constant(w1.clone());
        let b = g.constant(w2.clone());
        let h = g.matmul(x, a)?;
        let h = g.tanh(h)?;
        g.matmul(h, b)
    };
    let z0 = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let end = |o: OdeOptions| {
        let mut g = Graph::new();
        let z = g.constant(z0.clone());
        let states = integrate(&mut g, &net, z, &[0.0, 1.0], &o).unwrap();
        g.value(states[1]).data().to_vec()
    };
    let a = end(opts(Solver::Rk4, 64));
    let b = end(opts(Solver::Dopri, 1));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "max difference {diff}");
}

#[test]
fn non_finite_states_abort_with_diagnostics() {
    let blow_up = |g: &mut Graph, t: f64, z: Var| {
        if t >= 0.5 {
            let c = g.constant(Tensor::vector(vec![f64::NAN]));
            g.mul(z, c)
        } else {
            Ok(z)
        }
    };
    for solver in [Solver::Euler, Solver::Rk4, Solver::Dopri] {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![1.0]));
        let err = integrate(&mut g, &blow_up, z, &[0.0, 0.5, 1.0], &opts(solver, 2)).unwrap_err();
        match err {
            Error::NonFiniteState { time, solver: name, step } => {
                assert_eq!(name, solver.name());
                assert!((0.0..=1.0).contains(&time) && step >= 1, "{solver:?}: t={time} step={step}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn bad_time_grids_rejected() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::vector(vec![1.0]));
    assert!(integrate(&mut g, &identity, z, &[0.0, 0.5, 0.5], &opts(Solver::Rk4, 1)).is_err());
    assert!(integrate(&mut g, &identity, z, &[], &opts(Solver::Rk4, 1)).is_err());
    assert!(integrate(&mut g, &identity, z, &[0.0, 1.0], &opts(Solver::Rk4, 0)).is_err());
}
