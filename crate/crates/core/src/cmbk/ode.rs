//! Fixed-step and adaptive integrators that record every stage on the
//! graph, so gradients flow through the discrete solver.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
    Dopri,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Rk4 => "rk4",
            Solver::Dopri => "dopri",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "rk4" => Ok(Solver::Rk4),
            "dopri" => Ok(Solver::Dopri),
            other => Err(Error::invalid(format!("unknown solver {other:?}"))),
        }
    }
}

/// Right-hand side `dz/dt = f(t, z)` evaluated on a graph.
pub trait Dynamics {
    fn eval(&self, g: &mut Graph, t: f64, z: Var) -> Result<Var>;
}

impl<F> Dynamics for F
where
    F: Fn(&mut Graph, f64, Var) -> Result<Var>,
{
    fn eval(&self, g: &mut Graph, t: f64, z: Var) -> Result<Var> {
        self(g, t, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeOptions {
    pub solver: Solver,
    /// Fixed steps per output interval (euler, rk4).
    pub substeps: usize,
    /// Absolute and relative tolerance (dopri).
    pub tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            solver: Solver::Rk4,
            substeps: 4,
            tol: 1e-6,
        }
    }
}

/// `base + sum c_j k_j`.
struct LinComb {
    coefs: Vec<f64>,
}

impl Function for LinComb {
    fn name(&self) -> &'static str {
        "lincomb"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![needs[0].then(|| grad.to_vec())];
        out.extend(
            self.coefs
                .iter()
                .zip(&needs[1..])
                .map(|(c, need)| need.then(|| grad.iter().map(|g| c * g).collect())),
        );
        out
    }
}

pub(crate) fn lincomb(g: &mut Graph, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
    let terms: Vec<(f64, Var)> = terms.iter().copied().filter(|(c, _)| *c != 0.0).collect();
    let shape = g.shape(base).to_vec();
    let mut out = g.value(base).data().to_vec();
    for &(c, k) in &terms {
        if g.shape(k) != shape.as_slice() {
            return Err(Error::Shape { op: "lincomb", lhs: shape, rhs: g.shape(k).to_vec() });
        }
        out.iter_mut().zip(g.value(k).data()).for_each(|(o, v)| *o += c * v);
    }
    let inputs: Vec<Var> = std::iter::once(base).chain(terms.iter().map(|t| t.1)).collect();
    let op = LinComb { coefs: terms.iter().map(|t| t.0).collect() };
    Ok(g.custom(Box::new(op), &inputs, Tensor::new(shape, out)?))
}

fn check(g: &Graph, z: Var, time: f64, solver: Solver, step: usize) -> Result<()> {
    if g.value(z).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteState { time, solver: solver.name(), step })
    }
}

/// States at every requested time; `times[0]` is the time of `z0`, which is
/// returned unchanged as the first state.
pub fn integrate(g: &mut Graph, f: &dyn Dynamics, z0: Var, times: &[f64], opts: &OdeOptions) -> Result<Vec<Var>> {
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(format!("integration times must be strictly increasing: {times:?}")));
    }
    check(g, z0, times[0], opts.solver, 0)?;
    let mut states = vec![z0];
    let mut z = z0;
    let mut step = 0;
    match opts.solver {
        Solver::Euler | Solver::Rk4 => {
            if opts.substeps == 0 {
                return Err(Error::invalid("substeps must be positive"));
            }
            for w in times.windows(2) {
                let h = (w[1] - w[0]) / opts.substeps as f64;
                for s in 0..opts.substeps {
                    let t = w[0] + s as f64 * h;
                    z = if opts.solver == Solver::Euler {
                        let k = f.eval(g, t, z)?;
                        lincomb(g, z, &[(h, k)])?
                    } else {
                        rk4_step(g, f, t, z, h)?
                    };
                    step += 1;
                    check(g, z, t + h, opts.solver, step)?;
                }
                states.push(z);
            }
        }
        Solver::Dopri => {
            let mut t = times[0];
            let mut h = (times[times.len() - 1] - times[0]) / 8.0;
            let mut k1 = f.eval(g, t, z)?;
            for &target in &times[1..] {
                while t < target {
                    let last = h >= target - t;
                    let h_try = if last { target - t } else { h };
                    let (z_new, k7, err) = dopri_step(g, f, t, z, k1, h_try, opts.tol)?;
                    if err <= 1.0 {
                        t = if last { target } else { t + h_try };
                        z = z_new;
                        k1 = k7;
                        step += 1;
                        check(g, z, t, opts.solver, step)?;
                    } else if !err.is_finite() {
                        return Err(Error::NonFiniteState { time: t, solver: opts.solver.name(), step });
                    }
                    let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    h = h_try * factor;
                    if h < 1e-12 {
                        return Err(Error::invalid(format!("dopri step size underflow at t={t}")));
                    }
                }
                states.push(z);
            }
        }
    }
    Ok(states)
}

fn rk4_step(g: &mut Graph, f: &dyn Dynamics, t: f64, z: Var, h: f64) -> Result<Var> {
    let k1 = f.eval(g, t, z)?;
    let z2 = lincomb(g, z, &[(0.5 * h, k1)])?;
    let k2 = f.eval(g, t + 0.5 * h, z2)?;
    let z3 = lincomb(g, z, &[(0.5 * h, k2)])?;
    let k3 = f.eval(g, t + 0.5 * h, z3)?;
    let z4 = lincomb(g, z, &[(h, k3)])?;
    let k4 = f.eval(g, t + h, z4)?;
    lincomb(g, z, &[(h / 6.0, k1), (h / 3.0, k2), (h / 3.0, k3), (h / 6.0, k4)])
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 6] = [
    &[0.2],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// One Dormand-Prince trial step: new state, derivative at it, and the
/// scaled RMS error estimate.
fn dopri_step(g: &mut Graph, f: &dyn Dynamics, t: f64, z: Var, k1: Var, h: f64, tol: f64) -> Result<(Var, Var, f64)> {
    let mut ks = vec![k1];
    let mut z_new = z;
    for (stage, row) in A.iter().enumerate() {
        let terms: Vec<(f64, Var)> = row.iter().zip(&ks).map(|(a, k)| (h * a, *k)).collect();
        let zi = lincomb(g, z, &terms)?;
        ks.push(f.eval(g, t + C[stage + 1] * h, zi)?);
        z_new = zi;
    }
    let (y0, y1) = (g.value(z).data(), g.value(z_new).data());
    let mut acc = 0.0;
    for i in 0..y0.len() {
        let e: f64 = ks.iter().zip(E).map(|(k, e)| e * g.value(*k).data()[i]).sum::<f64>() * h;
        let sc = tol + tol * y0[i].abs().max(y1[i].abs());
        acc += (e / sc).powi(2);
    }
    let err = (acc / y0.len() as f64).sqrt();
    Ok((z_new, ks[6], err))
}
