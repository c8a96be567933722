//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates probed per leaf; larger leaves are strided through.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_coords: 48,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among coordinates whose gradient magnitude
    /// exceeds the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl GradCheck {
    pub fn with_tol(rel_tol: f64) -> Self {
        GradCheck {
            rel_tol,
            ..Self::default()
        }
    }

    /// Compare `d f / d leaves` from backward against central differences.
    /// `f` must build a scalar from the given leaf vars.
    pub fn run<F>(&self, leaves: &[Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        };

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = leaves.to_vec();
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient");
            let n = leaf.numel();
            let stride = n.div_ceil(self.max_coords.max(1)).max(1);
            for ci in (0..n).step_by(stride) {
                let orig = leaf.data()[ci];
                work[li].data_mut()[ci] = orig + self.step;
                let up = eval(&work)?;
                work[li].data_mut()[ci] = orig - self.step;
                let down = eval(&work)?;
                work[li].data_mut()[ci] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic.data()[ci];
                let abs = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let rel = if scale > 0.0 { abs / scale } else { 0.0 };
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max(abs);
                if scale > self.abs_floor && rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = Some((li, ci, a, numeric));
                }
                if abs > self.abs_floor && rel > self.rel_tol {
                    report.failures += 1;
                }
            }
        }
        Ok(report)
    }
}
