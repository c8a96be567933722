//! Weighted compositing of the sharp colors seen along a kernel trajectory
//! into one blurry color.

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Colors and simplex weights of one blurry pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurBundle {
    pub colors: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl BlurBundle {
    pub fn new(colors: Vec<[f64; 3]>, weights: Vec<f64>) -> Result<Self> {
        if colors.len() != weights.len() || colors.is_empty() {
            return Err(Error::Shape {
                op: "blur_bundle",
                lhs: vec![colors.len(), 3],
                rhs: vec![weights.len()],
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::invalid(format!("non-positive kernel weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("kernel weights sum to {total}, expected 1")));
        }
        Ok(BlurBundle { colors, weights })
    }

    /// Weights from unnormalized logits via softmax.
    pub fn from_logits(colors: Vec<[f64; 3]>, logits: &[f64]) -> Result<Self> {
        Self::new(colors, softmax(logits))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn composite_blur(bundle: &BlurBundle) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, w) in bundle.colors.iter().zip(&bundle.weights) {
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
    }
    out
}

/// Inputs: colors `[N*B, 3]` (time-major), weights `[N, B]`. Output `[B, 3]`.
struct BlurOp;

impl Function for BlurOp {
    fn name(&self) -> &'static str {
        "composite_blur"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (colors, weights) = (inputs[0].data(), inputs[1].data());
        let mut g_c = needs[0].then(|| vec![0.0; colors.len()]);
        let mut g_w = needs[1].then(|| vec![0.0; weights.len()]);
        let b = inputs[1].shape()[1];
        for (i, &w) in weights.iter().enumerate() {
            let g = &grad[(i % b) * 3..(i % b) * 3 + 3];
            if let Some(gc) = &mut g_c {
                for ch in 0..3 {
                    gc[i * 3 + ch] = w * g[ch];
                }
            }
            if let Some(gw) = &mut g_w {
                gw[i] = (0..3).map(|ch| g[ch] * colors[i * 3 + ch]).sum();
            }
        }
        vec![g_c, g_w]
    }
}

pub fn composite_blur_batch(g: &mut Graph, colors: Var, weights: Var) -> Result<Var> {
    let (sc, sw) = (g.shape(colors).to_vec(), g.shape(weights).to_vec());
    if sw.len() != 2 || sc.len() != 2 || sc[1] != 3 || sc[0] != sw[0] * sw[1] {
        return Err(Error::Shape { op: "composite_blur", lhs: sc, rhs: sw });
    }
    let b = sw[1];
    let (c, w) = (g.value(colors).data(), g.value(weights).data());
    let mut out = vec![0.0; b * 3];
    for (i, &wi) in w.iter().enumerate() {
        for ch in 0..3 {
            out[(i % b) * 3 + ch] += wi * c[i * 3 + ch];
        }
    }
    let out = Tensor::new(vec![b, 3], out)?;
    Ok(g.custom(Box::new(BlurOp), &[colors, weights], out))
}
