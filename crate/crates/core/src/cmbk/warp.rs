//! Cumulative ray warping ops.

use std::sync::Arc;

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::camera::{dot, Camera};
use crate::error::{Error, Result};

/// Time-major running sum: block 0 is `base`, block `i` adds delta blocks
/// `1..=i`. Inputs `[B, k]`, `[N*B, k]`; output `[N*B, k]`.
struct TimeCumsum {
    blocks: usize,
}

impl Function for TimeCumsum {
    fn name(&self) -> &'static str {
        "time_cumsum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let block = inputs[0].numel();
        let mut g_delta = vec![0.0; grad.len()];
        let mut running = vec![0.0; block];
        for i in (0..self.blocks).rev() {
            let gi = &grad[i * block..(i + 1) * block];
            running.iter_mut().zip(gi).for_each(|(r, g)| *r += g);
            if i > 0 {
                g_delta[i * block..(i + 1) * block].copy_from_slice(&running);
            }
        }
        vec![needs[0].then_some(running), needs[1].then_some(g_delta)]
    }
}

pub(crate) fn time_cumsum(g: &mut Graph, base: Var, deltas: Var) -> Result<Var> {
    let (sb, sd) = (g.shape(base).to_vec(), g.shape(deltas).to_vec());
    if sb.len() != 2 || sd.len() != 2 || sb[1] != sd[1] || sb[0] == 0 || sd[0] % sb[0] != 0 {
        return Err(Error::Shape { op: "time_cumsum", lhs: sb, rhs: sd });
    }
    let block = sb[0] * sb[1];
    let blocks = sd[0] / sb[0];
    let d = g.value(deltas).data();
    let mut out = Vec::with_capacity(d.len());
    out.extend_from_slice(g.value(base).data());
    for i in 1..blocks {
        let prev = (i - 1) * block;
        for j in 0..block {
            out.push(out[prev + j] + d[i * block + j]);
        }
    }
    Ok(g.custom(Box::new(TimeCumsum { blocks }), &[base, deltas], Tensor::new(sd, out)?))
}

/// Pixel to unit world direction through each row's camera. Coordinates
/// beyond `margin` pixels outside the image are clamped (zero gradient).
struct PixelRays {
    cameras: Arc<Vec<Camera>>,
    rows: Vec<usize>,
    /// Unnormalized direction norms and clamp masks from the forward pass.
    norms: Vec<f64>,
    clamped: Vec<[bool; 2]>,
}

impl Function for PixelRays {
    fn name(&self) -> &'static str {
        "pixel_rays"
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let d = out.data();
        let mut gp = vec![0.0; self.rows.len() * 2];
        for (r, &view) in self.rows.iter().enumerate() {
            let cam = &self.cameras[view];
            let dr = [d[r * 3], d[r * 3 + 1], d[r * 3 + 2]];
            let gr = [grad[r * 3], grad[r * 3 + 1], grad[r * 3 + 2]];
            // d = q / |q|: dL/dq = (g - (g.d) d) / |q|.
            let gd = dot(gr, dr);
            let gq: [f64; 3] = std::array::from_fn(|a| (gr[a] - gd * dr[a]) / self.norms[r]);
            let k = &cam.intrinsics;
            if !self.clamped[r][0] {
                gp[r * 2] = dot(gq, cam.pose.axes[0]) / k.fx;
            }
            if !self.clamped[r][1] {
                gp[r * 2 + 1] = dot(gq, cam.pose.axes[1]) / k.fy;
            }
        }
        vec![Some(gp)]
    }
}

/// Returns directions `[M, 3]` and the number of clamped coordinates.
pub(crate) fn pixel_rays(
    g: &mut Graph,
    pixels: Var,
    cameras: Arc<Vec<Camera>>,
    rows: Vec<usize>,
    margin: f64,
) -> Result<(Var, usize)> {
    let sp = g.shape(pixels).to_vec();
    if sp.len() != 2 || sp[1] != 2 || sp[0] != rows.len() {
        return Err(Error::Shape { op: "pixel_rays", lhs: sp, rhs: vec![rows.len(), 2] });
    }
    let p = g.value(pixels).data();
    let mut out = Vec::with_capacity(rows.len() * 3);
    let mut norms = Vec::with_capacity(rows.len());
    let mut clamped = Vec::with_capacity(rows.len());
    let mut count = 0;
    for (r, &view) in rows.iter().enumerate() {
        let cam = cameras
            .get(view)
            .ok_or_else(|| Error::invalid(format!("unknown view index {view}")))?;
        let k = &cam.intrinsics;
        let lim = [k.width as f64, k.height as f64];
        let mut uv = [p[r * 2], p[r * 2 + 1]];
        let mut flags = [false; 2];
        for a in 0..2 {
            let c = uv[a].clamp(-margin, lim[a] + margin);
            if c != uv[a] {
                flags[a] = true;
                count += 1;
                uv[a] = c;
            }
        }
        let q = cam.pose.to_world(k.unproject(uv[0], uv[1]));
        let n = dot(q, q).sqrt();
        out.extend(q.map(|v| v / n));
        norms.push(n);
        clamped.push(flags);
    }
    let op = PixelRays { cameras, rows: rows.clone(), norms, clamped };
    Ok((g.custom(Box::new(op), &[pixels], Tensor::new(vec![rows.len(), 3], out)?), count))
}
