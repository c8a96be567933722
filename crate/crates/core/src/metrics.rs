//! Image quality metrics.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 99.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            lhs: vec![a.height, a.width],
            rhs: vec![b.height, b.width],
        })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b, "mse")?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / e).log10()).min(PSNR_CAP) })
}

fn gaussian() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a single-channel plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over channels and valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b, "ssim")?;
    let (w, h) = (a.width, a.height);
    if w < WINDOW || h < WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {WINDOW}x{WINDOW} pixels, got {w}x{h}")));
    }
    let k = gaussian();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(3).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, w, h, &k);
        let my = filter(&y, w, h, &k);
        let sxx = filter(&prod(&x, &x), w, h, &k);
        let syy = filter(&prod(&y, &y), w, h, &k);
        let sxy = filter(&prod(&x, &y), w, h, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
