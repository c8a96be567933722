//! Stratified ray sampling and the volume-rendering quadrature.

use rand::Rng;

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::camera::{add, norm, scale, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::image::Image;
use crate::nn::{Binding, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel: [f64; 2],
    pub view: usize,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, pixel: [f64; 2], view: usize, near: f64, far: f64) -> Result<Self> {
        let n = norm(direction);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("ray direction norm {n} is not 1")));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::invalid(format!("need 0 < near < far, got {near}, {far}")));
        }
        Ok(Ray { origin, direction, pixel, view, near, far })
    }

    pub fn at(&self, tau: f64) -> Vec3 {
        add(self.origin, scale(self.direction, tau))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySampleSet {
    pub taus: Vec<f64>,
    /// Each sample owns one stratum, so every delta is `(far - near) / n`.
    pub deltas: Vec<f64>,
    pub positions: Vec<Vec3>,
}

/// Sample distances: one per equal stratum of `[near, far]`, uniform inside
/// the stratum with `jitter`, at its midpoint without.
pub fn stratified(near: f64, far: f64, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample per ray"));
    }
    let width = (far - near) / n as f64;
    let taus = (0..n)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + u) * width
        })
        .collect();
    Ok((taus, vec![width; n]))
}

pub fn sample_ray(ray: &Ray, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<RaySampleSet> {
    let (taus, deltas) = stratified(ray.near, ray.far, n, jitter, rng)?;
    let positions = taus.iter().map(|&t| ray.at(t)).collect();
    Ok(RaySampleSet { taus, deltas, positions })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composited {
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// `T_i` per sample.
    pub transmittance: Vec<f64>,
}

/// Plain quadrature for one ray; `bg` fills the unabsorbed remainder.
pub fn composite(sigma: &[f64], colors: &[[f64; 3]], deltas: &[f64], bg: [f64; 3]) -> Result<Composited> {
    if sigma.len() != colors.len() || sigma.len() != deltas.len() {
        return Err(Error::Shape {
            op: "composite",
            lhs: vec![sigma.len(), colors.len()],
            rhs: vec![deltas.len()],
        });
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::invalid(format!("negative density {s}")));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid(format!("non-positive step {d}")));
    }
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    let mut transmittance = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        transmittance.push(t);
        let e = (-sigma[i] * deltas[i]).exp();
        let w = t * (1.0 - e);
        for ch in 0..3 {
            rgb[ch] += w * colors[i][ch];
        }
        t *= e;
    }
    for ch in 0..3 {
        rgb[ch] += t * bg[ch];
    }
    Ok(Composited { rgb, opacity: 1.0 - t, transmittance })
}

/// Batched quadrature. Inputs: sigma `[R, S]`, colors `[R*S, 3]`,
/// deltas `[R, S]`. Output `[R, 3]`.
struct CompositeOp {
    bg: [f64; 3],
}

fn composite_forward(sigma: &[f64], colors: &[f64], deltas: &[f64], s: usize, bg: [f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; sigma.len() / s * 3];
    for (r, px) in out.chunks_mut(3).enumerate() {
        let mut t = 1.0;
        for i in r * s..(r + 1) * s {
            let e = (-sigma[i] * deltas[i]).exp();
            let w = t * (1.0 - e);
            for ch in 0..3 {
                px[ch] += w * colors[i * 3 + ch];
            }
            t *= e;
        }
        for ch in 0..3 {
            px[ch] += t * bg[ch];
        }
    }
    out
}

impl Function for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (sigma, colors, deltas) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let s = inputs[0].shape()[1];
        let n = sigma.len();
        let mut g_sigma = needs[0].then(|| vec![0.0; n]);
        let mut g_colors = needs[1].then(|| vec![0.0; n * 3]);
        let mut g_deltas = needs[2].then(|| vec![0.0; n]);
        let mut trans = vec![0.0; s + 1];
        let mut ex = vec![0.0; s];
        for (r, g) in grad.chunks(3).enumerate() {
            let base = r * s;
            trans[0] = 1.0;
            for i in 0..s {
                ex[i] = (-sigma[base + i] * deltas[base + i]).exp();
                trans[i + 1] = trans[i] * ex[i];
            }
            let gc = |i: usize| (0..3).map(|ch| g[ch] * colors[(base + i) * 3 + ch]).sum::<f64>();
            let mut suffix = trans[s] * (0..3).map(|ch| g[ch] * self.bg[ch]).sum::<f64>();
            for i in (0..s).rev() {
                let w = trans[i] * (1.0 - ex[i]);
                let gci = gc(i);
                if let Some(gcol) = &mut g_colors {
                    for ch in 0..3 {
                        gcol[(base + i) * 3 + ch] = w * g[ch];
                    }
                }
                let dx = trans[i + 1] * gci - suffix;
                if let Some(gs) = &mut g_sigma {
                    gs[base + i] = dx * deltas[base + i];
                }
                if let Some(gd) = &mut g_deltas {
                    gd[base + i] = dx * sigma[base + i];
                }
                suffix += w * gci;
            }
        }
        vec![g_sigma, g_colors, g_deltas]
    }
}

pub fn composite_batch(g: &mut Graph, sigma: Var, colors: Var, deltas: Var, bg: [f64; 3]) -> Result<Var> {
    let (ss, sc) = (g.shape(sigma).to_vec(), g.shape(colors).to_vec());
    let bad = ss.len() != 2 || sc.len() != 2 || sc[1] != 3 || sc[0] != ss[0] * ss[1] || g.shape(deltas) != ss.as_slice();
    if bad {
        return Err(Error::Shape { op: "composite", lhs: ss, rhs: sc });
    }
    let out = composite_forward(
        g.value(sigma).data(),
        g.value(colors).data(),
        g.value(deltas).data(),
        ss[1],
        bg,
    );
    let out = Tensor::new(vec![ss[0], 3], out)?;
    Ok(g.custom(Box::new(CompositeOp { bg }), &[sigma, colors, deltas], out))
}

/// `o_r + tau_{r,s} d_r`. Inputs: origins `[R, 3]`, dirs `[R, 3]`, taus
/// `[R, S]`. Output `[R*S, 3]`.
struct RayPoints;

impl Function for RayPoints {
    fn name(&self) -> &'static str {
        "ray_points"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (dirs, taus) = (inputs[1].data(), inputs[2].data());
        let s = inputs[2].shape()[1];
        let rays = taus.len() / s;
        let mut g_o = needs[0].then(|| vec![0.0; rays * 3]);
        let mut g_d = needs[1].then(|| vec![0.0; rays * 3]);
        let mut g_t = needs[2].then(|| vec![0.0; taus.len()]);
        for i in 0..taus.len() {
            let r = i / s;
            for a in 0..3 {
                let gp = grad[i * 3 + a];
                if let Some(go) = &mut g_o {
                    go[r * 3 + a] += gp;
                }
                if let Some(gd) = &mut g_d {
                    gd[r * 3 + a] += gp * taus[i];
                }
                if let Some(gt) = &mut g_t {
                    gt[i] += gp * dirs[r * 3 + a];
                }
            }
        }
        vec![g_o, g_d, g_t]
    }
}

pub fn ray_points(g: &mut Graph, origins: Var, dirs: Var, taus: Var) -> Result<Var> {
    let (so, sd, st) = (g.shape(origins).to_vec(), g.shape(dirs).to_vec(), g.shape(taus).to_vec());
    if so != sd || so.len() != 2 || so[1] != 3 || st.len() != 2 || st[0] != so[0] {
        return Err(Error::Shape { op: "ray_points", lhs: so, rhs: st });
    }
    let (o, d, t) = (g.value(origins).data(), g.value(dirs).data(), g.value(taus).data());
    let s = st[1];
    let mut out = vec![0.0; t.len() * 3];
    for (i, p) in out.chunks_mut(3).enumerate() {
        let r = i / s;
        for a in 0..3 {
            p[a] = o[r * 3 + a] + t[i] * d[r * 3 + a];
        }
    }
    let out = Tensor::new(vec![t.len(), 3], out)?;
    Ok(g.custom(Box::new(RayPoints), &[origins, dirs, taus], out))
}

/// Render `R` rays given as graph values; taus and deltas are `[R, S]`.
#[allow(clippy::too_many_arguments)]
pub fn render_rays(
    g: &mut Graph,
    bind: &Binding,
    field: &Field,
    origins: Var,
    dirs: Var,
    taus: Tensor,
    deltas: Tensor,
    bg: [f64; 3],
) -> Result<Var> {
    let s = taus.shape()[1];
    let taus = g.constant(taus);
    let deltas = g.constant(deltas);
    let points = ray_points(g, origins, dirs, taus)?;
    let sigma = field.density(g, bind, points)?;
    let r = g.shape(origins)[0];
    let sigma = g.reshape(sigma, &[r, s])?;
    let colors = field.colors(g, bind, points, dirs, s)?;
    composite_batch(g, sigma, colors, deltas, bg)
}

/// Stratified taus and deltas for `rays` rays sharing one interval.
pub fn sample_batch(rays: usize, near: f64, far: f64, n: usize, jitter: bool, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let mut taus = Vec::with_capacity(rays * n);
    let mut deltas = Vec::with_capacity(rays * n);
    for _ in 0..rays {
        let (t, d) = stratified(near, far, n, jitter, rng)?;
        taus.extend(t);
        deltas.extend(d);
    }
    Ok((Tensor::new(vec![rays, n], taus)?, Tensor::new(vec![rays, n], deltas)?))
}

#[allow(clippy::too_many_arguments)]
pub fn render_pixel(
    field: &Field,
    store: &ParamStore,
    ray: &Ray,
    n_samples: usize,
    jitter: bool,
    rng: &mut impl Rng,
    bg: [f64; 3],
) -> Result<[f64; 3]> {
    let (taus, deltas) = sample_batch(1, ray.near, ray.far, n_samples, jitter, rng)?;
    let mut g = Graph::new();
    let bind = store.bind_frozen(&mut g);
    let o = g.constant(Tensor::new(vec![1, 3], ray.origin.to_vec())?);
    let d = g.constant(Tensor::new(vec![1, 3], ray.direction.to_vec())?);
    let c = render_rays(&mut g, &bind, field, o, d, taus, deltas, bg)?;
    let v = g.value(c).data();
    Ok([v[0], v[1], v[2]])
}

/// Deterministic full-image render (midpoint samples), in row chunks.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    field: &Field,
    store: &ParamStore,
    k: &Intrinsics,
    pose: &Pose,
    near: f64,
    far: f64,
    n_samples: usize,
    bg: [f64; 3],
) -> Result<Image> {
    const CHUNK: usize = 1024;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let pixels: Vec<[f64; 2]> = (0..k.height)
        .flat_map(|y| (0..k.width).map(move |x| [x as f64 + 0.5, y as f64 + 0.5]))
        .collect();
    let mut data = Vec::with_capacity(pixels.len() * 3);
    for chunk in pixels.chunks(CHUNK) {
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let origins: Vec<f64> = chunk.iter().flat_map(|_| pose.position).collect();
        let dirs: Vec<f64> = chunk.iter().flat_map(|p| pose.ray_direction(k, p[0], p[1])).collect();
        let o = g.constant(Tensor::new(vec![chunk.len(), 3], origins)?);
        let d = g.constant(Tensor::new(vec![chunk.len(), 3], dirs)?);
        let (taus, deltas) = sample_batch(chunk.len(), near, far, n_samples, false, &mut rng)?;
        let c = render_rays(&mut g, &bind, field, o, d, taus, deltas, bg)?;
        data.extend_from_slice(g.value(c).data());
    }
    Image::new(k.width, k.height, data)
}
