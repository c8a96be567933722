//! Vector-matrix factorized feature grids and the view-dependent
//! appearance network.
//!
//! A grid with ranks `(R0, R1, R2)` stores, for each mode `m`, `R_m` line
//! vectors along axis `m` and `R_m` matrices over the other two axes. Each
//! (line, plane) pair contributes one component `v[i] * M[j, k]`; the
//! density grid sums its components, the appearance grid maps them through
//! a learned basis matrix. Trilinear interpolation of such a tensor factors
//! into a linear interpolation along the line times a bilinear
//! interpolation on the plane, which is what the fused query computes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::nn::{Binding, Dense, Init, ParamGroup, ParamId, ParamStore};

/// Plane axes paired with line axis `m`.
pub const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Aabb {
            lo: [-half; 3],
            hi: [half; 3],
        }
    }

    pub fn extent(&self) -> f64 {
        (0..3).map(|i| self.hi[i] - self.lo[i]).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub resolution: [usize; 3],
    pub density_ranks: [usize; 3],
    pub appearance_ranks: [usize; 3],
    pub appearance_features: usize,
    pub hidden: usize,
    pub direction_octaves: usize,
    /// Factor entries start uniform in `±init_scale`.
    pub init_scale: f64,
    /// Added to the density grid value before the softplus.
    pub density_shift: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            resolution: [64; 3],
            density_ranks: [4; 3],
            appearance_ranks: [4; 3],
            appearance_features: 12,
            hidden: 64,
            direction_octaves: 4,
            init_scale: 0.1,
            density_shift: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct AxisLoc {
    i0: usize,
    f: f64,
    /// `du/dx`, zero when the coordinate was clamped.
    scale: f64,
}

#[derive(Clone, Debug)]
struct Geometry {
    resolution: [usize; 3],
    ranks: [usize; 3],
    bounds: Aabb,
}

impl Geometry {
    fn components(&self) -> usize {
        self.ranks.iter().sum()
    }

    fn locate(&self, x: &[f64]) -> [AxisLoc; 3] {
        std::array::from_fn(|a| {
            let res = self.resolution[a];
            let (lo, hi) = (self.bounds.lo[a], self.bounds.hi[a]);
            let top = (res - 1) as f64;
            let u = (x[a] - lo) / (hi - lo) * top;
            if u < 0.0 {
                AxisLoc { i0: 0, f: 0.0, scale: 0.0 }
            } else if u > top {
                AxisLoc { i0: res - 2, f: 1.0, scale: 0.0 }
            } else {
                let i0 = (u.floor() as usize).min(res - 2);
                AxisLoc { i0, f: u - i0 as f64, scale: top / (hi - lo) }
            }
        })
    }

    fn forward(&self, points: &[f64], lines: [&[f64]; 3], planes: [&[f64]; 3]) -> Vec<f64> {
        let c = self.components();
        let n = points.len() / 3;
        let mut out = vec![0.0; n * c];
        for (p, row) in out.chunks_mut(c).enumerate() {
            let loc = self.locate(&points[p * 3..p * 3 + 3]);
            let mut col = 0;
            for m in 0..3 {
                let (a, b) = PLANE_AXES[m];
                let (lm, la, lb) = (loc[m], loc[a], loc[b]);
                let (rm, ra, rb) = (self.resolution[m], self.resolution[a], self.resolution[b]);
                for r in 0..self.ranks[m] {
                    let line = &lines[m][r * rm..(r + 1) * rm];
                    let l = line[lm.i0] + lm.f * (line[lm.i0 + 1] - line[lm.i0]);
                    let plane = &planes[m][r * ra * rb..(r + 1) * ra * rb];
                    let i00 = la.i0 * rb + lb.i0;
                    let top = plane[i00] + lb.f * (plane[i00 + 1] - plane[i00]);
                    let bot = plane[i00 + rb] + lb.f * (plane[i00 + rb + 1] - plane[i00 + rb]);
                    row[col] = l * (top + la.f * (bot - top));
                    col += 1;
                }
            }
        }
        out
    }
}

/// Fused VM component lookup. Inputs: points `[P, 3]`, three line tensors,
/// three plane tensors. Output `[P, C]`.
struct VmQuery(Geometry);

impl Function for VmQuery {
    fn name(&self) -> &'static str {
        "vm_query"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let geo = &self.0;
        let points = inputs[0].data();
        let lines: [&[f64]; 3] = std::array::from_fn(|m| inputs[1 + m].data());
        let planes: [&[f64]; 3] = std::array::from_fn(|m| inputs[4 + m].data());
        let mut g_points = needs[0].then(|| vec![0.0; points.len()]);
        let mut g_lines: Vec<Option<Vec<f64>>> =
            (0..3).map(|m| needs[1 + m].then(|| vec![0.0; lines[m].len()])).collect();
        let mut g_planes: Vec<Option<Vec<f64>>> =
            (0..3).map(|m| needs[4 + m].then(|| vec![0.0; planes[m].len()])).collect();
        let c = geo.components();
        for p in 0..points.len() / 3 {
            let loc = geo.locate(&points[p * 3..p * 3 + 3]);
            let mut col = 0;
            for m in 0..3 {
                let (a, b) = PLANE_AXES[m];
                let (lm, la, lb) = (loc[m], loc[a], loc[b]);
                let (rm, ra, rb) = (geo.resolution[m], geo.resolution[a], geo.resolution[b]);
                for r in 0..geo.ranks[m] {
                    let go = grad[p * c + col];
                    col += 1;
                    if go == 0.0 {
                        continue;
                    }
                    let line = &lines[m][r * rm..(r + 1) * rm];
                    let (l0, l1) = (line[lm.i0], line[lm.i0 + 1]);
                    let l = l0 + lm.f * (l1 - l0);
                    let base = r * ra * rb;
                    let plane = &planes[m][base..base + ra * rb];
                    let i00 = la.i0 * rb + lb.i0;
                    let (m00, m01, m10, m11) = (plane[i00], plane[i00 + 1], plane[i00 + rb], plane[i00 + rb + 1]);
                    let top = m00 + lb.f * (m01 - m00);
                    let bot = m10 + lb.f * (m11 - m10);
                    let pv = top + la.f * (bot - top);
                    if let Some(gl) = &mut g_lines[m] {
                        gl[r * rm + lm.i0] += go * (1.0 - lm.f) * pv;
                        gl[r * rm + lm.i0 + 1] += go * lm.f * pv;
                    }
                    if let Some(gp) = &mut g_planes[m] {
                        let s = go * l;
                        gp[base + i00] += s * (1.0 - la.f) * (1.0 - lb.f);
                        gp[base + i00 + 1] += s * (1.0 - la.f) * lb.f;
                        gp[base + i00 + rb] += s * la.f * (1.0 - lb.f);
                        gp[base + i00 + rb + 1] += s * la.f * lb.f;
                    }
                    if let Some(gx) = &mut g_points {
                        let gx = &mut gx[p * 3..p * 3 + 3];
                        gx[m] += go * pv * (l1 - l0) * lm.scale;
                        gx[a] += go * l * (bot - top) * la.scale;
                        gx[b] += go * l * ((1.0 - la.f) * (m01 - m00) + la.f * (m11 - m10)) * lb.scale;
                    }
                }
            }
        }
        let mut out = vec![g_points];
        out.extend(g_lines);
        out.extend(g_planes);
        out
    }
}

/// One factorized grid. `features == 1` sums the components; otherwise a
/// `[C, features]` basis maps them to features.
#[derive(Clone, Debug)]
pub struct VmGrid {
    geo: Geometry,
    pub features: usize,
    lines: [ParamId; 3],
    planes: [ParamId; 3],
    basis: Option<ParamId>,
}

impl VmGrid {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        resolution: [usize; 3],
        ranks: [usize; 3],
        features: usize,
        bounds: Aabb,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::invalid(format!("grid resolution {resolution:?} must be at least 2 per axis")));
        }
        if ranks.iter().sum::<usize>() == 0 || features == 0 {
            return Err(Error::invalid("grid needs at least one component and one feature"));
        }
        if (0..3).any(|a| !(bounds.hi[a] > bounds.lo[a])) {
            return Err(Error::invalid(format!("degenerate bounds {bounds:?}")));
        }
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-init_scale..=init_scale)).collect() };
        let lines = std::array::from_fn(|m| {
            let t = Tensor::new(vec![ranks[m], resolution[m]], uniform(ranks[m] * resolution[m])).unwrap();
            store.add(format!("{name}.line{m}"), t, ParamGroup::Grid)
        });
        let planes = std::array::from_fn(|m| {
            let (a, b) = PLANE_AXES[m];
            let n = resolution[a] * resolution[b];
            let t = Tensor::new(vec![ranks[m], n], uniform(ranks[m] * n)).unwrap();
            store.add(format!("{name}.plane{m}"), t, ParamGroup::Grid)
        });
        let c: usize = ranks.iter().sum();
        let basis = (features > 1).then(|| {
            let bound = 1.0 / (c as f64).sqrt();
            let data = (0..c * features).map(|_| rng.gen_range(-bound..bound)).collect();
            store.add(format!("{name}.basis"), Tensor::new(vec![c, features], data).unwrap(), ParamGroup::Network)
        });
        Ok(VmGrid {
            geo: Geometry { resolution, ranks, bounds },
            features,
            lines,
            planes,
            basis,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.geo.resolution
    }

    pub fn ranks(&self) -> [usize; 3] {
        self.geo.ranks
    }

    pub fn bounds(&self) -> Aabb {
        self.geo.bounds
    }

    pub fn components(&self) -> usize {
        self.geo.components()
    }

    pub fn line(&self, m: usize) -> ParamId {
        self.lines[m]
    }

    pub fn plane(&self, m: usize) -> ParamId {
        self.planes[m]
    }

    pub fn basis(&self) -> Option<ParamId> {
        self.basis
    }

    /// Per-component values `[P, C]` at `points` (`[P, 3]`).
    pub fn components_at(&self, g: &mut Graph, bind: &Binding, points: Var) -> Result<Var> {
        let shape = g.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::Shape { op: "vm_query", lhs: shape, rhs: vec![0, 3] });
        }
        let inputs: Vec<Var> = std::iter::once(points)
            .chain(self.lines.iter().chain(&self.planes).map(|&id| bind.var(id)))
            .collect();
        let out = {
            let lines = std::array::from_fn(|m| g.value(inputs[1 + m]).data());
            let planes = std::array::from_fn(|m| g.value(inputs[4 + m]).data());
            self.geo.forward(g.value(points).data(), lines, planes)
        };
        let out = Tensor::new(vec![shape[0], self.components()], out)?;
        Ok(g.custom(Box::new(VmQuery(self.geo.clone())), &inputs, out))
    }

    /// Interpolated features `[P, F]`.
    pub fn query(&self, g: &mut Graph, bind: &Binding, points: Var) -> Result<Var> {
        let comps = self.components_at(g, bind, points)?;
        match self.basis {
            Some(b) => g.matmul(comps, bind.var(b)),
            None => {
                let n = g.shape(points)[0];
                let s = g.sum_axis(comps, 1)?;
                g.reshape(s, &[n, 1])
            }
        }
    }

    /// Interpolated features at one point, without a graph.
    pub fn query_point(&self, store: &ParamStore, x: Vec3) -> Vec<f64> {
        let lines = std::array::from_fn(|m| store.get(self.lines[m]).data());
        let planes = std::array::from_fn(|m| store.get(self.planes[m]).data());
        let comps = self.geo.forward(&x, lines, planes);
        match self.basis {
            Some(b) => {
                let basis = store.get(b).data();
                (0..self.features)
                    .map(|f| comps.iter().enumerate().map(|(c, v)| v * basis[c * self.features + f]).sum())
                    .collect()
            }
            None => vec![comps.iter().sum()],
        }
    }
}

/// `[x, sin(2^l x), cos(2^l x) for l < octaves]` per row.
pub fn posenc_values(x: &[f64], dim: usize, octaves: usize) -> Vec<f64> {
    let width = dim * (1 + 2 * octaves);
    let mut out = Vec::with_capacity(x.len() / dim * width);
    for row in x.chunks(dim) {
        out.extend_from_slice(row);
        for l in 0..octaves {
            let f = (1u64 << l) as f64;
            out.extend(row.iter().map(|v| (f * v).sin()));
            out.extend(row.iter().map(|v| (f * v).cos()));
        }
    }
    out
}

struct PosEnc {
    octaves: usize,
}

impl Function for PosEnc {
    fn name(&self) -> &'static str {
        "posenc"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = inputs[0];
        let dim = x.shape()[1];
        let width = dim * (1 + 2 * self.octaves);
        let mut gx = vec![0.0; x.numel()];
        for (r, row) in x.data().chunks(dim).enumerate() {
            let g = &grad[r * width..(r + 1) * width];
            for j in 0..dim {
                let mut acc = g[j];
                for l in 0..self.octaves {
                    let f = (1u64 << l) as f64;
                    let base = dim * (1 + 2 * l);
                    acc += f * (g[base + j] * (f * row[j]).cos() - g[base + dim + j] * (f * row[j]).sin());
                }
                gx[r * dim + j] = acc;
            }
        }
        vec![Some(gx)]
    }
}

/// Differentiable positional encoding of the rows of `x` (`[R, D]`).
pub fn posenc(g: &mut Graph, x: Var, octaves: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape { op: "posenc", lhs: shape, rhs: vec![] });
    }
    let out = posenc_values(g.value(x).data(), shape[1], octaves);
    let out = Tensor::new(vec![shape[0], shape[1] * (1 + 2 * octaves)], out)?;
    Ok(g.custom(Box::new(PosEnc { octaves }), &[x], out))
}

/// `relu(a[p] + per_ray[p / samples] + bias)`; inputs `[P, H]`, `[R, H]`, `[H]`.
struct RayHidden {
    samples: usize,
}

impl Function for RayHidden {
    fn name(&self) -> &'static str {
        "ray_hidden"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let h = inputs[2].numel();
        let masked: Vec<f64> = grad
            .iter()
            .zip(out.data())
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        let mut g_ray = needs[1].then(|| vec![0.0; inputs[1].numel()]);
        let mut g_bias = needs[2].then(|| vec![0.0; h]);
        for (p, row) in masked.chunks(h).enumerate() {
            if let Some(gr) = &mut g_ray {
                let r = p / self.samples;
                gr[r * h..(r + 1) * h].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            if let Some(gb) = &mut g_bias {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        vec![needs[0].then_some(masked), g_ray, g_bias]
    }
}

fn ray_hidden(g: &mut Graph, a: Var, per_ray: Var, bias: Var, samples: usize) -> Result<Var> {
    let (sa, sr) = (g.shape(a).to_vec(), g.shape(per_ray).to_vec());
    if sa.len() != 2 || sr.len() != 2 || sa[1] != sr[1] || sa[0] != sr[0] * samples || g.shape(bias) != [sa[1]] {
        return Err(Error::Shape { op: "ray_hidden", lhs: sa, rhs: sr });
    }
    let h = sa[1];
    let (av, rv, bv) = (g.value(a).data(), g.value(per_ray).data(), g.value(bias).data());
    let mut out = vec![0.0; av.len()];
    for (p, row) in out.chunks_mut(h).enumerate() {
        let r = p / samples;
        for j in 0..h {
            row[j] = (av[p * h + j] + rv[r * h + j] + bv[j]).max(0.0);
        }
    }
    let out = Tensor::new(sa, out)?;
    Ok(g.custom(Box::new(RayHidden { samples }), &[a, per_ray, bias], out))
}

/// Shallow network mapping (appearance feature, encoded direction) to RGB.
/// Hidden layer: `relu(feat W_f + enc(d) W_d + b)`; output: sigmoid.
#[derive(Clone, Debug)]
pub struct AppearanceNet {
    pub feature_weight: ParamId,
    pub direction_weight: ParamId,
    pub hidden_bias: ParamId,
    pub output: Dense,
    pub octaves: usize,
}

impl AppearanceNet {
    pub fn new(store: &mut ParamStore, features: usize, hidden: usize, octaves: usize, rng: &mut impl Rng) -> Self {
        let enc = 3 * (1 + 2 * octaves);
        let bound = 1.0 / ((features + enc) as f64).sqrt();
        let mut uniform = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
        };
        let feature_weight = store.add("color.feature_weight", uniform(features, hidden), ParamGroup::Network);
        let direction_weight = store.add("color.direction_weight", uniform(enc, hidden), ParamGroup::Network);
        let hidden_bias = store.add("color.hidden_bias", uniform(1, hidden).reshaped(vec![hidden]), ParamGroup::Network);
        let output = Dense::new(store, "color.out", hidden, 3, ParamGroup::Network, Init::FanIn, rng);
        AppearanceNet {
            feature_weight,
            direction_weight,
            hidden_bias,
            output,
            octaves,
        }
    }

    /// Colors `[R*S, 3]` from features `[R*S, F]` and unit directions `[R, 3]`.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, feat: Var, dirs: Var, samples: usize) -> Result<Var> {
        let enc = posenc(g, dirs, self.octaves)?;
        let per_ray = g.matmul(enc, bind.var(self.direction_weight))?;
        let a = g.matmul(feat, bind.var(self.feature_weight))?;
        let h = ray_hidden(g, a, per_ray, bind.var(self.hidden_bias), samples)?;
        let y = self.output.forward(g, bind, h)?;
        g.sigmoid(y)
    }
}

/// Density grid, appearance grid and appearance network.
#[derive(Clone, Debug)]
pub struct Field {
    pub config: FieldConfig,
    pub density: VmGrid,
    pub appearance: VmGrid,
    pub net: AppearanceNet,
}

impl Field {
    pub fn new(store: &mut ParamStore, config: &FieldConfig, bounds: Aabb, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        let density = VmGrid::new(store, "density", c.resolution, c.density_ranks, 1, bounds, c.init_scale, rng)?;
        let appearance = VmGrid::new(
            store,
            "appearance",
            c.resolution,
            c.appearance_ranks,
            c.appearance_features,
            bounds,
            c.init_scale,
            rng,
        )?;
        let net = AppearanceNet::new(store, c.appearance_features, c.hidden, c.direction_octaves, rng);
        Ok(Field {
            config: config.clone(),
            density,
            appearance,
            net,
        })
    }

    pub fn bounds(&self) -> Aabb {
        self.density.bounds()
    }

    /// Nonnegative densities `[P]` at `points` (`[P, 3]`).
    pub fn density(&self, g: &mut Graph, bind: &Binding, points: Var) -> Result<Var> {
        let comps = self.density.components_at(g, bind, points)?;
        let s = g.sum_axis(comps, 1)?;
        let s = if self.config.density_shift != 0.0 { g.add_scalar(s, self.config.density_shift)? } else { s };
        g.softplus(s)
    }

    /// Colors `[R*S, 3]` for `R` rays of `S` samples each.
    pub fn colors(&self, g: &mut Graph, bind: &Binding, points: Var, dirs: Var, samples: usize) -> Result<Var> {
        let feat = self.appearance.query(g, bind, points)?;
        self.net.forward(g, bind, feat, dirs, samples)
    }

    pub fn density_at(&self, store: &ParamStore, x: Vec3) -> f64 {
        let v = self.density.query_point(store, x)[0] + self.config.density_shift;
        if v > 0.0 {
            v + (-v).exp().ln_1p()
        } else {
            v.exp().ln_1p()
        }
    }

    pub fn color_at(&self, store: &ParamStore, x: Vec3, d: Vec3) -> Result<[f64; 3]> {
        let n = crate::camera::norm(d);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("direction norm {n} is not 1")));
        }
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let p = g.constant(Tensor::new(vec![1, 3], x.to_vec())?);
        let dv = g.constant(Tensor::new(vec![1, 3], d.to_vec())?);
        let c = self.colors(&mut g, &bind, p, dv, 1)?;
        let v = g.value(c).data();
        Ok([v[0], v[1], v[2]])
    }
}
