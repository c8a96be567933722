//! Continuous motion-blur kernel.
//!
//! Each training ray is encoded (view embedding + pixel encoding) into a
//! latent state, the state is evolved over normalized exposure time by a
//! learned ODE, and every state is decoded into a pixel shift, an origin
//! shift and a weight logit. Pixel and origin shifts accumulate from one
//! time step to the next; the first ray is the unwarped input ray. Weights
//! are a softmax over time.

pub mod ode;
mod warp;

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::camera::{sub, Camera, Vec3};
use crate::error::{Error, Result};
use crate::field::posenc_values;
use crate::nn::{Binding, Dense, Init, ParamGroup, ParamId, ParamStore};
use crate::render::Ray;

pub use ode::{integrate, Dynamics, OdeOptions, Solver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Conditioning on encoded time and the view embedding.
    ChronoView,
    /// Conditioning on encoded time only.
    TimeOnly,
    /// No conditioning; the derivative sees the latent state alone.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmbkConfig {
    /// Number of warped rays `N`.
    pub warps: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub view_embed_dim: usize,
    pub chrono_dim: usize,
    pub pixel_octaves: usize,
    pub time_octaves: usize,
    pub embedding: EmbeddingMode,
    pub residual: bool,
    pub solver: Solver,
    pub substeps: usize,
    pub tol: f64,
    /// Per-step pixel shift bound.
    pub max_dp: f64,
    /// Per-step origin shift bound as a fraction of the scene extent.
    pub max_do_fraction: f64,
    /// Warped pixels further than this outside the image are clamped.
    pub pixel_margin: f64,
}

impl Default for CmbkConfig {
    fn default() -> Self {
        CmbkConfig {
            warps: 8,
            latent_dim: 64,
            hidden: 64,
            view_embed_dim: 16,
            chrono_dim: 16,
            pixel_octaves: 6,
            time_octaves: 4,
            embedding: EmbeddingMode::ChronoView,
            residual: true,
            solver: Solver::Rk4,
            substeps: 4,
            tol: 1e-6,
            max_dp: 3.0,
            max_do_fraction: 0.02,
            pixel_margin: 16.0,
        }
    }
}

impl CmbkConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.warps, self.latent_dim, self.hidden, self.view_embed_dim, self.chrono_dim, self.substeps];
        if sizes.contains(&0) {
            return Err(Error::invalid("kernel sizes, warps and substeps must be positive"));
        }
        if !(self.max_dp > 0.0 && self.max_do_fraction >= 0.0 && self.tol > 0.0 && self.pixel_margin >= 0.0) {
            return Err(Error::invalid("kernel bounds and tolerance must be positive"));
        }
        Ok(())
    }

    pub fn ode_options(&self) -> OdeOptions {
        OdeOptions {
            solver: self.solver,
            substeps: self.substeps,
            tol: self.tol,
        }
    }
}

/// Decoded warp components for `M` latent rows.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[M, 2]` pixel shifts.
    pub dp: Var,
    /// `[M, 3]` world-space origin shifts.
    pub d_origin: Var,
    /// `[M, 1]` weight logits.
    pub logit: Var,
}

/// Initial (unwarped) rays of a batch. Directions are recomputed from the
/// pixels through the view cameras.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub views: Vec<usize>,
    pub pixels: Vec<[f64; 2]>,
    pub origins: Vec<Vec3>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn push(&mut self, view: usize, pixel: [f64; 2], origin: Vec3) {
        self.views.push(view);
        self.pixels.push(pixel);
        self.origins.push(origin);
    }
}

/// The `N * B` warped rays of a batch, time-major.
#[derive(Clone, Copy, Debug)]
pub struct KernelRays {
    pub origins: Var,
    pub dirs: Var,
    pub pixels: Var,
    /// `[N, B]` softmax weights.
    pub weights: Var,
    /// `[B, 5]` decoded (pixel, origin) shifts of the initial latent.
    pub initial_shift: Var,
    /// Per-step decoder outputs, `[N * B, ...]`.
    pub decoded: Decoded,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSample {
    pub dp: [f64; 2],
    pub d_origin: Vec3,
    pub w_raw: f64,
    pub p_cum: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub rays: Vec<Ray>,
    pub weights: Vec<f64>,
    pub samples: Vec<KernelSample>,
    pub clamped: usize,
}

/// One row of the trajectory export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub p_x: f64,
    pub p_y: f64,
    /// Origin offset from the initial ray.
    pub do_x: f64,
    pub do_y: f64,
    pub do_z: f64,
    pub w: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(())
}

/// Per-batch conditioning precomputed once before integration.
struct Conditioning {
    batch: usize,
    view_term: Option<Var>,
}

#[derive(Debug)]
pub struct Cmbk {
    pub config: CmbkConfig,
    pub views: usize,
    /// Per-step origin shift bound in world units.
    pub max_do: f64,
    pub view_table: ParamId,
    pub encoder: [Dense; 2],
    pub chrono_time: ParamId,
    pub chrono_view: ParamId,
    pub chrono_bias: ParamId,
    pub derivative_net: [Dense; 2],
    pub decoder: [Dense; 2],
    evaluations: AtomicUsize,
}

impl Clone for Cmbk {
    fn clone(&self) -> Self {
        Cmbk {
            config: self.config.clone(),
            views: self.views,
            max_do: self.max_do,
            view_table: self.view_table,
            encoder: self.encoder.clone(),
            chrono_time: self.chrono_time,
            chrono_view: self.chrono_view,
            chrono_bias: self.chrono_bias,
            derivative_net: self.derivative_net.clone(),
            decoder: self.decoder.clone(),
            evaluations: AtomicUsize::new(self.evaluations()),
        }
    }
}

fn pixel_features(pixels: &[[f64; 2]], size: [usize; 2], octaves: usize) -> Vec<f64> {
    let norm: Vec<f64> = pixels
        .iter()
        .flat_map(|p| [2.0 * p[0] / size[0] as f64 - 1.0, 2.0 * p[1] / size[1] as f64 - 1.0])
        .collect();
    posenc_values(&norm, 2, octaves)
}

impl Cmbk {
    pub fn new(store: &mut ParamStore, config: &CmbkConfig, views: usize, scene_extent: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if views == 0 {
            return Err(Error::invalid("kernel needs at least one view"));
        }
        let c = config;
        let k = ParamGroup::Kernel;
        let e = c.view_embed_dim;
        let table = Tensor::new(vec![views, e], (0..views * e).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let view_table = store.add("kernel.view_table", table, k);
        let pix = 2 * (1 + 2 * c.pixel_octaves);
        let encoder = [
            Dense::new(store, "kernel.encoder0", e + pix, c.hidden, k, Init::FanIn, rng),
            Dense::new(store, "kernel.encoder1", c.hidden, c.latent_dim, k, Init::FanIn, rng),
        ];
        let time = 1 + 2 * c.time_octaves;
        let bound = 1.0 / ((time + e) as f64).sqrt();
        let mut uniform = |r: usize, cols: usize| {
            Tensor::new(vec![r, cols], (0..r * cols).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        let chrono_time = store.add("kernel.chrono_time", uniform(time, c.chrono_dim)?, k);
        let chrono_view = store.add("kernel.chrono_view", uniform(e, c.chrono_dim)?, k);
        let chrono_bias = store.add("kernel.chrono_bias", uniform(1, c.chrono_dim)?.reshaped(vec![c.chrono_dim]), k);
        let cond = if c.embedding == EmbeddingMode::None { 0 } else { c.chrono_dim };
        let derivative_net = [
            Dense::new(store, "kernel.derivative0", c.latent_dim + cond, c.hidden, k, Init::FanIn, rng),
            Dense::new(store, "kernel.derivative1", c.hidden, c.latent_dim, k, Init::FanIn, rng),
        ];
        let decoder = [
            Dense::new(store, "kernel.decoder0", c.latent_dim, c.hidden, k, Init::FanIn, rng),
            Dense::new(store, "kernel.decoder1", c.hidden, 6, k, Init::Zeros, rng),
        ];
        Ok(Cmbk {
            config: config.clone(),
            views,
            max_do: c.max_do_fraction * scene_extent,
            view_table,
            encoder,
            chrono_time,
            chrono_view,
            chrono_bias,
            derivative_net,
            decoder,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Time grid `t_i = i / N`.
    pub fn times(&self) -> Vec<f64> {
        let n = self.config.warps;
        (0..n).map(|i| i as f64 / n as f64).collect()
    }

    /// Number of integrate/decode calls so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn check_views(&self, views: &[usize]) -> Result<()> {
        match views.iter().find(|&&v| v >= self.views) {
            Some(v) => Err(Error::invalid(format!("unknown view index {v} (have {})", self.views))),
            None => Ok(()),
        }
    }

    /// Initial latents `[B, d]`.
    pub fn encode(&self, g: &mut Graph, bind: &Binding, views: &[usize], pixels: &[[f64; 2]], size: [usize; 2]) -> Result<Var> {
        self.check_views(views)?;
        if views.len() != pixels.len() {
            return Err(Error::Shape { op: "encode", lhs: vec![views.len()], rhs: vec![pixels.len()] });
        }
        let b = views.len();
        let emb = g.gather_rows(bind.var(self.view_table), views)?;
        let feats = pixel_features(pixels, size, self.config.pixel_octaves);
        let width = feats.len() / b.max(1);
        let pix = g.constant(Tensor::new(vec![b, width], feats)?);
        let x = g.concat(&[emb, pix], 1)?;
        let h = self.encoder[0].forward(g, bind, x)?;
        let h = g.tanh(h)?;
        self.encoder[1].forward(g, bind, h)
    }

    fn conditioning(&self, g: &mut Graph, bind: &Binding, views: &[usize]) -> Result<Conditioning> {
        self.check_views(views)?;
        let view_term = if self.config.embedding == EmbeddingMode::ChronoView {
            let emb = g.gather_rows(bind.var(self.view_table), views)?;
            Some(g.matmul(emb, bind.var(self.chrono_view))?)
        } else {
            None
        };
        Ok(Conditioning { batch: views.len(), view_term })
    }

    fn chrono_with(&self, g: &mut Graph, bind: &Binding, t: f64, cond: &Conditioning) -> Result<Option<Var>> {
        if self.config.embedding == EmbeddingMode::None {
            return Ok(None);
        }
        let gamma = posenc_values(&[t], 1, self.config.time_octaves);
        let gamma = g.constant(Tensor::new(vec![1, gamma.len()], gamma)?);
        let tt = g.linear(gamma, bind.var(self.chrono_time), bind.var(self.chrono_bias))?;
        let pre = match cond.view_term {
            Some(v) => g.add(v, tt)?,
            None => g.broadcast(tt, &[cond.batch, self.config.chrono_dim])?,
        };
        g.tanh(pre).map(Some)
    }

    /// Chrono-view embedding `[B, C]` at time `t`; `None` without conditioning.
    pub fn chrono(&self, g: &mut Graph, bind: &Binding, t: f64, views: &[usize]) -> Result<Option<Var>> {
        let cond = self.conditioning(g, bind, views)?;
        self.chrono_with(g, bind, t, &cond)
    }

    fn derivative_with(&self, g: &mut Graph, bind: &Binding, z: Var, t: f64, cond: &Conditioning) -> Result<Var> {
        let x = match self.chrono_with(g, bind, t, cond)? {
            Some(psi) => g.concat(&[z, psi], 1)?,
            None => z,
        };
        let h = self.derivative_net[0].forward(g, bind, x)?;
        let h = g.tanh(h)?;
        let f = self.derivative_net[1].forward(g, bind, h)?;
        if self.config.residual {
            let s = g.add(f, z)?;
            g.tanh(s)
        } else {
            Ok(f)
        }
    }

    /// `dz/dt` for latents `[B, d]` of the given views.
    pub fn derivative(&self, g: &mut Graph, bind: &Binding, z: Var, t: f64, views: &[usize]) -> Result<Var> {
        let cond = self.conditioning(g, bind, views)?;
        self.derivative_with(g, bind, z, t, &cond)
    }

    /// Latent states at every time of the grid; the first is `z0`.
    pub fn integrate(&self, g: &mut Graph, bind: &Binding, z0: Var, views: &[usize]) -> Result<Vec<Var>> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let cond = self.conditioning(g, bind, views)?;
        let f = |g: &mut Graph, t: f64, z: Var| self.derivative_with(g, bind, z, t, &cond);
        integrate(g, &f, z0, &self.times(), &self.config.ode_options())
    }

    pub fn decode(&self, g: &mut Graph, bind: &Binding, z: Var) -> Result<Decoded> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let h = self.decoder[0].forward(g, bind, z)?;
        let h = g.tanh(h)?;
        let raw = self.decoder[1].forward(g, bind, h)?;
        let dp = g.slice(raw, 1, 0, 2)?;
        let dp = g.tanh(dp)?;
        let dp = g.scale(dp, self.config.max_dp)?;
        let d_origin = g.slice(raw, 1, 2, 5)?;
        let d_origin = g.tanh(d_origin)?;
        let d_origin = g.scale(d_origin, self.max_do)?;
        let logit = g.slice(raw, 1, 5, 6)?;
        Ok(Decoded { dp, d_origin, logit })
    }

    /// Warped rays and weights for a batch of initial rays.
    pub fn generate(&self, g: &mut Graph, bind: &Binding, rays: &RayBatch, cameras: &Arc<Vec<Camera>>) -> Result<KernelRays> {
        let b = rays.len();
        if b == 0 {
            return Err(Error::invalid("empty ray batch"));
        }
        if let Some(v) = rays.views.iter().find(|&&v| v >= cameras.len()) {
            return Err(Error::invalid(format!("no camera for view {v}")));
        }
        let k = &cameras[rays.views[0]].intrinsics;
        let z0 = self.encode(g, bind, &rays.views, &rays.pixels, [k.width, k.height])?;
        let states = self.integrate(g, bind, z0, &rays.views)?;
        let n = states.len();
        let z = if n == 1 { z0 } else { g.concat(&states, 0)? };
        let dec = self.decode(g, bind, z)?;
        let dp0 = g.slice(dec.dp, 0, 0, b)?;
        let do0 = g.slice(dec.d_origin, 0, 0, b)?;
        let initial_shift = g.concat(&[dp0, do0], 1)?;
        let p0 = g.constant(Tensor::new(vec![b, 2], rays.pixels.iter().flatten().copied().collect())?);
        let o0 = g.constant(Tensor::new(vec![b, 3], rays.origins.iter().flatten().copied().collect())?);
        let pixels = warp::time_cumsum(g, p0, dec.dp)?;
        let origins = warp::time_cumsum(g, o0, dec.d_origin)?;
        let rows: Vec<usize> = (0..n).flat_map(|_| rays.views.iter().copied()).collect();
        let (dirs, clamped) = warp::pixel_rays(g, pixels, Arc::clone(cameras), rows, self.config.pixel_margin)?;
        let logits = g.reshape(dec.logit, &[n, b])?;
        let weights = g.softmax(logits, 0)?;
        Ok(KernelRays { origins, dirs, pixels, weights, initial_shift, decoded: dec, clamped })
    }

    /// Kernel of a single ray, evaluated with frozen parameters.
    pub fn generate_kernel(&self, store: &ParamStore, ray: &Ray, cameras: &Arc<Vec<Camera>>) -> Result<Kernel> {
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let mut batch = RayBatch::default();
        batch.push(ray.view, ray.pixel, ray.origin);
        let out = self.generate(&mut g, &bind, &batch, cameras)?;
        let n = self.config.warps;
        let pix = g.value(out.pixels).data();
        let org = g.value(out.origins).data();
        let dirs = g.value(out.dirs).data();
        let weights = g.value(out.weights).data().to_vec();
        let dp = g.value(out.decoded.dp).data();
        let dv = g.value(out.decoded.d_origin).data();
        let logit = g.value(out.decoded.logit).data();
        let mut rays = Vec::with_capacity(n);
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let origin = [org[i * 3], org[i * 3 + 1], org[i * 3 + 2]];
            let direction = [dirs[i * 3], dirs[i * 3 + 1], dirs[i * 3 + 2]];
            let p_cum = [pix[i * 2], pix[i * 2 + 1]];
            rays.push(Ray { origin, direction, pixel: p_cum, ..*ray });
            samples.push(KernelSample {
                dp: [dp[i * 2], dp[i * 2 + 1]],
                d_origin: [dv[i * 3], dv[i * 3 + 1], dv[i * 3 + 2]],
                w_raw: logit[i],
                p_cum,
            });
        }
        Ok(Kernel { rays, weights, samples, clamped: out.clamped })
    }

    /// Trajectory of the kernel at one pixel of one view.
    pub fn trace(&self, store: &ParamStore, view: usize, pixel: [f64; 2], cameras: &Arc<Vec<Camera>>) -> Result<Vec<TraceRow>> {
        let cam = cameras.get(view).ok_or_else(|| Error::invalid(format!("unknown view index {view}")))?;
        if !cam.intrinsics.contains(pixel) {
            return Err(Error::invalid(format!("pixel {pixel:?} outside the image")));
        }
        let d = cam.ray_direction(pixel[0], pixel[1]);
        let ray = Ray { origin: cam.pose.position, direction: d, pixel, view, near: 1.0, far: 2.0 };
        let kernel = self.generate_kernel(store, &ray, cameras)?;
        Ok(self
            .times()
            .into_iter()
            .zip(&kernel.rays)
            .zip(&kernel.weights)
            .map(|((t, r), &w)| {
                let off = sub(r.origin, ray.origin);
                TraceRow { t, p_x: r.pixel[0], p_y: r.pixel[1], do_x: off[0], do_y: off[1], do_z: off[2], w }
            })
            .collect())
    }
}

