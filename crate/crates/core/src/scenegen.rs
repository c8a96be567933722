//! Analytic toy scenes, ground-truth renders and synthetic motion blur.
//!
//! The renderer here intersects rays with primitives in closed form and is
//! independent of the trainable field and renderer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{add, dot, norm, scale, sub, Camera, Intrinsics, Pose, Vec3};
use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::fsio;
use crate::image::Image;

pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_SUBFRAMES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { lo: Vec3, hi: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Unlit fraction of the color, in `[0, 1]`; the rest is headlight diffuse.
    pub emission: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub bounds: Aabb,
}

/// Nearest hit distance and outward normal.
fn intersect(shape: &Shape, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = sub(o, center);
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > EPS { -b - s } else { -b + s };
            (t > EPS).then(|| (t, scale(sub(add(o, scale(d, t)), center), 1.0 / radius)))
        }
        Shape::Box { lo, hi } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = -1.0;
            for a in 0..3 {
                if d[a].abs() < 1e-300 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        return None;
                    }
                    continue;
                }
                let (mut near, mut far) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                let mut s = -1.0;
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                    s = 1.0;
                }
                if near > t0 {
                    t0 = near;
                    axis = a;
                    sign = s;
                }
                t1 = t1.min(far);
            }
            if t0 > t1 || t1 <= EPS || t0 <= EPS {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((t0, n))
        }
    }
}

impl ToyScene {
    pub fn empty(background: [f64; 3], bounds: Aabb) -> Self {
        ToyScene { primitives: Vec::new(), background, bounds }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |p: Vec3| (0..3).all(|a| p[a] >= self.bounds.lo[a] && p[a] <= self.bounds.hi[a]);
        let unit = |c: &[f64]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.background) {
            return Err(Error::invalid("background color outside [0, 1]"));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let contained = match p.shape {
                Shape::Sphere { center, radius } => radius > 0.0 && inside(sub(center, [radius; 3])) && inside(add(center, [radius; 3])),
                Shape::Box { lo, hi } => (0..3).all(|a| lo[a] < hi[a]) && inside(lo) && inside(hi),
            };
            if !contained {
                return Err(Error::invalid(format!("primitive {i} is degenerate or leaves the scene bounds")));
            }
            if !unit(&p.color) || !(0.0..=1.0).contains(&p.emission) {
                return Err(Error::invalid(format!("primitive {i} has a color or emission outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Nearest hit along a unit-direction ray: distance and primitive index.
    pub fn hit(&self, o: Vec3, d: Vec3) -> Option<(f64, usize, Vec3)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| intersect(&p.shape, o, d).map(|(t, n)| (t, i, n)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Radiance along a ray under headlight shading.
    pub fn shade(&self, o: Vec3, d: Vec3) -> [f64; 3] {
        match self.hit(o, d) {
            None => self.background,
            Some((_, i, n)) => {
                let p = &self.primitives[i];
                let lambert = (-dot(n, d)).max(0.0);
                let k = p.emission + (1.0 - p.emission) * lambert;
                p.color.map(|c| (c * k).clamp(0.0, 1.0))
            }
        }
    }
}

/// Sharp ground-truth image, one ray through each pixel center.
pub fn render_sharp(scene: &ToyScene, camera: &Camera) -> Result<Image> {
    let k = &camera.intrinsics;
    k.validate()?;
    let mut img = Image::filled(k.width, k.height, scene.background);
    for y in 0..k.height {
        for x in 0..k.width {
            let d = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            img.set_pixel(x, y, scene.shade(camera.pose.position, d));
        }
    }
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Linear,
    /// Catmull-Rom tangents; needs three or more controls to curve.
    CubicHermite,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Interpolation::Linear),
            "cubic" | "cubic-hermite" => Ok(Interpolation::CubicHermite),
            other => Err(Error::invalid(format!("unknown interpolation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPose {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
}

impl ControlPose {
    pub fn pose(&self) -> Result<Pose> {
        Pose::look_at(self.eye, self.target, self.up)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraTrajectory {
    pub controls: Vec<ControlPose>,
    pub interpolation: Interpolation,
    pub subframes: usize,
}

fn hermite(p: &[Vec3], i: usize, s: f64) -> Vec3 {
    let k = p.len() - 1;
    let tangent = |j: usize| -> Vec3 {
        if j == 0 {
            sub(p[1], p[0])
        } else if j == k {
            sub(p[k], p[k - 1])
        } else {
            scale(sub(p[j + 1], p[j - 1]), 0.5)
        }
    };
    let (s2, s3) = (s * s, s * s * s);
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let (m0, m1) = (tangent(i), tangent(i + 1));
    std::array::from_fn(|a| h00 * p[i][a] + h10 * m0[a] + h01 * p[i + 1][a] + h11 * m1[a])
}

impl CameraTrajectory {
    pub fn stationary(control: ControlPose, subframes: usize) -> Self {
        CameraTrajectory { controls: vec![control, control], interpolation: Interpolation::Linear, subframes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.controls.len() < 2 {
            return Err(Error::invalid("a trajectory needs at least two control poses"));
        }
        if self.subframes == 0 {
            return Err(Error::invalid("a trajectory needs at least one sub-frame"));
        }
        Ok(())
    }

    /// Control point interpolated at `t` in `[0, 1]`.
    pub fn control_at(&self, t: f64) -> ControlPose {
        let k = self.controls.len() - 1;
        let u = t.clamp(0.0, 1.0) * k as f64;
        let i = (u.floor() as usize).min(k - 1);
        let s = u - i as f64;
        let field = |f: fn(&ControlPose) -> Vec3| -> Vec3 {
            let pts: Vec<Vec3> = self.controls.iter().map(f).collect();
            match self.interpolation {
                Interpolation::Linear => std::array::from_fn(|a| pts[i][a] + s * (pts[i + 1][a] - pts[i][a])),
                Interpolation::CubicHermite => hermite(&pts, i, s),
            }
        };
        if s == 0.0 {
            return self.controls[i];
        }
        if s == 1.0 {
            return self.controls[i + 1];
        }
        ControlPose { eye: field(|c| c.eye), target: field(|c| c.target), up: field(|c| c.up) }
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        self.control_at(t).pose()
    }

    /// Sub-frame times `k / (M - 1)`, or `[0]` for a single sub-frame.
    pub fn times(&self) -> Vec<f64> {
        let m = self.subframes;
        if m == 1 {
            vec![0.0]
        } else {
            (0..m).map(|k| k as f64 / (m - 1) as f64).collect()
        }
    }

    pub fn sub_poses(&self) -> Result<Vec<Pose>> {
        self.validate()?;
        self.times().into_iter().map(|t| self.pose_at(t)).collect()
    }
}

/// Mean of the sub-frame renders along `trajectory`, and the sub-poses used.
pub fn blur_render(scene: &ToyScene, trajectory: &CameraTrajectory, intrinsics: &Intrinsics) -> Result<(Image, Vec<Pose>)> {
    let poses = trajectory.sub_poses()?;
    if poses.windows(2).all(|w| w[0] == w[1]) {
        return Ok((render_sharp(scene, &Camera { intrinsics: *intrinsics, pose: poses[0] })?, poses));
    }
    let mut acc = vec![0.0; intrinsics.width * intrinsics.height * 3];
    for pose in &poses {
        let img = render_sharp(scene, &Camera { intrinsics: *intrinsics, pose: *pose })?;
        acc.iter_mut().zip(&img.data).for_each(|(a, v)| *a += v);
    }
    let m = poses.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok((Image::new(intrinsics.width, intrinsics.height, acc)?, poses))
}

/// Pixels, in the first sub-frame's camera, of the surfaces seen through
/// `pixel` by each sub-pose: the ground-truth path a blur kernel traces.
/// Rays that miss every primitive use the point at `fallback_depth`.
pub fn kernel_path(scene: &ToyScene, intrinsics: &Intrinsics, poses: &[Pose], pixel: [f64; 2], fallback_depth: f64) -> Vec<[f64; 2]> {
    let first = poses[0];
    poses
        .iter()
        .filter_map(|pose| {
            let d = pose.ray_direction(intrinsics, pixel[0], pixel[1]);
            let t = scene.hit(pose.position, d).map_or(fallback_depth, |h| h.0);
            first.project(intrinsics, add(pose.position, scale(d, t)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub trajectory: CameraTrajectory,
    /// Pose the view is registered at: the trajectory start.
    pub pose: Pose,
    pub sub_poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Pixel values are linear radiance, not gamma encoded.
    pub linear: bool,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    pub bounds: Aabb,
    pub scene: ToyScene,
    pub views: Vec<ViewRecord>,
    pub test_poses: Vec<Pose>,
}

impl Manifest {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| Camera { intrinsics: self.intrinsics, pose: v.pose }).collect()
    }

    pub fn test_cameras(&self) -> Vec<Camera> {
        self.test_poses.iter().map(|&pose| Camera { intrinsics: self.intrinsics, pose }).collect()
    }
}

pub fn blur_name(i: usize) -> String {
    format!("blur_{i:03}.png")
}

pub fn sharp_name(i: usize) -> String {
    format!("sharp_{i:03}.png")
}

pub fn test_name(i: usize) -> String {
    format!("test_{i:03}.png")
}

/// What to synthesize: a scene, per-view trajectories and held-out poses.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scene: ToyScene,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub trajectories: Vec<CameraTrajectory>,
    pub test_poses: Vec<Pose>,
}

/// Loaded dataset; images are stored quantized to 8 bits exactly as on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub blur: Vec<Image>,
    pub sharp: Vec<Image>,
    pub test: Vec<Image>,
}

fn is_dataset_dir(p: &Path) -> bool {
    p.join(MANIFEST).is_file()
}

/// Render and write a dataset. The directory appears atomically; an existing
/// dataset at `dir` is replaced, any other non-empty directory is an error.
pub fn export_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Manifest> {
    spec.scene.validate()?;
    spec.intrinsics.validate()?;
    if !(spec.near > 0.0 && spec.far > spec.near) {
        return Err(Error::invalid("need 0 < near < far"));
    }
    let k = &spec.intrinsics;
    let mut views = Vec::with_capacity(spec.trajectories.len());
    let mut blurs = Vec::new();
    let mut sharps = Vec::new();
    for traj in &spec.trajectories {
        let (blur, sub_poses) = blur_render(&spec.scene, traj, k)?;
        let pose = traj.pose_at(0.0)?;
        sharps.push(render_sharp(&spec.scene, &Camera { intrinsics: *k, pose })?);
        blurs.push(blur);
        views.push(ViewRecord { trajectory: traj.clone(), pose, sub_poses });
    }
    let tests = spec
        .test_poses
        .iter()
        .map(|&pose| render_sharp(&spec.scene, &Camera { intrinsics: *k, pose }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        width: k.width,
        height: k.height,
        intrinsics: *k,
        linear: true,
        near: spec.near,
        far: spec.far,
        background: spec.scene.background,
        bounds: spec.scene.bounds,
        scene: spec.scene.clone(),
        views,
        test_poses: spec.test_poses.clone(),
    };
    fsio::publish_dir(dir, is_dataset_dir, |tmp| {
        for (i, (b, s)) in blurs.iter().zip(&sharps).enumerate() {
            b.save_png(&tmp.join(blur_name(i)))?;
            s.save_png(&tmp.join(sharp_name(i)))?;
        }
        for (i, t) in tests.iter().enumerate() {
            t.save_png(&tmp.join(test_name(i)))?;
        }
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(MANIFEST, e))?;
        fsio::write_atomic(&tmp.join(MANIFEST), text.as_bytes())
    })?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e))
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let load = |name: String| -> Result<Image> {
            let img = Image::load_png(&dir.join(&name))?;
            if img.width != manifest.width || img.height != manifest.height {
                return Err(Error::format(dir.join(&name), "image size disagrees with the manifest"));
            }
            Ok(img)
        };
        let n = manifest.views.len();
        let blur = (0..n).map(|i| load(blur_name(i))).collect::<Result<Vec<_>>>()?;
        let sharp = (0..n).map(|i| load(sharp_name(i))).collect::<Result<Vec<_>>>()?;
        let test = (0..manifest.test_poses.len()).map(|i| load(test_name(i))).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { dir: dir.to_path_buf(), manifest, blur, sharp, test })
    }
}

/// Blur regime of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Stationary,
    Linear,
    Cubic,
}

impl std::str::FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stationary" => Ok(Motion::Stationary),
            "linear" => Ok(Motion::Linear),
            "cubic" | "cubic-hermite" => Ok(Motion::Cubic),
            other => Err(Error::invalid(format!("unknown motion '{other}'"))),
        }
    }
}

/// Parameters of the procedural ring-of-cameras datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigOptions {
    pub resolution: usize,
    pub views: usize,
    pub test_views: usize,
    pub motion: Motion,
    pub subframes: usize,
    /// Camera translation over the exposure, world units.
    pub shake: f64,
    /// Look-at target drift over the exposure, world units.
    pub drift: f64,
    pub seed: u64,
}

impl Default for RigOptions {
    fn default() -> Self {
        RigOptions {
            resolution: 64,
            views: 20,
            test_views: 5,
            motion: Motion::Linear,
            subframes: DEFAULT_SUBFRAMES,
            shake: 0.08,
            drift: 0.12,
            seed: 0,
        }
    }
}

impl RigOptions {
    pub fn preset(name: &str) -> Result<Self> {
        let base = RigOptions::default();
        Ok(match name {
            "default" | "linear" => base,
            "stationary" => RigOptions { motion: Motion::Stationary, ..base },
            "cubic" => RigOptions { motion: Motion::Cubic, ..base },
            "tiny" => RigOptions { resolution: 16, views: 4, test_views: 2, subframes: 4, ..base },
            other => Err(Error::invalid(format!("unknown preset '{other}'")))?,
        })
    }
}

pub const RIG_RADIUS: f64 = 4.0;
pub const RIG_FOV_DEG: f64 = 40.0;

/// The fixed toy scene: a few spheres and boxes inside `[-1.5, 1.5]^3`.
pub fn toy_scene() -> ToyScene {
    let prim = |shape, color, emission| Primitive { shape, color, emission };
    ToyScene {
        primitives: vec![
            prim(Shape::Sphere { center: [0.0, 0.0, 0.1], radius: 0.55 }, [0.9, 0.3, 0.2], 0.6),
            prim(Shape::Sphere { center: [0.75, -0.55, -0.35], radius: 0.3 }, [0.2, 0.5, 0.9], 0.6),
            prim(Shape::Box { lo: [-1.0, 0.3, -0.7], hi: [-0.45, 0.85, 0.2] }, [0.25, 0.8, 0.3], 0.6),
            prim(Shape::Box { lo: [-1.1, -1.1, -0.95], hi: [1.1, 1.1, -0.75] }, [0.85, 0.8, 0.6], 0.6),
            prim(Shape::Sphere { center: [-0.55, -0.7, -0.45], radius: 0.25 }, [0.95, 0.85, 0.2], 0.6),
        ],
        background: [0.08, 0.08, 0.12],
        bounds: Aabb::cube(1.5),
    }
}

fn ring_control(angle: f64, elevation: f64) -> ControlPose {
    let eye = [
        RIG_RADIUS * elevation.cos() * angle.cos(),
        RIG_RADIUS * elevation.cos() * angle.sin(),
        RIG_RADIUS * elevation.sin(),
    ];
    ControlPose { eye, target: [0.0; 3], up: [0.0, 0.0, 1.0] }
}

fn unit_perp(rng: &mut ChaCha8Rng, axis: Vec3) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let v = sub(v, scale(axis, dot(v, axis)));
        let n = norm(v);
        if n > 0.1 {
            return scale(v, 1.0 / n);
        }
    }
}

fn shaken(start: ControlPose, motion: Motion, opts: &RigOptions, rng: &mut ChaCha8Rng) -> CameraTrajectory {
    let view = crate::camera::normalize(sub(start.target, start.eye));
    let a = unit_perp(rng, view);
    let b = unit_perp(rng, view);
    let mv = |c: ControlPose, s: f64, dir: Vec3| ControlPose {
        eye: add(c.eye, scale(dir, s * opts.shake)),
        target: add(c.target, scale(dir, s * opts.drift)),
        up: c.up,
    };
    match motion {
        Motion::Stationary => CameraTrajectory::stationary(start, opts.subframes),
        Motion::Linear => CameraTrajectory {
            controls: vec![start, mv(start, 1.0, a)],
            interpolation: Interpolation::Linear,
            subframes: opts.subframes,
        },
        Motion::Cubic => {
            let bend = crate::camera::normalize(sub(b, scale(a, dot(a, b))));
            let mid = mv(mv(start, 0.5, a), 0.6, bend);
            CameraTrajectory {
                controls: vec![start, mid, mv(start, 1.0, a)],
                interpolation: Interpolation::CubicHermite,
                subframes: opts.subframes,
            }
        }
    }
}

/// Ring of training cameras around the toy scene with per-view shake, plus
/// held-out poses between them.
pub fn rig_spec(opts: &RigOptions) -> Result<DatasetSpec> {
    if opts.resolution < 4 || opts.views == 0 {
        return Err(Error::invalid("need a resolution of at least 4 and one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.views as f64;
    let focal = 0.5 * opts.resolution as f64 / (0.5 * RIG_FOV_DEG.to_radians()).tan();
    let intrinsics = Intrinsics::pinhole(opts.resolution, opts.resolution, focal);
    let tau = std::f64::consts::TAU;
    let trajectories = (0..opts.views)
        .map(|i| {
            let angle = tau * i as f64 / n;
            let elevation = 0.25 + 0.2 * (i as f64 * 2.3).sin();
            shaken(ring_control(angle, elevation), opts.motion, opts, &mut rng)
        })
        .collect();
    let test_poses = (0..opts.test_views)
        .map(|j| {
            let angle = tau * (j as f64 + 0.37) / opts.test_views.max(1) as f64;
            ring_control(angle, 0.3).pose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSpec {
        scene: toy_scene(),
        intrinsics,
        near: RIG_RADIUS - 2.4,
        far: RIG_RADIUS + 2.4,
        trajectories,
        test_poses,
    })
}

/// Image path traced by a bundle of rays: the first surface hit of each ray
/// (or its point at `fallback_depth`) projected into `camera`.
pub fn ray_path(scene: &ToyScene, camera: &Camera, rays: &[(Vec3, Vec3)], fallback_depth: f64) -> Vec<[f64; 2]> {
    rays.iter()
        .filter_map(|&(o, d)| {
            let t = scene.hit(o, d).map_or(fallback_depth, |h| h.0);
            camera.project(add(o, scale(d, t)))
        })
        .collect()
}

pub fn path_length(path: &[[f64; 2]]) -> f64 {
    path.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

/// Largest distance of a path point from the chord through its endpoints,
/// or from the start point when the endpoints coincide.
pub fn chord_deviation(path: &[[f64; 2]]) -> f64 {
    let (Some(a), Some(b)) = (path.first(), path.last()) else { return 0.0 };
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    path.iter()
        .map(|p| {
            let (px, py) = (p[0] - a[0], p[1] - a[1]);
            if len < 1e-12 {
                px.hypot(py)
            } else {
                (px * dy - py * dx).abs() / len
            }
        })
        .fold(0.0, f64::max)
}

/// `n >= 2` points equally spaced in arc length along a polyline.
pub fn resample_arclength(path: &[[f64; 2]], n: usize) -> Vec<[f64; 2]> {
    let total = path_length(path);
    if path.len() < 2 || total < 1e-12 {
        return vec![path.first().copied().unwrap_or([0.0; 2]); n];
    }
    let mut out = Vec::with_capacity(n);
    let (mut seg, mut walked) = (0, 0.0);
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        loop {
            let (a, b) = (path[seg], path[seg + 1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if walked + len >= target || seg + 2 == path.len() {
                let s = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push([a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]);
                break;
            }
            walked += len;
            seg += 1;
        }
    }
    out
}

/// RMSE between two paths after translating both to start at the origin
/// and resampling them at `n` equal arc-length steps.
pub fn path_rmse(a: &[[f64; 2]], b: &[[f64; 2]], n: usize) -> f64 {
    let ra = resample_arclength(a, n);
    let rb = resample_arclength(b, n);
    let (a0, b0) = (ra[0], rb[0]);
    let s: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(p, q)| {
            let dx = (p[0] - a0[0]) - (q[0] - b0[0]);
            let dy = (p[1] - a0[1]) - (q[1] - b0[1]);
            dx * dx + dy * dy
        })
        .sum();
    (s / n as f64).sqrt()
}
