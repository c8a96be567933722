//! Losses, the Adam optimizer, checkpoints and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::blur::composite_blur_batch;
use crate::camera::Camera;
use crate::cmbk::{Cmbk, CmbkConfig, EmbeddingMode, RayBatch};
use crate::error::{Error, Result};
use crate::field::{Aabb, Field, FieldConfig};
use crate::fsio;
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::nn::{ParamEntry, ParamGroup, ParamStore};
use crate::render::{render_image, render_rays, sample_batch};
use crate::scenegen::{Dataset, Manifest};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const CONFIG_ECHO: &str = "config.toml";
const MAGIC: &[u8; 8] = b"SMURFCK1";

/// How the motion kernel takes part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    Train,
    /// Evaluated but not updated.
    Frozen,
    /// Not evaluated: each blurry pixel is fitted by its initial ray alone.
    Disabled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Rays per step.
    pub batch_size: usize,
    pub lr_grid: f64,
    /// Rate for the appearance network and every kernel network.
    pub lr_network: f64,
    pub lambda_supp: f64,
    pub suppression: bool,
    pub kernel: KernelMode,
    /// Samples per training ray.
    pub samples: usize,
    /// Midpoint samples per ray when rendering images.
    pub render_samples: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_every: usize,
    pub field: FieldConfig,
    pub cmbk: CmbkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 1024,
            lr_grid: 2e-2,
            lr_network: 1e-3,
            lambda_supp: 0.1,
            suppression: true,
            kernel: KernelMode::Train,
            samples: 64,
            render_samples: 128,
            seed: 0,
            checkpoint_every: 1000,
            field: FieldConfig::default(),
            cmbk: CmbkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr_grid) || !positive(self.lr_network) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.lambda_supp >= 0.0 && self.lambda_supp.is_finite()) {
            return Err(Error::invalid("lambda_supp must be nonnegative"));
        }
        if self.batch_size == 0 || self.samples == 0 || self.render_samples == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("batch_size, sample counts and checkpoint_every must be positive"));
        }
        self.cmbk.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Named configuration variants: the regularizer and embedding ablations,
/// plus the kernel-free baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoSuppression,
    NoResidual,
    NoRegularizers,
    TimeOnly,
    NoEmbedding,
    NoKernel,
}

impl Ablation {
    /// The six embedding/regularizer combinations.
    pub const TABLE: [Ablation; 6] = [
        Ablation::NoRegularizers,
        Ablation::NoSuppression,
        Ablation::NoResidual,
        Ablation::NoEmbedding,
        Ablation::TimeOnly,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSuppression => "no-suppression",
            Ablation::NoResidual => "no-residual",
            Ablation::NoRegularizers => "no-regularizers",
            Ablation::TimeOnly => "time-only",
            Ablation::NoEmbedding => "no-embedding",
            Ablation::NoKernel => "no-kernel",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (emb, supp, res) = match self {
            Ablation::Full | Ablation::NoKernel => (EmbeddingMode::ChronoView, true, true),
            Ablation::NoSuppression => (EmbeddingMode::ChronoView, false, true),
            Ablation::NoResidual => (EmbeddingMode::ChronoView, true, false),
            Ablation::NoRegularizers => (EmbeddingMode::ChronoView, false, false),
            Ablation::TimeOnly => (EmbeddingMode::TimeOnly, true, true),
            Ablation::NoEmbedding => (EmbeddingMode::None, true, true),
        };
        cfg.cmbk.embedding = emb;
        cfg.suppression = supp;
        cfg.cmbk.residual = res;
        cfg.kernel = if self == Ablation::NoKernel { KernelMode::Disabled } else { KernelMode::Train };
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Ablation::Full,
            Ablation::NoSuppression,
            Ablation::NoResidual,
            Ablation::NoRegularizers,
            Ablation::TimeOnly,
            Ablation::NoEmbedding,
            Ablation::NoKernel,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::invalid(format!("unknown ablation '{s}'")))
    }
}

/// Mean squared error over rays and channels.
pub fn recon_loss(g: &mut Graph, predicted: Var, observed: Var) -> Result<Var> {
    if g.shape(predicted) != g.shape(observed) {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: g.shape(predicted).to_vec(),
            rhs: g.shape(observed).to_vec(),
        });
    }
    let d = g.sub(predicted, observed)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

/// `lambda` times the mean Euclidean norm of the decoded pixel and origin
/// offsets of the initial latents (`[B, 5]`); the weight output is excluded.
pub fn suppression_loss(g: &mut Graph, initial_shift: Var, lambda: f64) -> Result<Var> {
    let norms = g.row_norm(initial_shift)?;
    let m = g.mean(norms)?;
    g.scale(m, lambda)
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; entries with `None` gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(&ParamEntry) -> f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let rate = lr(entry);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scene facts a model needs beyond its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub views: usize,
    pub bounds: Aabb,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl SceneFrame {
    pub fn of(manifest: &Manifest) -> Self {
        SceneFrame {
            views: manifest.views.len(),
            bounds: manifest.bounds,
            near: manifest.near,
            far: manifest.far,
            background: manifest.background,
        }
    }
}

/// Radiance field and motion kernel sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub field: Field,
    pub cmbk: Cmbk,
    pub config: TrainConfig,
    pub frame: SceneFrame,
}

impl Model {
    pub fn new(config: &TrainConfig, frame: &SceneFrame) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let field = Field::new(&mut store, &config.field, frame.bounds, &mut rng)?;
        let cmbk = Cmbk::new(&mut store, &config.cmbk, frame.views, frame.bounds.extent(), &mut rng)?;
        Ok(Model { store, field, cmbk, config: config.clone(), frame: frame.clone() })
    }

    /// Sharp render from the camera's own rays; the kernel is not used.
    pub fn render(&self, camera: &Camera) -> Result<Image> {
        let f = &self.frame;
        render_image(&self.field, &self.store, &camera.intrinsics, &camera.pose, f.near, f.far, self.config.render_samples, f.background)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub recon: f64,
    pub supp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub recon_loss: f64,
    pub supp_loss: f64,
    pub wall_time: f64,
}

/// Stepwise optimizer over one dataset.
pub struct Trainer<'a> {
    pub model: Model,
    pub adam: Adam,
    pub iteration: usize,
    data: &'a Dataset,
    cameras: Arc<Vec<Camera>>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config, &SceneFrame::of(&data.manifest))?;
        if data.blur.is_empty() {
            return Err(Error::invalid("dataset has no training views"));
        }
        let adam = Adam::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer { model, adam, iteration: 0, data, cameras: Arc::new(data.manifest.cameras()), rng })
    }

    pub fn cameras(&self) -> &Arc<Vec<Camera>> {
        &self.cameras
    }

    /// One optimizer step on a fresh ray batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let cfg = &self.model.config;
        let (b, mode) = (cfg.batch_size, cfg.kernel);
        let m = &self.data.manifest;
        let mut batch = RayBatch::default();
        let mut target = Vec::with_capacity(b * 3);
        for _ in 0..b {
            let v = self.rng.gen_range(0..self.cameras.len());
            let (x, y) = (self.rng.gen_range(0..m.width), self.rng.gen_range(0..m.height));
            batch.push(v, [x as f64 + 0.5, y as f64 + 0.5], self.cameras[v].pose.position);
            target.extend(self.data.blur[v].pixel(x, y));
        }
        let frame = &self.model.frame;
        let mut g = Graph::new();
        let bind = self.model.store.bind(&mut g, |e| e.group != ParamGroup::Kernel || mode == KernelMode::Train);
        let (predicted, shift) = if mode == KernelMode::Disabled {
            let dirs: Vec<f64> = batch
                .views
                .iter()
                .zip(&batch.pixels)
                .flat_map(|(&v, p)| self.cameras[v].ray_direction(p[0], p[1]))
                .collect();
            let o = g.constant(Tensor::new(vec![b, 3], batch.origins.iter().flatten().copied().collect())?);
            let d = g.constant(Tensor::new(vec![b, 3], dirs)?);
            let (taus, deltas) = sample_batch(b, frame.near, frame.far, cfg.samples, true, &mut self.rng)?;
            (render_rays(&mut g, &bind, &self.model.field, o, d, taus, deltas, frame.background)?, None)
        } else {
            let rays = self.model.cmbk.generate(&mut g, &bind, &batch, &self.cameras)?;
            let n = g.shape(rays.weights)[0];
            let (taus, deltas) = sample_batch(n * b, frame.near, frame.far, cfg.samples, true, &mut self.rng)?;
            let colors = render_rays(&mut g, &bind, &self.model.field, rays.origins, rays.dirs, taus, deltas, frame.background)?;
            (composite_blur_batch(&mut g, colors, rays.weights)?, Some(rays.initial_shift))
        };
        let observed = g.constant(Tensor::new(vec![b, 3], target)?);
        let recon = recon_loss(&mut g, predicted, observed)?;
        let supp = match shift {
            Some(s) if cfg.suppression => Some(suppression_loss(&mut g, s, cfg.lambda_supp)?),
            _ => None,
        };
        let total = match supp {
            Some(s) => g.add(recon, s)?,
            None => recon,
        };
        let stats = StepStats {
            recon: g.value(recon).data()[0],
            supp: supp.map_or(0.0, |s| g.value(s).data()[0]),
        };
        if !(stats.recon + stats.supp).is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration + 1 });
        }
        let mut grads = g.backward(total)?;
        let per_param = bind.gradients(&mut grads);
        let (lr_grid, lr_net) = (cfg.lr_grid, cfg.lr_network);
        self.adam.step(&mut self.model.store, &per_param, |e| match e.group {
            ParamGroup::Grid => lr_grid,
            ParamGroup::Network | ParamGroup::Kernel => lr_net,
        });
        self.iteration += 1;
        Ok(stats)
    }
}

/// Result of a completed run.
pub struct Trained {
    pub model: Model,
    pub adam: Adam,
    pub log: Vec<LogRow>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e)
}

/// Train for `config.iterations` steps. With `out`, the effective config,
/// a per-step metrics CSV and checkpoints are written there; a non-finite
/// loss aborts the run and leaves the last good checkpoint in place.
pub fn train(data: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<Trained> {
    let mut trainer = Trainer::new(data, config)?;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fsio::write_atomic(&dir.join(CONFIG_ECHO), config.to_toml().as_bytes())?;
            let path = dir.join(METRICS);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some((csv::Writer::from_writer(file), path))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e) => {
                if let Some((w, path)) = writer.as_mut() {
                    w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                }
                return Err(e);
            }
        };
        let row = LogRow {
            iteration: trainer.iteration,
            recon_loss: stats.recon,
            supp_loss: stats.supp,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log.push(row);
        if let (Some((w, path)), Some(dir)) = (writer.as_mut(), out) {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
            if trainer.iteration % config.checkpoint_every == 0 {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                save_checkpoint(&dir.join(CHECKPOINT), &trainer.model, Some(&trainer.adam), trainer.iteration)?;
            }
        }
    }
    if let (Some((w, path)), Some(dir)) = (writer.as_mut(), out) {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        save_checkpoint(&dir.join(CHECKPOINT), &trainer.model, Some(&trainer.adam), trainer.iteration)?;
    }
    Ok(Trained { model: trainer.model, adam: trainer.adam, log })
}

pub fn read_metrics(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    iteration: usize,
    config: TrainConfig,
    frame: SceneFrame,
    tensors: Vec<TensorHeader>,
    optimizer: Option<OptimizerHeader>,
}

pub struct Checkpoint {
    pub model: Model,
    pub adam: Option<Adam>,
    pub iteration: usize,
}

/// Magic, little-endian header length, JSON header, then every tensor as
/// little-endian f64 in store order, followed by the Adam moments if present.
pub fn checkpoint_bytes(model: &Model, adam: Option<&Adam>, iteration: usize) -> Vec<u8> {
    let header = Header {
        iteration,
        config: model.config.clone(),
        frame: model.frame.clone(),
        tensors: model
            .store
            .entries()
            .iter()
            .map(|e| TensorHeader { name: e.name.clone(), group: e.group, shape: e.value.shape().to_vec() })
            .collect(),
        optimizer: adam.map(|a| OptimizerHeader { steps: a.steps, beta1: a.beta1, beta2: a.beta2, eps: a.eps }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.store.numel() * 8 * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for e in model.store.entries() {
        put(e.value.data());
    }
    if let Some(a) = adam {
        a.m.iter().for_each(|m| put(m));
        a.v.iter().for_each(|v| put(v));
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: Option<&Adam>, iteration: usize) -> Result<()> {
    fsio::write_atomic(path, &checkpoint_bytes(model, adam, iteration))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, e))?;
    let mut model = Model::new(&header.config, &header.frame)?;
    if header.tensors.len() != model.store.len() {
        return Err(bad("tensor count does not match the configuration"));
    }
    for (th, e) in header.tensors.iter().zip(model.store.entries()) {
        if th.name != e.name || th.group != e.group || th.shape != e.value.shape() {
            return Err(Error::format(path, format!("tensor '{}' does not match the configuration", th.name)));
        }
    }
    let mut cursor = 16 + len;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let raw = bytes.get(cursor..cursor + n * 8).ok_or_else(|| bad("truncated tensor data"))?;
        cursor += n * 8;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    for e in model.store.entries_mut() {
        let data = take(e.value.numel())?;
        e.value.data_mut().copy_from_slice(&data);
    }
    let adam = match &header.optimizer {
        Some(h) => {
            let sizes: Vec<usize> = model.store.entries().iter().map(|e| e.value.numel()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some(Adam { beta1: h.beta1, beta2: h.beta2, eps: h.eps, steps: h.steps, m, v })
        }
        None => None,
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { model, adam, iteration: header.iteration })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_pairs(renders: &[Image], references: &[Image]) -> Result<Self> {
        if renders.len() != references.len() || renders.is_empty() {
            return Err(Error::invalid("need one render per reference image"));
        }
        let rows = renders
            .iter()
            .zip(references)
            .enumerate()
            .map(|(i, (a, b))| Ok(EvalRow { view: i.to_string(), psnr: psnr(a, b)?, ssim: ssim(a, b)? }))
            .collect::<Result<Vec<_>>>()?;
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(EvalReport { rows, mean_psnr, mean_ssim })
    }

    /// Per-view rows followed by a `mean` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::format("eval csv", e);
        for r in &self.rows {
            w.serialize(r).map_err(err)?;
        }
        w.serialize(EvalRow { view: "mean".into(), psnr: self.mean_psnr, ssim: self.mean_ssim }).map_err(err)?;
        w.flush().map_err(|e| Error::io("eval csv", e))
    }
}

/// Kernel-free renders of the held-out poses.
pub fn render_test_views(model: &Model, data: &Dataset) -> Result<Vec<Image>> {
    data.manifest.test_cameras().iter().map(|c| model.render(c)).collect()
}

/// PSNR/SSIM of held-out renders against the held-out sharp images.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    EvalReport::from_pairs(&render_test_views(model, data)?, &data.test)
}

/// Norms of the decoded initial offsets over `rays` random training rays.
pub fn initial_shift_norms(model: &Model, data: &Dataset, rays: usize, seed: u64) -> Result<Vec<f64>> {
    let cameras = Arc::new(data.manifest.cameras());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = RayBatch::default();
    for _ in 0..rays {
        let v = rng.gen_range(0..cameras.len());
        let p = [rng.gen_range(0.0..data.manifest.width as f64), rng.gen_range(0.0..data.manifest.height as f64)];
        batch.push(v, p, cameras[v].pose.position);
    }
    let mut g = Graph::new();
    let bind = model.store.bind_frozen(&mut g);
    let out = model.cmbk.generate(&mut g, &bind, &batch, &cameras)?;
    Ok(g.value(out.initial_shift).data().chunks(5).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub warps: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub final_recon: f64,
    pub seconds: f64,
}

/// Train once per warp count and evaluate each run on the held-out views.
pub fn sweep_warps(data: &Dataset, base: &TrainConfig, warps: &[usize], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(warps.len());
    for &n in warps {
        let mut cfg = base.clone();
        cfg.cmbk.warps = n;
        let start = Instant::now();
        let dir: Option<PathBuf> = out.map(|d| d.join(format!("warps_{n}")));
        let run = train(data, &cfg, dir.as_deref())?;
        let report = evaluate(&run.model, data)?;
        rows.push(SweepRow {
            warps: n,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            final_recon: run.log.last().map_or(f64::NAN, |r| r.recon_loss),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if let Some(dir) = out {
        let mut buf = Vec::new();
        write_sweep_table(&rows, &mut buf)?;
        fsio::write_atomic(&dir.join("sweep.csv"), &buf)?;
    }
    Ok(rows)
}

pub fn write_sweep_table(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("sweep table", e))?;
    }
    w.flush().map_err(|e| Error::io("sweep table", e))
}
