//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Criterion numbers given as arguments select a
//! subset: `cargo test --release --test acceptance -- 1 2 3`.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smurf_core::autodiff::{GradCheck, GradCheckReport, Graph, Tensor, Var};
use smurf_core::blur::composite_blur_batch;
use smurf_core::camera::{Camera, Intrinsics, Pose};
use smurf_core::cmbk::{integrate, Cmbk, CmbkConfig, OdeOptions, RayBatch, Solver};
use smurf_core::field::{Aabb, Field, FieldConfig, VmGrid};
use smurf_core::nn::{ParamId, ParamStore};
use smurf_core::render::{composite, composite_batch, ray_points, render_rays, sample_batch};
use smurf_core::scenegen::{
    chord_deviation, export_dataset, kernel_path, path_length, path_rmse, ray_path, rig_spec, Dataset, RigOptions,
};
use smurf_core::train::{
    evaluate, initial_shift_norms, median, read_metrics, sha256_file, sweep_warps, train, write_sweep_table, Ablation,
    KernelMode, Model, TrainConfig, CHECKPOINT, METRICS,
};

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_ITERATIONS: usize = 1500;

type Verdict = Result<String, String>;

fn check(pass: bool, detail: String) -> Verdict {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Training configuration used for the blurred-data experiments.
fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations: DESK_ITERATIONS,
        batch_size: 128,
        samples: 48,
        render_samples: 128,
        lr_network: 3e-3,
        checkpoint_every: DESK_ITERATIONS,
        seed,
        ..TrainConfig::default()
    };
    cfg.cmbk.warps = 8;
    cfg.cmbk.solver = Solver::Rk4;
    cfg.cmbk.substeps = 1;
    cfg
}

#[derive(Clone, Copy)]
struct Score {
    psnr: f64,
    ssim: f64,
}

struct Context {
    root: tempfile::TempDir,
    datasets: BTreeMap<&'static str, OnceCell<Dataset>>,
    runs: BTreeMap<(&'static str, u64), OnceCell<(Model, Score)>>,
}

impl Context {
    fn new() -> Self {
        let datasets = ["stationary", "linear", "cubic"].into_iter().map(|p| (p, OnceCell::new())).collect();
        let mut runs = BTreeMap::new();
        for kind in ["full", "baseline", "no-regularizers"] {
            for s in SEEDS {
                runs.insert((kind, s), OnceCell::new());
            }
        }
        runs.insert(("cubic", 0), OnceCell::new());
        Context { root: tempfile::tempdir().expect("temp dir"), datasets, runs }
    }

    fn dataset(&self, preset: &'static str) -> &Dataset {
        self.datasets[preset].get_or_init(|| {
            let dir = self.root.path().join(preset);
            export_dataset(&rig_spec(&RigOptions::preset(preset).unwrap()).unwrap(), &dir).unwrap();
            Dataset::load(&dir).unwrap()
        })
    }

    /// Desk-scale run on the linear dataset (or the cubic one for "cubic").
    fn run(&self, kind: &'static str, seed: u64) -> &(Model, Score) {
        self.runs[&(kind, seed)].get_or_init(|| {
            let mut cfg = desk_config(seed);
            let data = match kind {
                "full" => self.dataset("linear"),
                "baseline" => {
                    Ablation::NoKernel.apply(&mut cfg);
                    self.dataset("linear")
                }
                "no-regularizers" => {
                    Ablation::NoRegularizers.apply(&mut cfg);
                    self.dataset("linear")
                }
                "cubic" => self.dataset("cubic"),
                other => panic!("unknown run {other}"),
            };
            let start = Instant::now();
            let model = train(data, &cfg, None).unwrap().model;
            let r = evaluate(&model, data).unwrap();
            println!(
                "    trained {kind} seed {seed}: psnr {:.2} ssim {:.4} ({:.0}s)",
                r.mean_psnr,
                r.mean_ssim,
                start.elapsed().as_secs_f64()
            );
            (model, Score { psnr: r.mean_psnr, ssim: r.mean_ssim })
        })
    }

    fn mean_score(&self, kind: &'static str) -> Score {
        let scores: Vec<Score> = SEEDS.iter().map(|&s| self.run(kind, s).1).collect();
        let n = scores.len() as f64;
        Score {
            psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Fixed random projection of any tensor to a scalar.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> smurf_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> smurf_core::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, 0.5, 2.0);
    let any = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.5, 1.5);
    cases.push(("add", vec![any(&mut rng, &[3, 4]), any(&mut rng, &[1, 4])], Box::new(|g, p| g.add(p[0], p[1]))));
    cases.push(("sub", vec![any(&mut rng, &[2, 3, 2]), any(&mut rng, &[3, 1])], Box::new(|g, p| g.sub(p[0], p[1]))));
    cases.push(("mul", vec![any(&mut rng, &[5]), any(&mut rng, &[5])], Box::new(|g, p| g.mul(p[0], p[1]))));
    cases.push(("div", vec![any(&mut rng, &[4, 2]), pos(&mut rng, &[2])], Box::new(|g, p| g.div(p[0], p[1]))));
    cases.push(("matmul", vec![any(&mut rng, &[3, 5]), any(&mut rng, &[5, 2])], Box::new(|g, p| g.matmul(p[0], p[1]))));
    cases.push((
        "linear",
        vec![any(&mut rng, &[4, 3]), any(&mut rng, &[3, 2]), any(&mut rng, &[2])],
        Box::new(|g, p| g.linear(p[0], p[1], p[2])),
    ));
    cases.push((
        "sum",
        vec![any(&mut rng, &[3, 3])],
        Box::new(|g, p| {
            let s = g.sum(p[0])?;
            g.square(s)
        }),
    ));
    cases.push((
        "mean",
        vec![any(&mut rng, &[7])],
        Box::new(|g, p| {
            let s = g.mean(p[0])?;
            g.square(s)
        }),
    ));
    cases.push(("sum_axis", vec![any(&mut rng, &[2, 3, 4])], Box::new(|g, p| g.sum_axis(p[0], 1))));
    cases.push(("exp", vec![any(&mut rng, &[6])], Box::new(|g, p| g.exp(p[0]))));
    cases.push(("log", vec![pos(&mut rng, &[6])], Box::new(|g, p| g.log(p[0]))));
    cases.push(("relu", vec![Tensor::vector(vec![-1.0, -0.3, 0.2, 0.9, 1.4])], Box::new(|g, p| g.relu(p[0]))));
    cases.push(("softplus", vec![any(&mut rng, &[6])], Box::new(|g, p| g.softplus(p[0]))));
    cases.push(("sigmoid", vec![any(&mut rng, &[6])], Box::new(|g, p| g.sigmoid(p[0]))));
    cases.push(("tanh", vec![any(&mut rng, &[6])], Box::new(|g, p| g.tanh(p[0]))));
    cases.push(("sqrt", vec![pos(&mut rng, &[6])], Box::new(|g, p| g.sqrt(p[0]))));
    cases.push(("square", vec![any(&mut rng, &[6])], Box::new(|g, p| g.square(p[0]))));
    cases.push(("neg", vec![any(&mut rng, &[3])], Box::new(|g, p| g.neg(p[0]))));
    cases.push(("scale", vec![any(&mut rng, &[3])], Box::new(|g, p| g.scale(p[0], -2.5))));
    cases.push(("add_scalar", vec![any(&mut rng, &[3])], Box::new(|g, p| g.add_scalar(p[0], 0.7))));
    cases.push((
        "clamp",
        vec![Tensor::vector(vec![-2.0, -0.5, 0.1, 0.6, 3.0])],
        Box::new(|g, p| g.clamp(p[0], -1.0, 1.0)),
    ));
    cases.push((
        "concat",
        vec![any(&mut rng, &[2, 3]), any(&mut rng, &[2, 1])],
        Box::new(|g, p| g.concat(&[p[0], p[1], p[0]], 1)),
    ));
    cases.push(("slice", vec![any(&mut rng, &[3, 5])], Box::new(|g, p| g.slice(p[0], 1, 1, 4))));
    cases.push(("broadcast", vec![any(&mut rng, &[3, 1])], Box::new(|g, p| g.broadcast(p[0], &[2, 3, 4]))));
    cases.push(("reshape", vec![any(&mut rng, &[2, 6])], Box::new(|g, p| g.reshape(p[0], &[3, 4]))));
    cases.push(("gather_rows", vec![any(&mut rng, &[4, 3])], Box::new(|g, p| g.gather_rows(p[0], &[2, 0, 2, 3]))));
    cases.push(("softmax", vec![any(&mut rng, &[4, 3])], Box::new(|g, p| g.softmax(p[0], 0))));
    cases.push(("row_norm", vec![any(&mut rng, &[4, 5])], Box::new(|g, p| g.row_norm(p[0]))));
    cases
}

fn grid_case() -> (ParamStore, VmGrid, Vec<Tensor>) {
    let bounds = Aabb { lo: [-1.0, -0.5, 0.0], hi: [1.0, 1.5, 3.0] };
    let res = [5, 6, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let grid = VmGrid::new(&mut store, "g", res, [2, 1, 2], 1, bounds, 1.0, &mut rng).unwrap();
    // Points strictly inside cells: the interpolant is smooth there.
    let pts: Vec<f64> = (0..6)
        .flat_map(|_| {
            (0..3)
                .map(|a| {
                    let cell = (bounds.hi[a] - bounds.lo[a]) / (res[a] - 1) as f64;
                    let i = rng.gen_range(0..res[a] - 1) as f64;
                    bounds.lo[a] + cell * (i + rng.gen_range(0.1..0.9))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut leaves = vec![Tensor::new(vec![6, 3], pts).unwrap()];
    leaves.extend((0..3).map(|m| store.get(grid.line(m)).clone()));
    leaves.extend((0..3).map(|m| store.get(grid.plane(m)).clone()));
    (store, grid, leaves)
}

fn probe_cameras(n: usize) -> Arc<Vec<Camera>> {
    let k = Intrinsics::pinhole(32, 32, 40.0);
    Arc::new(
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                let pose = Pose::look_at([4.0 * a.cos(), 4.0 * a.sin(), 1.0], [0.0; 3], [0.0, 0.0, 1.0]).unwrap();
                Camera { intrinsics: k, pose }
            })
            .collect(),
    )
}

fn randomize(store: &mut ParamStore, id: ParamId, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
}

fn small_kernel(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Cmbk {
    let config = CmbkConfig {
        warps: 4,
        latent_dim: 6,
        hidden: 8,
        view_embed_dim: 3,
        chrono_dim: 4,
        pixel_octaves: 2,
        time_octaves: 2,
        solver: Solver::Rk4,
        substeps: 1,
        ..CmbkConfig::default()
    };
    let k = Cmbk::new(store, &config, 3, 3.0, rng).unwrap();
    randomize(store, k.decoder[1].weight, 0.5, 10);
    randomize(store, k.decoder[1].bias, 0.5, 11);
    k
}

fn small_field(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Field {
    let fc = FieldConfig {
        resolution: [8; 3],
        density_ranks: [2; 3],
        appearance_ranks: [2; 3],
        appearance_features: 3,
        hidden: 6,
        direction_octaves: 1,
        init_scale: 0.5,
        density_shift: 0.0,
    };
    Field::new(store, &fc, Aabb::cube(1.5), rng).unwrap()
}

fn param_check(
    store: &ParamStore,
    ids: &[ParamId],
    extra: Vec<Tensor>,
    check: GradCheck,
    f: impl Fn(&mut Graph, &smurf_core::nn::Binding, &[Var]) -> smurf_core::Result<Var>,
) -> GradCheckReport {
    let mut leaves: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).collect();
    leaves.extend(extra);
    check
        .run(&leaves, |g, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bind = store.bind_override(g, &overrides);
            f(g, &bind, &vars[ids.len()..])
        })
        .unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut reports: Vec<(String, GradCheckReport, f64)> = Vec::new();
    for (i, (name, leaves, build)) in op_cases().iter().enumerate() {
        let r = GradCheck::default()
            .run(leaves, |g, p| {
                let out = build(g, p)?;
                weighted_sum(g, out, 100 + i as u64)
            })
            .unwrap();
        reports.push((name.to_string(), r, 1e-4));
    }

    let (store, grid, leaves) = grid_case();
    let r = GradCheck { max_coords: 64, ..GradCheck::default() }
        .run(&leaves, |g, v| {
            let overrides: Vec<_> = (0..3).flat_map(|m| [(grid.line(m), v[1 + m]), (grid.plane(m), v[4 + m])]).collect();
            let bind = store.bind_override(g, &overrides);
            let c = grid.components_at(g, &bind, v[0])?;
            weighted_sum(g, c, 7)
        })
        .unwrap();
    reports.push(("grid_query".into(), r, 1e-4));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (nr, ns) = (3, 6);
    let leaves = vec![
        random(&mut rng, &[nr, ns], 0.1, 3.0),
        random(&mut rng, &[nr * ns, 3], 0.0, 1.0),
        random(&mut rng, &[nr, ns], 0.05, 0.5),
    ];
    let r = GradCheck { max_coords: usize::MAX, ..GradCheck::default() }
        .run(&leaves, |g, v| {
            let c = composite_batch(g, v[0], v[1], v[2], [0.3, 0.7, 0.1])?;
            weighted_sum(g, c, 8)
        })
        .unwrap();
    reports.push(("composite".into(), r, 1e-4));

    let leaves = vec![random(&mut rng, &[2, 3], -1.0, 1.0), random(&mut rng, &[2, 3], -1.0, 1.0), random(&mut rng, &[2, 4], 1.0, 3.0)];
    let r = GradCheck::default()
        .run(&leaves, |g, v| {
            let p = ray_points(g, v[0], v[1], v[2])?;
            weighted_sum(g, p, 9)
        })
        .unwrap();
    reports.push(("ray_points".into(), r, 1e-4));

    let (n, b) = (4, 3);
    let leaves = vec![random(&mut rng, &[n * b, 3], 0.0, 1.0), random(&mut rng, &[n, b], -2.0, 2.0)];
    let r = GradCheck { max_coords: usize::MAX, ..GradCheck::default() }
        .run(&leaves, |g, v| {
            let w = g.softmax(v[1], 0)?;
            let out = composite_blur_batch(g, v[0], w)?;
            weighted_sum(g, out, 10)
        })
        .unwrap();
    reports.push(("composite_blur".into(), r, 1e-4));

    let mut krng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let field = small_field(&mut store, &mut krng);
    let k = small_kernel(&mut store, &mut krng);
    randomize(&mut store, k.derivative_net[1].weight, 0.5, 12);
    let views = [0usize, 2];
    let z = random(&mut rng, &[2, 6], -1.0, 1.0);
    let ids = [k.derivative_net[0].weight, k.derivative_net[0].bias, k.derivative_net[1].weight, k.chrono_time, k.chrono_view, k.view_table];
    let r = param_check(&store, &ids, vec![z.clone()], GradCheck::default(), |g, bind, v| {
        let d = k.derivative(g, bind, v[0], 0.4, &views)?;
        weighted_sum(g, d, 11)
    });
    reports.push(("derivative".into(), r, 1e-4));

    let ids = [k.decoder[0].weight, k.decoder[0].bias, k.decoder[1].weight, k.decoder[1].bias];
    let r = param_check(&store, &ids, vec![z], GradCheck::default(), |g, bind, v| {
        let d = k.decode(g, bind, v[0])?;
        let a = weighted_sum(g, d.dp, 12)?;
        let b = weighted_sum(g, d.d_origin, 13)?;
        let c = weighted_sum(g, d.logit, 14)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    });
    reports.push(("decode".into(), r, 1e-4));

    let cams = probe_cameras(3);
    let mut batch = RayBatch::default();
    batch.push(1, [15.3, 17.8], cams[1].pose.position);
    let (taus, deltas) = sample_batch(4, 2.0, 6.0, 12, true, &mut krng).unwrap();
    let ids = [
        k.view_table,
        k.encoder[0].weight,
        k.encoder[1].bias,
        k.chrono_time,
        k.derivative_net[0].weight,
        k.derivative_net[1].weight,
        k.decoder[0].weight,
        k.decoder[1].weight,
    ];
    let full = GradCheck { rel_tol: 1e-3, max_coords: 24, ..GradCheck::default() };
    let r = param_check(&store, &ids, vec![], full, |g, bind, _| {
        let rays = k.generate(g, bind, &batch, &cams)?;
        let colors = render_rays(g, bind, &field, rays.origins, rays.dirs, taus.clone(), deltas.clone(), [0.2, 0.3, 0.4])?;
        let blurred = composite_blur_batch(g, colors, rays.weights)?;
        let target = g.constant(Tensor::new(vec![1, 3], vec![0.9, 0.1, 0.5])?);
        let d = g.sub(blurred, target)?;
        let sq = g.square(d)?;
        g.mean(sq)
    });
    reports.push(("through-solver".into(), r, 1e-3));

    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|(_, r, tol)| !(r.passed() && r.max_rel_err <= *tol && r.checked > 0))
        .map(|(n, r, _)| format!("{n} (max rel {:.2e})", r.max_rel_err))
        .collect();
    let worst = reports.iter().map(|(_, r, _)| r.max_rel_err).fold(0.0, f64::max);
    let coords: usize = reports.iter().map(|(_, r, _)| r.checked).sum();
    check(
        failed.is_empty() && secs < 120.0,
        format!("{} checks, {coords} coordinates, worst rel err {worst:.2e}, {secs:.1}s; failures: {failed:?}", reports.len()),
    )
}

fn solve(f: &dyn Fn(&mut Graph, f64, Var) -> smurf_core::Result<Var>, z0: Tensor, times: &[f64], o: OdeOptions) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let z = g.constant(z0);
    integrate(&mut g, &f, z, times, &o).unwrap().into_iter().map(|v| g.value(v).data().to_vec()).collect()
}

fn fitted_slope(solver: Solver) -> f64 {
    let decay = |g: &mut Graph, _: f64, z: Var| g.neg(z);
    let pts: Vec<(f64, f64)> = [0.2f64, 0.1, 0.05, 0.025]
        .iter()
        .map(|&h| {
            let o = OdeOptions { solver, substeps: (1.0 / h).round() as usize, tol: 1e-6 };
            let z = solve(&decay, Tensor::vector(vec![1.0]), &[0.0, 1.0], o);
            (h.ln(), (z[1][0] - (-1.0f64).exp()).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn ode_orders() -> Verdict {
    let start = Instant::now();
    let euler = fitted_slope(Solver::Euler);
    let rk4 = fitted_slope(Solver::Rk4);
    let decay = |g: &mut Graph, _: f64, z: Var| g.neg(z);
    let end = |solver, substeps| {
        solve(&decay, Tensor::vector(vec![1.0]), &[0.0, 1.0], OdeOptions { solver, substeps, tol: 1e-6 })[1][0]
    };
    let dopri_gap = (end(Solver::Dopri, 1) - end(Solver::Rk4, 64)).abs();
    let secs = start.elapsed().as_secs_f64();
    check(
        (euler - 1.0).abs() <= 0.3 && (rk4 - 4.0).abs() <= 0.3 && dopri_gap <= 1e-4 && secs < 10.0,
        format!("euler slope {euler:.3}, rk4 slope {rk4:.3}, |dopri - rk4(h=1/64)| {dopri_gap:.2e}, {secs:.2}s"),
    )
}

fn compositing_identities() -> Verdict {
    let vac = composite(&[0.0; 4], &[[0.3, 0.6, 0.9]; 4], &[0.5; 4], [0.0; 3]).unwrap();
    let vacuum = vac.rgb == [0.0; 3] && vac.opacity == 0.0;
    let opq = composite(&[20.0], &[[1.0, 0.25, 0.5]], &[1.0], [0.0; 3]).unwrap();
    let opaque = opq.rgb.iter().zip([1.0, 0.25, 0.5]).all(|(a, b)| (a - b).abs() <= 1e-8);
    let two = composite(&[1.0, 1.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[1.0, 1.0], [0.0; 3]).unwrap();
    let e = (-1.0f64).exp();
    let two_ok = two.rgb.iter().zip([1.0 - e, e * (1.0 - e), 0.0]).all(|(a, b)| (a - b).abs() <= 1e-15);

    let cams = probe_cameras(3);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let k = small_kernel(&mut store, &mut rng);
    randomize(&mut store, k.decoder[1].weight, 2.0, 7);
    randomize(&mut store, k.decoder[1].bias, 2.0, 8);
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for _ in 0..10 {
        let mut batch = RayBatch::default();
        for _ in 0..1000 {
            let v = rng.gen_range(0..3);
            batch.push(v, [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)], cams[v].pose.position);
        }
        let mut g = Graph::new();
        let bind = store.bind_frozen(&mut g);
        let out = k.generate(&mut g, &bind, &batch, &cams).unwrap();
        let w = g.value(out.weights).data();
        for b in 0..1000 {
            let col: Vec<f64> = (0..4).map(|i| w[i * 1000 + b]).collect();
            if col.iter().any(|v| *v < 0.0) {
                worst = f64::INFINITY;
            }
            worst = worst.max((col.iter().sum::<f64>() - 1.0).abs());
            evaluated += 1;
        }
    }
    check(
        vacuum && opaque && two_ok && worst <= 1e-9 && evaluated == 10_000,
        format!("vacuum {vacuum}, opaque {opaque}, two-sample {two_ok}, max |sum w - 1| {worst:.1e} over {evaluated} kernels"),
    )
}

fn identity_baseline(ctx: &Context) -> Verdict {
    let data = ctx.dataset("stationary");
    let blur_is_sharp = data.blur.iter().zip(&data.sharp).all(|(a, b)| a == b);
    let mut cfg = TrainConfig { iterations: 3000, batch_size: 256, samples: 64, render_samples: 128, ..TrainConfig::default() };
    cfg.kernel = KernelMode::Frozen;
    cfg.cmbk.warps = 1;
    let start = Instant::now();
    let model = train(data, &cfg, None).unwrap().model;
    let r = evaluate(&model, data).unwrap();
    let decoder_zero = [model.cmbk.decoder[1].weight, model.cmbk.decoder[1].bias]
        .iter()
        .all(|id| model.store.get(*id).data().iter().all(|v| *v == 0.0));
    check(
        blur_is_sharp && decoder_zero && r.mean_psnr >= 28.0,
        format!(
            "held-out psnr {:.2} dB ssim {:.4} after {} iterations ({:.0}s); blur == sharp {blur_is_sharp}, decoder still zero {decoder_zero}",
            r.mean_psnr,
            r.mean_ssim,
            cfg.iterations,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn deblurring_gain(ctx: &Context) -> Verdict {
    let start = Instant::now();
    let full = ctx.mean_score("full");
    let base = ctx.mean_score("baseline");
    let (dp, ds) = (full.psnr - base.psnr, full.ssim - base.ssim);
    check(
        dp >= 2.0 && ds >= 0.03,
        format!(
            "full {:.2} dB / {:.4}, kernel-free {:.2} dB / {:.4}, gain {dp:.2} dB / {ds:.4} over {} seeds ({:.0}s)",
            full.psnr,
            full.ssim,
            base.psnr,
            base.ssim,
            SEEDS.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn nonlinear_kernel(ctx: &Context) -> Verdict {
    let data = ctx.dataset("cubic");
    let (model, _) = ctx.run("cubic", 0);
    let m = &data.manifest;
    let cams = Arc::new(m.cameras());
    let pixel = [32.5, 32.5];
    let mut max_dev = 0.0f64;
    let mut rows = Vec::new();
    let mut all_close = true;
    for v in [0usize, 4, 8, 12, 16] {
        let cam = &cams[v];
        let ray = smurf_core::render::Ray {
            origin: cam.pose.position,
            direction: cam.ray_direction(pixel[0], pixel[1]),
            pixel,
            view: v,
            near: m.near,
            far: m.far,
        };
        let kernel = model.cmbk.generate_kernel(&model.store, &ray, &cams).unwrap();
        let bundle: Vec<_> = kernel.rays.iter().map(|r| (r.origin, r.direction)).collect();
        let learned = ray_path(&m.scene, cam, &bundle, 4.0);
        let truth = kernel_path(&m.scene, &m.intrinsics, &m.views[v].sub_poses, pixel, 4.0);
        let dev = chord_deviation(&learned);
        let rmse = path_rmse(&learned, &truth, 64);
        let len = path_length(&truth);
        max_dev = max_dev.max(dev);
        all_close &= rmse <= 0.4 * len;
        rows.push(format!("view {v}: dev {dev:.3} px, rmse {rmse:.2} / streak {len:.2} px"));
    }
    check(max_dev > 0.25 && all_close, format!("max chord deviation {max_dev:.3} px; {}", rows.join("; ")))
}

fn ablation_direction(ctx: &Context) -> Verdict {
    let full = ctx.mean_score("full");
    let bare = ctx.mean_score("no-regularizers");
    check(
        bare.psnr < full.psnr,
        format!("full {:.3} dB, no regularizers {:.3} dB over {} seeds", full.psnr, bare.psnr, SEEDS.len()),
    )
}

fn suppression_contract(ctx: &Context) -> Verdict {
    let data = ctx.dataset("linear");
    let (model, _) = ctx.run("full", 0);
    let norms = initial_shift_norms(model, data, 256, 99).unwrap();
    let med = median(&norms);
    check(norms.len() == 256 && med < 1e-2, format!("median initial shift norm {med:.3e} over {} probe rays", norms.len()))
}

fn determinism(ctx: &Context) -> Verdict {
    let data = ctx.dataset("linear");
    let mut cfg = desk_config(5);
    cfg.iterations = 120;
    cfg.checkpoint_every = 40;
    let (a, b) = (ctx.path("det_a"), ctx.path("det_b"));
    train(data, &cfg, Some(&a)).unwrap();
    train(data, &cfg, Some(&b)).unwrap();
    let rows = |dir: &Path| -> Vec<(usize, u64, u64)> {
        read_metrics(&dir.join(METRICS))
            .unwrap()
            .iter()
            .map(|r| (r.iteration, r.recon_loss.to_bits(), r.supp_loss.to_bits()))
            .collect()
    };
    let (ra, rb) = (rows(&a), rows(&b));
    let (ha, hb) = (sha256_file(&a.join(CHECKPOINT)).unwrap(), sha256_file(&b.join(CHECKPOINT)).unwrap());
    check(
        ra == rb && ra.len() == cfg.iterations && ha == hb,
        format!("{} metric rows identical: {}, checkpoint sha256 {} vs {}", ra.len(), ra == rb, &ha[..16], &hb[..16]),
    )
}

fn warp_sweep(ctx: &Context) -> Verdict {
    let data = ctx.dataset("linear");
    let mut cfg = desk_config(0);
    cfg.iterations = 60;
    let counts = [4, 5, 6, 7, 8, 9];
    let rows = sweep_warps(data, &cfg, &counts, Some(&ctx.path("sweep"))).unwrap();
    let mut table = Vec::new();
    write_sweep_table(&rows, &mut table).unwrap();
    let table = String::from_utf8(table).unwrap();
    for line in table.lines() {
        println!("    {line}");
    }
    let complete = rows.iter().map(|r| r.warps).eq(counts) && rows.iter().all(|r| r.psnr.is_finite() && r.ssim.is_finite());
    check(
        complete && table.lines().count() == counts.len() + 1 && ctx.path("sweep/sweep.csv").is_file(),
        format!("{} sweep rows, table emitted", rows.len()),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Context::new();
    let criteria: [(usize, &str, &dyn Fn(&Context) -> Verdict); 10] = [
        (1, "gradient suite", &|_| gradient_suite()),
        (2, "ODE convergence orders", &|_| ode_orders()),
        (3, "compositing identities and kernel simplex", &|_| compositing_identities()),
        (4, "identity-kernel baseline on sharp data", &identity_baseline),
        (5, "deblurring gain over the kernel-free baseline", &deblurring_gain),
        (6, "nonlinear kernel recovery", &nonlinear_kernel),
        (7, "ablation direction", &ablation_direction),
        (8, "suppression contract", &suppression_contract),
        (9, "determinism", &determinism),
        (10, "warp-count sweep", &warp_sweep),
    ];
    let mut failures = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = run(&ctx);
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {status} {name}: {detail} [{secs:.1}s]");
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
